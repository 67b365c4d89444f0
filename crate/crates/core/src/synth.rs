//! Synthetic RGB-D scenes of a textured wall carrying hazmat-style signs.
//!
//! The wall is centered on the optical axis at `distance_m`, turned by yaw
//! (about the camera y axis) then pitch (about x). Pixels are shaded by
//! intersecting their rays with the wall and bilinearly sampling a texture
//! rasterized at [`TEXEL_M`]. Depth is the exact ray-plane depth plus
//! `N(0, a + b·z²)` noise, quantized to millimeters; background depth is 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset::{
    save_annotations, save_intrinsics, save_png, AnnotatedBox, AnnotationSet, ClassInfo, DatasetError, DepthImage,
    FrameMeta, FrameRecord, GroundTruthFrame, ANNOTATIONS_FILE, DEPTH_DIR, INTRINSICS_FILE, MAX_DEPTH_MM, RGB_DIR,
};
use crate::geometry::{closed_form_homography, CameraIntrinsics, Homography, Pixel, RigidTransform};
use crate::rectification::{canonical_viewpoint, VirtualViewpoint};
use crate::segmentation::PlaneModel;

/// Texture resolution on the wall, meters per texel.
pub const TEXEL_M: f64 = 0.001;
pub const TEMPLATE_STANDOFF_M: f64 = 1.2;
pub const TEMPLATES_DIR: &str = "templates";
pub const GROUND_TRUTH_FILE: &str = "ground_truth_homographies.json";
pub const DEFAULT_ANGLES: [f64; 9] = [-75.0, -60.0, -45.0, -30.0, 0.0, 30.0, 45.0, 60.0, 75.0];
pub const DEFAULT_DISTANCES: [f64; 3] = [1.25, 1.5, 1.75];
pub const DEFAULT_NUM_CLASSES: usize = 4;
const MAX_TILT_DEG: f64 = 85.0;
/// Outlier depths are drawn uniformly from this range along the pixel ray.
const OUTLIER_RANGE_M: (f64, f64) = (0.3, 4.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("the plane is not visible from the camera")]
    PlaneOutOfView,
    #[error("empty angle/distance grid")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Flat([u8; 3]),
    Checker { a: [u8; 3], b: [u8; 3], cell_px: u32 },
}

impl Background {
    pub fn id(&self) -> &'static str {
        match self {
            Background::Flat(_) => "flat",
            Background::Checker { .. } => "checker",
        }
    }

    fn color(&self, u: u32, v: u32) -> [u8; 3] {
        match *self {
            Background::Flat(c) => c,
            Background::Checker { a, b, cell_px } => {
                let cell = cell_px.max(1);
                if (u / cell + v / cell).is_multiple_of(2) {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// A square sign on the wall; `center` is in wall coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignPlacement {
    pub class_id: u32,
    pub center: [f64; 2],
    pub size_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub distance_m: f64,
    /// Wall width and height in meters.
    pub plane_extent: [f64; 2],
    pub signs: Vec<SignPlacement>,
    pub intrinsics: CameraIntrinsics,
    /// Depth noise standard deviation is `noise_a + noise_b·z²` meters.
    pub noise_a: f64,
    pub noise_b: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    pub background: Background,
    pub wall_color: [u8; 3],
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 640.0, 360.0, 1280, 720).expect("valid default intrinsics")
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            distance_m: 1.5,
            plane_extent: [2.0, 1.2],
            signs: vec![
                SignPlacement { class_id: 0, center: [-0.35, 0.0], size_m: 0.25 },
                SignPlacement { class_id: 1, center: [0.35, 0.0], size_m: 0.25 },
            ],
            intrinsics: default_intrinsics(),
            noise_a: 0.001,
            noise_b: 0.0019,
            outlier_fraction: 0.0,
            seed: 0,
            background: Background::Flat([40, 40, 40]),
            wall_color: [200, 192, 176],
        }
    }
}

impl SceneSpec {
    pub fn noise_free(mut self) -> Self {
        self.noise_a = 0.0;
        self.noise_b = 0.0;
        self.outlier_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidScene(m));
        if !(self.distance_m > 0.0) {
            return bad(format!("distance must be positive, got {}", self.distance_m));
        }
        if !(self.yaw_deg.abs() < MAX_TILT_DEG && self.pitch_deg.abs() < MAX_TILT_DEG) {
            return bad(format!("yaw/pitch must be within ±{MAX_TILT_DEG}°"));
        }
        if !(self.noise_a >= 0.0 && self.noise_b >= 0.0) {
            return bad("noise parameters must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction must lie in [0, 1]".into());
        }
        if !(self.plane_extent[0] > 0.0 && self.plane_extent[1] > 0.0) {
            return bad("plane extent must be positive".into());
        }
        if self.signs.iter().any(|s| !(s.size_m > 0.0) || s.class_id as usize >= SIGN_STYLES.len()) {
            return bad(format!("signs need a positive size and a class id below {}", SIGN_STYLES.len()));
        }
        self.intrinsics.validate().map_err(|e| SynthError::InvalidScene(e.to_string()))
    }

    /// Wall frame: columns are the in-plane x, in-plane y and the normal.
    pub fn plane_rotation(&self) -> Matrix3<f64> {
        let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw_deg.to_radians());
        let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch_deg.to_radians());
        (yaw * pitch).into_inner()
    }

    pub fn plane_center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.distance_m)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.plane_rotation().column(2).into_owned()
    }

    /// Plane offset `d` in `n·X = d`.
    pub fn plane_distance(&self) -> f64 {
        self.normal().dot(&self.plane_center())
    }

    pub fn wall_point(&self, x: f64, y: f64) -> Vector3<f64> {
        let r = self.plane_rotation();
        self.plane_center() + r.column(0) * x + r.column(1) * y
    }
}

/// Exact products of a rendered scene.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    /// Centroid is the mean of the noise-free wall points seen by the camera.
    pub plane: PlaneModel,
    pub viewpoint: VirtualViewpoint,
    /// Original pixels to canonical-view pixels at [`TEMPLATE_STANDOFF_M`].
    pub canonical_homography: Homography,
    pub boxes: GroundTruthFrame,
}

struct SignStyle {
    name: &'static str,
    top: [f64; 3],
    bottom: [f64; 3],
    symbol: Symbol,
    ink: [f64; 3],
}

#[derive(Clone, Copy)]
enum Symbol {
    Disk,
    Bar,
    Ring,
    Plus,
}

const fn rgb(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64, g as f64, b as f64]
}

const SIGN_STYLES: [SignStyle; 13] = [
    SignStyle {
        name: "flammable",
        top: rgb(210, 30, 30),
        bottom: rgb(210, 30, 30),
        symbol: Symbol::Disk,
        ink: rgb(20, 20, 20),
    },
    SignStyle {
        name: "corrosive",
        top: rgb(245, 245, 245),
        bottom: rgb(15, 15, 15),
        symbol: Symbol::Bar,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "oxidizer",
        top: rgb(250, 210, 20),
        bottom: rgb(250, 210, 20),
        symbol: Symbol::Ring,
        ink: rgb(20, 20, 20),
    },
    SignStyle {
        name: "non-flammable-gas",
        top: rgb(20, 140, 60),
        bottom: rgb(20, 140, 60),
        symbol: Symbol::Plus,
        ink: rgb(245, 245, 245),
    },
    SignStyle {
        name: "poison",
        top: rgb(245, 245, 245),
        bottom: rgb(245, 245, 245),
        symbol: Symbol::Plus,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "radioactive",
        top: rgb(250, 210, 20),
        bottom: rgb(245, 245, 245),
        symbol: Symbol::Disk,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "explosive",
        top: rgb(245, 130, 20),
        bottom: rgb(245, 130, 20),
        symbol: Symbol::Bar,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "dangerous-when-wet",
        top: rgb(30, 80, 200),
        bottom: rgb(30, 80, 200),
        symbol: Symbol::Disk,
        ink: rgb(245, 245, 245),
    },
    SignStyle {
        name: "organic-peroxide",
        top: rgb(210, 30, 30),
        bottom: rgb(250, 210, 20),
        symbol: Symbol::Ring,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "spontaneously-combustible",
        top: rgb(245, 245, 245),
        bottom: rgb(210, 30, 30),
        symbol: Symbol::Disk,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "inhalation-hazard",
        top: rgb(245, 245, 245),
        bottom: rgb(245, 245, 245),
        symbol: Symbol::Ring,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "flammable-solid",
        top: rgb(210, 30, 30),
        bottom: rgb(245, 245, 245),
        symbol: Symbol::Bar,
        ink: rgb(15, 15, 15),
    },
    SignStyle {
        name: "miscellaneous",
        top: rgb(245, 245, 245),
        bottom: rgb(15, 15, 15),
        symbol: Symbol::Disk,
        ink: rgb(15, 15, 15),
    },
];

/// Names of the available sign classes, indexed by class id.
pub fn class_names() -> Vec<&'static str> {
    SIGN_STYLES.iter().map(|s| s.name).collect()
}

pub fn class_infos(n: usize) -> Vec<ClassInfo> {
    SIGN_STYLES.iter().take(n).enumerate().map(|(i, s)| ClassInfo { id: i as u32, name: s.name.to_string() }).collect()
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    // 1 for x well below edge, 0 well above.
    (0.5 - (x - edge) / width).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Sign color at normalized sign coordinates `(x, y) ∈ [0, 1]²` over `wall`.
fn sign_color(style: &SignStyle, x: f64, y: f64, wall: [f64; 3], aa: f64) -> [f64; 3] {
    let (dx, dy) = (x - 0.5, y - 0.5);
    let diamond = dx.abs() + dy.abs();
    let body = mix(style.bottom, style.top, smoothstep(0.0, aa, dy));
    let border = smoothstep(0.015, aa, (diamond - 0.43).abs());
    let mut c = mix(body, style.ink, border * 0.9);
    let (sx, sy) = (dx, y - 0.33);
    let r = (sx * sx + sy * sy).sqrt();
    let ink = match style.symbol {
        Symbol::Disk => smoothstep(0.1, aa, r),
        Symbol::Ring => smoothstep(0.025, aa, (r - 0.095).abs()),
        Symbol::Bar => smoothstep(0.0, aa, (sx.abs() - 0.14).max(sy.abs() - 0.05)),
        Symbol::Plus => {
            let h = (sx.abs() - 0.12).max(sy.abs() - 0.035);
            let v = (sx.abs() - 0.035).max(sy.abs() - 0.12);
            smoothstep(0.0, aa, h.min(v))
        }
    };
    c = mix(c, style.ink, ink);
    let stripe = smoothstep(0.0, aa, ((dy - 0.2).abs() - 0.025).max(dx.abs() - 0.16));
    c = mix(c, style.ink, stripe);
    mix(wall, c, smoothstep(0.49, aa, diamond))
}

/// Wall texture raster, row-major RGB in f64, `TEXEL_M` per texel.
struct WallTexture {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl WallTexture {
    fn new(spec: &SceneSpec) -> Self {
        let width = (spec.plane_extent[0] / TEXEL_M).round() as usize + 1;
        let height = (spec.plane_extent[1] / TEXEL_M).round() as usize + 1;
        let wall = spec.wall_color.map(|v| v as f64);
        let mut data = vec![wall; width * height];
        for sign in &spec.signs {
            let style = &SIGN_STYLES[sign.class_id as usize];
            let half = sign.size_m / 2.0;
            let aa = TEXEL_M / sign.size_m * 1.5;
            let to_tex = |m: f64, extent: f64| ((m + extent / 2.0) / TEXEL_M).round() as i64;
            let (x0, x1) = (
                to_tex(sign.center[0] - half, spec.plane_extent[0]),
                to_tex(sign.center[0] + half, spec.plane_extent[0]),
            );
            let (y0, y1) = (
                to_tex(sign.center[1] - half, spec.plane_extent[1]),
                to_tex(sign.center[1] + half, spec.plane_extent[1]),
            );
            for ty in y0.max(0)..=y1.min(height as i64 - 1) {
                for tx in x0.max(0)..=x1.min(width as i64 - 1) {
                    let mx = tx as f64 * TEXEL_M - spec.plane_extent[0] / 2.0;
                    let my = ty as f64 * TEXEL_M - spec.plane_extent[1] / 2.0;
                    let (nx, ny) =
                        ((mx - sign.center[0]) / sign.size_m + 0.5, (my - sign.center[1]) / sign.size_m + 0.5);
                    let i = ty as usize * width + tx as usize;
                    data[i] = sign_color(style, nx, ny, data[i], aa);
                }
            }
        }
        Self { width, height, data }
    }

    /// Bilinear sample at wall coordinates (meters, origin at the wall center).
    fn sample(&self, x: f64, y: f64, extent: [f64; 2]) -> [f64; 3] {
        let tx = ((x + extent[0] / 2.0) / TEXEL_M).clamp(0.0, (self.width - 1) as f64);
        let ty = ((y + extent[1] / 2.0) / TEXEL_M).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
        let at = |xx: usize, yy: usize| self.data[yy * self.width + xx];
        mix(mix(at(x0, y0), at(x1, y0), fx), mix(at(x0, y1), at(x1, y1), fx), fy)
    }
}

struct Hit {
    /// Wall coordinates in meters.
    wall: (f64, f64),
    /// Point in the frame the ray was expressed in.
    point: Vector3<f64>,
}

/// Intersects a ray with the finite wall. `origin`/`dir` are in original camera coordinates.
fn hit_wall(spec: &SceneSpec, r: &Matrix3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let n = r.column(2);
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let center = spec.plane_center();
    let lambda = n.dot(&(center - origin)) / denom;
    if lambda <= 0.0 {
        return None;
    }
    let p = origin + dir * lambda;
    let rel = p - center;
    let (x, y) = (rel.dot(&r.column(0)), rel.dot(&r.column(1)));
    if x.abs() > spec.plane_extent[0] / 2.0 || y.abs() > spec.plane_extent[1] / 2.0 {
        return None;
    }
    Some(Hit { wall: (x, y), point: p })
}

/// Renders the scene from a camera with pose `pose` (in original camera
/// coordinates) and intrinsics `k`, with 2×2 supersampling. Also returns
/// which pixel centers see the wall.
pub fn render_view(spec: &SceneSpec, pose: &RigidTransform, k: &CameraIntrinsics) -> (RgbImage, Vec<bool>) {
    let texture = WallTexture::new(spec);
    render_with(spec, &texture, pose, k)
}

fn render_with(
    spec: &SceneSpec,
    texture: &WallTexture,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> (RgbImage, Vec<bool>) {
    let r = spec.plane_rotation();
    let (w, h) = (k.width as usize, k.height as usize);
    const OFFSETS: [f64; 2] = [-0.25, 0.25];
    let rows: Vec<(Vec<u8>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w * 3);
            let mut mask = Vec::with_capacity(w);
            for u in 0..w {
                let mut acc = [0.0; 3];
                for oy in OFFSETS {
                    for ox in OFFSETS {
                        let dir = pose.rotation * k.ray(&Pixel::new(u as f64 + ox, v as f64 + oy));
                        let c = match hit_wall(spec, &r, &pose.translation, &dir) {
                            Some(hit) => texture.sample(hit.wall.0, hit.wall.1, spec.plane_extent),
                            None => spec.background.color(u as u32, v as u32).map(|x| x as f64),
                        };
                        for ch in 0..3 {
                            acc[ch] += c[ch] / 4.0;
                        }
                    }
                }
                row.extend(acc.iter().map(|x| x.round().clamp(0.0, 255.0) as u8));
                let dir = pose.rotation * k.ray(&Pixel::new(u as f64, v as f64));
                mask.push(hit_wall(spec, &r, &pose.translation, &dir).is_some());
            }
            (row, mask)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    let mut mask = Vec::with_capacity(w * h);
    for (row, m) in rows {
        data.extend(row);
        mask.extend(m);
    }
    (RgbImage::from_raw(w as u32, h as u32, data).expect("sized buffer"), mask)
}

/// Exact wall depth (camera z, meters) per pixel; `None` off the wall.
pub fn exact_depth(spec: &SceneSpec) -> Vec<Option<f64>> {
    let r = spec.plane_rotation();
    let k = &spec.intrinsics;
    let origin = Vector3::zeros();
    let mut out = Vec::with_capacity((k.width * k.height) as usize);
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = k.ray(&Pixel::new(u as f64, v as f64));
            out.push(hit_wall(spec, &r, &origin, &dir).map(|h| h.point.z));
        }
    }
    out
}

/// Depth map in millimeters with the scene's noise and outlier model.
pub fn render_depth(spec: &SceneSpec, exact: &[Option<f64>]) -> DepthImage {
    let k = &spec.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<u16> = exact
        .iter()
        .map(|z| {
            let Some(z) = *z else { return 0 };
            let noisy = if spec.outlier_fraction > 0.0 && rng.random::<f64>() < spec.outlier_fraction {
                rng.random_range(OUTLIER_RANGE_M.0..OUTLIER_RANGE_M.1)
            } else {
                z + unit.sample(&mut rng) * (spec.noise_a + spec.noise_b * z * z)
            };
            let mm = (noisy * 1000.0).round();
            if mm <= 0.0 || mm >= MAX_DEPTH_MM as f64 {
                0
            } else {
                mm as u16
            }
        })
        .collect();
    DepthImage::from_raw(k.width, k.height, data).expect("sized depth buffer")
}

/// Corners of a sign square in camera coordinates, clockwise from top-left.
pub fn sign_corners(spec: &SceneSpec, s: &SignPlacement) -> [Vector3<f64>; 4] {
    let half = s.size_m / 2.0;
    [(-half, -half), (half, -half), (half, half), (-half, half)]
        .map(|(dx, dy)| spec.wall_point(s.center[0] + dx, s.center[1] + dy))
}

/// Ground-truth boxes: hulls of the projected sign squares, clipped to the image.
pub fn ground_truth_boxes(spec: &SceneSpec, frame_id: &str, meta: FrameMeta) -> GroundTruthFrame {
    let k = &spec.intrinsics;
    let mut boxes = Vec::new();
    for s in &spec.signs {
        let corners: Option<Vec<(f64, f64)>> =
            sign_corners(spec, s).iter().map(|p| k.project(p).ok().map(|px| (px.x, px.y))).collect();
        let Some(hull) = corners.and_then(BBox::hull) else { continue };
        let clipped = hull.clip(0.0, 0.0, k.width as f64, k.height as f64);
        if clipped.w > 0.0 && clipped.h > 0.0 {
            boxes.push(AnnotatedBox { class_id: s.class_id, bbox: clipped });
        }
    }
    GroundTruthFrame { frame_id: frame_id.to_string(), meta, boxes }
}

fn truth_plane(spec: &SceneSpec, exact: &[Option<f64>]) -> Result<PlaneModel, SynthError> {
    let k = &spec.intrinsics;
    let mut sum = Vector3::zeros();
    let mut inliers = Vec::new();
    for (i, z) in exact.iter().enumerate() {
        if let Some(z) = z {
            let (u, v) = ((i % k.width as usize) as f64, (i / k.width as usize) as f64);
            sum += k.unproject(&Pixel::new(u, v), *z).expect("positive depth");
            inliers.push(i);
        }
    }
    if inliers.is_empty() {
        return Err(SynthError::PlaneOutOfView);
    }
    let (ex, ey) = (spec.plane_extent[0] / 2.0, spec.plane_extent[1] / 2.0);
    Ok(PlaneModel {
        normal: spec.normal(),
        distance: spec.plane_distance(),
        centroid: sum / inliers.len() as f64,
        boundary: vec![
            spec.wall_point(-ex, -ey),
            spec.wall_point(ex, -ey),
            spec.wall_point(ex, ey),
            spec.wall_point(-ex, ey),
        ],
        inlier_indices: inliers,
    })
}

/// Renders one frame with its exact ground truth.
pub fn render_scene(spec: &SceneSpec, frame_id: &str) -> Result<(FrameRecord, SceneTruth), SynthError> {
    spec.validate()?;
    let exact = exact_depth(spec);
    let plane = truth_plane(spec, &exact)?;
    let (rgb, _) = render_view(spec, &RigidTransform::identity(), &spec.intrinsics);
    let depth = render_depth(spec, &exact);
    let meta = FrameMeta {
        angle_deg: Some(spec.yaw_deg),
        distance_m: Some(spec.distance_m),
        background: Some(spec.background.id().to_string()),
    };
    let boxes = ground_truth_boxes(spec, frame_id, meta.clone());
    let viewpoint = canonical_viewpoint(&plane, TEMPLATE_STANDOFF_M, &RigidTransform::identity())
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    let canonical_homography = closed_form_homography(
        &spec.intrinsics,
        &spec.intrinsics,
        &viewpoint.pose.inverse(),
        &plane.normal,
        plane.distance,
    )
    .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    let frame = FrameRecord::new(frame_id, rgb, depth, spec.intrinsics, meta)?;
    Ok((frame, SceneTruth { plane, viewpoint, canonical_homography, boxes }))
}

/// Fronto-parallel render of one sign at the template standoff, cropped to its
/// projected square.
pub fn render_template(class_id: u32, size_m: f64, k: &CameraIntrinsics) -> Result<RgbImage, SynthError> {
    let spec = SceneSpec {
        distance_m: TEMPLATE_STANDOFF_M,
        plane_extent: [size_m * 2.0, size_m * 2.0],
        signs: vec![SignPlacement { class_id, center: [0.0, 0.0], size_m }],
        intrinsics: *k,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let side = size_m * k.fx / TEMPLATE_STANDOFF_M;
    let side_y = size_m * k.fy / TEMPLATE_STANDOFF_M;
    let (w, h) = (side.round() as u32, side_y.round() as u32);
    // Render just the crop: shift the principal point so the sign square lands on [0, w) × [0, h).
    let crop = CameraIntrinsics::new(k.fx, k.fy, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    Ok(render_view(&spec, &RigidTransform::identity(), &crop).0)
}

pub fn template_file_name(class_id: u32) -> String {
    format!("{class_id}_{}.png", SIGN_STYLES[class_id as usize].name)
}

/// Angle × distance grid and scene settings for a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub angles_deg: Vec<f64>,
    pub distances_m: Vec<f64>,
    pub num_classes: usize,
    pub base: SceneSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            angles_deg: DEFAULT_ANGLES.to_vec(),
            distances_m: DEFAULT_DISTANCES.to_vec(),
            num_classes: DEFAULT_NUM_CLASSES,
            base: SceneSpec::default(),
        }
    }
}

pub fn frame_id(angle_deg: f64, distance_m: f64) -> String {
    format!("yaw{angle_deg:+03.0}_d{distance_m:.2}")
}

/// Frame specs of a sweep in grid order (angles outer, distances inner).
/// Sign classes rotate through the class set from frame to frame.
pub fn sweep_specs(cfg: &SweepConfig) -> Result<Vec<(String, SceneSpec)>, SynthError> {
    if cfg.angles_deg.is_empty() || cfg.distances_m.is_empty() {
        return Err(SynthError::EmptyGrid);
    }
    if cfg.num_classes == 0 || cfg.num_classes > SIGN_STYLES.len() {
        return Err(SynthError::InvalidScene(format!("class count must be 1..={}", SIGN_STYLES.len())));
    }
    let mut out = Vec::new();
    for &a in &cfg.angles_deg {
        for &d in &cfg.distances_m {
            let index = out.len();
            let mut spec = cfg.base.clone();
            spec.yaw_deg = a;
            spec.distance_m = d;
            spec.seed = cfg.base.seed.wrapping_add(index as u64);
            for (k, s) in spec.signs.iter_mut().enumerate() {
                s.class_id = ((index * spec_signs(&cfg.base) + k) % cfg.num_classes) as u32;
            }
            out.push((frame_id(a, d), spec));
        }
    }
    Ok(out)
}

fn spec_signs(spec: &SceneSpec) -> usize {
    spec.signs.len().max(1)
}

/// Writes a complete dataset directory and returns its annotations.
pub fn sweep(cfg: &SweepConfig, out: &Path) -> Result<AnnotationSet, SynthError> {
    let specs = sweep_specs(cfg)?;
    for dir in [RGB_DIR, DEPTH_DIR, TEMPLATES_DIR] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    }
    let k = cfg.base.intrinsics;
    save_intrinsics(&out.join(INTRINSICS_FILE), &k)?;
    let sign_size = cfg.base.signs.first().map_or(0.25, |s| s.size_m);
    for c in 0..cfg.num_classes as u32 {
        let t = render_template(c, sign_size, &k)?;
        save_png(&out.join(TEMPLATES_DIR).join(template_file_name(c)), &t)?;
    }
    let rendered: Vec<(GroundTruthFrame, [f64; 9])> = specs
        .par_iter()
        .map(|(id, spec)| -> Result<_, SynthError> {
            let (frame, truth) = render_scene(spec, id)?;
            save_png(&out.join(RGB_DIR).join(format!("{id}.png")), &frame.rgb)?;
            save_png(&out.join(DEPTH_DIR).join(format!("{id}.png")), &frame.depth)?;
            Ok((truth.boxes, truth.canonical_homography.to_row_major()))
        })
        .collect::<Result<_, _>>()?;
    let mut homographies = BTreeMap::new();
    let mut frames = Vec::with_capacity(rendered.len());
    for (gt, h) in rendered {
        homographies.insert(gt.frame_id.clone(), h);
        frames.push(gt);
    }
    let set = AnnotationSet { classes: class_infos(cfg.num_classes), frames };
    save_annotations(&out.join(ANNOTATIONS_FILE), &set)?;
    let p = out.join(GROUND_TRUTH_FILE);
    let text = serde_json::to_string_pretty(&homographies).expect("homographies serialize") + "\n";
    fs::write(&p, text).map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    Ok(set)
}

/// Reads the `ground_truth_homographies` sidecar.
pub fn load_ground_truth_homographies(dir: &Path) -> Result<BTreeMap<String, [f64; 9]>, DatasetError> {
    let p = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&p).map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: p.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
