//! Canonical-view rectification of a segmented plane.
//!
//! For each plane a virtual camera is placed on the plane normal at a fixed
//! standoff from the centroid. The base homography maps original pixels into
//! that virtual view; translation-only refinements then slide a tile-sized
//! window across the plane's footprint with 50 % overlap.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dataset::{depth_to_cloud, FrameRecord};
use crate::geometry::{
    dlt_homography, try_normalize, CameraIntrinsics, GeometryError, Homography, Pixel, RigidTransform,
};
use crate::segmentation::{PlaneExtractorRegistry, PlaneModel, PointCloud, SegmentationConfig, SegmentationError};

/// Side length of the square sampled around the centroid for the DLT, meters.
const SAMPLE_SQUARE_SIDE: f64 = 0.5;
/// Cosine of the 1° cone around the normal in which an axis is unusable.
const DEGENERATE_AXIS_COS: f64 = 0.999_847_695_156_391_2;

#[derive(Debug, Error)]
pub enum RectifyError {
    #[error("no usable in-plane reference axis")]
    DegenerateUpAxis,
    #[error("standoff must be positive, got {0}")]
    InvalidStandoff(f64),
    #[error("sampled plane points fall behind a camera")]
    PlaneBehindCamera,
    #[error("plane boundary falls behind the virtual camera")]
    BoundaryBehindCamera,
    #[error("no plane found")]
    NoPlaneFound,
    #[error("tile size must be positive")]
    InvalidTileSize,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error("i/o error writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Virtual camera looking straight at a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualViewpoint {
    /// Pose of the virtual camera in the original camera frame.
    pub pose: RigidTransform,
    pub standoff: f64,
}

/// Integer-aligned footprint of a plane in the virtual view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneBBox {
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileSpec {
    pub plane_index: usize,
    /// Vertical window index, 1-based.
    pub i: u32,
    /// Horizontal window index, 1-based.
    pub j: u32,
    /// Maps original-image pixels to tile pixels.
    pub homography: Homography,
    pub out_height: u32,
    pub out_width: u32,
}

#[derive(Debug, Clone)]
pub struct RectifiedTile {
    pub image: RgbImage,
    /// Row-major; true where the source preimage lies inside the source image.
    pub mask: Vec<bool>,
    pub spec: TileSpec,
}

impl RectifiedTile {
    pub fn valid_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Places the virtual camera at `centroid - standoff * normal`, looking along
/// the normal. The x axis is the original camera's x axis projected onto the
/// plane (falling back to y), so upright content stays upright.
pub fn canonical_viewpoint(
    plane: &PlaneModel,
    standoff: f64,
    original_axes: &RigidTransform,
) -> Result<VirtualViewpoint, RectifyError> {
    if !(standoff > 0.0) {
        return Err(RectifyError::InvalidStandoff(standoff));
    }
    let z = plane.normal.normalize();
    let x1 = original_axes.axis(0);
    let y1 = original_axes.axis(1);
    let (x, y) = if x1.dot(&z).abs() < DEGENERATE_AXIS_COS {
        let x = try_normalize(&(x1 - z * x1.dot(&z))).ok_or(RectifyError::DegenerateUpAxis)?;
        (x, z.cross(&x))
    } else if y1.dot(&z).abs() < DEGENERATE_AXIS_COS {
        let y = try_normalize(&(y1 - z * y1.dot(&z))).ok_or(RectifyError::DegenerateUpAxis)?;
        (y.cross(&z), y)
    } else {
        return Err(RectifyError::DegenerateUpAxis);
    };
    let rotation = Matrix3::from_columns(&[x, y, z]);
    let translation = plane.centroid - z * standoff;
    Ok(VirtualViewpoint { pose: RigidTransform { rotation, translation }, standoff })
}

/// Homography from original pixels to virtual-view pixels, estimated by DLT
/// from four plane points projected into both views with the same intrinsics.
pub fn base_homography(
    vp: &VirtualViewpoint,
    k: &CameraIntrinsics,
    plane: &PlaneModel,
) -> Result<Homography, RectifyError> {
    let to_virtual = vp.pose.inverse();
    let half = SAMPLE_SQUARE_SIDE / 2.0;
    let (ax, ay) = (vp.pose.axis(0), vp.pose.axis(1));
    let mut pairs = Vec::with_capacity(4);
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        let world = plane.centroid + ax * (sx * half) + ay * (sy * half);
        let p1 = k.project(&world).map_err(|_| RectifyError::PlaneBehindCamera)?;
        let p2 = k.project(&to_virtual.transform_point(&world)).map_err(|_| RectifyError::PlaneBehindCamera)?;
        pairs.push((p1, p2));
    }
    Ok(dlt_homography(&pairs)?)
}

/// Tight integer box around the plane boundary seen from the virtual camera.
pub fn plane_bbox_in_virtual(
    plane: &PlaneModel,
    vp: &VirtualViewpoint,
    k: &CameraIntrinsics,
) -> Result<PlaneBBox, RectifyError> {
    let to_virtual = vp.pose.inverse();
    let mut pixels = Vec::with_capacity(plane.boundary.len());
    for p in &plane.boundary {
        pixels.push(k.project(&to_virtual.transform_point(p)).map_err(|_| RectifyError::BoundaryBehindCamera)?);
    }
    bbox_of_pixels(&pixels).ok_or(RectifyError::BoundaryBehindCamera)
}

/// Outward-rounded box; the small slack keeps exact integers from rounding out.
pub(crate) fn bbox_of_pixels(pixels: &[Pixel]) -> Option<PlaneBBox> {
    const SLACK: f64 = 1e-9;
    let first = pixels.first()?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for p in pixels {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (left, top) = ((x0 + SLACK).floor(), (y0 + SLACK).floor());
    let (right, bottom) = ((x1 - SLACK).ceil(), (y1 - SLACK).ceil());
    Some(PlaneBBox {
        x: left as i64,
        y: top as i64,
        width: ((right - left) as u32).max(1),
        height: ((bottom - top) as u32).max(1),
    })
}

/// Number of windows along one axis: `2⌈extent/size⌉ − 1`.
pub fn window_count(extent: u32, size: u32) -> u32 {
    2 * extent.div_ceil(size) - 1
}

/// One tile per window position. Window (i, j) starts at
/// `top_left + ((j−1)·W/2, (i−1)·H/2)` in the virtual view; i runs vertically.
pub fn sliding_homographies(
    base: &Homography,
    bbox: &PlaneBBox,
    out_h: u32,
    out_w: u32,
) -> Result<Vec<TileSpec>, RectifyError> {
    if out_h == 0 || out_w == 0 {
        return Err(RectifyError::InvalidTileSize);
    }
    let rows = window_count(bbox.height, out_h);
    let cols = window_count(bbox.width, out_w);
    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for i in 1..=rows {
        for j in 1..=cols {
            let tx = -(bbox.x as f64) - (out_w as f64 / 2.0) * (j - 1) as f64;
            let ty = -(bbox.y as f64) - (out_h as f64 / 2.0) * (i - 1) as f64;
            let homography = Homography::translation(tx, ty).compose(base)?;
            tiles.push(TileSpec { plane_index: 0, i, j, homography, out_height: out_h, out_width: out_w });
        }
    }
    Ok(tiles)
}

/// Inverse warp with bilinear sampling. Pixels whose preimage leaves the
/// source image are zero and masked out.
pub fn warp(image: &RgbImage, spec: &TileSpec) -> Result<RectifiedTile, RectifyError> {
    let inv = spec.homography.inverse()?;
    let m = *inv.matrix();
    let (sw, sh) = (image.width() as usize, image.height() as usize);
    let (ow, oh) = (spec.out_width as usize, spec.out_height as usize);
    let src = image.as_raw();
    let mut out = vec![0u8; ow * oh * 3];
    let mut mask = vec![false; ow * oh];
    let (max_x, max_y) = (sw as f64 - 1.0, sh as f64 - 1.0);
    const EDGE: f64 = 1e-9;
    for v in 0..oh {
        for u in 0..ow {
            let p = m * Vector3::new(u as f64, v as f64, 1.0);
            if p.z.abs() <= 1e-12 {
                continue;
            }
            let (x, y) = (p.x / p.z, p.y / p.z);
            if !(x >= -EDGE && y >= -EDGE && x <= max_x + EDGE && y <= max_y + EDGE) {
                continue;
            }
            let (x, y) = (x.clamp(0.0, max_x), y.clamp(0.0, max_y));
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let o = (v * ow + u) * 3;
            for c in 0..3 {
                let px = |xx: usize, yy: usize| src[(yy * sw + xx) * 3 + c] as f64;
                let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
                let bot = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
                out[o + c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            mask[v * ow + u] = true;
        }
    }
    let image = RgbImage::from_raw(ow as u32, oh as u32, out).expect("buffer sized to tile");
    Ok(RectifiedTile { image, mask, spec: *spec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyConfig {
    pub segmentation: SegmentationConfig,
    /// Registered plane extractor name.
    pub extractor: String,
    pub standoff: f64,
    /// (height, width) of output tiles; defaults to the source image size.
    pub tile_size: Option<(u32, u32)>,
    /// Tiles with a smaller valid fraction are discarded.
    pub min_valid_fraction: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationConfig::default(),
            extractor: "ransac".to_string(),
            standoff: 1.2,
            tile_size: None,
            min_valid_fraction: 0.05,
        }
    }
}

/// Intermediate products for one plane.
#[derive(Debug, Clone)]
pub struct PlaneRectification {
    pub plane: PlaneModel,
    pub viewpoint: VirtualViewpoint,
    pub base: Homography,
    pub bbox: PlaneBBox,
}

#[derive(Debug, Clone)]
pub struct FrameRectification {
    pub planes: Vec<PlaneRectification>,
    pub tiles: Vec<RectifiedTile>,
}

/// Full rectification of an image with its registered point cloud.
pub fn rectify_image(
    rgb: &RgbImage,
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    cfg: &RectifyConfig,
) -> Result<FrameRectification, RectifyError> {
    let extractor = PlaneExtractorRegistry::with_builtins().create(&cfg.extractor, &cfg.segmentation)?;
    let planes = extractor.extract(cloud)?;
    if planes.is_empty() {
        return Err(RectifyError::NoPlaneFound);
    }
    let (out_h, out_w) = cfg.tile_size.unwrap_or((rgb.height(), rgb.width()));
    let mut result = FrameRectification { planes: Vec::new(), tiles: Vec::new() };
    for (index, plane) in planes.into_iter().enumerate() {
        let viewpoint = canonical_viewpoint(&plane, cfg.standoff, &RigidTransform::identity())?;
        let base = base_homography(&viewpoint, k, &plane)?;
        let bbox = plane_bbox_in_virtual(&plane, &viewpoint, k)?;
        for mut spec in sliding_homographies(&base, &bbox, out_h, out_w)? {
            spec.plane_index = index;
            let tile = warp(rgb, &spec)?;
            if tile.valid_fraction() >= cfg.min_valid_fraction {
                result.tiles.push(tile);
            }
        }
        result.planes.push(PlaneRectification { plane, viewpoint, base, bbox });
    }
    Ok(result)
}

/// Rectifies a dataset frame; the cloud is derived from its depth map.
pub fn rectify_frame(frame: &FrameRecord, cfg: &RectifyConfig) -> Result<Vec<RectifiedTile>, RectifyError> {
    Ok(rectify_frame_detailed(frame, cfg)?.tiles)
}

pub fn rectify_frame_detailed(frame: &FrameRecord, cfg: &RectifyConfig) -> Result<FrameRectification, RectifyError> {
    let cloud = depth_to_cloud(frame);
    rectify_image(&frame.rgb, &cloud, &frame.intrinsics, cfg)
}

/// Row-major 3×3 as three whitespace-separated lines.
pub fn format_homography(h: &Homography) -> String {
    let v = h.to_row_major();
    format!("{} {} {}\n{} {} {}\n{} {} {}\n", v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

pub fn tile_file_stem(frame_id: &str, spec: &TileSpec) -> String {
    format!("{frame_id}_p{}_i{}_j{}", spec.plane_index, spec.i, spec.j)
}

/// Writes `<stem>.png` and the `<stem>.txt` homography sidecar.
pub fn write_debug_tile(dir: &Path, frame_id: &str, tile: &RectifiedTile) -> Result<(), RectifyError> {
    let stem = tile_file_stem(frame_id, &tile.spec);
    let png = dir.join(format!("{stem}.png"));
    tile.image.save(&png).map_err(|e| RectifyError::Io { path: png.clone(), source: std::io::Error::other(e) })?;
    let txt = dir.join(format!("{stem}.txt"));
    let io = |source| RectifyError::Io { path: txt.clone(), source };
    let mut f = std::fs::File::create(&txt).map_err(io)?;
    f.write_all(format_homography(&tile.spec.homography).as_bytes()).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{closed_form_homography, normalized_frobenius_distance};
    use image::Rgb;

    fn k600() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    fn square_plane(normal: Vector3<f64>, centroid: Vector3<f64>, side: f64) -> PlaneModel {
        let (u, v) = crate::geometry::plane_basis(&normal);
        let h = side / 2.0;
        PlaneModel {
            normal,
            distance: normal.dot(&centroid),
            centroid,
            boundary: vec![
                centroid - u * h - v * h,
                centroid + u * h - v * h,
                centroid + u * h + v * h,
                centroid - u * h + v * h,
            ],
            inlier_indices: vec![],
        }
    }

    fn yawed_normal(deg: f64) -> Vector3<f64> {
        let a = deg.to_radians();
        Vector3::new(a.sin(), 0.0, a.cos())
    }

    #[test]
    fn fronto_parallel_viewpoint_is_identity() {
        let plane = square_plane(Vector3::z(), Vector3::new(0.0, 0.0, 1.2), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        assert!((vp.pose.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(vp.pose.translation.norm() < 1e-12);
        let dolly = canonical_viewpoint(&plane, 0.6, &RigidTransform::identity()).unwrap();
        assert!((dolly.pose.translation - Vector3::new(0.0, 0.0, 0.6)).norm() < 1e-12);
        assert!((dolly.pose.rotation - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn viewpoint_invariants_for_tilted_plane() {
        let n = yawed_normal(45.0);
        let plane = square_plane(n, Vector3::new(0.2, -0.1, 1.5), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        assert!((vp.pose.axis(2) - n).norm() < 1e-9);
        let dist = (plane.distance - n.dot(&vp.pose.translation)).abs();
        assert!((dist - 1.2).abs() < 1e-9);
        // same side as the original camera (origin)
        assert!(n.dot(&vp.pose.translation) - plane.distance < 0.0);
        assert!((vp.pose.rotation.determinant() - 1.0).abs() < 1e-12);
        // x axis stays horizontal for a yawed wall
        assert!(vp.pose.axis(0).y.abs() < 1e-12);
    }

    #[test]
    fn degenerate_x_axis_falls_back_to_y() {
        let plane = square_plane(Vector3::x(), Vector3::new(1.5, 0.0, 0.0), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        assert!((vp.pose.axis(1) - Vector3::y()).norm() < 1e-12);
        assert!((vp.pose.axis(2) - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn invalid_standoff() {
        let plane = square_plane(Vector3::z(), Vector3::new(0.0, 0.0, 1.2), 1.0);
        assert!(matches!(
            canonical_viewpoint(&plane, 0.0, &RigidTransform::identity()),
            Err(RectifyError::InvalidStandoff(_))
        ));
    }

    #[test]
    fn base_homography_identity_when_already_canonical() {
        let plane = square_plane(Vector3::z(), Vector3::new(0.0, 0.0, 1.2), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        let h = base_homography(&vp, &k600(), &plane).unwrap();
        assert!((h.matrix() - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn base_homography_matches_closed_form_and_transfers_points() {
        let k = k600();
        let n = yawed_normal(60.0);
        let plane = square_plane(n, Vector3::new(0.1, 0.05, 1.6), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        let h = base_homography(&vp, &k, &plane).unwrap();
        let cf = closed_form_homography(&k, &k, &vp.pose.inverse(), &plane.normal, plane.distance).unwrap();
        assert!(normalized_frobenius_distance(&h, &cf) < 1e-6);
        let (u, v) = crate::geometry::plane_basis(&n);
        for s in 0..20 {
            let a = (s as f64 * 0.731).sin() * 0.4;
            let b = (s as f64 * 1.37).cos() * 0.4;
            let x = plane.centroid + u * a + v * b;
            let p1 = k.project(&x).unwrap();
            let p2 = k.project(&vp.pose.inverse().transform_point(&x)).unwrap();
            let mapped = h.apply(&p1).unwrap();
            assert!((mapped - p2).norm() < 0.5);
        }
    }

    #[test]
    fn bbox_of_fronto_parallel_square() {
        let plane = square_plane(Vector3::z(), Vector3::new(0.0, 0.0, 1.2), 1.0);
        let vp = canonical_viewpoint(&plane, 1.2, &RigidTransform::identity()).unwrap();
        let bb = plane_bbox_in_virtual(&plane, &vp, &k600()).unwrap();
        assert_eq!(bb, PlaneBBox { x: 390, y: 110, width: 500, height: 500 });
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(1000, 720), 3);
        assert_eq!(window_count(1280, 1280), 1);
        assert_eq!(window_count(1281, 1280), 3);
        assert_eq!(window_count(1, 720), 1);
    }

    #[test]
    fn single_tile_is_pure_offset() {
        let bb = PlaneBBox { x: 100, y: -20, width: 300, height: 200 };
        let tiles = sliding_homographies(&Homography::identity(), &bb, 720, 1280).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].i, tiles[0].j), (1, 1));
        let expected = Homography::translation(-100.0, 20.0);
        assert!((tiles[0].homography.matrix() - expected.matrix()).norm() < 1e-12);
    }

    #[test]
    fn three_vertical_tiles() {
        let bb = PlaneBBox { x: 0, y: 0, width: 1280, height: 1000 };
        let tiles = sliding_homographies(&Homography::identity(), &bb, 720, 1280).unwrap();
        assert_eq!(tiles.len(), 3);
        for w in tiles.windows(2) {
            let d = w[0].homography.matrix()[(1, 2)] - w[1].homography.matrix()[(1, 2)];
            assert!((d - 360.0).abs() < 1e-9);
            assert_eq!(w[0].homography.matrix()[(0, 2)], w[1].homography.matrix()[(0, 2)]);
        }
    }

    #[test]
    fn zero_tile_size_rejected() {
        let bb = PlaneBBox { x: 0, y: 0, width: 10, height: 10 };
        assert!(sliding_homographies(&Homography::identity(), &bb, 0, 10).is_err());
    }

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    fn spec(h: Homography, w: u32, hh: u32) -> TileSpec {
        TileSpec { plane_index: 0, i: 1, j: 1, homography: h, out_height: hh, out_width: w }
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = gradient(40, 30);
        let tile = warp(&img, &spec(Homography::identity(), 40, 30)).unwrap();
        assert_eq!(tile.image, img);
        assert!(tile.mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_translation_is_exact_shift() {
        let img = gradient(40, 30);
        let tile = warp(&img, &spec(Homography::translation(5.0, -3.0), 40, 30)).unwrap();
        for y in 0..30u32 {
            for x in 0..40u32 {
                let (sx, sy) = (x as i64 - 5, y as i64 + 3);
                let inside = (0..40).contains(&sx) && (0..30).contains(&sy);
                assert_eq!(tile.mask[(y * 40 + x) as usize], inside);
                if inside {
                    assert_eq!(tile.image.get_pixel(x, y), img.get_pixel(sx as u32, sy as u32));
                } else {
                    assert_eq!(tile.image.get_pixel(x, y), &Rgb([0, 0, 0]));
                }
            }
        }
    }

    #[test]
    fn homography_sidecar_format() {
        let s = format_homography(&Homography::translation(-1.5, 2.0));
        assert_eq!(s, "1 0 -1.5\n0 1 2\n0 0 1\n");
        let spec = spec(Homography::identity(), 1, 1);
        assert_eq!(tile_file_stem("f01", &spec), "f01_p0_i1_j1");
    }
}
