//! On-disk RGB-D datasets, annotations and detection files.
//!
//! Directory layout:
//!
//! ```text
//! <root>/rgb/<frame_id>.png      8-bit RGB
//! <root>/depth/<frame_id>.png    16-bit grayscale, millimeters, 0 = no return
//! <root>/intrinsics.json         {"fx","fy","cx","cy","width","height"}
//! <root>/annotations.json        classes plus per-frame boxes and metadata
//! ```
//!
//! Depth values at or above [`MAX_DEPTH_MM`] are treated as invalid on load.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::detection::{Detection, FrameSpace};
use crate::geometry::{CameraIntrinsics, Pixel};
use crate::segmentation::PointCloud;

pub const MAX_DEPTH_MM: u16 = 10_000;
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const RGB_DIR: &str = "rgb";
pub const DEPTH_DIR: &str = "depth";

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file missing: {0}")]
    FileMissing(PathBuf),
    #[error("dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("malformed intrinsics in {path}: {reason}")]
    MalformedIntrinsics { path: PathBuf, reason: String },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown frame '{0}'")]
    UnknownFrame(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::FileMissing(path.to_path_buf())
        } else {
            DatasetError::Io { path: path.to_path_buf(), source }
        }
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> DatasetError {
    DatasetError::Parse { path: path.to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
}

/// Capture conditions attached to a frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
}

/// Registered RGB and depth images with intrinsics.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub id: String,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub meta: FrameMeta,
}

impl FrameRecord {
    /// Checks dimensions and clears out-of-range depth.
    pub fn new(
        id: impl Into<String>,
        rgb: RgbImage,
        mut depth: DepthImage,
        intrinsics: CameraIntrinsics,
        meta: FrameMeta,
    ) -> Result<Self, DatasetError> {
        if rgb.dimensions() != depth.dimensions() {
            return Err(DatasetError::DimensionMismatch {
                what: format!("rgb is {:?} but depth is {:?}", rgb.dimensions(), depth.dimensions()),
            });
        }
        if (intrinsics.width, intrinsics.height) != rgb.dimensions() {
            return Err(DatasetError::DimensionMismatch {
                what: format!(
                    "intrinsics describe {}x{} but images are {:?}",
                    intrinsics.width,
                    intrinsics.height,
                    rgb.dimensions()
                ),
            });
        }
        for d in depth.iter_mut() {
            if *d >= MAX_DEPTH_MM {
                *d = 0;
            }
        }
        Ok(Self { id: id.into(), rgb, depth, intrinsics, meta })
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let k: CameraIntrinsics = serde_json::from_str(&text)
        .map_err(|e| DatasetError::MalformedIntrinsics { path: path.to_path_buf(), reason: e.to_string() })?;
    k.validate().map_err(|e| DatasetError::MalformedIntrinsics { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(k)
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(k).expect("intrinsics serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn open_image(path: &Path) -> Result<DynamicImage, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::FileMissing(path.to_path_buf()));
    }
    image::open(path).map_err(|e| DatasetError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    Ok(open_image(path)?.into_rgb8())
}

/// Loads a 16-bit depth map; 8-bit files are rejected rather than rescaled.
pub fn load_depth(path: &Path) -> Result<DepthImage, DatasetError> {
    match open_image(path)? {
        DynamicImage::ImageLuma16(d) => Ok(d),
        other => Err(DatasetError::Image {
            path: path.to_path_buf(),
            message: format!("expected 16-bit grayscale depth, found {:?}", other.color()),
        }),
    }
}

pub fn save_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<(), DatasetError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| DatasetError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_frame(
    id: &str,
    rgb_path: &Path,
    depth_path: &Path,
    intrinsics_path: &Path,
) -> Result<FrameRecord, DatasetError> {
    let k = load_intrinsics(intrinsics_path)?;
    load_frame_with(id, rgb_path, depth_path, &k, FrameMeta::default())
}

pub fn load_frame_with(
    id: &str,
    rgb_path: &Path,
    depth_path: &Path,
    k: &CameraIntrinsics,
    meta: FrameMeta,
) -> Result<FrameRecord, DatasetError> {
    let rgb = load_rgb(rgb_path)?;
    let depth = load_depth(depth_path)?;
    FrameRecord::new(id, rgb, depth, *k, meta)
}

/// Back-projects every pixel with nonzero depth; zero depth stays invalid.
pub fn depth_to_cloud(frame: &FrameRecord) -> PointCloud {
    let k = &frame.intrinsics;
    let (w, h) = frame.depth.dimensions();
    let mut points = Vec::with_capacity((w * h) as usize);
    for (u, v, d) in frame.depth.enumerate_pixels() {
        let z = d.0[0] as f64 / 1000.0;
        let p = if d.0[0] == 0 {
            nalgebra::Vector3::zeros()
        } else {
            k.unproject(&Pixel::new(u as f64, v as f64), z).expect("positive depth")
        };
        points.push(p);
    }
    PointCloud::new(w as usize, h as usize, points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub class_id: u32,
    pub bbox: BBox,
}

/// Ground-truth boxes of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame_id: String,
    #[serde(flatten)]
    pub meta: FrameMeta,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub classes: Vec<ClassInfo>,
    pub frames: Vec<GroundTruthFrame>,
}

impl AnnotationSet {
    pub fn frame(&self, id: &str) -> Option<&GroundTruthFrame> {
        self.frames.iter().find(|f| f.frame_id == id)
    }

    pub fn has_class(&self, id: u32) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }
}

/// Textual encoding of an annotation set. Alternative dataset schemas plug in here.
pub trait AnnotationSchema {
    fn parse(&self, path: &Path, text: &str) -> Result<AnnotationSet, DatasetError>;
    fn render(&self, set: &AnnotationSet) -> String;
}

/// The native JSON schema.
#[derive(Debug, Clone, Copy, Default)]
pub struct JsonAnnotations;

impl AnnotationSchema for JsonAnnotations {
    fn parse(&self, path: &Path, text: &str) -> Result<AnnotationSet, DatasetError> {
        serde_json::from_str(text).map_err(|e| parse_err(path, e))
    }

    fn render(&self, set: &AnnotationSet) -> String {
        serde_json::to_string_pretty(set).expect("annotations serialize") + "\n"
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet, DatasetError> {
    load_annotations_with(path, &JsonAnnotations)
}

pub fn load_annotations_with(path: &Path, schema: &dyn AnnotationSchema) -> Result<AnnotationSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    schema.parse(path, &text)
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<(), DatasetError> {
    fs::write(path, JsonAnnotations.render(set)).map_err(io_err(path))
}

/// Final detections of one frame, in original-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    class_id: u32,
    score: f64,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct FrameRecordJson {
    frame_id: String,
    detections: Vec<DetectionRecord>,
}

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    frames: Vec<FrameRecordJson>,
}

pub fn render_detections(frames: &[FrameDetections]) -> String {
    let file = DetectionFile {
        frames: frames
            .iter()
            .map(|f| FrameRecordJson {
                frame_id: f.frame_id.clone(),
                detections: f
                    .detections
                    .iter()
                    .map(|d| DetectionRecord { class_id: d.class_id, score: d.score, bbox: d.bbox })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("detections serialize") + "\n"
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<FrameDetections>, DatasetError> {
    let file: DetectionFile = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    Ok(file
        .frames
        .into_iter()
        .map(|f| FrameDetections {
            frame_id: f.frame_id,
            detections: f
                .detections
                .into_iter()
                .map(|d| Detection {
                    class_id: d.class_id,
                    score: d.score,
                    bbox: d.bbox,
                    frame_space: FrameSpace::Original,
                })
                .collect(),
        })
        .collect())
}

pub fn save_detections(path: &Path, frames: &[FrameDetections]) -> Result<(), DatasetError> {
    fs::write(path, render_detections(frames)).map_err(io_err(path))
}

pub fn load_detections(path: &Path) -> Result<Vec<FrameDetections>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_detections(path, &text)
}

/// A dataset directory with its frame list.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frame_ids: Vec<String>,
    pub annotations: Option<AnnotationSet>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let rgb_dir = root.join(RGB_DIR);
        if !rgb_dir.is_dir() {
            return Err(DatasetError::FileMissing(rgb_dir));
        }
        let intrinsics = load_intrinsics(&root.join(INTRINSICS_FILE))?;
        let mut frame_ids = Vec::new();
        for entry in fs::read_dir(&rgb_dir).map_err(io_err(&rgb_dir))? {
            let path = entry.map_err(io_err(&rgb_dir))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    frame_ids.push(stem.to_string());
                }
            }
        }
        if frame_ids.is_empty() {
            return Err(DatasetError::FileMissing(rgb_dir.join("*.png")));
        }
        frame_ids.sort();
        let ann_path = root.join(ANNOTATIONS_FILE);
        let annotations = if ann_path.exists() { Some(load_annotations(&ann_path)?) } else { None };
        Ok(Self { root: root.to_path_buf(), intrinsics, frame_ids, annotations })
    }

    pub fn rgb_path(&self, id: &str) -> PathBuf {
        self.root.join(RGB_DIR).join(format!("{id}.png"))
    }

    pub fn depth_path(&self, id: &str) -> PathBuf {
        self.root.join(DEPTH_DIR).join(format!("{id}.png"))
    }

    pub fn meta(&self, id: &str) -> FrameMeta {
        self.annotations.as_ref().and_then(|a| a.frame(id)).map(|f| f.meta.clone()).unwrap_or_default()
    }

    pub fn load_frame(&self, id: &str) -> Result<FrameRecord, DatasetError> {
        if !self.frame_ids.iter().any(|f| f == id) {
            return Err(DatasetError::UnknownFrame(id.to_string()));
        }
        load_frame_with(id, &self.rgb_path(id), &self.depth_path(id), &self.intrinsics, self.meta(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use tempfile::tempdir;

    fn k(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn write_pair(dir: &Path, w: u32, h: u32, dw: u32, dh: u32, depth_mm: u16) -> (PathBuf, PathBuf, PathBuf) {
        let rgb = RgbImage::from_pixel(w, h, Rgb([10, 20, 30]));
        let depth = DepthImage::from_pixel(dw, dh, Luma([depth_mm]));
        let (rp, dp, kp) = (dir.join("rgb.png"), dir.join("depth.png"), dir.join("k.json"));
        save_png(&rp, &rgb).unwrap();
        save_png(&dp, &depth).unwrap();
        save_intrinsics(&kp, &k(w, h)).unwrap();
        (rp, dp, kp)
    }

    #[test]
    fn load_full_resolution_pair() {
        let dir = tempdir().unwrap();
        let (rp, dp, kp) = write_pair(dir.path(), 1280, 720, 1280, 720, 1500);
        let f = load_frame("f", &rp, &dp, &kp).unwrap();
        assert_eq!((f.width(), f.height()), (1280, 720));
        assert_eq!(f.depth.get_pixel(3, 3).0[0], 1500);
    }

    #[test]
    fn mismatched_depth_is_rejected() {
        let dir = tempdir().unwrap();
        let (rp, dp, _) = write_pair(dir.path(), 1280, 720, 640, 480, 1500);
        let err = load_frame_with("f", &rp, &dp, &k(1280, 720), FrameMeta::default()).unwrap_err();
        assert!(matches!(err, DatasetError::DimensionMismatch { .. }));
    }

    #[test]
    fn out_of_range_depth_becomes_invalid() {
        let dir = tempdir().unwrap();
        let rgb = RgbImage::new(8, 4);
        let mut depth = DepthImage::from_pixel(8, 4, Luma([1200]));
        depth.put_pixel(2, 1, Luma([12_000]));
        let (rp, dp, kp) = (dir.path().join("r.png"), dir.path().join("d.png"), dir.path().join("k.json"));
        save_png(&rp, &rgb).unwrap();
        save_png(&dp, &depth).unwrap();
        save_intrinsics(&kp, &k(8, 4)).unwrap();
        let f = load_frame("f", &rp, &dp, &kp).unwrap();
        assert_eq!(f.depth.get_pixel(2, 1).0[0], 0);
        let cloud = depth_to_cloud(&f);
        assert!(!cloud.valid[8 + 2]);
        assert_eq!(cloud.num_valid(), 31);
    }

    #[test]
    fn missing_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("nope.png");
        assert!(matches!(load_rgb(&p), Err(DatasetError::FileMissing(_))));
        assert!(matches!(load_intrinsics(&dir.path().join("k.json")), Err(DatasetError::FileMissing(_))));
        assert!(matches!(Dataset::open(dir.path()), Err(DatasetError::FileMissing(_))));
    }

    #[test]
    fn malformed_intrinsics() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("k.json");
        fs::write(&p, r#"{"fx": 600, "fy": 600, "cx": 10}"#).unwrap();
        assert!(matches!(load_intrinsics(&p), Err(DatasetError::MalformedIntrinsics { .. })));
        fs::write(&p, r#"{"fx": -1, "fy": 600, "cx": 10, "cy": 10, "width": 20, "height": 20}"#).unwrap();
        assert!(matches!(load_intrinsics(&p), Err(DatasetError::MalformedIntrinsics { .. })));
    }

    #[test]
    fn cloud_from_depth() {
        let kk = CameraIntrinsics::new(600.0, 600.0, 2.0, 1.0, 5, 3).unwrap();
        let mut depth = DepthImage::new(5, 3);
        depth.put_pixel(2, 1, Luma([1200]));
        let f = FrameRecord::new("f", RgbImage::new(5, 3), depth, kk, FrameMeta::default()).unwrap();
        let cloud = depth_to_cloud(&f);
        assert_eq!(cloud.num_valid(), 1);
        assert!((cloud.points[5 + 2] - nalgebra::Vector3::new(0.0, 0.0, 1.2)).norm() < 1e-12);

        let zero = FrameRecord::new("z", RgbImage::new(5, 3), DepthImage::new(5, 3), kk, FrameMeta::default()).unwrap();
        assert_eq!(depth_to_cloud(&zero).num_valid(), 0);
    }

    #[test]
    fn parse_error_reports_position() {
        let err =
            JsonAnnotations.parse(Path::new("a.json"), "{\n  \"classes\": [\n    {\"id\": \"x\"}\n  ]\n}").unwrap_err();
        match err {
            DatasetError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_annotations_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.json");
        save_annotations(&p, &AnnotationSet::default()).unwrap();
        assert_eq!(load_annotations(&p).unwrap(), AnnotationSet::default());
    }

    #[test]
    fn thirteen_class_annotations_round_trip_bit_identically() {
        let classes: Vec<ClassInfo> = (0..13).map(|i| ClassInfo { id: i, name: format!("hazmat-{i}") }).collect();
        let frame = GroundTruthFrame {
            frame_id: "all13".into(),
            meta: FrameMeta { angle_deg: Some(-45.0), distance_m: Some(1.5), background: Some("plywood".into()) },
            boxes: (0..13)
                .map(|i| AnnotatedBox {
                    class_id: i,
                    bbox: BBox::new(10.5 * i as f64, 3.25, 40.0 + i as f64 / 3.0, 41.0),
                })
                .collect(),
        };
        let set = AnnotationSet { classes, frames: vec![frame] };
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.json");
        save_annotations(&p, &set).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = load_annotations(&p).unwrap();
        assert_eq!(back, set);
        save_annotations(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }
}
