//! Detector backends, back-projection of tile detections and extended NMS.

mod ncc;
pub mod protocol;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::RgbImage;
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{GeometryError, Homography, Pixel};
use crate::rectification::{RectifiedTile, TileSpec};

pub use ncc::{load_templates, ReferenceDetector, Template};
pub use protocol::{serve, SubprocessBackend};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_NCC_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("detector protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("detector timed out on request {id} after {seconds:.1} s")]
    Timeout { id: u64, seconds: f64 },
    #[error("template {class_id} ({th}x{tw}) is larger than the tile ({h}x{w})")]
    TemplateLargerThanTile { class_id: u32, th: u32, tw: u32, h: u32, w: u32 },
    #[error("no templates loaded")]
    NoTemplates,
    #[error("bad template {path}: {reason}")]
    BadTemplate { path: PathBuf, reason: String },
    #[error("tile homography is singular")]
    SingularHomography,
    #[error("back-projected box is degenerate")]
    DegenerateBox,
    #[error("unknown detector backend '{0}'")]
    UnknownBackend(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Coordinate frame of a detection box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameSpace {
    Tile { plane: usize, i: u32, j: u32 },
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    pub frame_space: FrameSpace,
}

impl Detection {
    pub fn original(class_id: u32, score: f64, bbox: BBox) -> Self {
        Self { class_id, score, bbox, frame_space: FrameSpace::Original }
    }
}

/// An image handed to a backend; invalid pixels are flagged in `mask`.
#[derive(Debug, Clone, Copy)]
pub struct TileView<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a [bool],
}

impl<'a> From<&'a RectifiedTile> for TileView<'a> {
    fn from(t: &'a RectifiedTile) -> Self {
        Self { image: &t.image, mask: &t.mask }
    }
}

/// A detector that scores tiles. Returned boxes are in tile pixels.
/// Tile-space `(class_id, score, box)` triples for one tile.
pub type RawDetections = Vec<(u32, f64, BBox)>;

pub trait DetectorBackend: Send {
    fn name(&self) -> &str;

    /// Number of requests the backend accepts concurrently.
    fn capacity(&self) -> usize {
        1
    }

    fn detect_batch(&mut self, tiles: &[TileView<'_>]) -> Result<Vec<RawDetections>, DetectError>;
}

/// Options consumed by backend factories.
#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub templates_dir: Option<PathBuf>,
    pub command: Vec<String>,
    pub threshold: f64,
    pub timeout: Duration,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self { templates_dir: None, command: Vec::new(), threshold: DEFAULT_NCC_THRESHOLD, timeout: DEFAULT_TIMEOUT }
    }
}

pub type BackendFactory = fn(&BackendOptions) -> Result<Box<dyn DetectorBackend>, DetectError>;

/// Name → factory table for detector backends.
pub struct BackendRegistry {
    factories: BTreeMap<&'static str, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("reference", |opts| {
            let dir = opts.templates_dir.as_deref().ok_or_else(|| {
                DetectError::BackendUnavailable("reference backend needs a template directory".into())
            })?;
            Ok(Box::new(ReferenceDetector::new(load_templates(dir)?, opts.threshold)?))
        });
        r.register("subprocess", |opts| Ok(Box::new(SubprocessBackend::spawn(&opts.command, opts.timeout)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: BackendFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, opts: &BackendOptions) -> Result<Box<dyn DetectorBackend>, DetectError> {
        let factory = self.factories.get(name).ok_or_else(|| DetectError::UnknownBackend(name.to_string()))?;
        factory(opts)
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Runs the backend over every tile, in chunks of its declared capacity.
pub fn detect_tiles(tiles: &[RectifiedTile], backend: &mut dyn DetectorBackend) -> Result<Vec<Detection>, DetectError> {
    let mut out = Vec::new();
    let chunk = backend.capacity().max(1);
    for group in tiles.chunks(chunk) {
        let views: Vec<TileView<'_>> = group.iter().map(TileView::from).collect();
        let results = backend.detect_batch(&views)?;
        if results.len() != group.len() {
            return Err(DetectError::ProtocolViolation(format!("{} results for {} tiles", results.len(), group.len())));
        }
        for (tile, dets) in group.iter().zip(results) {
            let space = FrameSpace::Tile { plane: tile.spec.plane_index, i: tile.spec.i, j: tile.spec.j };
            for (class_id, score, bbox) in dets {
                let bbox = bbox.clip(0.0, 0.0, tile.image.width() as f64, tile.image.height() as f64);
                if bbox.w > 0.0 && bbox.h > 0.0 {
                    out.push(Detection { class_id, score: score.clamp(0.0, 1.0), bbox, frame_space: space });
                }
            }
        }
    }
    Ok(out)
}

/// Maps one tile-space box back to the source image through the inverse tile homography.
pub fn backproject_detection(
    det: &Detection,
    inverse: &Homography,
    source_width: u32,
    source_height: u32,
) -> Result<Detection, DetectError> {
    let mut corners = Vec::with_capacity(4);
    for (x, y) in det.bbox.corners() {
        let p = inverse.apply(&Pixel::new(x, y)).map_err(|_| DetectError::DegenerateBox)?;
        corners.push((p.x, p.y));
    }
    let hull = BBox::hull(corners).ok_or(DetectError::DegenerateBox)?;
    let clipped = hull.clip(0.0, 0.0, source_width as f64, source_height as f64);
    if !(clipped.area() >= 1.0) {
        return Err(DetectError::DegenerateBox);
    }
    Ok(Detection { frame_space: FrameSpace::Original, bbox: clipped, ..*det })
}

pub fn backproject(
    dets: &[Detection],
    spec: &TileSpec,
    source_width: u32,
    source_height: u32,
) -> Result<Vec<Detection>, DetectError> {
    let inverse = tile_inverse(spec)?;
    dets.iter().map(|d| backproject_detection(d, &inverse, source_width, source_height)).collect()
}

fn tile_inverse(spec: &TileSpec) -> Result<Homography, DetectError> {
    spec.homography.inverse().map_err(|_: GeometryError| DetectError::SingularHomography)
}

fn nms_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Class-wise greedy NMS. Output is grouped by ascending class id, each class
/// in acceptance order.
pub fn extended_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut by_class: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().push(*d);
    }
    let mut kept = Vec::new();
    for (_, mut group) in by_class {
        group.sort_by(nms_order);
        let mut accepted: Vec<Detection> = Vec::new();
        for d in group {
            if accepted.iter().all(|a| crate::bbox::iou(&a.bbox, &d.bbox) < iou_threshold) {
                accepted.push(d);
            }
        }
        kept.extend(accepted);
    }
    kept
}

/// Back-projects per-tile detections and merges them. Boxes that collapse
/// when clipped to the source image are dropped.
pub fn merge_tile_detections(
    tiles: &[RectifiedTile],
    dets: &[Detection],
    source_width: u32,
    source_height: u32,
    iou_threshold: f64,
) -> Result<Vec<Detection>, DetectError> {
    let mut pool = Vec::with_capacity(dets.len());
    for tile in tiles {
        let space = FrameSpace::Tile { plane: tile.spec.plane_index, i: tile.spec.i, j: tile.spec.j };
        let inverse = tile_inverse(&tile.spec)?;
        for d in dets.iter().filter(|d| d.frame_space == space) {
            match backproject_detection(d, &inverse, source_width, source_height) {
                Ok(b) => pool.push(b),
                Err(DetectError::DegenerateBox) => log::debug!("dropping degenerate back-projected box {:?}", d.bbox),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(extended_nms(&pool, iou_threshold))
}

/// The whole source image as a single tile with identity homography.
pub fn identity_tile(image: &RgbImage) -> RectifiedTile {
    RectifiedTile {
        image: image.clone(),
        mask: vec![true; (image.width() * image.height()) as usize],
        spec: TileSpec {
            plane_index: 0,
            i: 1,
            j: 1,
            homography: Homography::identity(),
            out_height: image.height(),
            out_width: image.width(),
        },
    }
}

/// Detects directly on the unrectified image.
pub fn detect_baseline(image: &RgbImage, backend: &mut dyn DetectorBackend) -> Result<Vec<Detection>, DetectError> {
    let tile = identity_tile(image);
    let dets = detect_tiles(std::slice::from_ref(&tile), backend)?;
    Ok(dets.into_iter().map(|d| Detection { frame_space: FrameSpace::Original, ..d }).collect())
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DetectError + '_ {
    move |source| DetectError::Io { path: path.to_path_buf(), source }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: u32, score: f64, x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection::original(class_id, score, BBox::new(x, y, w, h))
    }

    fn spec_with(h: Homography) -> TileSpec {
        TileSpec { plane_index: 0, i: 1, j: 1, homography: h, out_height: 720, out_width: 1280 }
    }

    #[test]
    fn identity_backprojection_is_noop() {
        let d = det(1, 0.7, 10.0, 20.0, 30.0, 40.0);
        let out = backproject(&[d], &spec_with(Homography::identity()), 1280, 720).unwrap();
        assert_eq!(out[0].bbox, d.bbox);
        assert_eq!((out[0].class_id, out[0].score), (1, 0.7));
    }

    #[test]
    fn translation_backprojection_shifts_by_negated_offset() {
        let d = det(0, 0.5, 100.0, 50.0, 20.0, 10.0);
        let out = backproject(&[d], &spec_with(Homography::translation(-30.0, 12.0)), 1280, 720).unwrap();
        let b = out[0].bbox;
        assert!((b.x - 130.0).abs() < 1e-9 && (b.y - 38.0).abs() < 1e-9);
        assert!((b.w - 20.0).abs() < 1e-9 && (b.h - 10.0).abs() < 1e-9);
    }

    #[test]
    fn box_outside_source_is_degenerate() {
        let d = det(0, 0.5, 10.0, 10.0, 5.0, 5.0);
        let err = backproject(&[d], &spec_with(Homography::translation(5000.0, 0.0)), 1280, 720).unwrap_err();
        assert!(matches!(err, DetectError::DegenerateBox));
    }

    #[test]
    fn round_trip_through_random_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = Matrix3::new(
                rng.random_range(0.7..1.3),
                rng.random_range(-0.2..0.2),
                rng.random_range(-50.0..50.0),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.7..1.3),
                rng.random_range(-50.0..50.0),
                rng.random_range(-2e-4..2e-4),
                rng.random_range(-2e-4..2e-4),
                1.0,
            );
            let h = Homography::from_matrix(m).unwrap();
            let b = BBox::new(rng.random_range(300.0..700.0), rng.random_range(200.0..400.0), 80.0, 60.0);
            let mapped: Vec<(f64, f64)> = b
                .corners()
                .iter()
                .map(|&(x, y)| {
                    let p = h.apply(&Pixel::new(x, y)).unwrap();
                    (p.x, p.y)
                })
                .collect();
            let tile_box = BBox::hull(mapped.clone()).unwrap();
            let back =
                backproject(&[Detection::original(0, 1.0, tile_box)], &spec_with(h), 4000, 4000).unwrap()[0].bbox;
            // Oracle: map the tile-box corners back explicitly and take their hull.
            let inv = m.try_inverse().unwrap();
            let expected = BBox::hull(tile_box.corners().iter().map(|&(x, y)| {
                let q = inv * nalgebra::Vector3::new(x, y, 1.0);
                (q.x / q.z, q.y / q.z)
            }))
            .unwrap();
            for (a, e) in [
                (back.x, expected.x),
                (back.y, expected.y),
                (back.right(), expected.right()),
                (back.bottom(), expected.bottom()),
            ] {
                assert!((a - e).abs() < 1e-6);
            }
            // The original box lies inside the recovered hull.
            assert!(back.x <= b.x + 1e-6 && back.right() >= b.right() - 1e-6);
        }
    }

    #[test]
    fn nms_examples() {
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        let b = det(0, 0.8, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(extended_nms(&[b, a], 0.5), vec![a]);
        let c = det(0, 0.8, 50.0, 50.0, 10.0, 10.0);
        assert_eq!(extended_nms(&[a, c], 0.5).len(), 2);
        let other_class = det(1, 0.8, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(extended_nms(&[a, other_class], 0.5).len(), 2);
        assert!(extended_nms(&[], 0.5).is_empty());
    }

    /// Greedy NMS written as the definition: repeatedly take the top remaining
    /// box under the total order, then discard its overlaps.
    pub(crate) fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut out = Vec::new();
        let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
        classes.sort();
        classes.dedup();
        for c in classes {
            let mut remaining: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            while !remaining.is_empty() {
                let mut best = 0;
                for k in 1..remaining.len() {
                    if nms_order(&remaining[k], &remaining[best]) == std::cmp::Ordering::Less {
                        best = k;
                    }
                }
                let top = remaining.remove(best);
                remaining.retain(|d| crate::bbox::iou(&d.bbox, &top.bbox) < thr);
                out.push(top);
            }
        }
        out
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0u32..3, 0u32..10, 0.0..60.0f64, 0.0..60.0f64, 5.0..30.0f64, 5.0..30.0f64)
                .prop_map(|(c, s, x, y, w, h)| det(c, s as f64 / 10.0, x.round(), y.round(), w.round(), h.round())),
            0..50,
        )
    }

    proptest! {
        #[test]
        fn nms_matches_oracle(dets in arb_dets(), thr in 0.1..0.9f64) {
            prop_assert_eq!(extended_nms(&dets, thr), nms_oracle(&dets, thr));
        }

        #[test]
        fn nms_is_subset_with_low_overlap(dets in arb_dets(), thr in 0.1..0.9f64) {
            let out = extended_nms(&dets, thr);
            for d in &out {
                prop_assert!(dets.contains(d));
            }
            for (k, a) in out.iter().enumerate() {
                for b in &out[k + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(crate::bbox::iou(&a.bbox, &b.bbox) < thr);
                    }
                }
            }
        }

        #[test]
        fn nms_permutation_invariant(dets in arb_dets(), seed in any::<u64>()) {
            let mut shuffled = dets.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in (1..shuffled.len()).rev() {
                shuffled.swap(k, rng.random_range(0..=k));
            }
            prop_assert_eq!(extended_nms(&dets, 0.5), extended_nms(&shuffled, 0.5));
        }

        #[test]
        fn raising_a_kept_score_keeps_it(dets in arb_dets(), pick in any::<prop::sample::Index>()) {
            let out = extended_nms(&dets, 0.5);
            prop_assume!(!out.is_empty());
            let kept = out[pick.index(out.len())];
            let mut boosted = dets.clone();
            let mut target = kept;
            target.score = (kept.score + 0.05).min(1.0);
            for d in boosted.iter_mut() {
                if *d == kept {
                    *d = target;
                    break;
                }
            }
            prop_assert!(extended_nms(&boosted, 0.5).contains(&target));
        }
    }

    struct Fixed(Vec<(u32, f64, BBox)>);

    impl DetectorBackend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn detect_batch(&mut self, tiles: &[TileView<'_>]) -> Result<Vec<RawDetections>, DetectError> {
            Ok(tiles.iter().map(|_| self.0.clone()).collect())
        }
    }

    #[test]
    fn detect_tiles_tags_and_clamps() {
        let mut backend = Fixed(vec![(2, 1.5, BBox::new(-5.0, 2.0, 10.0, 10.0))]);
        assert!(detect_tiles(&[], &mut backend).unwrap().is_empty());
        let mut tile = identity_tile(&RgbImage::new(20, 20));
        tile.spec.plane_index = 1;
        tile.spec.j = 2;
        let dets = detect_tiles(&[tile], &mut backend).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].frame_space, FrameSpace::Tile { plane: 1, i: 1, j: 2 });
        assert_eq!(dets[0].bbox, BBox::new(0.0, 2.0, 5.0, 10.0));
        assert_eq!(dets[0].score, 1.0);
    }

    #[test]
    fn registry_lists_builtins() {
        let r = BackendRegistry::with_builtins();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["reference", "subprocess"]);
        assert!(matches!(r.create("yolo", &BackendOptions::default()), Err(DetectError::UnknownBackend(_))));
        assert!(matches!(r.create("reference", &BackendOptions::default()), Err(DetectError::BackendUnavailable(_))));
    }
}
