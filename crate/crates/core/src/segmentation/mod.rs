//! Dominant-plane extraction from organized point clouds.
//!
//! Planes are found by RANSAC, refit by total least squares on their consensus
//! set, oriented so the normal points away from the camera origin, and given a
//! convex boundary polygon. Repeated extraction peels planes off the cloud
//! until too few points remain.

mod extractor;
mod hull;
mod ransac;

pub use extractor::{PlaneExtractor, PlaneExtractorRegistry, RansacExtractor};
pub use hull::convex_hull_ccw;
pub use ransac::{fit_plane_least_squares, ransac_plane};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::plane_basis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("insufficient valid points ({0}) for plane fitting")]
    InsufficientPoints(usize),
    #[error("no plane consensus (best inlier fraction {0:.3})")]
    NoConsensus(f64),
    #[error("cannot orient normal: plane passes through the camera origin")]
    DegenerateCentroid,
    #[error("plane inliers are collinear; no boundary polygon")]
    DegenerateHull,
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("unknown plane extractor '{0}'")]
    UnknownExtractor(String),
}

/// Point cloud in row-major correspondence with an image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    /// Builds a cloud; points with non-positive or non-finite z are marked invalid.
    pub fn new(width: usize, height: usize, points: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), width * height, "point count must equal width * height");
        let valid = points.iter().map(|p| p.z > 0.0 && p.iter().all(|v| v.is_finite())).collect();
        Self { width, height, points, valid }
    }

    /// Unorganized cloud stored as a single row.
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        Self::new(n, 1, points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i)).collect()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Plane `normal · X = distance` with its support in the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub centroid: Vector3<f64>,
    /// Convex polygon on the plane, counter-clockwise seen from the +normal side.
    pub boundary: Vec<Vector3<f64>>,
    pub inlier_indices: Vec<usize>,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.distance
    }

    /// Orthogonal projection onto the plane.
    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * self.signed_distance(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationConfig {
    /// Max point-to-plane distance for an inlier, meters.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    /// Minimum consensus fraction (of the points searched) to accept a plane.
    pub min_inlier_fraction: f64,
    /// Extraction stops once fewer than this fraction of the initial valid points remain.
    pub stop_fraction: f64,
    pub max_planes: usize,
    pub ground_filter_enabled: bool,
    pub ground_axis: Vector3<f64>,
    pub ground_angle_threshold_deg: f64,
    pub rng_seed: u64,
    /// Hypotheses are scored on a random subset of at most this many points.
    pub max_score_points: usize,
    /// Success probability used for adaptive early termination.
    pub confidence: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.02,
            max_iterations: 1000,
            min_inlier_fraction: 0.15,
            stop_fraction: 0.10,
            max_planes: 1,
            ground_filter_enabled: true,
            ground_axis: Vector3::new(0.0, -1.0, 0.0),
            ground_angle_threshold_deg: 30.0,
            rng_seed: 0,
            max_score_points: 20_000,
            confidence: 0.999,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let bad = |m: &str| Err(SegmentationError::InvalidConfig(m.to_string()));
        if !(self.stop_fraction > 0.0 && self.stop_fraction < 1.0) {
            return bad("stop_fraction must lie in (0, 1)");
        }
        if self.max_planes < 1 {
            return bad("max_planes must be at least 1");
        }
        if !(self.inlier_threshold > 0.0) {
            return bad("inlier_threshold must be positive");
        }
        if self.max_iterations == 0 || self.max_score_points < 3 {
            return bad("iteration and scoring budgets must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.ground_axis.norm() < 1e-12 {
            return bad("ground_axis must be nonzero");
        }
        Ok(())
    }
}

/// Flips `normal` so that `centroid · normal > 0`.
pub fn unique_normal(normal: &Vector3<f64>, centroid: &Vector3<f64>) -> Result<Vector3<f64>, SegmentationError> {
    let s = centroid.dot(normal);
    if s.abs() < 1e-12 {
        return Err(SegmentationError::DegenerateCentroid);
    }
    Ok(if s > 0.0 { *normal } else { -normal })
}

/// True when the normal lies within the configured angle of ±ground_axis.
pub fn is_ground(plane: &PlaneModel, cfg: &SegmentationConfig) -> bool {
    let axis = cfg.ground_axis.normalize();
    let cos = plane.normal.normalize().dot(&axis).clamp(-1.0, 1.0).abs();
    cos.acos().to_degrees() < cfg.ground_angle_threshold_deg
}

/// Convex boundary of the plane's inliers, lifted back onto the plane.
pub fn boundary_points(plane: &PlaneModel, cloud: &PointCloud) -> Result<Vec<Vector3<f64>>, SegmentationError> {
    if plane.inlier_indices.len() < 3 {
        return Err(SegmentationError::DegenerateHull);
    }
    let (u, v) = plane_basis(&plane.normal);
    let origin = plane.project(&plane.centroid);
    let flat: Vec<(f64, f64)> = plane
        .inlier_indices
        .iter()
        .map(|&i| {
            let d = cloud.points[i] - origin;
            (d.dot(&u), d.dot(&v))
        })
        .collect();
    let hull = convex_hull_ccw(&flat);
    if hull.len() < 3 {
        return Err(SegmentationError::DegenerateHull);
    }
    Ok(hull.iter().map(|&(a, b)| origin + u * a + v * b).collect())
}

/// Repeatedly extracts planes until the remaining valid points drop below
/// `stop_fraction`, `max_planes` non-ground planes are found, or consensus
/// fails. Output is sorted by inlier count, largest first.
pub fn extract_planes(cloud: &PointCloud, cfg: &SegmentationConfig) -> Result<Vec<PlaneModel>, SegmentationError> {
    cfg.validate()?;
    let mut remaining = cloud.valid_indices();
    let total = remaining.len();
    if total < 3 {
        return Err(SegmentationError::InsufficientPoints(total));
    }
    let mut rng = ransac::seeded_rng(cfg.rng_seed);
    let mut planes = Vec::new();
    // Ground planes do not count toward max_planes, so bound the attempts.
    let max_attempts = cfg.max_planes + 8;
    for attempt in 0..max_attempts {
        if planes.len() >= cfg.max_planes || (remaining.len() as f64) < cfg.stop_fraction * total as f64 {
            break;
        }
        let plane = match ransac::ransac_on_indices(cloud, &remaining, cfg, &mut rng) {
            Ok(p) => p,
            Err(e @ SegmentationError::InsufficientPoints(_)) if attempt == 0 => return Err(e),
            Err(e) => {
                log::debug!("plane extraction stopped after {attempt} planes: {e}");
                break;
            }
        };
        let mut taken = vec![false; cloud.len()];
        plane.inlier_indices.iter().for_each(|&i| taken[i] = true);
        remaining.retain(|&i| !taken[i]);
        if cfg.ground_filter_enabled && is_ground(&plane, cfg) {
            log::debug!("dropping ground plane with normal {:?}", plane.normal.as_slice());
            continue;
        }
        planes.push(plane);
    }
    planes.sort_by_key(|p| std::cmp::Reverse(p.inlier_indices.len()));
    Ok(planes)
}
