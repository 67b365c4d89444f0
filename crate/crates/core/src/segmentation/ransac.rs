use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{boundary_points, unique_normal, PlaneModel, PointCloud, SegmentationConfig, SegmentationError};

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Total least squares plane through `points`: returns (unit normal, centroid).
/// The normal sign is arbitrary. `None` when fewer than three points or when
/// the points do not span a plane.
pub fn fit_plane_least_squares<'a, I>(points: I) -> Option<(Vector3<f64>, Vector3<f64>)>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
    I::IntoIter: Clone,
{
    let it = points.into_iter();
    let (sum, n) = it.clone().fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    if n < 3 {
        return None;
    }
    let centroid = sum / n as f64;
    let mut cov = Matrix3::zeros();
    for p in it {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // A plane needs two non-vanishing in-plane directions.
    if eig.eigenvalues[order[1]] <= 1e-18 * n as f64 {
        return None;
    }
    let normal = eig.eigenvectors.column(order[0]).normalize();
    Some((normal, centroid))
}

fn plane_from_sample(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let n = n / len;
    Some((n, n.dot(a)))
}

fn count_inliers(cloud: &PointCloud, idx: &[usize], normal: &Vector3<f64>, d: f64, thr: f64) -> usize {
    idx.iter().filter(|&&i| (normal.dot(&cloud.points[i]) - d).abs() < thr).count()
}

fn collect_inliers(cloud: &PointCloud, idx: &[usize], normal: &Vector3<f64>, d: f64, thr: f64) -> Vec<usize> {
    idx.iter().copied().filter(|&i| (normal.dot(&cloud.points[i]) - d).abs() < thr).collect()
}

/// Single RANSAC plane over all valid points of the cloud.
pub fn ransac_plane(cloud: &PointCloud, cfg: &SegmentationConfig) -> Result<PlaneModel, SegmentationError> {
    cfg.validate()?;
    let candidates = cloud.valid_indices();
    let mut rng = seeded_rng(cfg.rng_seed);
    ransac_on_indices(cloud, &candidates, cfg, &mut rng)
}

pub(crate) fn ransac_on_indices(
    cloud: &PointCloud,
    candidates: &[usize],
    cfg: &SegmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlaneModel, SegmentationError> {
    if candidates.len() < 3 {
        return Err(SegmentationError::InsufficientPoints(candidates.len()));
    }
    // Hypotheses are scored on a fixed random subset to bound the cost per iteration.
    let scoring: Vec<usize> = if candidates.len() > cfg.max_score_points {
        let mut picked = index::sample(rng, candidates.len(), cfg.max_score_points).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| candidates[k]).collect()
    } else {
        candidates.to_vec()
    };

    let mut best: Option<(Vector3<f64>, f64, usize)> = None;
    let mut required = cfg.max_iterations as f64;
    let mut iter = 0usize;
    while iter < cfg.max_iterations && (iter as f64) < required {
        iter += 1;
        let s = index::sample(rng, scoring.len(), 3);
        let (a, b, c) = (
            &cloud.points[scoring[s.index(0)]],
            &cloud.points[scoring[s.index(1)]],
            &cloud.points[scoring[s.index(2)]],
        );
        let Some((normal, d)) = plane_from_sample(a, b, c) else {
            continue;
        };
        let count = count_inliers(cloud, &scoring, &normal, d, cfg.inlier_threshold);
        if best.is_none_or(|(_, _, c)| count > c) {
            best = Some((normal, d, count));
            let w = count as f64 / scoring.len() as f64;
            let miss = 1.0 - w.powi(3);
            required = if miss <= f64::EPSILON { 0.0 } else { ((1.0 - cfg.confidence).ln() / miss.ln()).ceil() };
        }
    }
    let Some((normal, d, count)) = best else {
        return Err(SegmentationError::NoConsensus(0.0));
    };
    let fraction = count as f64 / scoring.len() as f64;
    if fraction < cfg.min_inlier_fraction {
        return Err(SegmentationError::NoConsensus(fraction));
    }

    // Refit on the full consensus set, then re-select inliers against the refit.
    let mut inliers = collect_inliers(cloud, candidates, &normal, d, cfg.inlier_threshold);
    let (mut n, mut centroid) = (normal, Vector3::zeros());
    for _ in 0..2 {
        let Some((fit_n, fit_c)) = fit_plane_least_squares(inliers.iter().map(|&i| &cloud.points[i])) else {
            return Err(SegmentationError::NoConsensus(fraction));
        };
        let refit = collect_inliers(cloud, candidates, &fit_n, fit_n.dot(&fit_c), cfg.inlier_threshold);
        if refit.len() < 3 {
            break;
        }
        n = fit_n;
        inliers = refit;
        centroid = inliers.iter().fold(Vector3::zeros(), |s, &i| s + cloud.points[i]) / inliers.len() as f64;
    }
    if inliers.len() < 3 || centroid == Vector3::zeros() {
        return Err(SegmentationError::NoConsensus(fraction));
    }
    let final_fraction = inliers.len() as f64 / candidates.len() as f64;
    if final_fraction < cfg.min_inlier_fraction {
        return Err(SegmentationError::NoConsensus(final_fraction));
    }
    let normal = unique_normal(&n, &centroid)?;
    let distance = normal.dot(&centroid);
    // Distance is recomputed from the oriented refit; drop any point that the
    // tiny shift pushes past the threshold.
    inliers.retain(|&i| (normal.dot(&cloud.points[i]) - distance).abs() < cfg.inlier_threshold);
    let mut plane = PlaneModel { normal, distance, centroid, boundary: Vec::new(), inlier_indices: inliers };
    plane.boundary = boundary_points(&plane, cloud)?;
    Ok(plane)
}
