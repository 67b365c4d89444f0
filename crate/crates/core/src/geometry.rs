//! Pinhole projection, rigid transforms and planar homographies.
//!
//! Pixel coordinates follow the convention that integer coordinates address
//! pixel centers. Homographies act on pixel coordinates in homogeneous form.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Pixel = Point2<f64>;

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;
/// |det| of a normalized homography below this is considered degenerate.
pub const DEGENERATE_DET: f64 = 1e-9;
const HOMOGENEOUS_EPS: f64 = 1e-12;
const COLLINEAR_EPS: f64 = 1e-6;
const RANK_GAP_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("design matrix is rank deficient (singular gap {0:e})")]
    RankDeficient(f64),
    #[error("degenerate plane: distance {0} too small")]
    DegeneratePlane(f64),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
    #[error("rotation is not orthonormal")]
    NotARotation,
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) || !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point (meters) to pixel coordinates. No clipping.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Pixel, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Inverse of [`project`](Self::project) for a known depth `z`.
    pub fn unproject(&self, px: &Pixel, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new((px.x - self.cx) / self.fx * depth, (px.y - self.cy) / self.fy * depth, depth))
    }

    /// Viewing ray through a pixel, with unit z component.
    pub fn ray(&self, px: &Pixel) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Pose of a child frame in a parent frame: `X_parent = R * X_child + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if err >= 1e-9 || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Axis `i` of the child frame expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation.column(i).into_owned()
    }
}

/// A 3×3 projective map, stored normalized.
///
/// Normalization: divide by the bottom-right entry when its magnitude exceeds
/// 1e-12, otherwise scale to unit Frobenius norm with the first nonzero entry
/// positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    /// Normalizes `m` and rejects degenerate maps.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let matrix = normalize_matrix(&m)?;
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() < DEGENERATE_DET {
            return Err(GeometryError::SingularHomography(det.abs()));
        }
        Ok(Self { matrix })
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { matrix: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn apply(&self, px: &Pixel) -> Result<Pixel, GeometryError> {
        apply_matrix(&self.matrix, px)
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv =
            self.matrix.try_inverse().ok_or(GeometryError::SingularHomography(self.matrix.determinant().abs()))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self, GeometryError> {
        Self::from_matrix(self.matrix * other.matrix)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.matrix;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(v))
    }
}

/// Applies a raw 3×3 matrix with perspective division.
pub fn apply_matrix(m: &Matrix3<f64>, px: &Pixel) -> Result<Pixel, GeometryError> {
    let v = m * Vector3::new(px.x, px.y, 1.0);
    if v.z.abs() <= HOMOGENEOUS_EPS || !v.z.is_finite() {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Pixel::new(v.x / v.z, v.y / v.z))
}

fn normalize_matrix(m: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::SingularHomography(f64::NAN));
    }
    let corner = m[(2, 2)];
    if corner.abs() > HOMOGENEOUS_EPS {
        return Ok(m / corner);
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Err(GeometryError::SingularHomography(0.0));
    }
    // first nonzero entry in row-major order
    let first =
        (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).find(|v| v.abs() > 0.0).unwrap_or(1.0);
    Ok(m / (norm * first.signum()))
}

/// Distance between two homographies after scaling each to unit Frobenius
/// norm with a common sign. Zero iff they are equal up to scale.
pub fn normalized_frobenius_distance(a: &Homography, b: &Homography) -> f64 {
    let na = a.matrix / a.matrix.norm();
    let nb = b.matrix / b.matrix.norm();
    (na - nb).norm().min((na + nb).norm())
}

/// Hartley conditioning: translate the centroid to the origin and scale the
/// mean distance to √2.
fn conditioning(points: &[Pixel]) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean = points.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if mean <= f64::EPSILON * (cx.abs() + cy.abs() + 1.0) {
        return Err(GeometryError::DegenerateConfiguration("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn cross2(o: &Pixel, a: &Pixel, b: &Pixel) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn check_configuration(points: &[Pixel], role: &str) -> Result<(), GeometryError> {
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if (points[i] - points[j]).norm() < COLLINEAR_EPS {
                return Err(GeometryError::DegenerateConfiguration(format!("duplicate {role} points {i} and {j}")));
            }
        }
    }
    if points.len() == 4 {
        for (a, b, c) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
            if cross2(&points[a], &points[b], &points[c]).abs() < COLLINEAR_EPS {
                return Err(GeometryError::DegenerateConfiguration(format!(
                    "{role} points {a}, {b}, {c} are collinear"
                )));
            }
        }
    } else {
        // Overdetermined sets only need to span the plane.
        let (far, _) = points
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, p)| (i, (p - points[0]).norm()))
            .fold((1, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let spread = points.iter().map(|p| cross2(&points[0], &points[far], p).abs()).fold(0.0, f64::max);
        if spread < COLLINEAR_EPS {
            return Err(GeometryError::DegenerateConfiguration(format!("all {role} points are collinear")));
        }
    }
    Ok(())
}

/// Least-squares homography mapping each `source` pixel to its `target`.
///
/// Points are Hartley-conditioned before building the 2n×9 design matrix;
/// the solution is its right singular vector of smallest singular value.
pub fn dlt_homography(correspondences: &[(Pixel, Pixel)]) -> Result<Homography, GeometryError> {
    let n = correspondences.len();
    if n < 4 {
        return Err(GeometryError::DegenerateConfiguration(format!("need at least 4 correspondences, got {n}")));
    }
    let src: Vec<Pixel> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<Pixel> = correspondences.iter().map(|c| c.1).collect();
    let t_src = conditioning(&src)?;
    let t_dst = conditioning(&dst)?;
    let src_n: Vec<Pixel> = src.iter().map(|p| apply_matrix(&t_src, p)).collect::<Result<_, _>>()?;
    let dst_n: Vec<Pixel> = dst.iter().map(|p| apply_matrix(&t_dst, p)).collect::<Result<_, _>>()?;
    check_configuration(&src_n, "source")?;
    check_configuration(&dst_n, "target")?;

    // Pad to at least 9 rows so the thin SVD exposes the full right basis.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src_n.iter().zip(&dst_n).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::RankDeficient(0.0))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = svd.singular_values[order[0]];
    let second = svd.singular_values[order[1]];
    if second - smallest < RANK_GAP_EPS {
        return Err(GeometryError::RankDeficient(second - smallest));
    }
    let mut h: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
    if let Some(first) = h.iter().copied().find(|v| v.abs() > 0.0) {
        if first < 0.0 {
            h.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let h_n = Matrix3::from_row_slice(&h);
    let t_dst_inv = t_dst.try_inverse().ok_or(GeometryError::RankDeficient(0.0))?;
    Homography::from_matrix(t_dst_inv * h_n * t_src)
}

/// Homography induced by the plane `n·X = d` (frame 1) between two views,
/// where `rel` maps frame-1 coordinates into frame 2.
///
/// With this plane convention, `X2 = (R + t nᵀ/d) X1` for points on the plane,
/// so `H = K2 (R + t nᵀ/d) K1⁻¹`.
pub fn closed_form_homography(
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    rel: &RigidTransform,
    normal: &Vector3<f64>,
    distance: f64,
) -> Result<Homography, GeometryError> {
    if distance < MIN_DEPTH {
        return Err(GeometryError::DegeneratePlane(distance));
    }
    let n = normal.normalize();
    let m = rel.rotation + rel.translation * n.transpose() / distance;
    Homography::from_matrix(k2.matrix() * m * k1.inverse_matrix())
}

/// Unit vector along `v`, or `None` for (near) zero input.
pub fn try_normalize(v: &Vector3<f64>) -> Option<Vector3<f64>> {
    let n = v.norm();
    (n > 1e-12).then(|| v / n)
}

/// Orthonormal in-plane basis `(u, v)` with `u × v = normal`.
pub fn plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (helper - normal * normal.dot(&helper)).normalize();
    let v = normal.cross(&u);
    (u, v)
}
