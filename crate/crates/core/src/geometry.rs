//! Reference frames, elementary rotations, the pinhole camera model and
//! Mahalanobis gating utilities.
//!
//! All quantities are SI. Rotation matrices are passive: `R_b_a * v_a = v_b`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind or at the camera center (w = {0})")]
    BehindCamera(f64),
    #[error("covariance is singular or badly conditioned")]
    SingularCovariance,
    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("unsupported gate dimension {0}")]
    InvalidDimension(usize),
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("frame mismatch: {0:?} cannot compose with {1:?}")]
    FrameMismatch(Frame, Frame),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Frame tags. `Cf(j)` is the camera frame of spacecraft `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// Asteroid-centered, asteroid-fixed.
    Acaf,
    /// Asteroid-centered inertial (equatorial axes).
    Aci,
    /// Asteroid-centered inertial, aligned with the spin pole.
    Acic,
    Cf(usize),
    Rtn,
}

/// An orthonormal rotation between two tagged frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRotation {
    pub matrix: Matrix3<f64>,
    pub from: Frame,
    pub to: Frame,
}

impl FrameRotation {
    pub fn new(matrix: Matrix3<f64>, from: Frame, to: Frame) -> Result<Self, GeometryError> {
        if !is_rotation(&matrix, 1e-9) {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self { matrix, from, to })
    }

    pub fn identity(from: Frame, to: Frame) -> Self {
        Self { matrix: Matrix3::identity(), from, to }
    }

    pub fn inverse(&self) -> Self {
        Self { matrix: self.matrix.transpose(), from: self.to, to: self.from }
    }

    /// `self` maps B to C, `first` maps A to B; the result maps A to C.
    pub fn compose(&self, first: &FrameRotation) -> Result<Self, GeometryError> {
        if first.to != self.from {
            return Err(GeometryError::FrameMismatch(first.to, self.from));
        }
        Ok(Self { matrix: self.matrix * first.matrix, from: first.from, to: self.to })
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let e = m.transpose() * m - Matrix3::identity();
    e.iter().all(|x| x.abs() <= tol) && (m.determinant() - 1.0).abs() <= tol
}

/// Frame rotation about the x axis.
pub fn rot1(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

pub fn rot2(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

pub fn rot3(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn drot1(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}

pub fn drot3(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// ACI to ACAF rotation for pole right ascension `alpha`, declination
/// `delta` and prime meridian angle `w`.
pub fn aci_to_acaf(alpha: f64, delta: f64, w: f64) -> Matrix3<f64> {
    rot3(w) * rot1(std::f64::consts::FRAC_PI_2 - delta) * rot3(std::f64::consts::FRAC_PI_2 + alpha)
}

/// Partials of [`aci_to_acaf`] with respect to `(alpha, delta, w)`.
pub fn aci_to_acaf_partials(alpha: f64, delta: f64, w: f64) -> [Matrix3<f64>; 3] {
    use std::f64::consts::FRAC_PI_2;
    let a = rot3(FRAC_PI_2 + alpha);
    let d = rot1(FRAC_PI_2 - delta);
    let r = rot3(w);
    [r * d * drot3(FRAC_PI_2 + alpha), -(r * drot1(FRAC_PI_2 - delta) * a), drot3(w) * d * a]
}

/// ACI to ACIC rotation: z along the spin pole, x along the node of the
/// body equator on the ACI equator.
pub fn aci_to_acic(alpha: f64, delta: f64) -> Matrix3<f64> {
    rot1(std::f64::consts::FRAC_PI_2 - delta) * rot3(std::f64::consts::FRAC_PI_2 + alpha)
}

/// Rotation from a frame to RTN built from an inertial position and velocity.
pub fn to_rtn(r: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let rh = r.normalize();
    let nh = r.cross(v).normalize();
    let th = nh.cross(&rh);
    Matrix3::from_rows(&[rh.transpose(), th.transpose(), nh.transpose()])
}

/// Pinhole intrinsics. Skew is always zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn square(width: u32, height: u32, focal: f64) -> Self {
        Self { fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(GeometryError::InvalidCamera("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    /// Camera center in the world frame (m).
    pub position: Vector3<f64>,
    /// World to camera-frame rotation.
    pub orientation: FrameRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub w: Option<f64>,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v, w: None }
    }

    pub fn vec(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, position: Vector3<f64>, orientation: FrameRotation) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        if !position.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite position".into()));
        }
        Ok(Self { intrinsics, position, orientation })
    }

    pub fn calibration(&self) -> Matrix3<f64> {
        self.intrinsics.matrix()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.orientation.matrix
    }

    /// Unit boresight (camera z axis) in the world frame.
    pub fn boresight(&self) -> Vector3<f64> {
        self.orientation.matrix.row(2).transpose()
    }

    /// World ray through a pixel: returns the unit direction.
    pub fn ray(&self, px: &PixelPoint) -> Vector3<f64> {
        let k = &self.intrinsics;
        let dc = Vector3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0);
        (self.orientation.matrix.transpose() * dc).normalize()
    }
}

/// `M = K [R | -R r]`.
pub fn projection_matrix(camera: &CameraModel) -> Matrix3x4<f64> {
    let r = camera.rotation();
    let t = -(r * camera.position);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    camera.calibration() * rt
}

pub fn project(camera: &CameraModel, point: &Vector3<f64>) -> Result<PixelPoint, GeometryError> {
    let pc = camera.rotation() * (point - camera.position);
    project_camera_frame(&camera.intrinsics, &pc)
}

pub fn project_camera_frame(k: &Intrinsics, pc: &Vector3<f64>) -> Result<PixelPoint, GeometryError> {
    let w = pc.z;
    if !(w > 0.0) {
        return Err(GeometryError::BehindCamera(w));
    }
    Ok(PixelPoint { u: k.fx * pc.x / w + k.cx, v: k.fy * pc.y / w + k.cy, w: Some(w) })
}

/// Pixel and its Jacobian with respect to the camera-frame point.
pub fn project_camera_frame_jac(k: &Intrinsics, pc: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
    let w = pc.z;
    if !(w > 0.0) {
        return Err(GeometryError::BehindCamera(w));
    }
    let iw = 1.0 / w;
    let uv = Vector2::new(k.fx * pc.x * iw + k.cx, k.fy * pc.y * iw + k.cy);
    let j = Matrix2x3::new(k.fx * iw, 0.0, -k.fx * pc.x * iw * iw, 0.0, k.fy * iw, -k.fy * pc.y * iw * iw);
    Ok((uv, j))
}

/// Multivariate normal belief.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, GeometryError> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(GeometryError::DimensionMismatch(n, covariance.nrows()));
        }
        Ok(Self { mean, covariance })
    }
}

pub const MAX_CONDITION: f64 = 1e12;

pub fn mahalanobis(sample: &DVector<f64>, belief: &GaussianBelief) -> Result<f64, GeometryError> {
    let n = sample.len();
    if belief.mean.len() != n {
        return Err(GeometryError::DimensionMismatch(n, belief.mean.len()));
    }
    let sym = (&belief.covariance + belief.covariance.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(GeometryError::SingularCovariance);
    }
    let chol = sym.cholesky().ok_or(GeometryError::SingularCovariance)?;
    let d = sample - &belief.mean;
    let y = chol.l().solve_lower_triangular(&d).ok_or(GeometryError::SingularCovariance)?;
    Ok(y.norm())
}

/// Precomputed 2-D gate for a predicted pixel with covariance `sigma`.
#[derive(Clone, Copy, Debug)]
pub struct PixelGate {
    pub center: Vector2<f64>,
    inv: Matrix2<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

impl PixelGate {
    pub fn new(center: Vector2<f64>, sigma: Matrix2<f64>) -> Result<Self, GeometryError> {
        let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
        let tr = sigma[(0, 0)] + sigma[(1, 1)];
        if !(det > 0.0) || !(sigma[(0, 0)] > 0.0) || tr * tr / det > 4.0 * MAX_CONDITION {
            return Err(GeometryError::SingularCovariance);
        }
        let inv = Matrix2::new(sigma[(1, 1)], -sigma[(0, 1)], -sigma[(1, 0)], sigma[(0, 0)]) / det;
        Ok(Self { center, inv, sigma_u: sigma[(0, 0)].sqrt(), sigma_v: sigma[(1, 1)].sqrt() })
    }

    /// Returns `(m, m_u, m_v)`.
    pub fn distances(&self, px: &Vector2<f64>) -> (f64, f64, f64) {
        let d = px - self.center;
        let m2 = (d.transpose() * self.inv * d)[(0, 0)].max(0.0);
        (m2.sqrt(), d.x.abs() / self.sigma_u, d.y.abs() / self.sigma_v)
    }
}

/// Gate threshold: two-sided standard normal quantile for one dimension,
/// `sqrt(-2 ln p)` for two.
pub fn mahalanobis_threshold(p_m: f64, dims: usize) -> Result<f64, GeometryError> {
    if !(p_m > 0.0 && p_m <= 1.0) {
        return Err(GeometryError::InvalidProbability(p_m));
    }
    match dims {
        1 => {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            Ok(n.inverse_cdf(1.0 - p_m / 2.0).max(0.0))
        }
        2 => Ok((-2.0 * p_m.ln()).max(0.0).sqrt()),
        d => Err(GeometryError::InvalidDimension(d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        rot3(a) * rot1(b) * rot2(c)
    }

    fn camera(pos: Vector3<f64>, rot: Matrix3<f64>) -> CameraModel {
        CameraModel::new(
            Intrinsics::square(1024, 1024, 2500.0),
            pos,
            FrameRotation::new(rot, Frame::Aci, Frame::Cf(0)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_projection_matrix() {
        let cam = CameraModel {
            intrinsics: Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 10, height: 10 },
            position: Vector3::zeros(),
            orientation: FrameRotation::identity(Frame::Aci, Frame::Cf(0)),
        };
        let m = projection_matrix(&cam);
        let mut expect = Matrix3x4::zeros();
        expect.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(m, expect);
    }

    #[test]
    fn boresight_hits_principal_point() {
        let rot = random_rotation(0.3, -1.1, 2.0);
        let cam = camera(Vector3::new(1e4, -2e4, 3e3), rot);
        let p = cam.position + cam.boresight() * 3.7e4;
        let px = project(&cam, &p).unwrap();
        assert!((px.u - 512.0).abs() < 1e-9 && (px.v - 512.0).abs() < 1e-9);
    }

    #[test]
    fn camera_center_is_degenerate() {
        let cam = camera(Vector3::new(1.0, 2.0, 3.0), Matrix3::identity());
        assert!(matches!(project(&cam, &cam.position), Err(GeometryError::BehindCamera(_))));
        assert!(matches!(project(&cam, &Vector3::new(1.0, 2.0, 2.0)), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn projection_matches_elementwise_arithmetic() {
        // Rational-valued camera: R is a permutation with signs so every
        // product below is exact.
        let rot = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0);
        let intr = Intrinsics { fx: 800.0, fy: 640.0, cx: 300.0, cy: 200.0, width: 600, height: 400 };
        let cam = CameraModel::new(intr, Vector3::new(10.0, 2.0, -4.0), FrameRotation::new(rot, Frame::Aci, Frame::Cf(1)).unwrap()).unwrap();
        let l = Vector3::new(-30.0, 6.0, -8.0);
        // Camera frame: x = y-2 = 4, y = -(z+4) = 4, z = -(x-10) = 40.
        let (xc, yc, zc) = (4.0, 4.0, 40.0);
        let u = (800.0 * xc + 300.0 * zc) / zc;
        let v = (640.0 * yc + 200.0 * zc) / zc;
        let px = project(&cam, &l).unwrap();
        assert_eq!((px.u, px.v, px.w), (u, v, Some(zc)));
        let m = projection_matrix(&cam);
        let h = m * l.push(1.0);
        assert!((h.x / h.z - u).abs() < 1e-12 && (h.y / h.z - v).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_examples() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(mahalanobis(&b.mean, &b).unwrap(), 0.0);
        let s = DVector::from_vec(vec![4.0, 6.0]);
        assert!((mahalanobis(&s, &b).unwrap() - 5.0).abs() < 1e-14);
        let sing = GaussianBelief::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(mahalanobis(&s, &sing), Err(GeometryError::SingularCovariance));
    }

    #[test]
    fn mahalanobis_matches_adjugate_inverse() {
        // 3x3 SPD with explicit adjugate inverse.
        let a = Matrix3::new(4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0);
        let det = a.determinant();
        let adj = Matrix3::new(
            a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)],
            a[(0, 2)] * a[(2, 1)] - a[(0, 1)] * a[(2, 2)],
            a[(0, 1)] * a[(1, 2)] - a[(0, 2)] * a[(1, 1)],
            a[(1, 2)] * a[(2, 0)] - a[(1, 0)] * a[(2, 2)],
            a[(0, 0)] * a[(2, 2)] - a[(0, 2)] * a[(2, 0)],
            a[(0, 2)] * a[(1, 0)] - a[(0, 0)] * a[(1, 2)],
            a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)],
            a[(0, 1)] * a[(2, 0)] - a[(0, 0)] * a[(2, 1)],
            a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)],
        );
        let inv = adj / det;
        let d = Vector3::new(0.7, -1.3, 2.2);
        let expect: f64 = (d.transpose() * inv * d)[(0, 0)];
        let expect = expect.sqrt();
        let b = GaussianBelief::new(DVector::zeros(3), DMatrix::from_iterator(3, 3, a.iter().cloned())).unwrap();
        let got = mahalanobis(&DVector::from_iterator(3, d.iter().cloned()), &b).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn pixel_gate_matches_general() {
        let s = Matrix2::new(9.0, 2.5, 2.5, 4.0);
        let g = PixelGate::new(Vector2::new(100.0, 50.0), s).unwrap();
        let p = Vector2::new(104.0, 47.0);
        let b = GaussianBelief::new(DVector::from_vec(vec![100.0, 50.0]), DMatrix::from_row_slice(2, 2, &[9.0, 2.5, 2.5, 4.0])).unwrap();
        let (m, mu, mv) = g.distances(&p);
        assert!((m - mahalanobis(&DVector::from_vec(vec![104.0, 47.0]), &b).unwrap()).abs() < 1e-12);
        assert!((mu - 4.0 / 3.0).abs() < 1e-15 && (mv - 1.5).abs() < 1e-15);
    }

    #[test]
    fn thresholds() {
        let t1 = mahalanobis_threshold(0.001, 1).unwrap();
        let t2 = mahalanobis_threshold(0.001, 2).unwrap();
        assert_eq!(format!("{t1:.3}"), "3.291");
        assert_eq!(format!("{t2:.3}"), "3.717");
        assert_eq!(mahalanobis_threshold(1.0, 2).unwrap(), 0.0);
        assert!(mahalanobis_threshold(0.0, 1).is_err());
        assert!(mahalanobis_threshold(1.5, 2).is_err());
        assert!(mahalanobis_threshold(0.1, 3).is_err());
    }

    #[test]
    fn body_rotation_partials_match_differences() {
        let (a, d, w) = (0.2, 0.3, 1.7);
        let p = aci_to_acaf_partials(a, d, w);
        let h = 1e-6;
        let fd = [
            (aci_to_acaf(a + h, d, w) - aci_to_acaf(a - h, d, w)) / (2.0 * h),
            (aci_to_acaf(a, d + h, w) - aci_to_acaf(a, d - h, w)) / (2.0 * h),
            (aci_to_acaf(a, d, w + h) - aci_to_acaf(a, d, w - h)) / (2.0 * h),
        ];
        for k in 0..3 {
            assert!((p[k] - fd[k]).abs().max() < 1e-9, "partial {k}");
        }
        // Spin pole maps to the body z axis.
        let pole = Vector3::new(d.cos() * a.cos(), d.cos() * a.sin(), d.sin());
        assert!((aci_to_acaf(a, d, w) * pole - Vector3::z()).norm() < 1e-14);
    }

    proptest! {
        #[test]
        fn back_projection_ray_passes_through_point(
            a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64,
            x in -1.0..1.0f64, y in -1.0..1.0f64, depth in 1.0..1e5f64,
        ) {
            let cam = camera(Vector3::new(3e4, -1e4, 5e3), random_rotation(a, b, c));
            let dc = Vector3::new(0.18 * x, 0.18 * y, 1.0) * depth;
            let p = cam.position + cam.rotation().transpose() * dc;
            let px = project(&cam, &p).unwrap();
            let ray = cam.ray(&px);
            let v = p - cam.position;
            let miss = (v - ray * v.dot(&ray)).norm();
            prop_assert!(miss < 1e-9);
        }

        #[test]
        fn mahalanobis_invariant_under_linear_maps(
            seed in proptest::collection::vec(-1.0..1.0f64, 9),
            m in proptest::collection::vec(-1.0..1.0f64, 9),
            d in proptest::collection::vec(-2.0..2.0f64, 3),
        ) {
            let l = DMatrix::from_row_slice(3, 3, &seed) + DMatrix::identity(3, 3) * 2.0;
            let cov = &l * l.transpose();
            let t = DMatrix::from_row_slice(3, 3, &m) + DMatrix::identity(3, 3) * 3.0;
            prop_assume!(t.determinant().abs() > 1e-3);
            let mean = DVector::from_vec(vec![0.5, -0.2, 1.0]);
            let s = &mean + DVector::from_vec(d);
            let b = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
            let m1 = mahalanobis(&s, &b).unwrap();
            let b2 = GaussianBelief::new(&t * &mean, &t * cov * t.transpose()).unwrap();
            let m2 = mahalanobis(&(&t * s), &b2).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-8 * m1.max(1e-12));
        }

        #[test]
        fn rotation_round_trip(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64) {
            let r = FrameRotation::new(random_rotation(a, b, c), Frame::Aci, Frame::Acaf).unwrap();
            let id = r.compose(&r.inverse()).unwrap();
            prop_assert!((id.matrix - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert_eq!(id.from, Frame::Acaf);
        }

        #[test]
        fn thresholds_monotone(p in 1e-9..0.99f64, dp in 1e-6..0.01f64) {
            let q = (p + dp).min(1.0);
            for dims in [1usize, 2] {
                prop_assert!(mahalanobis_threshold(q, dims).unwrap() <= mahalanobis_threshold(p, dims).unwrap());
            }
        }
    }
}
