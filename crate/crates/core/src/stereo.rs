//! Multi-view triangulation and the stereo covariance used to augment the
//! filter with new landmarks.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix4, RowVector4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{aci_to_acaf, aci_to_acaf_partials, project_camera_frame_jac, CameraModel, Frame, FrameRotation, Intrinsics, PixelPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StereoError {
    #[error("degenerate triangulation geometry")]
    DegenerateGeometry,
    #[error("Gauss-Newton did not converge")]
    NonConvergence,
    #[error("point behind camera {0}")]
    BehindCamera(usize),
    #[error("need at least two views")]
    TooFewViews,
    #[error("reprojection RMS {0:.2} px exceeds gate")]
    ReprojectionGate(f64),
}

pub const GN_MAX_ITER: usize = 25;
pub const GN_STEP_TOL: f64 = 1e-8;

/// Pixel measurement model of one spacecraft at one epoch in terms of
/// filter quantities: ACI position `r`, measured ACI→CF attitude, and the
/// body rotation parameters `(α, δ, W)`. For a landmark `L` in ACAF the
/// camera-frame point is `att (M(α,δ,W)ᵀ L − r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGeometry {
    pub intrinsics: Intrinsics,
    pub r_aci: Vector3<f64>,
    pub att: Matrix3<f64>,
    pub alpha: f64,
    pub delta: f64,
    pub w: f64,
    /// ∂W/∂ω (the elapsed time since the meridian epoch).
    pub dw_domega: f64,
    /// Column of the spacecraft position in the filter state.
    pub pos_index: usize,
    /// Column of `(α, δ, ω)` in the filter state.
    pub psi_index: usize,
    pub spacecraft: usize,
}

/// Per-view pixel Jacobians with respect to landmark, spacecraft position
/// and rotation parameters `(α, δ, ω)`.
#[derive(Clone, Copy, Debug)]
pub struct ViewJacobians {
    pub pixel: Vector2<f64>,
    pub d_landmark: Matrix2x3<f64>,
    pub d_position: Matrix2x3<f64>,
    pub d_psi: Matrix2x3<f64>,
}

impl ViewGeometry {
    pub fn acaf_rotation(&self) -> Matrix3<f64> {
        aci_to_acaf(self.alpha, self.delta, self.w)
    }

    pub fn camera(&self) -> CameraModel {
        let m = self.acaf_rotation();
        CameraModel {
            intrinsics: self.intrinsics,
            position: m * self.r_aci,
            orientation: FrameRotation { matrix: self.att * m.transpose(), from: Frame::Acaf, to: Frame::Cf(self.spacecraft) },
        }
    }

    pub fn camera_point(&self, l: &Vector3<f64>) -> Vector3<f64> {
        self.att * (self.acaf_rotation().transpose() * l - self.r_aci)
    }

    pub fn project(&self, l: &Vector3<f64>) -> Result<Vector2<f64>, StereoError> {
        project_camera_frame_jac(&self.intrinsics, &self.camera_point(l))
            .map(|(uv, _)| uv)
            .map_err(|_| StereoError::BehindCamera(self.spacecraft))
    }

    pub fn jacobians(&self, l: &Vector3<f64>) -> Result<ViewJacobians, StereoError> {
        let m = self.acaf_rotation();
        let pc = self.att * (m.transpose() * l - self.r_aci);
        let (pixel, j) = project_camera_frame_jac(&self.intrinsics, &pc).map_err(|_| StereoError::BehindCamera(self.spacecraft))?;
        let d_landmark = j * self.att * m.transpose();
        let d_position = -(j * self.att);
        let parts = aci_to_acaf_partials(self.alpha, self.delta, self.w);
        let mut d_psi = Matrix2x3::zeros();
        for (k, dm) in parts.iter().enumerate() {
            let col = j * self.att * dm.transpose() * l;
            let col = if k == 2 { col * self.dw_domega } else { col };
            d_psi.set_column(k, &col);
        }
        Ok(ViewJacobians { pixel, d_landmark, d_position, d_psi })
    }
}

/// One pixel observation of a candidate landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoObservation {
    pub view: ViewGeometry,
    pub pixel: PixelPoint,
}

fn cameras(obs: &[StereoObservation]) -> Vec<CameraModel> {
    obs.iter().map(|o| o.view.camera()).collect()
}

/// Homogeneous linear (DLT) triangulation in the world frame of the
/// cameras. Coordinates are centered on the camera centroid and scaled by
/// the camera spread for conditioning.
pub fn triangulate_linear(views: &[(CameraModel, PixelPoint)]) -> Result<Vector3<f64>, StereoError> {
    if views.len() < 2 {
        return Err(StereoError::TooFewViews);
    }
    let n = views.len() as f64;
    let centroid = views.iter().map(|(c, _)| c.position).sum::<Vector3<f64>>() / n;
    let spread = views.iter().map(|(c, _)| (c.position - centroid).norm()).fold(0.0, f64::max);
    let scale = if spread > 0.0 { spread } else { 1.0 };
    let mut ata = Matrix4::zeros();
    for (cam, px) in views {
        let k = &cam.intrinsics;
        let a = (px.u - k.cx) / k.fx;
        let b = (px.v - k.cy) / k.fy;
        let r = cam.rotation();
        let d = (cam.position - centroid) / scale;
        for (coef, row) in [(a, 0usize), (b, 1usize)] {
            let g: Vector3<f64> = r.row(2).transpose() * coef - r.row(row).transpose();
            let h = RowVector4::new(g.x, g.y, g.z, -g.dot(&d));
            ata += h.transpose() * h;
        }
    }
    // eigen-decomposition of AᵀA: eigenvalues are squared singular values
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let s = |i: usize| eig.eigenvalues[order[i]].max(0.0).sqrt();
    if s(1) <= 1e-9 * s(3) {
        return Err(StereoError::DegenerateGeometry);
    }
    let x = eig.eigenvectors.column(order[0]);
    if x[3].abs() < 1e-12 * x.norm() {
        return Err(StereoError::DegenerateGeometry);
    }
    Ok(Vector3::new(x[0], x[1], x[2]) / x[3] * scale + centroid)
}

fn residual_and_jacobian(l: &Vector3<f64>, views: &[(CameraModel, PixelPoint)]) -> Result<(DVector<f64>, DMatrix<f64>), StereoError> {
    let mut r = DVector::zeros(2 * views.len());
    let mut j = DMatrix::zeros(2 * views.len(), 3);
    for (i, (cam, px)) in views.iter().enumerate() {
        let pc = cam.rotation() * (l - cam.position);
        let (uv, jp) = project_camera_frame_jac(&cam.intrinsics, &pc).map_err(|_| StereoError::BehindCamera(i))?;
        let jl = jp * cam.rotation();
        r[2 * i] = uv.x - px.u;
        r[2 * i + 1] = uv.y - px.v;
        j.view_mut((2 * i, 0), (2, 3)).copy_from(&jl);
    }
    Ok((r, j))
}

pub fn reprojection_cost(l: &Vector3<f64>, views: &[(CameraModel, PixelPoint)]) -> Result<f64, StereoError> {
    Ok(residual_and_jacobian(l, views)?.0.norm_squared())
}

pub fn reprojection_rms(l: &Vector3<f64>, views: &[(CameraModel, PixelPoint)]) -> Result<f64, StereoError> {
    Ok((reprojection_cost(l, views)? / (2 * views.len()) as f64).sqrt())
}

/// Gauss-Newton refinement of the total squared reprojection error.
/// Steps are halved while the cost rises beyond a roundoff allowance;
/// convergence is judged on the step length. The result is never worse
/// than `initial`.
pub fn triangulate_refine(initial: &Vector3<f64>, views: &[(CameraModel, PixelPoint)]) -> Result<Vector3<f64>, StereoError> {
    let mut l = *initial;
    let (mut r, mut j) = residual_and_jacobian(&l, views)?;
    let initial_cost = r.norm_squared();
    let mut cost = initial_cost;
    for _ in 0..GN_MAX_ITER {
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let step = jtj.cholesky().ok_or(StereoError::DegenerateGeometry)?.solve(&(-g));
        let step = Vector3::new(step[0], step[1], step[2]);
        let allowance = 1e-12 * cost.max(1e-12);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = l + step * t;
            if let Ok((rc, jc)) = residual_and_jacobian(&cand, views) {
                let c = rc.norm_squared();
                if c <= cost + allowance {
                    accepted = Some((cand, rc, jc, c));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, rc, jc, c)) = accepted else {
            return Err(StereoError::NonConvergence);
        };
        let moved = (cand - l).norm();
        l = cand;
        r = rc;
        j = jc;
        cost = c;
        if moved < GN_STEP_TOL {
            return Ok(if cost <= initial_cost { l } else { *initial });
        }
    }
    Err(StereoError::NonConvergence)
}

/// `(A_L, A_x)` stacked over the observations, with `A_x` spanning `n_state`
/// columns.
pub fn stereo_jacobians(l: &Vector3<f64>, obs: &[StereoObservation], n_state: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), StereoError> {
    let mut al = DMatrix::zeros(2 * obs.len(), 3);
    let mut ax = DMatrix::zeros(2 * obs.len(), n_state);
    for (i, o) in obs.iter().enumerate() {
        let jac = o.view.jacobians(l)?;
        al.view_mut((2 * i, 0), (2, 3)).copy_from(&jac.d_landmark);
        if o.view.pos_index + 3 <= n_state {
            let mut blk = ax.view_mut((2 * i, o.view.pos_index), (2, 3));
            blk += jac.d_position;
        }
        if o.view.psi_index + 3 <= n_state {
            let mut blk = ax.view_mut((2 * i, o.view.psi_index), (2, 3));
            blk += jac.d_psi;
        }
    }
    Ok((al, ax))
}

/// Stereo result for one new landmark.
#[derive(Clone, Debug)]
pub struct StereoEstimate {
    pub acaf_position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub cross_covariance: DMatrix<f64>,
    pub spacecraft: Vec<usize>,
    pub pixels: Vec<PixelPoint>,
    pub rms: f64,
}

/// `(X, (A_LᵀR⁻¹A_L)⁻¹, A_x)` with `R = σ² I`.
fn gain(l: &Vector3<f64>, obs: &[StereoObservation], n_state: usize, sigma_px: f64) -> Result<(DMatrix<f64>, Matrix3<f64>, DMatrix<f64>), StereoError> {
    let (al, ax) = stereo_jacobians(l, obs, n_state)?;
    let rinv = 1.0 / (sigma_px * sigma_px);
    let info = al.transpose() * &al * rinv;
    let info3 = Matrix3::from_fn(|i, j| info[(i, j)]);
    let cov = info3.try_inverse().ok_or(StereoError::DegenerateGeometry)?;
    let cov_d = DMatrix::from_fn(3, 3, |i, j| cov[(i, j)]);
    let x = cov_d * al.transpose() * rinv;
    Ok((x, cov, ax))
}

/// `P_L = X A_x P⁻ A_xᵀ Xᵀ + (A_LᵀR⁻¹A_L)⁻¹` and `P_{L,x⁻} = −X A_x P⁻`.
pub fn stereo_covariance(
    l: &Vector3<f64>,
    obs: &[StereoObservation],
    p_minus: &DMatrix<f64>,
    sigma_px: f64,
) -> Result<(Matrix3<f64>, DMatrix<f64>), StereoError> {
    let (x, cov, ax) = gain(l, obs, p_minus.nrows(), sigma_px)?;
    let xa = x * ax;
    let cross = -(&xa * p_minus);
    let pl = -(&cross * xa.transpose()) + DMatrix::from_fn(3, 3, |i, j| cov[(i, j)]);
    let pl = Matrix3::from_fn(|i, j| 0.5 * (pl[(i, j)] + pl[(j, i)]));
    Ok((pl, cross))
}

/// Joint covariance of several new landmarks triangulated from the same
/// prior: `(P_LL (3k×3k), P_{L,x⁻} (3k×n))`. Off-diagonal landmark blocks
/// come from the shared state errors; pixel noise is independent.
pub fn stereo_covariance_joint(
    points: &[(Vector3<f64>, Vec<StereoObservation>)],
    p_minus: &DMatrix<f64>,
    sigma_px: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), StereoError> {
    let n = p_minus.nrows();
    let k = points.len();
    let mut xa_all = DMatrix::zeros(3 * k, n);
    let mut pixel = DMatrix::zeros(3 * k, 3 * k);
    for (i, (l, obs)) in points.iter().enumerate() {
        let (x, cov, ax) = gain(l, obs, n, sigma_px)?;
        xa_all.view_mut((3 * i, 0), (3, n)).copy_from(&(x * ax));
        pixel.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&cov);
    }
    let cross = -(&xa_all * p_minus);
    let mut pll = -(&cross * xa_all.transpose()) + pixel;
    pll = (&pll + pll.transpose()) * 0.5;
    Ok((pll, cross))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoConfig {
    pub sigma_px: f64,
    /// Discard candidates whose refined RMS residual exceeds this (px).
    pub max_rms_px: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self { sigma_px: 2.0, max_rms_px: 8.0 }
    }
}

/// DLT initialization, Gauss-Newton refinement and the residual gate.
pub fn triangulate(obs: &[StereoObservation], cfg: &StereoConfig) -> Result<(Vector3<f64>, f64), StereoError> {
    let views: Vec<(CameraModel, PixelPoint)> = cameras(obs).into_iter().zip(obs.iter().map(|o| o.pixel)).collect();
    let l0 = triangulate_linear(&views)?;
    let l = triangulate_refine(&l0, &views)?;
    let rms = reprojection_rms(&l, &views)?;
    if rms > cfg.max_rms_px {
        return Err(StereoError::ReprojectionGate(rms));
    }
    Ok((l, rms))
}

/// Pixel-noise-only covariance `(A_LᵀR⁻¹A_L)⁻¹`.
pub fn pixel_only_covariance(l: &Vector3<f64>, obs: &[StereoObservation], sigma_px: f64) -> Result<Matrix3<f64>, StereoError> {
    Ok(gain(l, obs, 0, sigma_px)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub pair_trace: f64,
    pub set_trace: f64,
    pub pair_depth_var: f64,
    pub set_depth_var: f64,
}

/// Compares the pixel-only covariance of a view pair against a larger view
/// set on the same target; depth is measured along the first view's boresight.
pub fn wide_baseline_gain(
    l: &Vector3<f64>,
    pair: &[StereoObservation],
    set: &[StereoObservation],
    sigma_px: f64,
) -> Result<BaselineReport, StereoError> {
    let a = pixel_only_covariance(l, pair, sigma_px)?;
    let b = pixel_only_covariance(l, set, sigma_px)?;
    let z = pair[0].view.camera().boresight();
    Ok(BaselineReport {
        pair_trace: a.trace(),
        set_trace: b.trace(),
        pair_depth_var: (z.transpose() * a * z)[(0, 0)],
        set_depth_var: (z.transpose() * b * z)[(0, 0)],
    })
}
