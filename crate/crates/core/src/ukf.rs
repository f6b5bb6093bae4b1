//! Unscented Kalman filter over the joint swarm, body and landmark state.
//!
//! State ordering: `[ψ(α, δ, ω) | μ, packed C̄/S̄ for degrees 2..N |
//! per spacecraft (r, v, C_r) | per deputy (δb m, δḃ m/s) | landmarks]`.
//! Everything after the spacecraft blocks has identity or linear dynamics,
//! which the time update exploits to skip redundant orbit propagations.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::propagate::SPEED_OF_LIGHT;
use crate::dynamics::{clock_phi, clock_q, propagate, ForceModel, GravityField, Integrator, RotationState, SpacecraftState, SunEphemeris};
use crate::dynamics::sh_normalization;
use crate::geometry::{aci_to_acaf, project_camera_frame, Intrinsics};
use crate::stereo::ViewGeometry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UkfError {
    #[error("state dynamics failed: {0}")]
    Dynamics(String),
    #[error("predicted measurement covariance is singular")]
    SingularInnovation,
    #[error("unknown landmark id {0}")]
    UnknownId(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n_spacecraft: usize,
    pub gravity_degree: usize,
    pub n_landmarks: usize,
}

impl StateLayout {
    pub const PSI: usize = 0;
    pub const MU: usize = 3;
    pub const GRAVITY: usize = 4;
    pub const SPACECRAFT_LEN: usize = 7;

    pub fn new(n_spacecraft: usize, gravity_degree: usize) -> Self {
        Self { n_spacecraft, gravity_degree, n_landmarks: 0 }
    }

    pub fn gravity_len(&self) -> usize {
        GravityField::packed_len(self.gravity_degree)
    }

    pub fn spacecraft(&self, i: usize) -> usize {
        Self::GRAVITY + self.gravity_len() + Self::SPACECRAFT_LEN * i
    }

    /// Offset of deputy `i`'s `(δb, δḃ)`; the mothership has none.
    pub fn clock(&self, i: usize) -> Option<usize> {
        (i > 0 && i < self.n_spacecraft).then(|| self.spacecraft(self.n_spacecraft) + 2 * (i - 1))
    }

    /// Length of the prefix with nonlinear dynamics.
    pub fn dynamic_len(&self) -> usize {
        self.spacecraft(self.n_spacecraft)
    }

    pub fn head_len(&self) -> usize {
        self.dynamic_len() + 2 * self.n_spacecraft.saturating_sub(1)
    }

    pub fn landmark(&self, k: usize) -> usize {
        self.head_len() + 3 * k
    }

    pub fn dim(&self) -> usize {
        self.landmark(self.n_landmarks)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = ["alpha", "delta", "omega", "mu"].iter().map(|s| s.to_string()).collect();
        for (n, m, is_s) in GravityField::packed_labels(self.gravity_degree) {
            out.push(format!("{}{}_{}", if is_s { "S" } else { "C" }, n, m));
        }
        for i in 0..self.n_spacecraft {
            for c in ["rx", "ry", "rz", "vx", "vy", "vz", "cr"] {
                out.push(format!("sc{i}_{c}"));
            }
        }
        for i in 1..self.n_spacecraft {
            out.push(format!("sc{i}_db"));
            out.push(format!("sc{i}_dbdot"));
        }
        for k in 0..self.n_landmarks {
            for c in ["x", "y", "z"] {
                out.push(format!("lm{k}_{c}"));
            }
        }
        out
    }
}

/// Known (non-estimated) quantities the filter models depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterModel {
    pub ref_radius: f64,
    /// Prime meridian angle at t = 0.
    pub w0: f64,
    pub sun: SunEphemeris,
    pub area_over_mass: f64,
    pub srp: bool,
    pub third_body: bool,
    pub rk4_substeps: usize,
    pub clock_q1: f64,
    pub clock_q2: f64,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsncConfig {
    pub enabled: bool,
    pub window: usize,
    /// Samples needed before the window estimate replaces the prior.
    pub min_samples: usize,
    /// Initial PSD on every axis (m²/s³); `None` starts at the J2 bound.
    pub initial: Option<f64>,
    pub weighting: AsncWeighting,
}

/// Element weighting of the least-squares projection onto the PSD model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsncWeighting {
    #[default]
    Uniform,
    /// Each element weighted by the inverse of its scatter over the window.
    InverseVariance,
}

impl Default for AsncConfig {
    fn default() -> Self {
        Self { enabled: true, window: 50, min_samples: 5, initial: None, weighting: AsncWeighting::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Lear factor applied to the sigma-point measurement covariance.
    pub underweight: f64,
    pub stereo_inflation: f64,
    pub gravity_degree: usize,
    pub sigma_range: f64,
    pub sigma_doppler: f64,
    pub sigma_px: f64,
    /// Optional per-measurement gate in σ.
    pub innovation_gate: Option<f64>,
    pub asnc: AsncConfig,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
            underweight: 2.0,
            stereo_inflation: 2.0,
            gravity_degree: 4,
            sigma_range: 0.10,
            sigma_doppler: 1e-3,
            sigma_px: 2.0,
            innovation_gate: None,
            asnc: AsncConfig::default(),
        }
    }
}

impl UkfConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.underweight >= 1.0) {
            return Err("underweight factor must be at least 1".into());
        }
        if !(self.stereo_inflation >= 1.0) {
            return Err("stereo inflation must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err("sigma-point alpha must lie in (0, 1]".into());
        }
        if self.gravity_degree < 2 {
            return Err("estimated gravity degree must be at least 2".into());
        }
        if !(self.sigma_range > 0.0 && self.sigma_doppler > 0.0 && self.sigma_px > 0.0) {
            return Err("measurement sigmas must be positive".into());
        }
        if self.asnc.window == 0 {
            return Err("ASNC window must be positive".into());
        }
        Ok(())
    }
}

/// Sigma-point scaling: `γ`, and weights `W_0^m`, `W_0^c`, `W_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaWeights {
    pub gamma: f64,
    pub wm0: f64,
    pub wc0: f64,
    pub wi: f64,
    /// `β − α²`, the coefficient of `e eᵀ` in the centered covariance.
    pub corr: f64,
}

impl SigmaWeights {
    pub fn new(n: usize, alpha: f64, beta: f64, kappa: f64) -> Self {
        let nf = n as f64;
        let lambda = alpha * alpha * (nf + kappa) - nf;
        let c = nf + lambda;
        Self { gamma: c.sqrt(), wm0: lambda / c, wc0: lambda / c + 1.0 - alpha * alpha + beta, wi: 0.5 / c, corr: beta - alpha * alpha }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterEstimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub time: f64,
    pub epoch: usize,
    pub layout: StateLayout,
    /// Database id of each landmark slot.
    pub landmark_ids: Vec<usize>,
}

impl FilterEstimate {
    pub fn rotation(&self, model: &FilterModel) -> RotationState {
        rotation_of(&self.mean, model)
    }

    pub fn spacecraft_state(&self, model: &FilterModel, i: usize) -> SpacecraftState {
        spacecraft_of(&self.layout, &self.mean, model, i)
    }

    pub fn gravity_field(&self, model: &FilterModel) -> GravityField {
        field_of(&self.layout, &self.mean, model)
    }

    pub fn landmark_slot(&self, id: usize) -> Option<usize> {
        self.landmark_ids.iter().position(|x| *x == id)
    }

    pub fn landmark_position(&self, slot: usize) -> Vector3<f64> {
        let k = self.layout.landmark(slot);
        Vector3::new(self.mean[k], self.mean[k + 1], self.mean[k + 2])
    }

    pub fn landmark_covariance(&self, slot: usize) -> Matrix3<f64> {
        let k = self.layout.landmark(slot);
        Matrix3::from_fn(|i, j| self.covariance[(k + i, k + j)])
    }

    /// Pixel model of spacecraft `i` under the current mean.
    pub fn view(&self, model: &FilterModel, i: usize, att: &Matrix3<f64>) -> ViewGeometry {
        let x = &self.mean;
        let p = self.layout.spacecraft(i);
        ViewGeometry {
            intrinsics: model.intrinsics,
            r_aci: Vector3::new(x[p], x[p + 1], x[p + 2]),
            att: *att,
            alpha: x[0],
            delta: x[1],
            w: model.w0 + x[2] * self.time,
            dw_domega: self.time,
            pos_index: p,
            psi_index: StateLayout::PSI,
            spacecraft: i,
        }
    }

    /// Covariance of `[r_i; ψ]`.
    pub fn view_covariance(&self, i: usize) -> Matrix6<f64> {
        let p = self.layout.spacecraft(i);
        let idx = [p, p + 1, p + 2, 0, 1, 2];
        Matrix6::from_fn(|a, b| self.covariance[(idx[a], idx[b])])
    }
}

fn rotation_of(x: &DVector<f64>, model: &FilterModel) -> RotationState {
    RotationState { alpha: x[0], delta: x[1], omega: x[2], w0: model.w0 }
}

fn field_of(layout: &StateLayout, x: &DVector<f64>, model: &FilterModel) -> GravityField {
    let g = StateLayout::GRAVITY;
    GravityField::from_packed(x[StateLayout::MU], model.ref_radius, layout.gravity_degree, &x.as_slice()[g..g + layout.gravity_len()])
}

fn spacecraft_of(layout: &StateLayout, x: &DVector<f64>, model: &FilterModel, i: usize) -> SpacecraftState {
    let p = layout.spacecraft(i);
    SpacecraftState {
        position: Vector3::new(x[p], x[p + 1], x[p + 2]),
        velocity: Vector3::new(x[p + 3], x[p + 4], x[p + 5]),
        cr: x[p + 6],
        area_over_mass: model.area_over_mass,
    }
}

/// Propagated `(r, v)` of every spacecraft for state `x`.
pub fn propagate_orbits(layout: &StateLayout, model: &FilterModel, x: &DVector<f64>, t0: f64, dt: f64) -> Result<Vec<[f64; 6]>, UkfError> {
    let field = field_of(layout, x, model);
    let fm = ForceModel { field: &field, rotation: rotation_of(x, model), sun: model.sun, srp: model.srp, third_body: model.third_body };
    (0..layout.n_spacecraft)
        .map(|i| {
            let s = propagate(&spacecraft_of(layout, x, model, i), &fm, t0, dt, Integrator::Rk4 { substeps: model.rk4_substeps })
                .map_err(|e| UkfError::Dynamics(e.to_string()))?;
            Ok([s.position.x, s.position.y, s.position.z, s.velocity.x, s.velocity.y, s.velocity.z])
        })
        .collect()
}

/// Full state transition. `orbits` supplies precomputed propagated orbit
/// states; otherwise they are propagated from `x`.
pub fn state_transition(
    layout: &StateLayout,
    model: &FilterModel,
    x: &DVector<f64>,
    t0: f64,
    dt: f64,
    orbits: Option<&[[f64; 6]]>,
) -> Result<DVector<f64>, UkfError> {
    let mut y = x.clone();
    let owned;
    let orbits = match orbits {
        Some(o) => o,
        None => {
            owned = propagate_orbits(layout, model, x, t0, dt)?;
            &owned
        }
    };
    for (i, o) in orbits.iter().enumerate() {
        let p = layout.spacecraft(i);
        for k in 0..6 {
            y[p + k] = o[k];
        }
    }
    let phi = clock_phi(dt);
    for i in 1..layout.n_spacecraft {
        let c = layout.clock(i).unwrap();
        let b = phi * Vector2::new(x[c], x[c + 1]);
        y[c] = b.x;
        y[c + 1] = b.y;
    }
    Ok(y)
}

/// Lower Cholesky factor, repairing the matrix by clamping eigenvalues at
/// `1e-12·trace` when the factorization fails. Returns the factor and
/// whether a repair was needed.
pub fn cholesky_repaired(p: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (p + p.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return (c.l(), false);
    }
    let repaired = repair_covariance(&sym);
    match repaired.clone().cholesky() {
        Some(c) => (c.l(), true),
        None => {
            let floor = 1e-12 * repaired.trace().abs().max(1e-300);
            let n = repaired.nrows();
            let c = (repaired + DMatrix::identity(n, n) * floor).cholesky().expect("jittered covariance is positive definite");
            (c.l(), true)
        }
    }
}

/// Symmetric eigenvalue clamp at `1e-12·trace`.
pub fn repair_covariance(p: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let floor = 1e-12 * sym.trace().abs().max(1e-300);
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// White-acceleration noise for one spacecraft with diagonal PSD `q̃`.
pub fn spacecraft_noise(q_tilde: &Vector3<f64>, dt: f64) -> Matrix6<f64> {
    let mut q = Matrix6::zeros();
    for a in 0..3 {
        q[(a, a)] = q_tilde[a] * dt.powi(3) / 3.0;
        q[(a, a + 3)] = q_tilde[a] * dt * dt / 2.0;
        q[(a + 3, a)] = q[(a, a + 3)];
        q[(a + 3, a + 3)] = q_tilde[a] * dt;
    }
    q
}

/// Clock-bias noise for `n_deputies` biases relative to the mothership:
/// `c²(Q_i + Q_1)` on the diagonal blocks and `c² Q_1` off the diagonal.
pub fn clock_bias_noise(n_deputies: usize, q1: f64, q2: f64, dt: f64) -> DMatrix<f64> {
    let q = clock_q(q1, q2, dt) * (SPEED_OF_LIGHT * SPEED_OF_LIGHT);
    let mut out = DMatrix::zeros(2 * n_deputies, 2 * n_deputies);
    for i in 0..n_deputies {
        for j in 0..n_deputies {
            let blk = if i == j { q + q } else { q };
            out.view_mut((2 * i, 2 * j), (2, 2)).copy_from(&blk);
        }
    }
    out
}

/// Process noise for the full state.
pub fn process_noise(layout: &StateLayout, model: &FilterModel, q_tilde: &[Vector3<f64>], dt: f64) -> DMatrix<f64> {
    let n = layout.dim();
    let mut q = DMatrix::zeros(n, n);
    for (i, qt) in q_tilde.iter().enumerate().take(layout.n_spacecraft) {
        let p = layout.spacecraft(i);
        q.view_mut((p, p), (6, 6)).copy_from(&spacecraft_noise(qt, dt));
    }
    if layout.n_spacecraft > 1 {
        let c = layout.clock(1).unwrap();
        let m = 2 * (layout.n_spacecraft - 1);
        q.view_mut((c, c), (m, m)).copy_from(&clock_bias_noise(layout.n_spacecraft - 1, model.clock_q1, model.clock_q2, dt));
    }
    q
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeUpdateInfo {
    pub propagations: usize,
    pub repaired: bool,
}

/// Unscented time update. Sigma points generated from columns at or past
/// the dynamic prefix leave the orbit inputs untouched (the Cholesky factor
/// is lower-triangular), so they reuse the central propagation.
pub fn time_update(
    est: &FilterEstimate,
    dt: f64,
    model: &FilterModel,
    cfg: &UkfConfig,
    q_tilde: &[Vector3<f64>],
) -> Result<(FilterEstimate, TimeUpdateInfo), UkfError> {
    if !(dt > 0.0) {
        return Err(UkfError::Dimension(format!("time step must be positive, got {dt}")));
    }
    let layout = &est.layout;
    let n = layout.dim();
    let w = SigmaWeights::new(n, cfg.alpha, cfg.beta, cfg.kappa);
    let (l, repaired) = cholesky_repaired(&est.covariance);
    let prefix = if layout.n_spacecraft == 0 { 0 } else { layout.dynamic_len() };
    let x = &est.mean;
    let orbit0 = propagate_orbits(layout, model, x, est.time, dt)?;
    let y0 = state_transition(layout, model, x, est.time, dt, Some(&orbit0))?;
    let mut propagations = usize::from(layout.n_spacecraft > 0);
    let mut d = DMatrix::zeros(n, 2 * n);
    for k in 0..n {
        let col = l.column(k) * w.gamma;
        for (s, sign) in [(0usize, 1.0), (1, -1.0)] {
            let xs = x + &col * sign;
            let ys = if k < prefix {
                propagations += 1;
                state_transition(layout, model, &xs, est.time, dt, None)?
            } else {
                state_transition(layout, model, &xs, est.time, dt, Some(&orbit0))?
            };
            d.set_column(2 * k + s, &(ys - &y0));
        }
    }
    let e = d.column_sum() * w.wi;
    let mean = &y0 + &e;
    let mut p = (&d * d.transpose()) * w.wi + &e * e.transpose() * w.corr;
    p += process_noise(layout, model, q_tilde, dt);
    let p = (&p + p.transpose()) * 0.5;
    Ok((
        FilterEstimate { mean, covariance: p, time: est.time + dt, epoch: est.epoch + 1, layout: *layout, landmark_ids: est.landmark_ids.clone() },
        TimeUpdateInfo { propagations, repaired },
    ))
}

/// Append new landmarks with joint covariance `p_ll` (3k×3k) and
/// cross-covariance `cross` (3k×n) against the current state. Only `P_LL`
/// is scaled by the inflation factor: the cross terms carry the regression
/// of landmark error on state error, which inflation must not distort.
/// Landmarks that would make the result indefinite are dropped and returned.
pub fn augment(
    est: &FilterEstimate,
    ids: &[usize],
    positions: &[Vector3<f64>],
    p_ll: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    inflation: f64,
) -> Result<(FilterEstimate, Vec<usize>), UkfError> {
    let k = ids.len();
    let n = est.layout.dim();
    if positions.len() != k || p_ll.shape() != (3 * k, 3 * k) || cross.shape() != (3 * k, n) {
        return Err(UkfError::Dimension("augmentation blocks do not match".into()));
    }
    if k == 0 {
        return Ok((est.clone(), Vec::new()));
    }
    let build = |keep: &[usize]| -> FilterEstimate {
        let m = keep.len();
        let mut mean = DVector::zeros(n + 3 * m);
        mean.rows_mut(0, n).copy_from(&est.mean);
        let mut p = DMatrix::zeros(n + 3 * m, n + 3 * m);
        p.view_mut((0, 0), (n, n)).copy_from(&est.covariance);
        for (a, &ia) in keep.iter().enumerate() {
            mean.fixed_rows_mut::<3>(n + 3 * a).copy_from(&positions[ia]);
            let c = cross.rows(3 * ia, 3);
            p.view_mut((n + 3 * a, 0), (3, n)).copy_from(&c);
            p.view_mut((0, n + 3 * a), (n, 3)).copy_from(&c.transpose());
            for (b, &ib) in keep.iter().enumerate() {
                p.view_mut((n + 3 * a, n + 3 * b), (3, 3)).copy_from(&(p_ll.view((3 * ia, 3 * ib), (3, 3)) * inflation));
            }
        }
        let mut layout = est.layout;
        layout.n_landmarks += m;
        let mut lids = est.landmark_ids.clone();
        lids.extend(keep.iter().map(|&i| ids[i]));
        FilterEstimate { mean, covariance: (&p + p.transpose()) * 0.5, time: est.time, epoch: est.epoch, layout, landmark_ids: lids }
    };
    let all: Vec<usize> = (0..k).collect();
    let candidate = build(&all);
    if is_psd(&candidate.covariance) {
        return Ok((candidate, Vec::new()));
    }
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..k {
        keep.push(i);
        if !is_psd(&build(&keep).covariance) {
            keep.pop();
            dropped.push(ids[i]);
        }
    }
    Ok((build(&keep), dropped))
}

/// PSD test with a `1e-10·trace` tolerance.
pub fn is_psd(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    let tol = 1e-10 * p.trace().abs().max(1e-300);
    (p + DMatrix::identity(n, n) * tol).cholesky().is_some()
}

/// Remove landmarks from the state. Returns the new estimate and the
/// removed `(id, mean, covariance)` for write-back.
pub fn retire_from_state(est: &FilterEstimate, ids: &[usize]) -> Result<(FilterEstimate, Vec<(usize, Vector3<f64>, Matrix3<f64>)>), UkfError> {
    let mut slots = Vec::new();
    for &id in ids {
        slots.push(est.landmark_slot(id).ok_or(UkfError::UnknownId(id))?);
    }
    let removed: Vec<_> = slots.iter().map(|&s| (est.landmark_ids[s], est.landmark_position(s), est.landmark_covariance(s))).collect();
    let keep_slots: Vec<usize> = (0..est.layout.n_landmarks).filter(|s| !slots.contains(s)).collect();
    let head = est.layout.head_len();
    let mut idx: Vec<usize> = (0..head).collect();
    for &s in &keep_slots {
        let k = est.layout.landmark(s);
        idx.extend([k, k + 1, k + 2]);
    }
    let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| est.mean[i]));
    let cov = est.covariance.select_rows(&idx).select_columns(&idx);
    let mut layout = est.layout;
    layout.n_landmarks = keep_slots.len();
    let landmark_ids = keep_slots.iter().map(|&s| est.landmark_ids[s]).collect();
    Ok((FilterEstimate { mean, covariance: cov, time: est.time, epoch: est.epoch, layout, landmark_ids }, removed))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    /// One-way pseudorange from `from` to `to` (m).
    Range { from: usize, to: usize, value: f64 },
    /// One-way range rate (m/s).
    RangeRate { from: usize, to: usize, value: f64 },
    /// Keypoint of a tracked landmark, with the star-tracker attitude.
    Pixel { landmark: usize, spacecraft: usize, pixel: Vector2<f64>, att: Matrix3<f64> },
}

impl Measurement {
    pub fn dim(&self) -> usize {
        match self {
            Measurement::Pixel { .. } => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Measurement::Range { .. } => "range",
            Measurement::RangeRate { .. } => "range_rate",
            Measurement::Pixel { .. } => "pixel",
        }
    }
}

fn clock_bias(layout: &StateLayout, x: &DVector<f64>, i: usize) -> (f64, f64) {
    layout.clock(i).map_or((0.0, 0.0), |c| (x[c], x[c + 1]))
}

/// Predicted value of one measurement; `acaf` is `M(α, δ, W)` for `x`.
fn predict(
    meas: &Measurement,
    layout: &StateLayout,
    x: &DVector<f64>,
    acaf: &Matrix3<f64>,
    slots: &HashMap<usize, usize>,
    k: &Intrinsics,
    out: &mut [f64],
) -> bool {
    let pos = |i: usize| {
        let p = layout.spacecraft(i);
        (Vector3::new(x[p], x[p + 1], x[p + 2]), Vector3::new(x[p + 3], x[p + 4], x[p + 5]))
    };
    match meas {
        Measurement::Range { from, to, .. } => {
            let ((ri, _), (rj, _)) = (pos(*from), pos(*to));
            out[0] = (rj - ri).norm() + clock_bias(layout, x, *to).0 - clock_bias(layout, x, *from).0;
            true
        }
        Measurement::RangeRate { from, to, .. } => {
            let ((ri, vi), (rj, vj)) = (pos(*from), pos(*to));
            let rho = rj - ri;
            out[0] = (vj - vi).dot(&(rho / rho.norm())) + clock_bias(layout, x, *to).1 - clock_bias(layout, x, *from).1;
            true
        }
        Measurement::Pixel { landmark, spacecraft, att, .. } => {
            let Some(&slot) = slots.get(landmark) else { return false };
            let l = layout.landmark(slot);
            let lm = Vector3::new(x[l], x[l + 1], x[l + 2]);
            let (r, _) = pos(*spacecraft);
            let pc = att * (acaf.transpose() * lm - r);
            match project_camera_frame(k, &pc) {
                Ok(px) => {
                    out[0] = px.u;
                    out[1] = px.v;
                    true
                }
                Err(_) => false,
            }
        }
    }
}

fn observed(meas: &Measurement, out: &mut [f64]) {
    match meas {
        Measurement::Range { value, .. } | Measurement::RangeRate { value, .. } => out[0] = *value,
        Measurement::Pixel { pixel, .. } => {
            out[0] = pixel.x;
            out[1] = pixel.y;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InnovationRecord {
    pub epoch: usize,
    pub n_pixel: usize,
    pub n_rf: usize,
    /// Measurements removed by the gate or by failed predictions.
    pub dropped: usize,
    /// Normalized innovation squared over all used components.
    pub nis: f64,
    pub dims: usize,
    /// `(kind, innovation, predicted σ)` per used component.
    pub residuals: Vec<(&'static str, f64, f64)>,
    /// Per spacecraft position/velocity `Δx Δxᵀ − K P_zz Kᵀ`.
    pub mismatch: Vec<Matrix6<f64>>,
}

/// Unscented measurement update with Lear underweighting
/// (`P_zz = f·P_hh + R`).
pub fn measurement_update(
    est: &FilterEstimate,
    meas: &[Measurement],
    model: &FilterModel,
    cfg: &UkfConfig,
) -> Result<(FilterEstimate, InnovationRecord), UkfError> {
    let layout = &est.layout;
    let n = layout.dim();
    let n_sc = layout.n_spacecraft;
    let mut record = InnovationRecord { epoch: est.epoch, mismatch: vec![Matrix6::zeros(); n_sc], ..Default::default() };
    let slots: HashMap<usize, usize> = est.landmark_ids.iter().enumerate().map(|(s, id)| (*id, s)).collect();
    let acaf_of = |x: &DVector<f64>| aci_to_acaf(x[0], x[1], model.w0 + x[2] * est.time);

    // measurements whose prediction fails at the mean are dropped up front
    let acaf0 = acaf_of(&est.mean);
    let mut buf = [0.0; 2];
    let mut used: Vec<&Measurement> = meas.iter().filter(|m| predict(m, layout, &est.mean, &acaf0, &slots, &model.intrinsics, &mut buf)).collect();
    record.dropped = meas.len() - used.len();
    if used.is_empty() {
        return Ok((est.clone(), record));
    }
    let w = SigmaWeights::new(n, cfg.alpha, cfg.beta, cfg.kappa);
    let (l, _) = cholesky_repaired(&est.covariance);
    let dx = {
        let g = &l * w.gamma;
        let mut m = DMatrix::zeros(n, 2 * n);
        for k in 0..n {
            m.set_column(2 * k, &g.column(k));
            m.set_column(2 * k + 1, &(-g.column(k)));
        }
        m
    };

    loop {
        let offsets: Vec<usize> = used
            .iter()
            .scan(0, |acc, m| {
                let o = *acc;
                *acc += m.dim();
                Some(o)
            })
            .collect();
        let mdim: usize = used.iter().map(|m| m.dim()).sum();
        let eval = |x: &DVector<f64>, out: &mut DVector<f64>| -> Vec<bool> {
            let acaf = acaf_of(x);
            used.iter()
                .zip(&offsets)
                .map(|(m, &o)| predict(m, layout, x, &acaf, &slots, &model.intrinsics, &mut out.as_mut_slice()[o..o + m.dim()]))
                .collect()
        };
        let mut z0 = DVector::zeros(mdim);
        eval(&est.mean, &mut z0);
        let mut dz = DMatrix::zeros(mdim, 2 * n);
        let mut ok = vec![true; used.len()];
        let mut zi = DVector::zeros(mdim);
        for c in 0..2 * n {
            let xs = &est.mean + dx.column(c);
            for (o, f) in ok.iter_mut().zip(eval(&xs, &mut zi)) {
                *o &= f;
            }
            dz.set_column(c, &(&zi - &z0));
        }
        if ok.iter().any(|o| !o) {
            let before = used.len();
            used = used.into_iter().zip(&ok).filter(|(_, o)| **o).map(|(m, _)| m).collect();
            record.dropped += before - used.len();
            if used.is_empty() {
                return Ok((est.clone(), record));
            }
            continue;
        }
        let ez = dz.column_sum() * w.wi;
        let zhat = &z0 + &ez;
        let p_hh = (&dz * dz.transpose()) * w.wi + &ez * ez.transpose() * w.corr;
        let mut p_zz = &p_hh * cfg.underweight;
        let mut r_diag = DVector::zeros(mdim);
        let mut z = DVector::zeros(mdim);
        for (m, &o) in used.iter().zip(&offsets) {
            observed(m, &mut z.as_mut_slice()[o..o + m.dim()]);
            let s2 = match m {
                Measurement::Range { .. } => cfg.sigma_range.powi(2),
                Measurement::RangeRate { .. } => cfg.sigma_doppler.powi(2),
                Measurement::Pixel { .. } => cfg.sigma_px.powi(2),
            };
            for r in o..o + m.dim() {
                p_zz[(r, r)] += s2;
                r_diag[r] = s2;
            }
        }
        let nu = &z - &zhat;
        if let Some(gate) = cfg.innovation_gate {
            let bad: Vec<bool> = used
                .iter()
                .zip(&offsets)
                .map(|(m, &o)| (o..o + m.dim()).any(|r| nu[r].abs() > gate * p_zz[(r, r)].sqrt()))
                .collect();
            if bad.iter().any(|b| *b) {
                let before = used.len();
                used = used.into_iter().zip(&bad).filter(|(_, b)| !**b).map(|(m, _)| m).collect();
                record.dropped += before - used.len();
                if used.is_empty() {
                    return Ok((est.clone(), record));
                }
                continue;
            }
        }
        // the state deviations are symmetric, so their weighted mean is zero
        let p_xz = (&dx * dz.transpose()) * w.wi;
        let p_zz = (&p_zz + p_zz.transpose()) * 0.5;
        let chol = p_zz.clone().cholesky().ok_or(UkfError::SingularInnovation)?;
        let k = chol.solve(&p_xz.transpose()).transpose();
        let corr = &k * &nu;
        let mean = &est.mean + &corr;
        let kp = &k * &p_zz;
        let mut p = &est.covariance - &kp * k.transpose();
        p = (&p + p.transpose()) * 0.5;

        record.nis = nu.dot(&chol.solve(&nu));
        record.dims = mdim;
        for (m, &o) in used.iter().zip(&offsets) {
            match m {
                Measurement::Pixel { .. } => record.n_pixel += 1,
                _ => record.n_rf += 1,
            }
            for r in o..o + m.dim() {
                record.residuals.push((m.kind(), nu[r], p_zz[(r, r)].sqrt()));
            }
        }
        // covariance matching against the innovation covariance the data
        // actually has, not the underweighted one used for the gain
        let p_nominal = &p_hh + DMatrix::from_diagonal(&r_diag);
        for i in 0..n_sc {
            let s = layout.spacecraft(i);
            let kb = k.rows(s, 6);
            let d = corr.rows(s, 6);
            let m = &d * d.transpose() - &kb * &p_nominal * kb.transpose();
            record.mismatch[i] = Matrix6::from_fn(|a, b| m[(a, b)]);
        }
        return Ok((
            FilterEstimate { mean, covariance: p, time: est.time, epoch: est.epoch, layout: *layout, landmark_ids: est.landmark_ids.clone() },
            record,
        ));
    }
}

/// `a_max = 3 μ J₂ R² / (2 r⁴)`.
pub fn j2_max_accel(mu: f64, j2: f64, ref_radius: f64, r: f64) -> f64 {
    3.0 * mu * j2 * ref_radius * ref_radius / (2.0 * r.powi(4))
}

/// Adaptive state noise compensation by covariance matching over a
/// sliding window.
#[derive(Clone, Debug, PartialEq)]
pub struct AsncState {
    pub q_tilde: Vec<Vector3<f64>>,
    pub upper: Vec<f64>,
    window: VecDeque<Vec<Matrix6<f64>>>,
    capacity: usize,
    min_samples: usize,
    from_bound: bool,
    weighting: AsncWeighting,
}

impl AsncState {
    pub fn new(n_spacecraft: usize, cfg: &AsncConfig) -> Self {
        Self {
            q_tilde: vec![Vector3::repeat(cfg.initial.unwrap_or(0.0)); n_spacecraft],
            upper: vec![f64::INFINITY; n_spacecraft],
            from_bound: cfg.initial.is_none(),
            weighting: cfg.weighting,
            window: VecDeque::with_capacity(cfg.window),
            capacity: cfg.window,
            min_samples: cfg.min_samples.max(1),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    fn refresh_bound(&mut self, est: &FilterEstimate, model: &FilterModel, dt: f64) {
        let field_j2 = -est.mean[StateLayout::GRAVITY] / sh_normalization(2, 0);
        let mu = est.mean[StateLayout::MU];
        for i in 0..self.q_tilde.len() {
            let r = est.spacecraft_state(model, i).position.norm();
            let a = j2_max_accel(mu, field_j2.max(0.0), model.ref_radius, r);
            self.upper[i] = a * a * dt;
        }
    }

    /// Sets the bound from the initial estimate and, unless an initial PSD
    /// was configured, starts every axis at it.
    pub fn prime(&mut self, est: &FilterEstimate, model: &FilterModel, dt: f64) {
        self.refresh_bound(est, model, dt);
        if self.from_bound {
            for (q, u) in self.q_tilde.iter_mut().zip(&self.upper) {
                *q = Vector3::repeat(*u);
            }
        }
    }

    /// Fold in one epoch. Epochs without pixel measurements are skipped.
    /// `q_used` is the PSD applied in the preceding time update.
    pub fn update(&mut self, record: &InnovationRecord, est: &FilterEstimate, model: &FilterModel, q_used: &[Vector3<f64>], dt: f64) {
        self.refresh_bound(est, model, dt);
        if record.n_pixel == 0 {
            return;
        }
        let sample: Vec<Matrix6<f64>> =
            record.mismatch.iter().zip(q_used).map(|(m, q)| m + spacecraft_noise(q, dt)).collect();
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        if self.window.len() < self.min_samples {
            for (q, u) in self.q_tilde.iter_mut().zip(&self.upper) {
                *q = q.map(|v| v.clamp(0.0, *u));
            }
            return;
        }
        let s = [dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt];
        let n = self.window.len() as f64;
        for i in 0..self.q_tilde.len() {
            let mean = self.window.iter().map(|w| w[i]).fold(Matrix6::zeros(), |a, b| a + b) / n;
            for a in 0..3 {
                let idx = [(a, a), (a, a + 3), (a + 3, a), (a + 3, a + 3)];
                let (mut num, mut den) = (0.0, 0.0);
                for (&(r, c), sk) in idx.iter().zip(&s) {
                    let wk = match self.weighting {
                        AsncWeighting::Uniform => 1.0,
                        AsncWeighting::InverseVariance => {
                            let var = self.window.iter().map(|w| (w[i][(r, c)] - mean[(r, c)]).powi(2)).sum::<f64>() / n;
                            1.0 / var.max(f64::MIN_POSITIVE.sqrt() * sk * sk)
                        }
                    };
                    num += wk * sk * mean[(r, c)];
                    den += wk * sk * sk;
                }
                self.q_tilde[i][a] = (num / den).clamp(0.0, self.upper[i]);
            }
        }
    }
}

/// NEES `eᵀ P⁻¹ e`, `None` if `P` is not positive definite.
pub fn nees(err: &DVector<f64>, p: &DMatrix<f64>) -> Option<f64> {
    let c = p.clone().cholesky()?;
    Some(err.dot(&c.solve(err)))
}

/// Sub-covariance on the given indices.
pub fn sub_covariance(p: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    p.select_rows(idx).select_columns(idx)
}

pub fn clock_block(x: &DVector<f64>, layout: &StateLayout, i: usize) -> Option<Matrix2<f64>> {
    layout.clock(i).map(|c| Matrix2::new(x[c], 0.0, 0.0, x[c + 1]))
}
