//! Global shape reconstruction: spherical-harmonic radial function fitted
//! to landmark positions with power-law Tikhonov regularization and a GCV
//! choice of the regularization weight.
//!
//! Coefficient vector layout (length `(N+1)²`): all Ā in degree-major order
//! `Ā00, Ā10, Ā11, Ā20, …, ĀNN`, followed by `B̄11, B̄21, B̄22, …, B̄NN`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("landmark at the origin")]
    OriginPoint,
    #[error("rank deficient: {cols} coefficients, {rows} points, condition {cond:.3e}")]
    RankDeficient { rows: usize, cols: usize, cond: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("GCV objective has no interior minimum")]
    NoMinimum,
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub const MAX_CONDITION: f64 = 1e12;

pub fn coeff_count(n: usize) -> usize {
    (n + 1) * (n + 1)
}

fn a_count(n: usize) -> usize {
    (n + 1) * (n + 2) / 2
}

pub fn index_a(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

/// Index of B̄_nm (m ≥ 1) in a degree-`max` vector.
pub fn index_b(max: usize, n: usize, m: usize) -> usize {
    debug_assert!(m >= 1 && m <= n);
    a_count(max) + n * (n - 1) / 2 + m - 1
}

/// Degree of every slot of a degree-`max` coefficient vector.
pub fn slot_degrees(max: usize) -> Vec<usize> {
    let mut d = Vec::with_capacity(coeff_count(max));
    for n in 0..=max {
        d.extend(std::iter::repeat(n).take(n + 1));
    }
    for n in 1..=max {
        d.extend(std::iter::repeat(n).take(n));
    }
    d
}

/// Fully normalized associated Legendre functions P̄_nm(x) (no Condon–Shortley
/// phase), `x = sin φ`, packed by [`index_a`].
pub fn legendre_normalized(max: usize, x: f64) -> Vec<f64> {
    let c = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![0.0; a_count(max)];
    p[0] = 1.0;
    for m in 0..=max {
        if m >= 1 {
            let f = if m == 1 { 3f64.sqrt() } else { ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() };
            p[index_a(m, m)] = f * c * p[index_a(m - 1, m - 1)];
        }
        if m < max {
            p[index_a(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * x * p[index_a(m, m)];
        }
        for n in m + 2..=max {
            let (nf, mf) = (n as f64, m as f64);
            let a = ((2.0 * nf - 1.0) * (2.0 * nf + 1.0) / ((nf - mf) * (nf + mf))).sqrt();
            let b = ((2.0 * nf + 1.0) * (nf + mf - 1.0) * (nf - mf - 1.0) / ((nf - mf) * (nf + mf) * (2.0 * nf - 3.0))).sqrt();
            p[index_a(n, m)] = a * x * p[index_a(n - 1, m)] - b * p[index_a(n - 2, m)];
        }
    }
    p
}

/// Basis row at longitude `lam`, latitude `phi`.
pub fn basis_row(max: usize, lam: f64, phi: f64) -> Vec<f64> {
    let p = legendre_normalized(max, phi.sin());
    let mut row = vec![0.0; coeff_count(max)];
    let trig: Vec<(f64, f64)> = (0..=max).map(|m| (m as f64 * lam).sin_cos()).collect();
    for n in 0..=max {
        for m in 0..=n {
            let (s, c) = trig[m];
            row[index_a(n, m)] = p[index_a(n, m)] * c;
            if m >= 1 {
                row[index_b(max, n, m)] = p[index_a(n, m)] * s;
            }
        }
    }
    row
}

pub fn lon_lat(p: &Vector3<f64>) -> (f64, f64) {
    (p.y.atan2(p.x), (p.z / p.norm()).clamp(-1.0, 1.0).asin())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub max_degree: usize,
    pub s: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn zeros(max_degree: usize) -> Self {
        Self { max_degree, s: vec![0.0; coeff_count(max_degree)] }
    }

    pub fn sphere(radius: f64, max_degree: usize) -> Self {
        let mut c = Self::zeros(max_degree);
        c.s[0] = radius;
        c
    }

    pub fn from_vector(max_degree: usize, v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), coeff_count(max_degree));
        Self { max_degree, s: v.iter().cloned().collect() }
    }

    pub fn a(&self, n: usize, m: usize) -> f64 {
        if n > self.max_degree { 0.0 } else { self.s[index_a(n, m)] }
    }

    pub fn b(&self, n: usize, m: usize) -> f64 {
        if n > self.max_degree || m == 0 { 0.0 } else { self.s[index_b(self.max_degree, n, m)] }
    }

    pub fn set(&mut self, n: usize, m: usize, a: f64, b: f64) {
        self.s[index_a(n, m)] = a;
        if m >= 1 {
            let k = index_b(self.max_degree, n, m);
            self.s[k] = b;
        }
    }

    pub fn degree_rms(&self, n: usize) -> f64 {
        let sum: f64 = (0..=n).map(|m| self.a(n, m).powi(2) + self.b(n, m).powi(2)).sum();
        (sum / (2 * n + 1) as f64).sqrt()
    }

    pub fn radius(&self, lam: f64, phi: f64) -> f64 {
        evaluate_shape(self, lam, phi)
    }

    pub fn radius_at(&self, dir: &Vector3<f64>) -> f64 {
        let (l, p) = lon_lat(dir);
        evaluate_shape(self, l, p)
    }
}

pub fn evaluate_shape(s: &ShapeCoefficients, lam: f64, phi: f64) -> f64 {
    let row = basis_row(s.max_degree, lam, phi);
    row.iter().zip(&s.s).map(|(a, b)| a * b).sum()
}

/// RMS of the radial differences between reference points and the model.
pub fn shape_rmse(s: &ShapeCoefficients, reference: &[Vector3<f64>]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let sum: f64 = reference
        .iter()
        .map(|p| {
            let (l, ph) = lon_lat(p);
            (p.norm() - evaluate_shape(s, l, ph)).powi(2)
        })
        .sum();
    (sum / reference.len() as f64).sqrt()
}

/// Design matrix, radii and (λ, φ) per point.
pub fn design_matrix(points: &[Vector3<f64>], max: usize) -> Result<(DMatrix<f64>, DVector<f64>, Vec<(f64, f64)>), ShapeError> {
    let mut a = DMatrix::zeros(points.len(), coeff_count(max));
    let mut r = DVector::zeros(points.len());
    let mut ll = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let n = p.norm();
        if !(n > 0.0) {
            return Err(ShapeError::OriginPoint);
        }
        let (lam, phi) = lon_lat(p);
        for (j, v) in basis_row(max, lam, phi).into_iter().enumerate() {
            a[(i, j)] = v;
        }
        r[i] = n;
        ll.push((lam, phi));
    }
    Ok((a, r, ll))
}

/// Per-landmark radius variances `uᵀ C u`, `u = L/|L|`.
pub fn radius_variances(points: &[Vector3<f64>], covs: &[Matrix3<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        points.len(),
        points.iter().zip(covs).map(|(p, c)| {
            let u = p.normalize();
            (u.transpose() * c * u)[(0, 0)]
        }),
    )
}

/// Full radius covariance from a stacked 3n×3n landmark covariance.
pub fn radius_covariance(points: &[Vector3<f64>], joint: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.len();
    let mut j = DMatrix::zeros(n, 3 * n);
    for (i, p) in points.iter().enumerate() {
        let u = p.normalize();
        for k in 0..3 {
            j[(i, 3 * i + k)] = u[k];
        }
    }
    &j * joint * j.transpose()
}

pub fn fit_unregularized(a: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
    let (rows, cols) = a.shape();
    if cols > rows {
        return Err(ShapeError::RankDeficient { rows, cols, cond: f64::INFINITY });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(ShapeError::RankDeficient { rows, cols, cond });
    }
    svd.solve(r, 0.0).map_err(|e| ShapeError::NumericalFailure(e.to_string()))
}

/// Diagonal of Γ^{1/2}: `deg^α`, with `ε` added to the degree-0 slot.
pub fn tikhonov_matrix(max: usize, alpha: f64, epsilon: f64) -> DVector<f64> {
    DVector::from_iterator(
        coeff_count(max),
        slot_degrees(max).into_iter().map(|n| if n == 0 { epsilon } else { (n as f64).powf(alpha) }),
    )
}

/// ε = 1e-8 × the largest diagonal entry of Γ^{1/2}.
pub fn default_epsilon(max: usize, alpha: f64) -> f64 {
    1e-8 * (max.max(1) as f64).powf(alpha)
}

#[derive(Clone, Debug)]
pub enum RadiusCovariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct ShapeFitProblem {
    pub a: DMatrix<f64>,
    pub r: DVector<f64>,
    pub p: RadiusCovariance,
    pub gamma_half: DVector<f64>,
    pub alpha: f64,
    pub epsilon: f64,
}

/// Variance floor applied to P so it stays positive definite.
pub const VARIANCE_FLOOR: f64 = 1e-6;

impl ShapeFitProblem {
    pub fn new(points: &[Vector3<f64>], p: RadiusCovariance, max: usize, alpha: f64) -> Result<Self, ShapeError> {
        let (a, r, _) = design_matrix(points, max)?;
        let epsilon = default_epsilon(max, alpha);
        Ok(Self { a, r, p, gamma_half: tikhonov_matrix(max, alpha, epsilon), alpha, epsilon })
    }

    pub fn unweighted(points: &[Vector3<f64>], max: usize, alpha: f64) -> Result<Self, ShapeError> {
        Self::new(points, RadiusCovariance::Diagonal(DVector::from_element(points.len(), 1.0)), max, alpha)
    }

    pub fn n_points(&self) -> usize {
        self.a.nrows()
    }

    /// Whitened quantities: `(P^{-1/2} A, P^{-1/2} r)`.
    fn whitened(&self) -> Result<(DMatrix<f64>, DVector<f64>), ShapeError> {
        match &self.p {
            RadiusCovariance::Diagonal(d) => {
                if d.len() != self.r.len() {
                    return Err(ShapeError::Invalid("covariance length".into()));
                }
                let w: Vec<f64> = d.iter().map(|v| 1.0 / v.max(VARIANCE_FLOOR).sqrt()).collect();
                let mut a = self.a.clone();
                let mut r = self.r.clone();
                for (i, wi) in w.iter().enumerate() {
                    a.row_mut(i).scale_mut(*wi);
                    r[i] *= wi;
                }
                Ok((a, r))
            }
            RadiusCovariance::Full(p) => {
                let mut p = (p + p.transpose()) * 0.5;
                for i in 0..p.nrows() {
                    p[(i, i)] = p[(i, i)].max(VARIANCE_FLOOR);
                }
                let l = p.cholesky().ok_or_else(|| ShapeError::NumericalFailure("radius covariance not SPD".into()))?;
                let l = l.l();
                let a = l.solve_lower_triangular(&self.a).ok_or_else(|| ShapeError::NumericalFailure("whitening".into()))?;
                let r = l.solve_lower_triangular(&self.r).ok_or_else(|| ShapeError::NumericalFailure("whitening".into()))?;
                Ok((a, r))
            }
        }
    }

    /// Standard form: `Ā = P^{-1/2} A Γ^{-1/2}`, `r̄ = P^{-1/2} r`.
    pub fn standard_form(&self) -> Result<(DMatrix<f64>, DVector<f64>), ShapeError> {
        if self.gamma_half.iter().any(|g| !(*g > 0.0)) {
            return Err(ShapeError::Invalid("Γ^{1/2} must be positive".into()));
        }
        let (mut a, r) = self.whitened()?;
        for (j, g) in self.gamma_half.iter().enumerate() {
            a.column_mut(j).scale_mut(1.0 / g);
        }
        Ok((a, r))
    }
}

/// Spectral data of the standard-form problem; each GCV evaluation is O(k).
#[derive(Clone, Debug)]
pub struct GcvSpectrum {
    pub n_l: usize,
    pub sigma: Vec<f64>,
    pub beta: Vec<f64>,
    pub r_perp2: f64,
    v_t: DMatrix<f64>,
}

impl GcvSpectrum {
    pub fn new(abar: &DMatrix<f64>, rbar: &DVector<f64>) -> Result<Self, ShapeError> {
        let svd = abar.clone().svd(true, true);
        let u = svd.u.ok_or_else(|| ShapeError::NumericalFailure("SVD".into()))?;
        let v_t = svd.v_t.ok_or_else(|| ShapeError::NumericalFailure("SVD".into()))?;
        let smax = svd.singular_values.max();
        let tol = smax * f64::EPSILON * abar.nrows().max(abar.ncols()) as f64;
        let beta_all = u.transpose() * rbar;
        let mut sigma = Vec::new();
        let mut beta = Vec::new();
        let mut keep = Vec::new();
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > tol {
                sigma.push(s);
                beta.push(beta_all[k]);
                keep.push(k);
            }
        }
        let r_perp2 = (rbar.norm_squared() - beta.iter().map(|b| b * b).sum::<f64>()).max(0.0);
        let v_t = DMatrix::from_fn(keep.len(), v_t.ncols(), |i, j| v_t[(keep[i], j)]);
        Ok(Self { n_l: abar.nrows(), sigma, beta, r_perp2, v_t })
    }

    /// `(V, V', V'')` at `ν̄` (derivatives with respect to ν̄).
    pub fn eval(&self, nu_bar: f64) -> (f64, f64, f64) {
        let nl = self.n_l as f64;
        let mu = nl * nu_bar;
        let (mut num, mut d_num, mut d2_num) = (self.r_perp2, 0.0, 0.0);
        let mut tr = nl - self.sigma.len() as f64;
        let (mut d_tr, mut d2_tr) = (0.0, 0.0);
        for (s, b) in self.sigma.iter().zip(&self.beta) {
            let s2 = s * s;
            let den = s2 + mu;
            let g = mu / den;
            // derivatives with respect to ν̄ carry the factor n_l per order
            let g1 = nl * s2 / (den * den);
            let g2 = -2.0 * nl * nl * s2 / (den * den * den);
            let b2 = b * b;
            num += g * g * b2;
            d_num += 2.0 * g * g1 * b2;
            d2_num += 2.0 * (g1 * g1 + g * g2) * b2;
            tr += g;
            d_tr += g1;
            d2_tr += g2;
        }
        let v = nl * num / (tr * tr);
        let v1 = nl * (d_num / (tr * tr) - 2.0 * num * d_tr / tr.powi(3));
        let v2 = nl
            * (d2_num / (tr * tr) - 4.0 * d_num * d_tr / tr.powi(3) - 2.0 * num * d2_tr / tr.powi(3)
                + 6.0 * num * d_tr * d_tr / tr.powi(4));
        (v, v1, v2)
    }

    /// Standard-form solution `s̄ = V diag(σ/(σ²+ν)) β`.
    pub fn solve(&self, nu: f64) -> DVector<f64> {
        let coef = DVector::from_iterator(self.sigma.len(), self.sigma.iter().zip(&self.beta).map(|(s, b)| s * b / (s * s + nu)));
        self.v_t.transpose() * coef
    }

    pub fn bracket(&self) -> (f64, f64) {
        let nl = self.n_l as f64;
        let lo = self.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.sigma.iter().cloned().fold(0.0, f64::max);
        (lo * lo / nl, hi * hi / nl)
    }
}

/// `ŝ = (AᵀP⁻¹A + νΓ)⁻¹AᵀP⁻¹r`, evaluated through the SVD of the
/// standard-form matrix.
pub fn fit_regularized(problem: &ShapeFitProblem, nu: f64) -> Result<DVector<f64>, ShapeError> {
    if !(nu >= 0.0) {
        return Err(ShapeError::Invalid("ν must be non-negative".into()));
    }
    let (abar, rbar) = problem.standard_form()?;
    let spec = GcvSpectrum::new(&abar, &rbar)?;
    let sbar = spec.solve(nu);
    let s = sbar.component_div(&problem.gamma_half);
    if !s.iter().all(|x| x.is_finite()) {
        return Err(ShapeError::NumericalFailure("non-finite solution".into()));
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcvResult {
    pub nu: f64,
    pub nu_bar: f64,
    pub v: f64,
    pub dv: f64,
    pub d2v: f64,
    /// False when Newton failed and the grid minimizer was returned.
    pub converged: bool,
    pub grid: Vec<(f64, f64)>,
}

pub const GCV_GRID_POINTS: usize = 40;
pub const GCV_NEWTON_MAX: usize = 100;

pub fn gcv_select(problem: &ShapeFitProblem) -> Result<GcvResult, ShapeError> {
    let (abar, rbar) = problem.standard_form()?;
    let spec = GcvSpectrum::new(&abar, &rbar)?;
    gcv_select_spectrum(&spec)
}

pub fn gcv_select_spectrum(spec: &GcvSpectrum) -> Result<GcvResult, ShapeError> {
    if spec.sigma.is_empty() {
        return Err(ShapeError::NoMinimum);
    }
    let (lo, hi) = spec.bracket();
    let (llo, lhi) = (lo.ln(), hi.ln().max(lo.ln() + 1e-6));
    let grid: Vec<(f64, f64)> = (0..GCV_GRID_POINTS)
        .map(|k| {
            let t = llo + (lhi - llo) * k as f64 / (GCV_GRID_POINTS - 1) as f64;
            (t.exp(), spec.eval(t.exp()).0)
        })
        .collect();
    let best = grid
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| v.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .ok_or(ShapeError::NoMinimum)?;

    // Safeguarded Newton on g(t) = dV/dt with t = ln ν̄; its root is the same
    // as V'(ν̄) = 0. The bracket comes from the grid neighbours of the minimum.
    let g_at = |t: f64| {
        let nb = t.exp();
        let (_, v1, v2) = spec.eval(nb);
        (nb * v1, nb * nb * v2 + nb * v1)
    };
    let mut lo = grid[best.saturating_sub(1)].0.ln();
    let mut hi = grid[(best + 1).min(grid.len() - 1)].0.ln();
    // a minimum past either end of the singular-value range: widen by decades
    let mut g_lo = g_at(lo).0;
    for _ in 0..40 {
        if g_lo < 0.0 {
            break;
        }
        lo -= std::f64::consts::LN_10;
        g_lo = g_at(lo).0;
    }
    let mut g_hi = g_at(hi).0;
    for _ in 0..40 {
        if g_hi > 0.0 {
            break;
        }
        hi += std::f64::consts::LN_10;
        g_hi = g_at(hi).0;
    }
    let mut converged = false;
    let mut t = grid[best].0.ln();
    if g_lo < 0.0 && g_hi > 0.0 {
        for _ in 0..GCV_NEWTON_MAX {
            let (g, h) = g_at(t);
            if g == 0.0 {
                break;
            }
            if g < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = t - g / h;
            let next = if h > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let stalled = (next - t).abs() <= 4.0 * f64::EPSILON * t.abs().max(1.0);
            t = next;
            if stalled || hi - lo <= 4.0 * f64::EPSILON * t.abs().max(1.0) {
                break;
            }
        }
        converged = spec.eval(t.exp()).2 > 0.0;
    }
    if !converged {
        log::warn!("GCV Newton refinement did not converge; using the grid minimizer");
        let nb = grid[best].0;
        let (v, v1, v2) = spec.eval(nb);
        return Ok(GcvResult { nu: nb * spec.n_l as f64, nu_bar: nb, v, dv: v1, d2v: v2, converged: false, grid });
    }
    let nb = t.exp();
    let (v, v1, v2) = spec.eval(nb);
    Ok(GcvResult { nu: nb * spec.n_l as f64, nu_bar: nb, v, dv: v1, d2v: v2, converged: true, grid })
}

/// Power-law envelope check for GCV undersmoothing. Fits `log σ(n)` against
/// `log n` on the lower half of the degrees and reports any degree that
/// exceeds the envelope by more than 10×.
pub fn spectrum_warning(coeffs: &ShapeCoefficients) -> Option<String> {
    let nmax = coeffs.max_degree;
    if nmax < 4 {
        return None;
    }
    let fit_top = (nmax / 2).max(3);
    let pts: Vec<(f64, f64)> =
        (1..=fit_top).filter_map(|n| { let s = coeffs.degree_rms(n); (s > 0.0).then(|| ((n as f64).ln(), s.ln())) }).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / k, sy / k);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    for n in fit_top + 1..=nmax {
        let env = (icpt + slope * (n as f64).ln()).exp();
        if coeffs.degree_rms(n) > 10.0 * env {
            return Some(format!(
                "degree {n} RMS {:.3e} exceeds 10x the power-law envelope {:.3e}; GCV likely undersmoothed, consider a lower maximum degree",
                coeffs.degree_rms(n),
                env
            ));
        }
    }
    None
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeFit {
    pub coefficients: ShapeCoefficients,
    pub alpha: f64,
    pub nu: f64,
    pub gcv: Option<GcvResult>,
    pub warning: Option<String>,
}

/// Regularized fit with GCV-selected weight.
pub fn fit_shape(problem: &ShapeFitProblem) -> Result<ShapeFit, ShapeError> {
    let (abar, rbar) = problem.standard_form()?;
    let spec = GcvSpectrum::new(&abar, &rbar)?;
    let gcv = gcv_select_spectrum(&spec)?;
    let s = spec.solve(gcv.nu).component_div(&problem.gamma_half);
    let max = (s.len() as f64).sqrt().round() as usize - 1;
    let coefficients = ShapeCoefficients::from_vector(max, &s);
    let warning = spectrum_warning(&coefficients);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(ShapeFit { coefficients, alpha: problem.alpha, nu: gcv.nu, gcv: Some(gcv), warning })
}

/// Shape file: header `N alpha nu`, then `n m Abar Bbar` lines.
pub fn write_shape_file(fit: &ShapeFit) -> String {
    let c = &fit.coefficients;
    let mut out = format!("{} {:.17e} {:.17e}\n", c.max_degree, fit.alpha, fit.nu);
    for n in 0..=c.max_degree {
        for m in 0..=n {
            out.push_str(&format!("{n} {m} {:.17e} {:.17e}\n", c.a(n, m), c.b(n, m)));
        }
    }
    out
}

pub fn parse_shape_file(text: &str) -> Result<(ShapeCoefficients, f64, f64), ShapeError> {
    let bad = |m: &str| ShapeError::Invalid(m.to_string());
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let h: Vec<&str> = lines.next().ok_or_else(|| bad("empty shape file"))?.split_whitespace().collect();
    if h.len() != 3 {
        return Err(bad("header must be `N alpha nu`"));
    }
    let n: usize = h[0].parse().map_err(|_| bad("N"))?;
    let alpha: f64 = h[1].parse().map_err(|_| bad("alpha"))?;
    let nu: f64 = h[2].parse().map_err(|_| bad("nu"))?;
    let mut c = ShapeCoefficients::zeros(n);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("coefficient line"));
        }
        let (dn, dm): (usize, usize) = (f[0].parse().map_err(|_| bad("n"))?, f[1].parse().map_err(|_| bad("m"))?);
        if dn > n || dm > dn {
            return Err(bad("index out of range"));
        }
        c.set(dn, dm, f[2].parse().map_err(|_| bad("Abar"))?, f[3].parse().map_err(|_| bad("Bbar"))?);
    }
    Ok((c, alpha, nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot1, rot3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_body(rng: &mut ChaCha8Rng, n: usize) -> ShapeCoefficients {
        let mut c = ShapeCoefficients::sphere(1000.0, n);
        for d in 1..=n {
            let sd = 100.0 / (d as f64).powf(1.84);
            for m in 0..=d {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                c.set(d, m, sd * a, sd * b);
            }
        }
        c
    }

    fn surface(c: &ShapeCoefficients, dirs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        dirs.iter().map(|d| d * c.radius_at(d)).collect()
    }

    #[test]
    fn legendre_closed_forms_through_degree_four() {
        let kappa = crate::dynamics::sh_normalization;
        for &x in &[-0.93, -0.4, 0.0, 0.27, 0.81] {
            let c = (1.0f64 - x * x).sqrt();
            let closed = [
                (0, 0, 1.0),
                (1, 0, x),
                (1, 1, c),
                (2, 0, 0.5 * (3.0 * x * x - 1.0)),
                (2, 1, 3.0 * x * c),
                (2, 2, 3.0 * c * c),
                (3, 0, 0.5 * (5.0 * x.powi(3) - 3.0 * x)),
                (3, 1, 1.5 * c * (5.0 * x * x - 1.0)),
                (3, 2, 15.0 * x * c * c),
                (3, 3, 15.0 * c.powi(3)),
                (4, 0, (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0),
                (4, 1, 2.5 * c * (7.0 * x.powi(3) - 3.0 * x)),
                (4, 2, 7.5 * c * c * (7.0 * x * x - 1.0)),
                (4, 3, 105.0 * x * c.powi(3)),
                (4, 4, 105.0 * c.powi(4)),
            ];
            let p = legendre_normalized(4, x);
            for (n, m, v) in closed {
                let expect = v / kappa(n, m);
                assert!((p[index_a(n, m)] - expect).abs() < 1e-10, "P{n}{m}({x})");
            }
        }
    }

    #[test]
    fn layout_and_constant_row() {
        assert_eq!(slot_degrees(3).len(), 16);
        assert_eq!(index_b(3, 1, 1), 10);
        assert_eq!(index_b(3, 3, 3), 15);
        let (a, r, _) = design_matrix(&[Vector3::new(3.0, 4.0, 0.0)], 0).unwrap();
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(r[0], 5.0);
        assert_eq!(design_matrix(&[Vector3::zeros()], 2).unwrap_err(), ShapeError::OriginPoint);
    }

    #[test]
    fn sphere_is_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..100).map(|_| unit(&mut rng) * 8400.0).collect();
        let (a, r, _) = design_matrix(&pts, 4).unwrap();
        let s = fit_unregularized(&a, &r).unwrap();
        assert!((s[0] - 8400.0).abs() < 1e-8);
        assert!(s.iter().skip(1).all(|x| x.abs() < 1e-8));
        let sph = ShapeCoefficients::sphere(8400.0, 4);
        assert!((evaluate_shape(&sph, 0.3, -1.1) - 8400.0).abs() < 1e-12);
    }

    #[test]
    fn unregularized_rank_checks_and_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..20).map(|_| unit(&mut rng) * 10.0).collect();
        let (a, r, _) = design_matrix(&pts, 4).unwrap();
        assert!(matches!(fit_unregularized(&a, &r), Err(ShapeError::RankDeficient { .. })));
        let a = DMatrix::from_fn(30, 6, |_, _| rng.gen_range(-1.0..1.0));
        let r = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
        let s = fit_unregularized(&a, &r).unwrap();
        let qr = a.clone().qr();
        let rhs = qr.q().transpose() * &r;
        let oracle = qr.r().solve_upper_triangular(&rhs).unwrap();
        assert!((s - oracle).norm() < 1e-10);
    }

    #[test]
    fn tikhonov_entries() {
        let g = tikhonov_matrix(16, 1.84, 1e-3);
        let deg = slot_degrees(16);
        assert_eq!(g[0], 1e-3);
        for (k, &n) in deg.iter().enumerate() {
            if n == 1 {
                assert_eq!(g[k], 1.0);
            }
            if n == 16 {
                assert_eq!(g[k], 16f64.powf(1.84));
            }
        }
        let g2 = tikhonov_matrix(3, 2.0, 1e-3);
        assert_eq!(g2[index_a(2, 1)], 4.0);
        assert!((default_epsilon(16, 1.84) - 1e-8 * 16f64.powf(1.84)).abs() < 1e-20);
    }

    #[test]
    fn regularized_limits_and_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let body = random_body(&mut rng, 4);
        let dirs: Vec<_> = (0..80).map(|_| unit(&mut rng)).collect();
        let pts = surface(&body, &dirs);
        let vars = DVector::from_fn(pts.len(), |_, _| rng.gen_range(1.0..4.0));
        let prob = ShapeFitProblem::new(&pts, RadiusCovariance::Diagonal(vars.clone()), 4, 1.84).unwrap();
        // ν = 0 equals the unregularized weighted fit
        let s0 = fit_regularized(&prob, 0.0).unwrap();
        let w = vars.map(|v| 1.0 / v.sqrt());
        let aw = DMatrix::from_fn(prob.a.nrows(), prob.a.ncols(), |i, j| prob.a[(i, j)] * w[i]);
        let rw = prob.r.component_mul(&w);
        let su = fit_unregularized(&aw, &rw).unwrap();
        assert!((&s0 - &su).norm() < 1e-8 * su.norm());
        // dense inverse oracle
        let nu = 0.37;
        let pinv = DMatrix::from_diagonal(&vars.map(|v| 1.0 / v));
        let gamma = DMatrix::from_diagonal(&prob.gamma_half.map(|g| g * g));
        let lhs = prob.a.transpose() * &pinv * &prob.a + gamma * nu;
        let oracle = lhs.try_inverse().unwrap() * prob.a.transpose() * &pinv * &prob.r;
        let s = fit_regularized(&prob, nu).unwrap();
        assert!((&s - &oracle).norm() < 1e-8 * oracle.norm());
        // large ν shrinks everything; degree 0 decays like 1/(ν ε²)
        let big = fit_regularized(&prob, 1e30).unwrap();
        assert!(big.iter().skip(1).all(|x| x.abs() < 1e-20));
        assert!(big[0].abs() < s[0].abs() * 1e-3);
    }

    #[test]
    fn full_covariance_matches_diagonal_when_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<_> = (0..40).map(|_| unit(&mut rng) * rng.gen_range(900.0..1100.0)).collect();
        let vars = DVector::from_fn(pts.len(), |_, _| rng.gen_range(1.0..4.0));
        let p1 = ShapeFitProblem::new(&pts, RadiusCovariance::Diagonal(vars.clone()), 3, 2.0).unwrap();
        let p2 = ShapeFitProblem::new(&pts, RadiusCovariance::Full(DMatrix::from_diagonal(&vars)), 3, 2.0).unwrap();
        let (a, b) = (fit_regularized(&p1, 0.5).unwrap(), fit_regularized(&p2, 0.5).unwrap());
        assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn gcv_limit_and_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let body = random_body(&mut rng, 8);
        let dirs: Vec<_> = (0..300).map(|_| unit(&mut rng)).collect();
        let pts: Vec<_> = surface(&body, &dirs)
            .into_iter()
            .map(|p| { let z: f64 = rng.sample(StandardNormal); p + p.normalize() * 5.0 * z })
            .collect();
        let prob = ShapeFitProblem::unweighted(&pts, 10, 1.84).unwrap();
        let (abar, rbar) = prob.standard_form().unwrap();
        let spec = GcvSpectrum::new(&abar, &rbar).unwrap();
        let vinf = spec.eval(1e40).0;
        let lim = rbar.norm_squared() / prob.n_points() as f64;
        assert!((vinf / lim - 1.0).abs() < 1e-9);
        let g = gcv_select(&prob).unwrap();
        assert!(g.converged);
        assert!(g.dv.abs() < 1e-8 * g.v.abs(), "V' = {} V = {}", g.dv, g.v);
        assert!(g.d2v > 0.0);
    }

    #[test]
    fn regularization_path_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let body = random_body(&mut rng, 6);
        let dirs: Vec<_> = (0..120).map(|_| unit(&mut rng)).collect();
        let pts = surface(&body, &dirs);
        let prob = ShapeFitProblem::unweighted(&pts, 8, 1.84).unwrap();
        let mut last = f64::INFINITY;
        for k in -6..8 {
            let s = fit_regularized(&prob, 10f64.powi(k)).unwrap();
            let norm = s.component_mul(&prob.gamma_half).norm();
            assert!(norm <= last * (1.0 + 1e-12));
            last = norm;
        }
    }

    #[test]
    fn degree_twelve_body_exact_points_tiny_nu() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let body = random_body(&mut rng, 12);
        let dirs: Vec<_> = (0..750).map(|_| unit(&mut rng)).collect();
        let pts = surface(&body, &dirs);
        let prob = ShapeFitProblem::unweighted(&pts, 12, 1.84).unwrap();
        let s = fit_regularized(&prob, 1e-12).unwrap();
        let fit = ShapeCoefficients::from_vector(12, &s);
        let refs: Vec<_> = (0..500).map(|_| unit(&mut rng)).collect();
        let refs = surface(&body, &refs);
        assert!(shape_rmse(&fit, &refs) < 1e-3 * 1000.0);
    }

    #[test]
    fn radius_variance_cases() {
        let p = [Vector3::new(0.0, 0.0, 5.0)];
        assert!((radius_variances(&p, &[Matrix3::identity() * 4.0])[0] - 4.0).abs() < 1e-15);
        let tangential = Matrix3::from_diagonal(&Vector3::new(9.0, 16.0, 0.0));
        assert!(radius_variances(&p, &[tangential])[0].abs() < 1e-15);
        let joint = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 4.0]));
        assert!((radius_covariance(&p, &joint)[(0, 0)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn radius_variance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let p = unit(&mut rng) * 8000.0;
            let l = Matrix3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
            let c = l * l.transpose();
            let var = radius_variances(&[p], &[c])[0];
            let n = 100_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let r = (p + l * z).norm();
                s1 += r;
                s2 += r * r;
            }
            let mc = s2 / n as f64 - (s1 / n as f64).powi(2);
            assert!((mc / var - 1.0).abs() < 0.1, "{mc} vs {var}");
        }
    }

    #[test]
    fn shape_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_body(&mut rng, 5);
        let fit = ShapeFit { coefficients: c.clone(), alpha: 1.84, nu: 0.25, gcv: None, warning: None };
        let (back, a, nu) = parse_shape_file(&write_shape_file(&fit)).unwrap();
        assert_eq!(back, c);
        assert_eq!((a, nu), (1.84, 0.25));
    }

    #[test]
    fn undersmoothed_spectrum_is_flagged() {
        let mut c = ShapeCoefficients::sphere(1000.0, 10);
        for n in 1..=10 {
            c.set(n, 0, 100.0 / (n as f64).powi(2), 0.0);
        }
        assert!(spectrum_warning(&c).is_none());
        c.set(9, 3, 50.0, 50.0);
        assert!(spectrum_warning(&c).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn degree_spectrum_is_rotation_invariant(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let body = random_body(&mut rng, 4);
            let dirs: Vec<_> = (0..150).map(|_| unit(&mut rng)).collect();
            let pts = surface(&body, &dirs);
            let rot = rot3(a) * rot1(b) * rot3(c);
            let rotated: Vec<_> = pts.iter().map(|p| rot * p).collect();
            let fit = |p: &[Vector3<f64>]| {
                let (m, r, _) = design_matrix(p, 4).unwrap();
                ShapeCoefficients::from_vector(4, &fit_unregularized(&m, &r).unwrap())
            };
            let (f1, f2) = (fit(&pts), fit(&rotated));
            for n in 0..=4 {
                let (x, y) = (f1.degree_rms(n), f2.degree_rms(n));
                prop_assert!((x - y).abs() <= 1e-6 * x.max(1e-9), "degree {}: {} vs {}", n, x, y);
            }
        }
    }
}
