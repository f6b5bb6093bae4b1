//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use snac_core::dynamics::GravityField;
use snac_core::ukf::{process_noise, state_transition, FilterEstimate, FilterModel, StateLayout, UkfConfig};

/// Textbook UKF time update: every one of the 2n+1 sigma points goes
/// through the full state transition, and the covariance is formed from
/// deviations about the weighted mean.
pub fn naive_time_update(est: &FilterEstimate, dt: f64, model: &FilterModel, cfg: &UkfConfig, q: &[Vector3<f64>]) -> (DVector<f64>, DMatrix<f64>, usize) {
    let n = est.layout.dim();
    let nf = n as f64;
    let lam = cfg.alpha * cfg.alpha * (nf + cfg.kappa) - nf;
    let l = est.covariance.clone().cholesky().expect("oracle needs an SPD covariance").l() * (nf + lam).sqrt();
    let mut pts = vec![est.mean.clone()];
    for k in 0..n {
        pts.push(&est.mean + l.column(k));
        pts.push(&est.mean - l.column(k));
    }
    let ys: Vec<DVector<f64>> = pts.iter().map(|x| state_transition(&est.layout, model, x, est.time, dt, None).unwrap()).collect();
    let wm = |i: usize| if i == 0 { lam / (nf + lam) } else { 0.5 / (nf + lam) };
    let wc = |i: usize| wm(i) + if i == 0 { 1.0 - cfg.alpha * cfg.alpha + cfg.beta } else { 0.0 };
    // accumulate the mean as an offset from the central point to limit cancellation
    let y0 = &ys[0];
    let mean = y0 + ys.iter().enumerate().skip(1).fold(DVector::zeros(n), |a, (i, y)| a + (y - y0) * wm(i));
    let mut p = ys.iter().enumerate().fold(DMatrix::zeros(n, n), |a, (i, y)| {
        let d = y - &mean;
        a + &d * d.transpose() * wc(i)
    });
    p += process_noise(&est.layout, model, q, dt);
    let propagations = if est.layout.n_spacecraft > 0 { ys.len() } else { 0 };
    (mean, p, propagations)
}

/// Random filter estimate near a 45 km orbit with correlated covariance.
pub fn random_estimate<R: Rng>(rng: &mut R, n_spacecraft: usize, gravity_degree: usize, n_landmarks: usize) -> FilterEstimate {
    let mut layout = StateLayout::new(n_spacecraft, gravity_degree);
    layout.n_landmarks = n_landmarks;
    let n = layout.dim();
    let mu: f64 = 4.4628e5;
    let mut x = DVector::zeros(n);
    let mut sig = DVector::zeros(n);
    x[StateLayout::PSI] = rng.gen_range(0.0..0.4);
    x[StateLayout::PSI + 1] = rng.gen_range(0.1..0.5);
    x[StateLayout::PSI + 2] = 3.31e-4;
    x[StateLayout::MU] = mu;
    sig[StateLayout::PSI] = 1.7e-3;
    sig[StateLayout::PSI + 1] = 1.7e-3;
    sig[StateLayout::PSI + 2] = 1e-9;
    sig[StateLayout::MU] = 0.05 * mu;
    for k in 0..layout.gravity_len() {
        x[StateLayout::GRAVITY + k] = rng.gen_range(-0.02..0.02);
        sig[StateLayout::GRAVITY + k] = 0.005;
    }
    for i in 0..n_spacecraft {
        let p = layout.spacecraft(i);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let inc: f64 = rng.gen_range(0.5..2.5);
        let r = rng.gen_range(40e3..50e3);
        let v = (mu / r).sqrt();
        let pos = Vector3::new(r * th.cos(), r * th.sin() * inc.cos(), r * th.sin() * inc.sin());
        let vel = Vector3::new(-v * th.sin(), v * th.cos() * inc.cos(), v * th.cos() * inc.sin());
        x.fixed_rows_mut::<3>(p).copy_from(&pos);
        x.fixed_rows_mut::<3>(p + 3).copy_from(&vel);
        x[p + 6] = 1.3;
        for k in 0..3 {
            sig[p + k] = 500.0;
            sig[p + 3 + k] = 0.05;
        }
        sig[p + 6] = 0.13;
    }
    for i in 1..n_spacecraft {
        let c = layout.clock(i).unwrap();
        x[c] = rng.gen_range(-20.0..20.0);
        x[c + 1] = rng.gen_range(-1e-3..1e-3);
        sig[c] = 20.0;
        sig[c + 1] = 2e-3;
    }
    for k in 0..n_landmarks {
        let l = layout.landmark(k);
        for a in 0..3 {
            x[l + a] = rng.gen_range(-8e3..8e3);
            sig[l + a] = rng.gen_range(5.0..50.0);
        }
    }
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3) / (n as f64).sqrt());
    let corr = DMatrix::identity(n, n) + &a * a.transpose();
    let d = DMatrix::from_diagonal(&sig);
    let covariance = &d * corr * &d;
    FilterEstimate { mean: x, covariance, time: rng.gen_range(0.0..1e4), epoch: 0, layout, landmark_ids: (0..n_landmarks).collect() }
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |a, b| a * b as f64)
}

/// Unnormalized associated Legendre function from its explicit finite sum,
/// without the Condon-Shortley phase.
pub fn legendre_explicit(n: usize, m: usize, x: f64) -> f64 {
    let mut sum = 0.0;
    let mut k = 0;
    while n >= m + 2 * k {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * factorial(2 * n - 2 * k) / (factorial(k) * factorial(n - k) * factorial(n - m - 2 * k)) * x.powi((n - m - 2 * k) as i32);
        k += 1;
    }
    sum * (1.0 - x * x).powf(m as f64 / 2.0) / 2f64.powi(n as i32)
}

/// Fully normalized spherical-harmonic potential evaluated term by term in
/// spherical coordinates.
pub fn potential_series(f: &GravityField, r: &Vector3<f64>) -> f64 {
    let rn = r.norm();
    let sphi = r.z / rn;
    let lam = r.y.atan2(r.x);
    let mut u = 0.0;
    for n in 0..=f.degree {
        for m in 0..=n {
            let delta = if m == 0 { 1.0 } else { 2.0 };
            let norm = (delta * (2 * n + 1) as f64 * factorial(n - m) / factorial(n + m)).sqrt();
            let p = norm * legendre_explicit(n, m, sphi);
            let ml = m as f64 * lam;
            u += (f.ref_radius / rn).powi(n as i32) * p * (f.c(n, m) * ml.cos() + f.s(n, m) * ml.sin());
        }
    }
    f.mu / rn * u
}

/// Random field with normalized coefficients bounded by 0.1/n².
pub fn random_field<R: Rng>(rng: &mut R, degree: usize) -> GravityField {
    let mut f = GravityField::point_mass(4.4628e5, 16e3, degree);
    for n in 2..=degree {
        let sc = 0.1 / (n * n) as f64;
        for m in 0..=n {
            let s = if m == 0 { 0.0 } else { sc * rng.gen_range(-1.0..1.0) };
            f.set(n, m, sc * rng.gen_range(-1.0..1.0), s);
        }
    }
    f
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `max_ij |S_ij − Q_ij| / sqrt(Q_ii Q_jj)`.
pub fn scaled_deviation(s: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            worst = worst.max((s[(i, j)] - q[(i, j)]).abs() / (q[(i, i)] * q[(j, j)]).sqrt());
        }
    }
    worst
}
