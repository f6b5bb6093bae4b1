//! Two-state clock model (offset, drift) and Allan-variance fitting.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DynamicsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    /// Offset from true time (s).
    pub offset: f64,
    /// Drift (s/s).
    pub drift: f64,
    /// White frequency noise intensity (s).
    pub q1: f64,
    /// Random-walk frequency noise intensity (1/s).
    pub q2: f64,
}

pub fn clock_phi(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

pub fn clock_q(q1: f64, q2: f64, dt: f64) -> Matrix2<f64> {
    let q12 = q2 * dt * dt / 2.0;
    Matrix2::new(q1 * dt + q2 * dt.powi(3) / 3.0, q12, q12, q2 * dt)
}

/// Zero-mean sample with covariance `q` (PSD, possibly singular).
pub fn sample_psd2<R: Rng + ?Sized>(q: &Matrix2<f64>, rng: &mut R) -> Vector2<f64> {
    let l11 = q[(0, 0)].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { q[(1, 0)] / l11 } else { 0.0 };
    let l22 = (q[(1, 1)] - l21 * l21).max(0.0).sqrt();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Vector2::new(l11 * z1, l21 * z1 + l22 * z2)
}

pub fn clock_transition<R: Rng + ?Sized>(clock: &ClockState, dt: f64, rng: &mut R) -> ClockState {
    assert!(dt >= 0.0, "negative clock step");
    if dt == 0.0 {
        return *clock;
    }
    let x = clock_phi(dt) * Vector2::new(clock.offset, clock.drift) + sample_psd2(&clock_q(clock.q1, clock.q2, dt), rng);
    ClockState { offset: x.x, drift: x.y, ..*clock }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllanSample {
    pub tau: f64,
    pub avar: f64,
    /// Relative weight; e.g. the number of averaging intervals.
    pub weight: f64,
}

/// Weighted least squares of `σ²(τ) = q1/τ + q2 τ/3` on relative residuals,
/// with non-negativity enforced by refitting the surviving term.
pub fn allan_variance_fit(samples: &[AllanSample]) -> Result<(f64, f64), DynamicsError> {
    let used: Vec<&AllanSample> = samples.iter().filter(|s| s.tau > 0.0 && s.avar > 0.0 && s.weight > 0.0).collect();
    let distinct = used.iter().any(|s| s.tau != used[0].tau);
    if used.len() < 2 || !distinct {
        return Err(DynamicsError::DegenerateFit);
    }
    let mut n = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for s in &used {
        let row = Vector2::new(1.0 / (s.tau * s.avar), s.tau / (3.0 * s.avar));
        n += row * row.transpose() * s.weight;
        b += row * s.weight;
    }
    let sol = n.lu().solve(&b).ok_or(DynamicsError::DegenerateFit)?;
    let (mut q1, mut q2) = (sol.x, sol.y);
    if q2 < 0.0 {
        q1 = (b.x / n[(0, 0)]).max(0.0);
        q2 = 0.0;
    } else if q1 < 0.0 {
        q2 = (b.y / n[(1, 1)]).max(0.0);
        q1 = 0.0;
    }
    Ok((q1, q2))
}

/// Overlapping Allan variance at `τ = m τ0` from phase (time-offset) samples.
pub fn overlapping_allan_variance(phase: &[f64], tau0: f64, m: usize) -> Option<f64> {
    if m == 0 || phase.len() < 2 * m + 1 {
        return None;
    }
    let count = phase.len() - 2 * m;
    let sum: f64 = (0..count).map(|i| (phase[i + 2 * m] - 2.0 * phase[i + m] + phase[i]).powi(2)).sum();
    let tau = m as f64 * tau0;
    Some(sum / (2.0 * tau * tau * count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const Q1: f64 = 6.2e-21;
    const Q2: f64 = 1.2e-27;

    #[test]
    fn zero_step_is_identity() {
        let c = ClockState { offset: 1e-6, drift: 1e-12, q1: Q1, q2: Q2 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(clock_transition(&c, 0.0, &mut rng), c);
        assert_eq!(clock_q(Q1, Q2, 0.0), Matrix2::zeros());
    }

    #[test]
    fn q11_at_five_minutes() {
        let q = clock_q(Q1, Q2, 300.0);
        assert!((q[(0, 0)] - 1.8708e-18).abs() < 5e-23);
        assert_eq!(q[(0, 1)], q[(1, 0)]);
    }

    #[test]
    fn q_is_psd_by_schur_complement() {
        for dt in [0.0, 1e-3, 1.0, 300.0, 1e4, 1e7] {
            for (q1, q2) in [(Q1, Q2), (0.0, Q2), (Q1, 0.0), (0.0, 0.0)] {
                let q = clock_q(q1, q2, dt);
                assert!(q[(1, 1)] >= 0.0);
                // q11 q22 - q12² = q1 q2 dt² + q2² dt⁴/12 ≥ 0
                let schur = q[(0, 0)] * q[(1, 1)] - q[(0, 1)].powi(2);
                assert!(schur >= -1e-12 * (q[(0, 0)] * q[(1, 1)]).abs());
            }
        }
    }

    #[test]
    fn fit_recovers_exact_model() {
        let taus = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5];
        let samples: Vec<_> = taus.iter().map(|&t| AllanSample { tau: t, avar: Q1 / t + Q2 * t / 3.0, weight: 1.0 }).collect();
        let (q1, q2) = allan_variance_fit(&samples).unwrap();
        assert!((q1 / Q1 - 1.0).abs() < 1e-10 && (q2 / Q2 - 1.0).abs() < 1e-10);
        let white: Vec<_> = taus.iter().map(|&t| AllanSample { tau: t, avar: Q1 / t, weight: 1.0 }).collect();
        let (q1, q2) = allan_variance_fit(&white).unwrap();
        assert!((q1 / Q1 - 1.0).abs() < 1e-10);
        assert!(q2 * 1e5 / 3.0 < 1e-12 * Q1 / 1e5, "q2 = {q2}");
        let same = vec![AllanSample { tau: 5.0, avar: 1.0, weight: 1.0 }; 3];
        assert_eq!(allan_variance_fit(&same), Err(DynamicsError::DegenerateFit));
    }

    #[test]
    fn allan_variance_of_pure_white_fm() {
        // x_{k+1} = x_k + sqrt(q1 τ0) z: AVAR(τ) = q1 / τ.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tau0 = 1.0;
        let mut x = vec![0.0; 200_001];
        for i in 1..x.len() {
            let z: f64 = rng.sample(StandardNormal);
            x[i] = x[i - 1] + (Q1 * tau0).sqrt() * z;
        }
        let av = overlapping_allan_variance(&x, tau0, 4).unwrap();
        assert!((av / (Q1 / 4.0) - 1.0).abs() < 0.03, "{av}");
        assert!(overlapping_allan_variance(&x[..5], tau0, 4).is_none());
    }
}
