//! Force model (gravity, SRP, solar third body) and the two integrators:
//! fixed-step RK4 for the filter and adaptive Dormand–Prince 5(4) for truth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::gravity::{GravityField, RotationState};
use super::DynamicsError;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const AU: f64 = 1.495_978_707e11;
pub const MU_SUN: f64 = 1.327_124_400_18e20;
/// Solar irradiance at 1 AU (W/m²).
pub const SOLAR_FLUX_1AU: f64 = 1361.0;

/// Circular heliocentric motion of the asteroid, expressed as the
/// asteroid-to-Sun vector in ACI (equatorial axes, ecliptic tilted by
/// `obliquity`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunEphemeris {
    pub distance: f64,
    pub obliquity: f64,
    pub phase0: f64,
}

impl Default for SunEphemeris {
    fn default() -> Self {
        Self { distance: 1.458 * AU, obliquity: 23.439_f64.to_radians(), phase0: 0.0 }
    }
}

impl SunEphemeris {
    pub fn mean_motion(&self) -> f64 {
        (MU_SUN / self.distance.powi(3)).sqrt()
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let th = self.phase0 + self.mean_motion() * t;
        let (s, c) = th.sin_cos();
        let (se, ce) = self.obliquity.sin_cos();
        Vector3::new(c, s * ce, s * se) * self.distance
    }

    pub fn direction(&self, t: f64) -> Vector3<f64> {
        self.position(t).normalize()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacecraftState {
    /// ACI position (m).
    pub position: Vector3<f64>,
    /// ACI velocity (m/s).
    pub velocity: Vector3<f64>,
    pub cr: f64,
    /// Cross-section over mass (m²/kg).
    pub area_over_mass: f64,
}

#[derive(Clone, Debug)]
pub struct ForceModel<'a> {
    pub field: &'a GravityField,
    pub rotation: RotationState,
    pub sun: SunEphemeris,
    pub srp: bool,
    pub third_body: bool,
}

impl<'a> ForceModel<'a> {
    pub fn acceleration(&self, t: f64, r: &Vector3<f64>, cr: f64, area_over_mass: f64) -> Vector3<f64> {
        let rot = self.rotation.aci_to_acaf(t);
        let mut a = rot.transpose() * self.field.accel_body(&(rot * r));
        if self.srp || self.third_body {
            let rs = self.sun.position(t);
            let d = r - rs;
            if self.srp {
                let dn = d.norm();
                let p = SOLAR_FLUX_1AU / SPEED_OF_LIGHT * (AU / dn).powi(2);
                a += d * (cr * p * area_over_mass / dn);
            }
            if self.third_body {
                a += -d * (MU_SUN / d.norm().powi(3)) - rs * (MU_SUN / rs.norm().powi(3));
            }
        }
        a
    }

    fn rhs(&self, cr: f64, am: f64) -> impl Fn(f64, &[f64; 6]) -> [f64; 6] + '_ {
        move |t, y| {
            let a = self.acceleration(t, &Vector3::new(y[0], y[1], y[2]), cr, am);
            [y[3], y[4], y[5], a.x, a.y, a.z]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-12, max_steps: 1_000_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrator {
    Rk4 { substeps: usize },
    Adaptive(AdaptiveOptions),
}

pub fn integrate_rk4<const N: usize, F>(f: &F, t0: f64, y0: [f64; N], dt: f64, substeps: usize) -> [f64; N]
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let n = substeps.max(1);
    let h = dt / n as f64;
    let mut y = y0;
    let axpy = |y: &[f64; N], k: &[f64; N], s: f64| -> [f64; N] {
        let mut o = *y;
        for i in 0..N {
            o[i] += s * k[i];
        }
        o
    };
    for step in 0..n {
        let t = t0 + h * step as f64;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        for i in 0..N {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

pub fn integrate_adaptive<const N: usize, F>(
    f: &F,
    t0: f64,
    y0: [f64; N],
    dt: f64,
    opts: &AdaptiveOptions,
) -> Result<[f64; N], DynamicsError>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    if dt == 0.0 {
        return Ok(y0);
    }
    let dir = dt.signum();
    let t_end = t0 + dt;
    let mut t = t0;
    let mut y = y0;
    let mut h = dir * (dt.abs() / 10.0).min(60.0);
    let mut k = [[0.0; N]; 7];
    k[0] = f(t, &y);
    for _ in 0..opts.max_steps {
        if (t_end - t) * dir <= 0.0 {
            return Ok(y);
        }
        if (t + h - t_end) * dir > 0.0 {
            h = t_end - t;
        }
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    for i in 0..N {
                        ys[i] += h * a * kj[i];
                    }
                }
            }
            k[s] = f(t + C[s] * h, &ys);
        }
        let mut y5 = y;
        let mut err = 0.0;
        for i in 0..N {
            let mut e = 0.0;
            for s in 0..7 {
                y5[i] += h * B5[s] * k[s][i];
                e += h * (B5[s] - B4[s]) * k[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(y5[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            return Err(DynamicsError::StepFailure(t));
        }
        if err <= 1.0 {
            t += h;
            y = y5;
            k[0] = k[6];
            if (t_end - t) * dir <= 0.0 {
                return Ok(y);
            }
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
        if h.abs() < 1e-9 * dt.abs().max(1.0) * f64::EPSILON {
            return Err(DynamicsError::StepFailure(t));
        }
    }
    Err(DynamicsError::StepFailure(t))
}

/// Propagate one spacecraft from `t0` by `dt`.
pub fn propagate(
    state: &SpacecraftState,
    model: &ForceModel,
    t0: f64,
    dt: f64,
    integrator: Integrator,
) -> Result<SpacecraftState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let y0 = [
        state.position.x,
        state.position.y,
        state.position.z,
        state.velocity.x,
        state.velocity.y,
        state.velocity.z,
    ];
    let rhs = model.rhs(state.cr, state.area_over_mass);
    let y = match integrator {
        Integrator::Rk4 { substeps } => integrate_rk4(&rhs, t0, y0, dt, substeps),
        Integrator::Adaptive(opts) => integrate_adaptive(&rhs, t0, y0, dt, &opts)?,
    };
    Ok(SpacecraftState {
        position: Vector3::new(y[0], y[1], y[2]),
        velocity: Vector3::new(y[3], y[4], y[5]),
        ..*state
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::gravity::tests_support::random_field_seeded;

    const MU: f64 = 4.4628e5;

    fn rotation() -> RotationState {
        RotationState { alpha: 0.198, delta: 0.3, omega: 3.31e-4, w0: 0.0 }
    }

    fn circular(field: &GravityField) -> SpacecraftState {
        let r = 45e3;
        SpacecraftState {
            position: Vector3::new(r, 0.0, 0.0),
            velocity: Vector3::new(0.0, 0.6, 0.8) * (field.mu / r).sqrt(),
            cr: 1.3,
            area_over_mass: 0.01,
        }
    }

    #[test]
    fn kepler_closure_and_energy() {
        let field = GravityField::point_mass(MU, 16e3, 2);
        let model = ForceModel { field: &field, rotation: rotation(), sun: SunEphemeris::default(), srp: false, third_body: false };
        let s0 = circular(&field);
        let period = std::f64::consts::TAU * (45e3f64.powi(3) / MU).sqrt();
        let opts = AdaptiveOptions { rtol: 1e-13, atol: 1e-13, max_steps: 1_000_000 };
        let s1 = propagate(&s0, &model, 0.0, period, Integrator::Adaptive(opts)).unwrap();
        assert!((s1.position - s0.position).norm() < 1e-6, "{}", (s1.position - s0.position).norm());
        let energy = |s: &SpacecraftState| 0.5 * s.velocity.norm_squared() - MU / s.position.norm();
        assert!(((energy(&s1) - energy(&s0)) / energy(&s0)).abs() < 1e-10);
        let s2 = propagate(&s0, &model, 0.0, period, Integrator::Rk4 { substeps: 20_000 }).unwrap();
        assert!((s2.position - s0.position).norm() < 1e-6);
    }

    #[test]
    fn rk4_matches_tight_adaptive_on_degree_eight() {
        let field = random_field_seeded(8, 9);
        let model = ForceModel { field: &field, rotation: rotation(), sun: SunEphemeris::default(), srp: true, third_body: true };
        let s0 = circular(&field);
        let rk = propagate(&s0, &model, 100.0, 300.0, Integrator::Rk4 { substeps: 10 }).unwrap();
        let opts = AdaptiveOptions { rtol: 1e-13, atol: 1e-13, max_steps: 1_000_000 };
        let ad = propagate(&s0, &model, 100.0, 300.0, Integrator::Adaptive(opts)).unwrap();
        assert!((rk.position - ad.position).norm() < 1e-3);
        // bitwise reproducibility
        let rk2 = propagate(&s0, &model, 100.0, 300.0, Integrator::Rk4 { substeps: 10 }).unwrap();
        assert_eq!(rk, rk2);
    }

    #[test]
    fn perturbation_magnitudes_are_plausible() {
        let field = GravityField::point_mass(MU, 16e3, 2);
        let base = ForceModel { field: &field, rotation: rotation(), sun: SunEphemeris::default(), srp: false, third_body: false };
        let full = ForceModel { srp: true, third_body: true, ..base.clone() };
        let r = Vector3::new(45e3, 0.0, 0.0);
        let d = full.acceleration(0.0, &r, 1.3, 0.01) - base.acceleration(0.0, &r, 1.3, 0.01);
        // SRP ~ 2e-8 m/s², tidal ~ 6e-10 m/s²
        assert!(d.norm() > 1e-8 && d.norm() < 1e-7, "{}", d.norm());
        assert!(propagate(&circular(&field), &base, 0.0, 0.0, Integrator::Rk4 { substeps: 1 }).is_err());
    }
}
