//! Keplerian elements, quasi-nonsingular relative elements, and a
//! first-order J2 mean/osculating map.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{rot1, rot3};

pub fn wrap_pi(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(TAU) - PI;
    if y == -PI { PI } else { y }
}

/// Classical elements. Angles in radians, `a` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitalElements {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub raan: f64,
    pub argp: f64,
    pub mean_anomaly: f64,
}

/// `[δa, δλ, δe_x, δe_y, δi_x, δi_y]`, dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeOrbitalElements {
    pub da: f64,
    pub dlambda: f64,
    pub dex: f64,
    pub dey: f64,
    pub dix: f64,
    pub diy: f64,
}

impl RelativeOrbitalElements {
    pub fn as_array(&self) -> [f64; 6] {
        [self.da, self.dlambda, self.dex, self.dey, self.dix, self.diy]
    }
}

pub fn solve_kepler(m: f64, e: f64) -> f64 {
    let m = wrap_pi(m);
    let mut ea = if e < 0.8 { m } else { PI.copysign(m) };
    for _ in 0..50 {
        let f = ea - e * ea.sin() - m;
        let step = f / (1.0 - e * ea.cos());
        ea -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    ea
}

impl OrbitalElements {
    pub fn argument_of_latitude(&self) -> f64 {
        self.argp + self.mean_anomaly
    }

    pub fn period(&self, mu: f64) -> f64 {
        TAU * (self.a.powi(3) / mu).sqrt()
    }

    /// Perifocal-to-frame rotation.
    fn pqw_to_frame(&self) -> Matrix3<f64> {
        (rot3(self.argp) * rot1(self.i) * rot3(self.raan)).transpose()
    }

    pub fn to_cartesian(&self, mu: f64) -> (Vector3<f64>, Vector3<f64>) {
        let ea = solve_kepler(self.mean_anomaly, self.e);
        let (s, c) = ea.sin_cos();
        let b = (1.0 - self.e * self.e).sqrt();
        let r = self.a * (1.0 - self.e * c);
        let rp = Vector3::new(self.a * (c - self.e), self.a * b * s, 0.0);
        let vp = Vector3::new(-s, b * c, 0.0) * ((mu * self.a).sqrt() / r);
        let q = self.pqw_to_frame();
        (q * rp, q * vp)
    }

    pub fn from_cartesian(mu: f64, r: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        let h = r.cross(v);
        let hn = h.norm();
        let rn = r.norm();
        let a = 1.0 / (2.0 / rn - v.norm_squared() / mu);
        let ev = ((v.norm_squared() - mu / rn) * r - r.dot(v) * v) / mu;
        let e = ev.norm();
        let i = (h.z / hn).clamp(-1.0, 1.0).acos();
        let node = Vector3::z().cross(&h);
        let (nhat, raan) = if node.norm() > 1e-12 * hn {
            (node.normalize(), node.y.atan2(node.x))
        } else {
            (Vector3::x(), 0.0)
        };
        let mhat = (h / hn).cross(&nhat);
        let u_true = r.dot(&mhat).atan2(r.dot(&nhat));
        let argp = if e > 1e-14 { ev.dot(&mhat).atan2(ev.dot(&nhat)) } else { 0.0 };
        let f = u_true - argp;
        let ea = 2.0 * (((1.0 - e) / (1.0 + e)).sqrt() * (f / 2.0).tan()).atan();
        let mean_anomaly = ea - e * ea.sin();
        Self {
            a,
            e,
            i,
            raan: raan.rem_euclid(TAU),
            argp: argp.rem_euclid(TAU),
            mean_anomaly: mean_anomaly.rem_euclid(TAU),
        }
    }

    /// `[a, u, e_x, e_y, i, Ω]` with `u = ω + M`.
    pub fn nonsingular(&self) -> [f64; 6] {
        [
            self.a,
            self.argp + self.mean_anomaly,
            self.e * self.argp.cos(),
            self.e * self.argp.sin(),
            self.i,
            self.raan,
        ]
    }

    pub fn from_nonsingular(x: &[f64; 6]) -> Self {
        let e = x[2].hypot(x[3]);
        let argp = if e > 0.0 { x[3].atan2(x[2]) } else { 0.0 };
        Self {
            a: x[0],
            e,
            i: x[4],
            raan: x[5].rem_euclid(TAU),
            argp: argp.rem_euclid(TAU),
            mean_anomaly: (x[1] - argp).rem_euclid(TAU),
        }
    }
}

pub fn oe_to_roe(chief: &OrbitalElements, deputy: &OrbitalElements) -> RelativeOrbitalElements {
    let draan = wrap_pi(deputy.raan - chief.raan);
    let du = wrap_pi(deputy.argument_of_latitude() - chief.argument_of_latitude());
    RelativeOrbitalElements {
        da: (deputy.a - chief.a) / chief.a,
        dlambda: du + draan * chief.i.cos(),
        dex: deputy.e * deputy.argp.cos() - chief.e * chief.argp.cos(),
        dey: deputy.e * deputy.argp.sin() - chief.e * chief.argp.sin(),
        dix: deputy.i - chief.i,
        diy: draan * chief.i.sin(),
    }
}

/// Inverse of [`oe_to_roe`] for a given chief.
pub fn roe_to_oe(chief: &OrbitalElements, roe: &RelativeOrbitalElements) -> OrbitalElements {
    let draan = roe.diy / chief.i.sin();
    let ex = chief.e * chief.argp.cos() + roe.dex;
    let ey = chief.e * chief.argp.sin() + roe.dey;
    let u = chief.argument_of_latitude() + roe.dlambda - draan * chief.i.cos();
    OrbitalElements::from_nonsingular(&[chief.a * (1.0 + roe.da), u, ex, ey, chief.i + roe.dix, chief.raan + draan])
}

/// J2 acceleration about the frame z axis.
pub fn j2_accel(r: &Vector3<f64>, j2: f64, mu: f64, ref_radius: f64) -> Vector3<f64> {
    let rn = r.norm();
    let z2 = (r.z / rn).powi(2);
    let k = -1.5 * j2 * mu * ref_radius * ref_radius / rn.powi(5);
    Vector3::new(k * r.x * (1.0 - 5.0 * z2), k * r.y * (1.0 - 5.0 * z2), k * r.z * (3.0 - 5.0 * z2))
}

const SP_GRID: usize = 64;

fn ns_from_state(mu: f64, r: &Vector3<f64>, v: &Vector3<f64>) -> SVector<f64, 6> {
    SVector::from(OrbitalElements::from_cartesian(mu, r, v).nonsingular())
}

/// Short-period J2 offsets of the nonsingular elements at the given mean
/// elements. The first-order periodic solution of the Gauss equations is
/// obtained by integrating the zero-mean part of the J2-induced element
/// rates over the unperturbed mean-anomaly circle.
fn short_period(mean: &OrbitalElements, j2: f64, mu: f64, ref_radius: f64) -> SVector<f64, 6> {
    let n_mean = (mu / mean.a.powi(3)).sqrt();
    let k = SP_GRID;
    let mut rates = vec![SVector::<f64, 6>::zeros(); k];
    for (idx, rate) in rates.iter_mut().enumerate() {
        let el = OrbitalElements { mean_anomaly: TAU * idx as f64 / k as f64, ..*mean };
        let (r, v) = el.to_cartesian(mu);
        let f = j2_accel(&r, j2, mu, ref_radius);
        let h = 1e-6 * v.norm();
        let mut d = SVector::<f64, 6>::zeros();
        for axis in 0..3 {
            let mut dv = Vector3::zeros();
            dv[axis] = h;
            let mut diff = ns_from_state(mu, &r, &(v + dv)) - ns_from_state(mu, &r, &(v - dv));
            diff[1] = wrap_pi(diff[1]);
            diff[5] = wrap_pi(diff[5]);
            d += diff / (2.0 * h) * f[axis];
        }
        *rate = d / n_mean;
    }
    let integrate = |samples: &dyn Fn(usize) -> f64, m: f64| -> f64 {
        // Real Fourier series of the samples, integrated term by term
        // without the secular (constant) component.
        let mut out = 0.0;
        for j in 1..k / 2 {
            let (mut a, mut b) = (0.0, 0.0);
            for idx in 0..k {
                let th = TAU * (j * idx) as f64 / k as f64;
                a += samples(idx) * th.cos();
                b += samples(idx) * th.sin();
            }
            a *= 2.0 / k as f64;
            b *= 2.0 / k as f64;
            let jf = j as f64;
            out += (a * (jf * m).sin() - b * (jf * m).cos()) / jf;
        }
        out
    };
    let mut delta = SVector::<f64, 6>::zeros();
    for c in 0..6 {
        delta[c] = integrate(&|idx| rates[idx][c], mean.mean_anomaly);
    }
    // Mean-motion coupling: dM/dt = n(a) picks up -3/2 n δa / a.
    let da_grid: Vec<f64> = (0..k).map(|idx| integrate(&|j| rates[j][0], TAU * idx as f64 / k as f64)).collect();
    delta[1] += integrate(&|idx| -1.5 * da_grid[idx] / mean.a, mean.mean_anomaly);
    delta
}

pub fn mean_to_osculating(mean: &OrbitalElements, j2: f64, mu: f64, ref_radius: f64) -> OrbitalElements {
    if j2 == 0.0 {
        return *mean;
    }
    let d = short_period(mean, j2, mu, ref_radius);
    let x = mean.nonsingular();
    let mut y = [0.0; 6];
    for c in 0..6 {
        y[c] = x[c] + d[c];
    }
    OrbitalElements::from_nonsingular(&y)
}

/// Fixed-point inverse of [`mean_to_osculating`].
pub fn osculating_to_mean(osc: &OrbitalElements, j2: f64, mu: f64, ref_radius: f64) -> OrbitalElements {
    if j2 == 0.0 {
        return *osc;
    }
    let target = osc.nonsingular();
    let mut mean = *osc;
    for _ in 0..60 {
        let got = mean_to_osculating(&mean, j2, mu, ref_radius).nonsingular();
        let mut x = mean.nonsingular();
        let mut worst = 0.0f64;
        for c in 0..6 {
            let mut r = target[c] - got[c];
            if c == 1 || c == 5 {
                r = wrap_pi(r);
            }
            let scale = if c == 0 { x[0] } else { 1.0 };
            worst = worst.max(r.abs() / scale);
            x[c] += r;
        }
        mean = OrbitalElements::from_nonsingular(&x);
        if worst < 1e-15 {
            break;
        }
    }
    mean
}
