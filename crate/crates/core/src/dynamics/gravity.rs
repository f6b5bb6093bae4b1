//! Spherical-harmonic gravity in fully normalized coefficients.
//!
//! Accelerations use the Cunningham V/W recursion on unnormalized
//! coefficients; `C = C̄ / κ` with κ from [`sh_normalization`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::DynamicsError;
use crate::geometry::aci_to_acaf;

/// κ_nm = sqrt((n+m)! / ((2-δ_0m)(2n+1)(n-m)!)), so that C̄ = κ C and P̄ = P / κ.
pub fn sh_normalization(n: usize, m: usize) -> f64 {
    assert!(m <= n, "order exceeds degree");
    let delta = if m == 0 { 1.0 } else { 2.0 };
    if n <= 10 {
        let f = |k: usize| (1..=k).fold(1.0f64, |acc, x| acc * x as f64);
        (f(n + m) / (delta * (2 * n + 1) as f64 * f(n - m))).sqrt()
    } else {
        let lf = |k: usize| (1..=k).map(|x| (x as f64).ln()).sum::<f64>();
        (0.5 * (lf(n + m) - lf(n - m) - (delta * (2 * n + 1) as f64).ln())).exp()
    }
}

#[inline]
pub(crate) fn tri(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

/// Uniform rotation about the body's maximum-inertia axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationState {
    /// Pole right ascension (rad).
    pub alpha: f64,
    /// Pole declination (rad).
    pub delta: f64,
    /// Spin rate (rad/s).
    pub omega: f64,
    /// Prime meridian angle at t = 0 (rad).
    pub w0: f64,
}

impl RotationState {
    pub fn meridian(&self, t: f64) -> f64 {
        self.w0 + self.omega * t
    }

    pub fn aci_to_acaf(&self, t: f64) -> nalgebra::Matrix3<f64> {
        aci_to_acaf(self.alpha, self.delta, self.meridian(t))
    }
}

/// Gravity field with fully normalized coefficients up to `degree`.
///
/// Degree 0 is implicit (`C̄00 = 1`) and degree 1 is identically zero
/// (origin at the center of mass).
#[derive(Clone, Debug, PartialEq)]
pub struct GravityField {
    pub mu: f64,
    pub ref_radius: f64,
    pub degree: usize,
    c: Vec<f64>,
    s: Vec<f64>,
    // Unnormalized copies used by the recursion.
    cu: Vec<f64>,
    su: Vec<f64>,
}

impl GravityField {
    pub fn point_mass(mu: f64, ref_radius: f64, degree: usize) -> Self {
        let len = tri(degree, degree) + 1;
        let mut c = vec![0.0; len];
        c[0] = 1.0;
        Self { mu, ref_radius, degree, cu: c.clone(), c, s: vec![0.0; len], su: vec![0.0; len] }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.degree < 2 {
            return Err(DynamicsError::InvalidField("degree must be at least 2".into()));
        }
        if !(self.mu > 0.0 && self.ref_radius > 0.0) {
            return Err(DynamicsError::InvalidField("mu and reference radius must be positive".into()));
        }
        if !self.c.iter().chain(self.s.iter()).all(|x| x.is_finite()) {
            return Err(DynamicsError::InvalidField("non-finite coefficient".into()));
        }
        Ok(())
    }

    pub fn c(&self, n: usize, m: usize) -> f64 {
        if n > self.degree { 0.0 } else { self.c[tri(n, m)] }
    }

    pub fn s(&self, n: usize, m: usize) -> f64 {
        if n > self.degree { 0.0 } else { self.s[tri(n, m)] }
    }

    pub fn set(&mut self, n: usize, m: usize, cbar: f64, sbar: f64) {
        assert!((2..=self.degree).contains(&n) && m <= n, "coefficient ({n},{m}) out of range");
        let k = tri(n, m);
        let kappa = sh_normalization(n, m);
        self.c[k] = cbar;
        self.s[k] = if m == 0 { 0.0 } else { sbar };
        self.cu[k] = self.c[k] / kappa;
        self.su[k] = self.s[k] / kappa;
    }

    /// Number of estimable coefficients for degrees 2..=degree: C̄ for every
    /// order and S̄ for orders ≥ 1.
    pub fn packed_len(degree: usize) -> usize {
        (2..=degree).map(|n| 2 * n + 1).sum()
    }

    /// Coefficients in the order `C̄20, C̄21, S̄21, C̄22, S̄22, C̄30, …`.
    pub fn packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::packed_len(self.degree));
        for n in 2..=self.degree {
            for m in 0..=n {
                out.push(self.c(n, m));
                if m > 0 {
                    out.push(self.s(n, m));
                }
            }
        }
        out
    }

    /// Degree and order of each packed slot, and whether it is an S̄ term.
    pub fn packed_labels(degree: usize) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        for n in 2..=degree {
            for m in 0..=n {
                out.push((n, m, false));
                if m > 0 {
                    out.push((n, m, true));
                }
            }
        }
        out
    }

    pub fn from_packed(mu: f64, ref_radius: f64, degree: usize, packed: &[f64]) -> Self {
        let mut f = Self::point_mass(mu, ref_radius, degree);
        let mut k = 0;
        for n in 2..=degree {
            for m in 0..=n {
                let c = packed[k];
                k += 1;
                let s = if m > 0 {
                    k += 1;
                    packed[k - 1]
                } else {
                    0.0
                };
                f.set(n, m, c, s);
            }
        }
        f
    }

    /// Copy truncated to a lower degree.
    pub fn truncated(&self, degree: usize) -> Self {
        let mut f = Self::point_mass(self.mu, self.ref_radius, degree);
        for n in 2..=degree.min(self.degree) {
            for m in 0..=n {
                f.set(n, m, self.c(n, m), self.s(n, m));
            }
        }
        f
    }

    /// J2 = -C20 (unnormalized).
    pub fn j2(&self) -> f64 {
        -self.c(2, 0) / sh_normalization(2, 0)
    }

    /// Per-degree RMS of the normalized coefficients.
    pub fn degree_rms(&self, n: usize) -> f64 {
        let mut sum = 0.0;
        for m in 0..=n {
            sum += self.c(n, m).powi(2) + self.s(n, m).powi(2);
        }
        (sum / (2 * n + 1) as f64).sqrt()
    }

    fn vw(&self, r: &Vector3<f64>, top: usize) -> (Vec<f64>, Vec<f64>) {
        let size = top + 1;
        let mut v = vec![0.0; size * size];
        let mut w = vec![0.0; size * size];
        let at = |n: usize, m: usize| n * size + m;
        let rr = r.norm_squared();
        let r0 = self.ref_radius;
        let (x0, y0, z0) = (r0 * r.x / rr, r0 * r.y / rr, r0 * r.z / rr);
        let rho = r0 * r0 / rr;
        v[at(0, 0)] = r0 / rr.sqrt();
        if size > 1 {
            v[at(1, 0)] = z0 * v[at(0, 0)];
        }
        for n in 2..size {
            let nf = n as f64;
            v[at(n, 0)] = ((2.0 * nf - 1.0) * z0 * v[at(n - 1, 0)] - (nf - 1.0) * rho * v[at(n - 2, 0)]) / nf;
        }
        for m in 1..size {
            let mf = m as f64;
            let (vp, wp) = (v[at(m - 1, m - 1)], w[at(m - 1, m - 1)]);
            v[at(m, m)] = (2.0 * mf - 1.0) * (x0 * vp - y0 * wp);
            w[at(m, m)] = (2.0 * mf - 1.0) * (x0 * wp + y0 * vp);
            if m + 1 < size {
                v[at(m + 1, m)] = (2.0 * mf + 1.0) * z0 * v[at(m, m)];
                w[at(m + 1, m)] = (2.0 * mf + 1.0) * z0 * w[at(m, m)];
            }
            for n in m + 2..size {
                let nf = n as f64;
                let d = nf - mf;
                v[at(n, m)] = ((2.0 * nf - 1.0) * z0 * v[at(n - 1, m)] - (nf + mf - 1.0) * rho * v[at(n - 2, m)]) / d;
                w[at(n, m)] = ((2.0 * nf - 1.0) * z0 * w[at(n - 1, m)] - (nf + mf - 1.0) * rho * w[at(n - 2, m)]) / d;
            }
        }
        (v, w)
    }

    /// Acceleration at a body-fixed position (m/s²).
    pub fn accel_body(&self, r: &Vector3<f64>) -> Vector3<f64> {
        let nmax = self.degree;
        let size = nmax + 2;
        let (v, w) = self.vw(r, nmax + 1);
        let at = |n: usize, m: usize| n * size + m;
        let (cu, su) = (&self.cu, &self.su);
        let (mut ax, mut ay, mut az) = (0.0, 0.0, 0.0);
        for n in 0..=nmax {
            if n == 1 {
                continue;
            }
            for m in 0..=n {
                let c = cu[tri(n, m)];
                let s = su[tri(n, m)];
                if c == 0.0 && s == 0.0 {
                    continue;
                }
                let (nf, mf) = (n as f64, m as f64);
                if m == 0 {
                    ax -= c * v[at(n + 1, 1)];
                    ay -= c * w[at(n + 1, 1)];
                    az -= (nf + 1.0) * c * v[at(n + 1, 0)];
                } else {
                    let fac = (nf - mf + 1.0) * (nf - mf + 2.0);
                    ax += 0.5 * (-c * v[at(n + 1, m + 1)] - s * w[at(n + 1, m + 1)])
                        + 0.5 * fac * (c * v[at(n + 1, m - 1)] + s * w[at(n + 1, m - 1)]);
                    ay += 0.5 * (-c * w[at(n + 1, m + 1)] + s * v[at(n + 1, m + 1)])
                        + 0.5 * fac * (-c * w[at(n + 1, m - 1)] + s * v[at(n + 1, m - 1)]);
                    az += (nf - mf + 1.0) * (-c * v[at(n + 1, m)] - s * w[at(n + 1, m)]);
                }
            }
        }
        Vector3::new(ax, ay, az) * (self.mu / (self.ref_radius * self.ref_radius))
    }

    /// Potential at a body-fixed position (m²/s², positive convention).
    pub fn potential_body(&self, r: &Vector3<f64>) -> f64 {
        let nmax = self.degree;
        let size = nmax + 1;
        let (v, w) = self.vw(r, nmax);
        let (cu, su) = (&self.cu, &self.su);
        let mut u = 0.0;
        for n in 0..=nmax {
            for m in 0..=n {
                u += cu[tri(n, m)] * v[n * size + m] + su[tri(n, m)] * w[n * size + m];
            }
        }
        u * self.mu / self.ref_radius
    }
}

/// Inertial gravity acceleration: rotate into ACAF, evaluate, rotate back.
pub fn gravity_accel(
    field: &GravityField,
    rotation: &RotationState,
    pos_aci: &Vector3<f64>,
    t: f64,
) -> Result<Vector3<f64>, DynamicsError> {
    if pos_aci.norm() == 0.0 {
        return Err(DynamicsError::OriginSingularity);
    }
    let rot = rotation.aci_to_acaf(t);
    Ok(rot.transpose() * field.accel_body(&(rot * pos_aci)))
}

/// Gravity file: header `mu ref_radius N_g`, then `n m Cbar Sbar` lines.
pub fn write_gravity_file(field: &GravityField) -> String {
    let mut out = format!("{:.17e} {:.17e} {}\n", field.mu, field.ref_radius, field.degree);
    for n in 2..=field.degree {
        for m in 0..=n {
            out.push_str(&format!("{n} {m} {:.17e} {:.17e}\n", field.c(n, m), field.s(n, m)));
        }
    }
    out
}

pub fn parse_gravity_file(text: &str) -> Result<GravityField, DynamicsError> {
    let bad = |msg: &str| DynamicsError::Parse(msg.to_string());
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty gravity file"))?.split_whitespace().collect();
    if header.len() != 3 {
        return Err(bad("header must be `mu ref_radius N_g`"));
    }
    let mu: f64 = header[0].parse().map_err(|_| bad("mu"))?;
    let r: f64 = header[1].parse().map_err(|_| bad("ref_radius"))?;
    let deg: usize = header[2].parse().map_err(|_| bad("degree"))?;
    let mut field = GravityField::point_mass(mu, r, deg);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(&format!("bad coefficient line `{line}`")));
        }
        let n: usize = f[0].parse().map_err(|_| bad("n"))?;
        let m: usize = f[1].parse().map_err(|_| bad("m"))?;
        let c: f64 = f[2].parse().map_err(|_| bad("Cbar"))?;
        let s: f64 = f[3].parse().map_err(|_| bad("Sbar"))?;
        if n < 2 || n > deg || m > n {
            continue;
        }
        field.set(n, m, c, s);
    }
    field.validate()?;
    Ok(field)
}
