//! Synthetic world: harmonic body with surface features, swarm truth
//! trajectories and clocks, and the raw measurements (keypoints, RF,
//! star-tracker attitude).
//!
//! The keypoint model stands in for rendering plus a feature detector: each
//! surface feature carries a canonical 128-element descriptor, and a view
//! emits the noisy projection and a noisy copy of the descriptor when the
//! feature is visible, lit, and passes a Bernoulli detection draw.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    clock_transition, mean_to_osculating, propagate, roe_to_oe, ClockState, ForceModel, GravityField, Integrator,
    OrbitalElements, RelativeOrbitalElements, RotationState, SpacecraftState,
};
use crate::dynamics::propagate::SPEED_OF_LIGHT;
use crate::geometry::{aci_to_acic, project, rot1, rot2, rot3, CameraModel, Frame, FrameRotation, Intrinsics, PixelPoint};
use crate::shape::{lon_lat, ShapeCoefficients};

pub const DESCRIPTOR_DIM: usize = 128;

/// Deterministic independent stream for `(seed, purpose, epoch, spacecraft)`.
pub fn stream_rng(seed: u64, purpose: u64, epoch: u64, spacecraft: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(epoch.wrapping_mul(1 << 8).wrapping_add(spacecraft));
    rng
}

pub mod purpose {
    pub const BODY: u64 = 1;
    pub const FEATURES: u64 = 2;
    pub const DETECT: u64 = 3;
    pub const RF: u64 = 4;
    pub const ATTITUDE: u64 = 5;
    pub const CLOCK: u64 = 6;
    pub const INIT: u64 = 7;
}

/// Cached radii on a regular latitude/longitude grid, used for fast
/// occlusion tests and sampling bounds.
#[derive(Clone, Debug)]
struct RadialGrid {
    step: f64,
    nlat: usize,
    nlon: usize,
    r: Vec<f64>,
}

impl RadialGrid {
    fn new(c: &ShapeCoefficients, step_deg: f64) -> Self {
        let step = step_deg.to_radians();
        let nlat = (180.0 / step_deg).round() as usize + 1;
        let nlon = (360.0 / step_deg).round() as usize + 1;
        let mut r = vec![0.0; nlat * nlon];
        for i in 0..nlat {
            let phi = -std::f64::consts::FRAC_PI_2 + i as f64 * step;
            for j in 0..nlon {
                let lam = -std::f64::consts::PI + j as f64 * step;
                r[i * nlon + j] = c.radius(lam, phi);
            }
        }
        Self { step, nlat, nlon, r }
    }

    fn radius(&self, lam: f64, phi: f64) -> f64 {
        let x = ((lam + std::f64::consts::PI) / self.step).clamp(0.0, (self.nlon - 1) as f64);
        let y = ((phi + std::f64::consts::FRAC_PI_2) / self.step).clamp(0.0, (self.nlat - 1) as f64);
        let (j, i) = ((x as usize).min(self.nlon - 2), (y as usize).min(self.nlat - 2));
        let (fx, fy) = (x - j as f64, y - i as f64);
        let g = |a: usize, b: usize| self.r[a * self.nlon + b];
        (1.0 - fy) * ((1.0 - fx) * g(i, j) + fx * g(i, j + 1)) + fy * ((1.0 - fx) * g(i + 1, j) + fx * g(i + 1, j + 1))
    }
}

#[derive(Clone, Debug)]
pub struct BodyShape {
    pub coefficients: ShapeCoefficients,
    pub average_radius: f64,
    pub max_radius: f64,
    pub min_radius: f64,
    grid: RadialGrid,
}

const GRID_STEP_DEG: f64 = 1.0;

impl BodyShape {
    pub fn from_coefficients(coefficients: ShapeCoefficients) -> Self {
        let grid = RadialGrid::new(&coefficients, GRID_STEP_DEG);
        let max_radius = grid.r.iter().cloned().fold(0.0, f64::max) * 1.01;
        let min_radius = grid.r.iter().cloned().fold(f64::INFINITY, f64::min);
        let average_radius = coefficients.a(0, 0);
        Self { coefficients, average_radius, max_radius, min_radius, grid }
    }

    pub fn radius(&self, dir: &Vector3<f64>) -> f64 {
        self.coefficients.radius_at(dir)
    }

    pub fn surface_point(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let u = dir.normalize();
        u * self.radius(&u)
    }

    fn grid_radius(&self, dir: &Vector3<f64>) -> f64 {
        let (l, p) = lon_lat(dir);
        self.grid.radius(l, p)
    }

    /// Outward unit normal and the area-per-solid-angle factor `r²/(n·û)`.
    pub fn normal_and_area_factor(&self, dir: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let (lam, phi) = lon_lat(dir);
        let h = 1e-6;
        let r = self.coefficients.radius(lam, phi);
        let r_lam = (self.coefficients.radius(lam + h, phi) - self.coefficients.radius(lam - h, phi)) / (2.0 * h);
        let r_phi = (self.coefficients.radius(lam, phi + h) - self.coefficients.radius(lam, phi - h)) / (2.0 * h);
        let (sl, cl) = lam.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let u = Vector3::new(cp * cl, cp * sl, sp);
        let e_lam = Vector3::new(-sl, cl, 0.0);
        let e_phi = Vector3::new(-sp * cl, -sp * sl, cp);
        let g = u - e_lam * (r_lam / (r * cp.max(1e-12))) - e_phi * (r_phi / r);
        let n = g.normalize();
        (n, r * r / n.dot(&u))
    }

    /// True when the open segment from `from` (a surface point) toward `to`
    /// passes below the surface by more than `tol` meters.
    pub fn occluded(&self, from: &Vector3<f64>, to: &Vector3<f64>, tol: f64) -> bool {
        let d = to - from;
        let len = d.norm();
        if len == 0.0 {
            return false;
        }
        let u = d / len;
        let b = from.dot(&u);
        let disc = b * b - (from.norm_squared() - self.max_radius * self.max_radius);
        if disc <= 0.0 {
            return false;
        }
        let s_exit = (-b + disc.sqrt()).min(len);
        let min_step = 5.0;
        let mut s = min_step;
        let mut guard = 0;
        while s < s_exit && guard < 100_000 {
            let x = from + u * s;
            let clearance = x.norm() - self.grid_radius(&x);
            if clearance < -tol {
                return true;
            }
            s += (0.5 * clearance).max(min_step);
            guard += 1;
        }
        false
    }
}

/// Body generation parameters. Shape spectrum `K = k_fraction · R_avg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodySpec {
    pub seed: u64,
    pub shape_degree: usize,
    pub average_radius: f64,
    pub shape_alpha: f64,
    pub shape_k_fraction: f64,
    pub mu: f64,
    pub gravity_ref_radius: f64,
    pub gravity_degree: usize,
    pub j2: f64,
    pub gravity_k: f64,
    pub gravity_alpha: f64,
    /// Pole right ascension and declination (deg).
    pub pole_ra_deg: f64,
    pub pole_dec_deg: f64,
    pub spin_period_hours: f64,
    pub prime_meridian_deg: f64,
}

impl Default for BodySpec {
    fn default() -> Self {
        Self {
            seed: 1,
            shape_degree: 12,
            average_radius: 8400.0,
            shape_alpha: 1.84,
            shape_k_fraction: 0.1,
            mu: 4.4628e5,
            gravity_ref_radius: 16e3,
            gravity_degree: 8,
            j2: 0.05,
            gravity_k: 0.16,
            gravity_alpha: 2.0,
            pole_ra_deg: 11.35,
            pole_dec_deg: 17.22,
            spin_period_hours: 5.27,
            prime_meridian_deg: 0.0,
        }
    }
}

impl BodySpec {
    pub fn new(seed: u64, degree: usize, avg_radius: f64, alpha: f64) -> Self {
        Self { seed, shape_degree: degree, average_radius: avg_radius, shape_alpha: alpha, ..Self::default() }
    }

    pub fn rotation(&self) -> RotationState {
        RotationState {
            alpha: self.pole_ra_deg.to_radians(),
            delta: self.pole_dec_deg.to_radians(),
            omega: std::f64::consts::TAU / (self.spin_period_hours * 3600.0),
            w0: self.prime_meridian_deg.to_radians(),
        }
    }
}

/// Gaussian coefficients rescaled so the realized RMS of every degree is
/// exactly `k / n^alpha`. `out(n, m, a, b)` receives each coefficient pair.
fn power_law_degree<R: Rng>(rng: &mut R, n: usize, k: f64, alpha: f64, mut out: impl FnMut(usize, f64, f64)) {
    let draws: Vec<(f64, f64)> = (0..=n)
        .map(|m| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = if m == 0 { 0.0 } else { rng.sample(StandardNormal) };
            (a, b)
        })
        .collect();
    let ss: f64 = draws.iter().map(|(a, b)| a * a + b * b).sum();
    let realized = (ss / (2 * n + 1) as f64).sqrt();
    let scale = k / (n as f64).powf(alpha) / realized;
    for (m, (a, b)) in draws.into_iter().enumerate() {
        out(m, a * scale, b * scale);
    }
}

pub fn generate_shape(seed: u64, degree: usize, avg_radius: f64, alpha: f64, k_fraction: f64) -> ShapeCoefficients {
    let mut rng = stream_rng(seed, purpose::BODY, 0, 0);
    for _attempt in 0..100 {
        let mut c = ShapeCoefficients::sphere(avg_radius, degree);
        // degree 1 stays zero: the origin is the center of figure
        for n in 2..=degree {
            power_law_degree(&mut rng, n, k_fraction * avg_radius, alpha, |m, a, b| c.set(n, m, a, b));
        }
        let grid = RadialGrid::new(&c, 5.0);
        if grid.r.iter().all(|&r| r > 0.3 * avg_radius) {
            return c;
        }
    }
    ShapeCoefficients::sphere(avg_radius, degree)
}

pub fn generate_gravity(spec: &BodySpec) -> GravityField {
    let mut rng = stream_rng(spec.seed, purpose::BODY, 1, 0);
    let mut f = GravityField::point_mass(spec.mu, spec.gravity_ref_radius, spec.gravity_degree);
    for n in 2..=spec.gravity_degree {
        power_law_degree(&mut rng, n, spec.gravity_k, spec.gravity_alpha, |m, c, s| f.set(n, m, c, s));
    }
    if spec.gravity_degree >= 2 {
        f.set(2, 0, -spec.j2 / 5f64.sqrt(), 0.0);
    }
    f
}

/// Truth body, gravity field and rotation. Deterministic in `spec.seed`.
pub fn generate_body(spec: &BodySpec) -> (BodyShape, GravityField, RotationState) {
    let shape = generate_shape(spec.seed, spec.shape_degree, spec.average_radius, spec.shape_alpha, spec.shape_k_fraction);
    (BodyShape::from_coefficients(shape), generate_gravity(spec), spec.rotation())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFeature {
    pub id: usize,
    pub acaf_position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub detectability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub count: usize,
    pub seed: u64,
    pub detectability: f64,
    /// Standard deviation of canonical descriptor elements.
    pub descriptor_scale: f64,
    /// Fraction of features whose descriptor is a perturbed copy of an
    /// earlier one (look-alike terrain).
    pub similar_fraction: f64,
    pub similar_sigma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { count: 2000, seed: 2, detectability: 0.7, descriptor_scale: 20.0, similar_fraction: 0.05, similar_sigma: 6.0 }
    }
}

/// Area-uniform surface sampling by rejection on the solid-angle density.
pub fn seed_features(shape: &BodyShape, spec: &FeatureSpec) -> Vec<SurfaceFeature> {
    let mut rng = stream_rng(spec.seed, purpose::FEATURES, 0, 0);
    let bound = area_factor_bound(shape);
    let mut out: Vec<SurfaceFeature> = Vec::with_capacity(spec.count);
    while out.len() < spec.count {
        let dir = random_unit(&mut rng);
        let (normal, factor) = shape.normal_and_area_factor(&dir);
        if rng.gen::<f64>() * bound > factor {
            continue;
        }
        let similar = !out.is_empty() && rng.gen::<f64>() < spec.similar_fraction;
        let descriptor: Vec<f64> = if similar {
            let parent = rng.gen_range(0..out.len());
            out[parent].descriptor.iter().map(|d| d + spec.similar_sigma * rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            (0..DESCRIPTOR_DIM).map(|_| spec.descriptor_scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        out.push(SurfaceFeature {
            id: out.len(),
            acaf_position: shape.surface_point(&dir),
            normal,
            descriptor,
            detectability: spec.detectability,
        });
    }
    out
}

fn area_factor_bound(shape: &BodyShape) -> f64 {
    let mut worst = 0.0f64;
    let n = 90;
    for i in 0..=n {
        let phi = -1.5 + 3.0 * i as f64 / n as f64;
        for j in 0..2 * n {
            let lam = -std::f64::consts::PI + std::f64::consts::PI * j as f64 / n as f64;
            let d = Vector3::new(phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin());
            worst = worst.max(shape.normal_and_area_factor(&d).1);
        }
    }
    worst * 1.5
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub spacecraft: usize,
    pub epoch: usize,
    pub pixel: PixelPoint,
    pub descriptor: Vec<f64>,
    /// Generating feature; for evaluation only.
    pub truth_feature_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub pixel_sigma: f64,
    pub descriptor_sigma: f64,
    /// Minimum angle between viewing ray and local tangent plane (deg).
    pub grazing_min_deg: f64,
    /// Width (deg) over which limb detection probability ramps up.
    pub limb_ramp_deg: f64,
    /// Cosine of incidence below which probability decays linearly to zero.
    pub sun_ramp_cos: f64,
    /// Occlusion tolerance (m).
    pub occlusion_tol: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 2.0,
            descriptor_sigma: 4.5,
            grazing_min_deg: 10.0,
            limb_ramp_deg: 10.0,
            sun_ramp_cos: 0.25,
            occlusion_tol: 1.0,
        }
    }
}

impl DetectionConfig {
    pub fn noiseless() -> Self {
        Self { pixel_sigma: 0.0, descriptor_sigma: 0.0, ..Self::default() }
    }

    /// Probability factor from the viewing and lighting geometry; zero means
    /// geometrically undetectable.
    pub fn geometric_probability(&self, normal: &Vector3<f64>, to_camera: &Vector3<f64>, sun_dir: &Vector3<f64>) -> f64 {
        let grazing = normal.dot(to_camera).clamp(-1.0, 1.0).asin().to_degrees();
        if grazing < self.grazing_min_deg {
            return 0.0;
        }
        let cos_i = normal.dot(sun_dir);
        if cos_i <= 0.0 {
            return 0.0;
        }
        let limb = if self.limb_ramp_deg > 0.0 { ((grazing - self.grazing_min_deg) / self.limb_ramp_deg).min(1.0) } else { 1.0 };
        let sun = if self.sun_ramp_cos > 0.0 { (cos_i / self.sun_ramp_cos).min(1.0) } else { 1.0 };
        limb * sun
    }
}

/// Keypoints seen by `camera` (ACAF world frame). `sun_dir` is the ACAF
/// unit vector toward the Sun.
pub fn detect_keypoints<R: Rng>(
    features: &[SurfaceFeature],
    shape: &BodyShape,
    camera: &CameraModel,
    sun_dir: &Vector3<f64>,
    cfg: &DetectionConfig,
    spacecraft: usize,
    epoch: usize,
    rng: &mut R,
) -> Vec<KeypointObservation> {
    let k = &camera.intrinsics;
    let mut out = Vec::new();
    for f in features {
        let to_cam = camera.position - f.acaf_position;
        let dist = to_cam.norm();
        let p = cfg.geometric_probability(&f.normal, &(to_cam / dist), sun_dir) * f.detectability;
        // one draw per feature keeps the stream aligned regardless of outcome
        let draw: f64 = rng.gen();
        if p <= 0.0 || draw >= p {
            continue;
        }
        let Ok(px) = project(camera, &f.acaf_position) else { continue };
        if !k.contains(px.u, px.v) {
            continue;
        }
        if shape.occluded(&f.acaf_position, &camera.position, cfg.occlusion_tol) {
            continue;
        }
        let du: f64 = rng.sample(StandardNormal);
        let dv: f64 = rng.sample(StandardNormal);
        let noisy = PixelPoint::new(px.u + cfg.pixel_sigma * du, px.v + cfg.pixel_sigma * dv);
        let descriptor: Vec<f64> =
            f.descriptor.iter().map(|d| d + cfg.descriptor_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        if !k.contains(noisy.u, noisy.v) {
            continue;
        }
        out.push(KeypointObservation { spacecraft, epoch, pixel: noisy, descriptor, truth_feature_id: f.id });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfMeasurement {
    pub transmitter: usize,
    pub receiver: usize,
    pub epoch: usize,
    /// m
    pub pseudorange: f64,
    /// m/s
    pub doppler: f64,
}

/// Clock bias and bias rate expressed in range units (m, m/s).
pub fn clock_range_bias(clock: &ClockState) -> (f64, f64) {
    (SPEED_OF_LIGHT * clock.offset, SPEED_OF_LIGHT * clock.drift)
}

/// One-way pseudorange and Doppler from `i` to `j`. Light time is neglected.
pub fn measure_rf<R: Rng>(
    states: &[SpacecraftState],
    biases: &[(f64, f64)],
    i: usize,
    j: usize,
    epoch: usize,
    sigma_range: f64,
    sigma_doppler: f64,
    rng: &mut R,
) -> RfMeasurement {
    assert_ne!(i, j, "RF link needs two spacecraft");
    let rho = states[j].position - states[i].position;
    let range = rho.norm();
    let rate = (states[j].velocity - states[i].velocity).dot(&(rho / range));
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    RfMeasurement {
        transmitter: i,
        receiver: j,
        epoch,
        pseudorange: range + biases[j].0 - biases[i].0 + sigma_range * n1,
        doppler: rate + biases[j].1 - biases[i].1 + sigma_doppler * n2,
    }
}

/// Nominal camera attitude: z toward the body center, y along the orbit
/// normal. Returns the ACI-to-CF rotation.
pub fn nominal_attitude(r: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let z = -r.normalize();
    let y = r.cross(v).normalize();
    let x = y.cross(&z);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StarTrackerNoise {
    /// arcsec
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
}

impl Default for StarTrackerNoise {
    fn default() -> Self {
        Self { sigma_x: 7.0, sigma_y: 7.0, sigma_z: 24.0 }
    }
}

/// Truth rotation premultiplied by a random 3-1-2 Euler sequence.
pub fn measure_attitude<R: Rng>(truth: &FrameRotation, noise: &StarTrackerNoise, rng: &mut R) -> FrameRotation {
    let as2rad = std::f64::consts::PI / (180.0 * 3600.0);
    let tz: f64 = noise.sigma_z * as2rad * rng.sample::<f64, _>(StandardNormal);
    let tx: f64 = noise.sigma_x * as2rad * rng.sample::<f64, _>(StandardNormal);
    let ty: f64 = noise.sigma_y * as2rad * rng.sample::<f64, _>(StandardNormal);
    let n = rot2(ty) * rot1(tx) * rot3(tz);
    FrameRotation { matrix: n * truth.matrix, from: truth.from, to: truth.to }
}

/// True acquisition time of a spacecraft that believes it samples at
/// `nominal`.
pub fn acquisition_time(nominal: f64, true_offset: f64, estimated_offset: f64) -> f64 {
    nominal - true_offset + estimated_offset
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmSpec {
    /// Mothership mean elements in ACIC (angles in degrees).
    pub a: f64,
    pub e: f64,
    pub i_deg: f64,
    pub raan_deg: f64,
    pub argp_deg: f64,
    pub mean_anomaly_deg: f64,
    /// Deputy ROE scaled by `a` (m): `[aδa, aδλ, aδe_x, aδe_y, aδi_x, aδi_y]`.
    pub deputies: Vec<[f64; 6]>,
    pub cr: f64,
    pub area_over_mass: f64,
}

impl Default for SwarmSpec {
    fn default() -> Self {
        Self {
            a: 45e3,
            e: 0.001,
            i_deg: 110.0,
            raan_deg: 110.0,
            argp_deg: 0.0,
            mean_anomaly_deg: 180.0,
            deputies: vec![[0.0, 10e3, 0.0, 0.0, 0.0, 0.0], [0.0, 20e3, 0.0, 0.0, 0.0, 0.0]],
            cr: 1.3,
            area_over_mass: 0.01,
        }
    }
}

impl SwarmSpec {
    pub fn count(&self) -> usize {
        1 + self.deputies.len()
    }

    pub fn chief_mean(&self) -> OrbitalElements {
        OrbitalElements {
            a: self.a,
            e: self.e,
            i: self.i_deg.to_radians(),
            raan: self.raan_deg.to_radians(),
            argp: self.argp_deg.to_radians(),
            mean_anomaly: self.mean_anomaly_deg.to_radians(),
        }
    }

    pub fn mean_elements(&self) -> Vec<OrbitalElements> {
        let chief = self.chief_mean();
        let mut out = vec![chief];
        for d in &self.deputies {
            let roe = RelativeOrbitalElements {
                da: d[0] / self.a,
                dlambda: d[1] / self.a,
                dex: d[2] / self.a,
                dey: d[3] / self.a,
                dix: d[4] / self.a,
                diy: d[5] / self.a,
            };
            out.push(roe_to_oe(&chief, &roe));
        }
        out
    }

    /// Initial ACI states: mean elements mapped to osculating with the
    /// field's J2, then rotated from ACIC to ACI.
    pub fn initial_states(&self, field: &GravityField, rotation: &RotationState) -> Vec<SpacecraftState> {
        let to_acic = aci_to_acic(rotation.alpha, rotation.delta);
        self.mean_elements()
            .iter()
            .map(|mean| {
                let osc = mean_to_osculating(mean, field.j2(), field.mu, field.ref_radius);
                let (r, v) = osc.to_cartesian(field.mu);
                SpacecraftState {
                    position: to_acic.transpose() * r,
                    velocity: to_acic.transpose() * v,
                    cr: self.cr,
                    area_over_mass: self.area_over_mass,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockSpec {
    pub q1: f64,
    pub q2: f64,
    /// Initial deputy offset and drift standard deviations in range units.
    pub sigma_bias_m: f64,
    pub sigma_bias_rate: f64,
}

impl Default for ClockSpec {
    fn default() -> Self {
        Self { q1: 6.2e-21, q2: 1.2e-27, sigma_bias_m: 20.0, sigma_bias_rate: 2e-3 }
    }
}

/// Truth state of one spacecraft at its latest acquisition time.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthSpacecraft {
    pub time: f64,
    pub state: SpacecraftState,
    pub clock: ClockState,
}

/// Propagates the swarm truth and clocks from acquisition to acquisition.
/// Every clock evolves under the same noise model; the mothership clock
/// (index 0) starts synchronized and deputy biases are reported relative
/// to it.
#[derive(Clone, Debug)]
pub struct SwarmTruth {
    pub spacecraft: Vec<TruthSpacecraft>,
    pub seed: u64,
}

impl SwarmTruth {
    pub fn new(states: Vec<SpacecraftState>, clocks: &ClockSpec, seed: u64) -> Self {
        let mut rng = stream_rng(seed, purpose::CLOCK, u64::MAX >> 9, 0);
        let spacecraft = states
            .into_iter()
            .enumerate()
            .map(|(k, state)| {
                let clock = if k == 0 {
                    ClockState { offset: 0.0, drift: 0.0, q1: clocks.q1, q2: clocks.q2 }
                } else {
                    ClockState {
                        offset: clocks.sigma_bias_m / SPEED_OF_LIGHT * rng.sample::<f64, _>(StandardNormal),
                        drift: clocks.sigma_bias_rate / SPEED_OF_LIGHT * rng.sample::<f64, _>(StandardNormal),
                        q1: clocks.q1,
                        q2: clocks.q2,
                    }
                };
                TruthSpacecraft { time: 0.0, state, clock }
            })
            .collect();
        Self { spacecraft, seed }
    }

    /// Advance spacecraft `k` to absolute time `t`, evolving its clock
    /// over the same interval.
    pub fn advance(
        &mut self,
        k: usize,
        t: f64,
        model: &ForceModel,
        integrator: Integrator,
        epoch: usize,
    ) -> Result<(), crate::dynamics::DynamicsError> {
        let sc = &mut self.spacecraft[k];
        let dt = t - sc.time;
        if dt == 0.0 {
            return Ok(());
        }
        if dt < 0.0 {
            return Err(crate::dynamics::DynamicsError::InvalidStep(dt));
        }
        sc.state = propagate(&sc.state, model, sc.time, dt, integrator)?;
        let mut rng = stream_rng(self.seed, purpose::CLOCK, epoch as u64, k as u64);
        sc.clock = clock_transition(&sc.clock, dt, &mut rng);
        sc.time = t;
        Ok(())
    }

    pub fn states(&self) -> Vec<SpacecraftState> {
        self.spacecraft.iter().map(|s| s.state).collect()
    }

    /// `c·(clock_k − clock_0)` offset (m) and drift (m/s); zero for the
    /// mothership.
    pub fn range_biases(&self) -> Vec<(f64, f64)> {
        let (b0, d0) = clock_range_bias(&self.spacecraft[0].clock);
        self.spacecraft
            .iter()
            .map(|s| {
                let (b, d) = clock_range_bias(&s.clock);
                (b - b0, d - d0)
            })
            .collect()
    }
}

/// Camera in the ACAF world frame for a spacecraft at ACI state `(r, v)`
/// and time `t`, with ACI→CF attitude `att`.
pub fn acaf_camera(
    intrinsics: Intrinsics,
    rotation: &RotationState,
    t: f64,
    r: &Vector3<f64>,
    att: &Matrix3<f64>,
    index: usize,
) -> Result<CameraModel, crate::geometry::GeometryError> {
    let m = rotation.aci_to_acaf(t);
    let orientation = FrameRotation { matrix: att * m.transpose(), from: Frame::Acaf, to: Frame::Cf(index) };
    CameraModel::new(intrinsics, m * r, orientation)
}

/// 2048×1536 detector, 8 mm lens with 3.2 µm pixels.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::square(2048, 1536, 2500.0)
}
