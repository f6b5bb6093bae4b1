//! End-to-end simulation: truth generation, the per-epoch pipeline
//! (detect, correlate, triangulate, filter, retire), periodic shape fits,
//! and persisted logs from which the run report is recomputed.

mod report;

pub use report::{emit_plots, report_from_dir, report_from_logs, GroupStat, RunReport};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{
    consensus_reject, correlate_filter_to_image, epipolar_reject, gamma_covariance, match_descriptors, share_correlations,
    CorrelationConfig, EpipolarCamera, LandmarkDatabase, LandmarkStatus, MatchPair, TrackedLandmark,
};
use crate::dynamics::gravity::write_gravity_file;
use crate::dynamics::{ForceModel, GravityField, Integrator, SunEphemeris};
use crate::dynamics::propagate::AdaptiveOptions;
use crate::geometry::{Frame, FrameRotation, Intrinsics, PixelPoint};
use crate::shape::{fit_shape, radius_variances, shape_rmse, write_shape_file, RadiusCovariance, ShapeCoefficients, ShapeFit, ShapeFitProblem};
use crate::stereo::{stereo_covariance_joint, triangulate, StereoConfig, StereoObservation};
use crate::truth::{
    acaf_camera, default_intrinsics, detect_keypoints, generate_body, measure_attitude, measure_rf, nominal_attitude, purpose,
    seed_features, stream_rng, BodySpec, ClockSpec, DetectionConfig, FeatureSpec, KeypointObservation, StarTrackerNoise,
    SwarmSpec, SwarmTruth,
};
use crate::ukf::{
    augment, measurement_update, nees, retire_from_state, sub_covariance, time_update, AsncState, FilterEstimate, FilterModel,
    Measurement, StateLayout, UkfConfig,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("filter failure at epoch {0}: {1}")]
    Filter(usize, String),
    #[error("truth propagation failed: {0}")]
    Truth(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log {0}: {1}")]
    Log(String, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthOptions {
    pub srp: bool,
    pub third_body: bool,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for TruthOptions {
    fn default() -> Self {
        Self { srp: true, third_body: true, rtol: 1e-12, atol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub sigma_range: f64,
    pub sigma_doppler: f64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self { sigma_range: 0.10, sigma_doppler: 1e-3 }
    }
}

/// A-priori 1σ filter uncertainties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AprioriSigmas {
    pub position: f64,
    pub velocity: f64,
    /// Fraction of the nominal C_r.
    pub cr_fraction: f64,
    pub bias_range: f64,
    pub bias_rate: f64,
    pub mu_fraction: f64,
    pub pole_deg: f64,
    /// Fraction of the spin rate.
    pub spin_fraction: f64,
    pub gravity: f64,
}

impl Default for AprioriSigmas {
    fn default() -> Self {
        Self {
            position: 500.0,
            velocity: 0.05,
            cr_fraction: 0.10,
            bias_range: 20.0,
            bias_rate: 2e-3,
            mu_fraction: 0.05,
            pole_deg: 0.1,
            spin_fraction: 4e-6,
            gravity: 0.005,
        }
    }
}

impl AprioriSigmas {
    fn all(&self) -> [f64; 9] {
        [
            self.position,
            self.velocity,
            self.cr_fraction,
            self.bias_range,
            self.bias_rate,
            self.mu_fraction,
            self.pole_deg,
            self.spin_fraction,
            self.gravity,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkLimits {
    pub max_new_per_epoch: usize,
    pub max_tracked: usize,
}

impl Default for LandmarkLimits {
    fn default() -> Self {
        Self { max_new_per_epoch: 10, max_tracked: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeOptions {
    pub degree: usize,
    pub alpha: f64,
    /// Refit after every full orbit in addition to the final fit.
    pub every_orbit: bool,
    /// Highest degree of the regularization ablation written with the plots.
    pub ablation_max_degree: usize,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        Self { degree: 8, alpha: 1.84, every_orbit: true, ablation_max_degree: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    /// True-positive distance at the reference body radius (m).
    pub tp_threshold: f64,
    pub reference_radius: f64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self { tp_threshold: 50.0, reference_radius: 8400.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub orbits: f64,
    /// Measurement interval (s).
    pub cadence: f64,
    pub camera: Intrinsics,
    /// Heliocentric geometry; the default phase puts the sub-solar point
    /// at low body latitude so both hemispheres are lit.
    pub sun: SunEphemeris,
    pub body: BodySpec,
    pub features: FeatureSpec,
    pub detection: DetectionConfig,
    pub swarm: SwarmSpec,
    pub clock: ClockSpec,
    pub star_tracker: StarTrackerNoise,
    pub truth: TruthOptions,
    pub rf: RfConfig,
    pub correlation: CorrelationConfig,
    pub stereo: StereoConfig,
    pub filter: UkfConfig,
    pub apriori: AprioriSigmas,
    pub landmarks: LandmarkLimits,
    pub shape: ShapeOptions,
    pub evaluation: EvaluationOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 42,
            orbits: 2.0,
            cadence: 300.0,
            camera: default_intrinsics(),
            sun: SunEphemeris { phase0: std::f64::consts::FRAC_PI_2, ..SunEphemeris::default() },
            body: BodySpec::default(),
            features: FeatureSpec::default(),
            detection: DetectionConfig::default(),
            swarm: SwarmSpec::default(),
            clock: ClockSpec::default(),
            star_tracker: StarTrackerNoise::default(),
            truth: TruthOptions::default(),
            rf: RfConfig::default(),
            correlation: CorrelationConfig::default(),
            stereo: StereoConfig::default(),
            filter: UkfConfig::default(),
            apriori: AprioriSigmas::default(),
            landmarks: LandmarkLimits::default(),
            shape: ShapeOptions::default(),
            evaluation: EvaluationOptions::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: String| Err(ScenarioError::Config(m));
        if !(self.orbits >= 0.0 && self.orbits.is_finite()) {
            return err("orbits must be non-negative".into());
        }
        if !(self.cadence > 0.0) {
            return err("cadence must be positive".into());
        }
        if self.swarm.count() < 2 {
            return err("stereovision needs at least two spacecraft".into());
        }
        if self.apriori.all().iter().any(|s| !(*s > 0.0)) {
            return err("a-priori sigmas must be positive".into());
        }
        if self.filter.gravity_degree > self.body.gravity_degree {
            return err("estimated gravity degree exceeds the truth degree".into());
        }
        if self.features.count == 0 {
            return err("at least one surface feature is required".into());
        }
        if !(self.rf.sigma_range > 0.0 && self.rf.sigma_doppler > 0.0) {
            return err("RF sigmas must be positive".into());
        }
        self.filter.validate().map_err(ScenarioError::Config)?;
        self.correlation.validate().map_err(ScenarioError::Config)?;
        self.camera.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
        Ok(())
    }

    /// Orbit period of the mothership's mean orbit (s).
    pub fn period(&self) -> f64 {
        self.swarm.chief_mean().period(self.body.mu)
    }

    pub fn epochs(&self) -> usize {
        (self.orbits * self.period() / self.cadence).round() as usize
    }

    pub fn epochs_per_orbit(&self) -> usize {
        ((self.period() / self.cadence).round() as usize).max(1)
    }

    pub fn tp_threshold(&self) -> f64 {
        self.evaluation.tp_threshold * self.body.average_radius / self.evaluation.reference_radius
    }
}

/// Persisted outputs of a run, as file name → contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLogs {
    pub files: BTreeMap<String, String>,
}

impl RunLogs {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), ScenarioError> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in &self.files {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub logs: RunLogs,
    /// Wall-clock seconds per pipeline stage; kept out of the report.
    pub timing: BTreeMap<String, f64>,
}

/// Truth values of the filter head state at the current time.
fn truth_head(layout: &StateLayout, cfg: &ScenarioConfig, field: &GravityField, truth: &SwarmTruth) -> DVector<f64> {
    let rot = cfg.body.rotation();
    let mut x = DVector::zeros(layout.head_len());
    x[0] = rot.alpha;
    x[1] = rot.delta;
    x[2] = rot.omega;
    x[StateLayout::MU] = field.mu;
    for (k, c) in field.truncated(layout.gravity_degree).packed().into_iter().enumerate() {
        x[StateLayout::GRAVITY + k] = c;
    }
    for (i, sc) in truth.spacecraft.iter().enumerate() {
        let p = layout.spacecraft(i);
        x.fixed_rows_mut::<3>(p).copy_from(&sc.state.position);
        x.fixed_rows_mut::<3>(p + 3).copy_from(&sc.state.velocity);
        x[p + 6] = sc.state.cr;
    }
    for (i, (b, d)) in truth.range_biases().into_iter().enumerate() {
        if let Some(c) = layout.clock(i) {
            x[c] = b;
            x[c + 1] = d;
        }
    }
    x
}

fn apriori_sigmas(layout: &StateLayout, cfg: &ScenarioConfig, truth: &DVector<f64>) -> DVector<f64> {
    let a = &cfg.apriori;
    let mut s = DVector::zeros(layout.head_len());
    s[0] = a.pole_deg.to_radians();
    s[1] = a.pole_deg.to_radians();
    s[2] = a.spin_fraction * truth[2].abs();
    s[StateLayout::MU] = a.mu_fraction * truth[StateLayout::MU];
    for k in 0..layout.gravity_len() {
        s[StateLayout::GRAVITY + k] = a.gravity;
    }
    for i in 0..layout.n_spacecraft {
        let p = layout.spacecraft(i);
        for j in 0..3 {
            s[p + j] = a.position;
            s[p + 3 + j] = a.velocity;
        }
        s[p + 6] = a.cr_fraction * truth[p + 6].abs();
    }
    for i in 1..layout.n_spacecraft {
        let c = layout.clock(i).unwrap();
        s[c] = a.bias_range;
        s[c + 1] = a.bias_rate;
    }
    s
}

/// Initial belief emulating the ground-in-the-loop phase: the truth plus an
/// error drawn from the a-priori covariance, and no landmarks.
pub fn init_from_ground_phase(cfg: &ScenarioConfig, truth: &DVector<f64>, layout: &StateLayout, sigmas: &DVector<f64>) -> FilterEstimate {
    let mut rng = stream_rng(cfg.seed, purpose::INIT, 0, 0);
    let mean = DVector::from_fn(truth.len(), |i, _| truth[i] + sigmas[i] * rng.sample::<f64, _>(StandardNormal));
    let covariance = DMatrix::from_diagonal(&sigmas.map(|s| s * s));
    FilterEstimate { mean, covariance, time: 0.0, epoch: 0, layout: *layout, landmark_ids: Vec::new() }
}

/// Position/velocity indices of every spacecraft.
pub fn pv_indices(layout: &StateLayout) -> Vec<usize> {
    (0..layout.n_spacecraft).flat_map(|i| (0..6).map(move |k| layout.spacecraft(i) + k)).collect()
}

fn fmt_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn f(v: f64) -> String {
    format!("{v}")
}

/// Evenly spread unit vectors (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            Vector3::new(r * th.cos(), r * th.sin(), z)
        })
        .collect()
}

/// Reference vertices of the truth surface used for shape RMSE.
pub fn reference_vertices(truth: &ShapeCoefficients, n: usize) -> Vec<Vector3<f64>> {
    fibonacci_directions(n).into_iter().map(|d| d * truth.radius_at(&d)).collect()
}

pub const REFERENCE_VERTICES: usize = 5000;

/// Power-law regularized fit on the landmark database.
pub fn fit_database(db: &LandmarkDatabase, degree: usize, alpha: f64) -> Option<(ShapeFit, usize)> {
    let (pts, covs) = db.positions_and_covariances();
    if pts.len() < 2 {
        return None;
    }
    let var = radius_variances(&pts, &covs);
    let problem = ShapeFitProblem::new(&pts, RadiusCovariance::Diagonal(var), degree, alpha).ok()?;
    fit_shape(&problem).ok().map(|fit| (fit, pts.len()))
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn time<T>(&mut self, key: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.0.entry(key.to_string()).or_insert(0.0) += t.elapsed().as_secs_f64();
        out
    }
}

/// Runs the scenario and returns the report recomputed from its logs.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    let mut timer = Timer(BTreeMap::new());
    let (shape, field, rot) = generate_body(&cfg.body);
    let features = seed_features(&shape, &cfg.features);
    let sun = cfg.sun;
    let n_sc = cfg.swarm.count();
    let mut truth = SwarmTruth::new(cfg.swarm.initial_states(&field, &rot), &cfg.clock, cfg.seed);
    let truth_model = ForceModel { field: &field, rotation: rot, sun, srp: cfg.truth.srp, third_body: cfg.truth.third_body };
    let truth_integrator = Integrator::Adaptive(AdaptiveOptions { rtol: cfg.truth.rtol, atol: cfg.truth.atol, max_steps: 1_000_000 });
    let model = FilterModel {
        ref_radius: field.ref_radius,
        w0: rot.w0,
        sun,
        area_over_mass: cfg.swarm.area_over_mass,
        srp: cfg.truth.srp,
        third_body: cfg.truth.third_body,
        rk4_substeps: 10,
        clock_q1: cfg.clock.q1,
        clock_q2: cfg.clock.q2,
        intrinsics: cfg.camera,
    };
    let layout0 = StateLayout::new(n_sc, cfg.filter.gravity_degree);
    let head_truth0 = truth_head(&layout0, cfg, &field, &truth);
    let sig0 = apriori_sigmas(&layout0, cfg, &head_truth0);
    let mut est = init_from_ground_phase(cfg, &head_truth0, &layout0, &sig0);
    let mut asnc = AsncState::new(n_sc, &cfg.filter.asnc);
    asnc.prime(&est, &model, cfg.cadence);
    let mut db = LandmarkDatabase::new();
    let mut anchor: HashMap<usize, usize> = HashMap::new();
    let tp_threshold = cfg.tp_threshold();
    let labels = layout0.labels();
    let head = layout0.head_len();
    let pv = pv_indices(&layout0);
    let middle = (n_sc == 3).then_some(1);
    let m_t1d = cfg.correlation.m_t1d();
    let r_px = Matrix2::identity() * cfg.correlation.sigma_px.powi(2);

    let mut filter_csv = String::new();
    {
        let mut h: Vec<String> =
            ["epoch", "time", "n_landmarks", "n_pixel", "n_rf", "nis", "nis_dims", "nees_pv"].iter().map(|s| s.to_string()).collect();
        for l in &labels[..head] {
            h.push(format!("err_{l}"));
            h.push(format!("sig_{l}"));
        }
        for i in 0..n_sc {
            for a in ["x", "y", "z"] {
                h.push(format!("q_sc{i}_{a}"));
            }
        }
        fmt_row(&mut filter_csv, &h);
    }
    let mut truth_csv = String::from("epoch,time,spacecraft,rx,ry,rz,vx,vy,vz,bias,bias_rate\n");
    let mut rf_csv = String::from("epoch,from,to,pseudorange,doppler\n");
    let mut kp_csv = String::from("epoch,spacecraft,u,v,feature\n");
    let mut corr_csv = String::from("epoch,method,spacecraft,landmark,members,truth_distance,true_positive\n");
    let mut stereo_csv = String::from("epoch,landmark,views,rms_px,err_x,err_y,err_z,sig_x,sig_y,sig_z\n");
    let mut shape_hist = String::from("epoch,n_points,degree,nu,rmse\n");
    let truth_shape = &shape.coefficients;
    let reference = reference_vertices(truth_shape, REFERENCE_VERTICES);

    let n_epochs = cfg.epochs();
    let per_orbit = cfg.epochs_per_orbit();
    for k in 0..n_epochs {
        let t = k as f64 * cfg.cadence;
        let q_used = asnc.q_tilde.clone();
        if k > 0 {
            timer.time("truth_propagation", || -> Result<(), ScenarioError> {
                for i in 0..n_sc {
                    truth.advance(i, t, &truth_model, truth_integrator, k).map_err(|e| ScenarioError::Truth(e.to_string()))?;
                }
                Ok(())
            })?;
            let (e, info) = timer
                .time("time_update", || time_update(&est, cfg.cadence, &model, &cfg.filter, &q_used))
                .map_err(|e| ScenarioError::Filter(k, e.to_string()))?;
            if info.repaired {
                log::warn!("epoch {k}: covariance repaired before time update");
            }
            est = e;
        }
        est.epoch = k;

        // measurements
        let m_acaf = rot.aci_to_acaf(t);
        let sun_acaf = m_acaf * sun.direction(t);
        let mut keypoints: Vec<Vec<KeypointObservation>> = Vec::with_capacity(n_sc);
        let mut att_true = Vec::with_capacity(n_sc);
        let mut att_meas = Vec::with_capacity(n_sc);
        for (i, sc) in truth.spacecraft.iter().enumerate() {
            let (r, v) = (sc.state.position, sc.state.velocity);
            let at = nominal_attitude(&r, &v);
            let mut arng = stream_rng(cfg.seed, purpose::ATTITUDE, k as u64, i as u64);
            let am = measure_attitude(&FrameRotation { matrix: at, from: Frame::Aci, to: Frame::Cf(i) }, &cfg.star_tracker, &mut arng).matrix;
            let cam = acaf_camera(cfg.camera, &rot, t, &r, &at, i).map_err(|e| ScenarioError::Truth(e.to_string()))?;
            let mut drng = stream_rng(cfg.seed, purpose::DETECT, k as u64, i as u64);
            let kps = timer.time("detection", || detect_keypoints(&features, &shape, &cam, &sun_acaf, &cfg.detection, i, k, &mut drng));
            for kp in &kps {
                let _ = writeln!(kp_csv, "{k},{i},{},{},{}", kp.pixel.u, kp.pixel.v, kp.truth_feature_id);
            }
            keypoints.push(kps);
            att_true.push(at);
            att_meas.push(am);
            let (b, bd) = truth.range_biases()[i];
            let _ = writeln!(
                truth_csv,
                "{k},{t},{i},{},{},{},{},{},{},{b},{bd}",
                r.x, r.y, r.z, v.x, v.y, v.z
            );
        }
        let states = truth.states();
        let biases = truth.range_biases();
        let mut rng_rf = stream_rng(cfg.seed, purpose::RF, k as u64, 0);
        let mut meas = Vec::new();
        for i in 0..n_sc {
            for j in 0..n_sc {
                if i == j {
                    continue;
                }
                let m = measure_rf(&states, &biases, i, j, k, cfg.rf.sigma_range, cfg.rf.sigma_doppler, &mut rng_rf);
                let _ = writeln!(rf_csv, "{k},{i},{j},{},{}", m.pseudorange, m.doppler);
                meas.push(Measurement::Range { from: i, to: j, value: m.pseudorange });
                meas.push(Measurement::RangeRate { from: i, to: j, value: m.doppler });
            }
        }

        // filter-to-image correlation on the pre-update belief
        let mut claimed: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_sc];
        let mut f2sc_counts: HashMap<usize, u32> = HashMap::new();
        timer.time("filter_to_image", || {
            let tracked: Vec<TrackedLandmark> = est
                .landmark_ids
                .iter()
                .enumerate()
                .map(|(s, id)| TrackedLandmark { id: *id, position: est.landmark_position(s), descriptors: &db.records[id].descriptors })
                .collect();
            for i in 0..n_sc {
                let view = est.view(&model, i, &att_meas[i]);
                let assignments = correlate_filter_to_image(&tracked, &keypoints[i], &view, &est.view_covariance(i), &cfg.correlation);
                for a in assignments {
                    let kp = &keypoints[i][a.keypoint];
                    claimed[i].insert(a.keypoint);
                    *f2sc_counts.entry(a.landmark).or_insert(0) += 1;
                    let d = (features[kp.truth_feature_id].acaf_position - features[anchor[&a.landmark]].acaf_position).norm();
                    let _ = writeln!(corr_csv, "{k},f2sc,{i},{},1,{d},{}", a.landmark, u8::from(d <= tp_threshold));
                    meas.push(Measurement::Pixel { landmark: a.landmark, spacecraft: i, pixel: kp.pixel.vec(), att: att_meas[i] });
                }
            }
        });

        // spacecraft-to-spacecraft correlation and stereovision
        let room = cfg.landmarks.max_tracked.saturating_sub(est.layout.n_landmarks).min(cfg.landmarks.max_new_per_epoch);
        if room > 0 {
            let sets = timer.time("spacecraft_to_spacecraft", || {
                let mut matches: BTreeMap<(usize, usize), Vec<MatchPair>> = BTreeMap::new();
                for i in 0..n_sc {
                    for j in i + 1..n_sc {
                        let ia: Vec<usize> = (0..keypoints[i].len()).filter(|x| !claimed[i].contains(x)).collect();
                        let ib: Vec<usize> = (0..keypoints[j].len()).filter(|x| !claimed[j].contains(x)).collect();
                        let ka: Vec<KeypointObservation> = ia.iter().map(|&x| keypoints[i][x].clone()).collect();
                        let kb: Vec<KeypointObservation> = ib.iter().map(|&x| keypoints[j][x].clone()).collect();
                        let pairs = match_descriptors(&ka, &kb, cfg.correlation.lowe_ratio);
                        let p1: Vec<_> = pairs.iter().map(|p| ka[p.a].pixel.vec()).collect();
                        let p2: Vec<_> = pairs.iter().map(|p| kb[p.b].pixel.vec()).collect();
                        let r21 = att_meas[j] * att_meas[i].transpose();
                        let mut crng = stream_rng(cfg.seed, purpose::DETECT + 100, k as u64, (i * n_sc + j) as u64);
                        let Ok(cons) = consensus_reject(&p1, &p2, &cfg.camera, &cfg.camera, &r21, &cfg.correlation, &mut crng) else {
                            log::debug!("epoch {k}: no consensus between {i} and {j}");
                            continue;
                        };
                        let c1 = EpipolarCamera::from_view(&est.view(&model, i, &att_meas[i]));
                        let c2 = EpipolarCamera::from_view(&est.view(&model, j, &att_meas[j]));
                        let pg = gamma_covariance(&est.covariance, est.layout.spacecraft(i), est.layout.spacecraft(j));
                        let epi = epipolar_reject(&p1, &p2, &c1, &c2, &pg, &r_px, &r_px, m_t1d);
                        let kept: Vec<MatchPair> = pairs
                            .iter()
                            .zip(&cons.inliers)
                            .zip(&epi)
                            .filter(|((_, c), e)| **c && e.0.is_some())
                            .map(|((p, _), e)| MatchPair { a: ia[p.a], b: ib[p.b], epipolar_d: Some(e.1), mahalanobis: e.0, ..*p })
                            .collect();
                        matches.insert((i, j), kept);
                    }
                }
                share_correlations(&matches, middle)
            });
            let mut new_points = Vec::new();
            let mut new_meta = Vec::new();
            timer.time("stereovision", || {
                for set in sets {
                    if new_points.len() >= room {
                        break;
                    }
                    let obs: Vec<StereoObservation> = set
                        .members
                        .iter()
                        .map(|&(i, kpi)| StereoObservation { view: est.view(&model, i, &att_meas[i]), pixel: keypoints[i][kpi].pixel })
                        .collect();
                    let feats: Vec<usize> = set.members.iter().map(|&(i, kpi)| keypoints[i][kpi].truth_feature_id).collect();
                    let fr = &features;
                    let spread = feats
                        .iter()
                        .flat_map(|a| feats.iter().map(move |b| (fr[*a].acaf_position - fr[*b].acaf_position).norm()))
                        .fold(0.0, f64::max);
                    let lead = set.members[0].0;
                    let _ = writeln!(corr_csv, "{k},s2sc,{lead},,{},{spread},{}", set.members.len(), u8::from(spread <= tp_threshold));
                    match triangulate(&obs, &cfg.stereo) {
                        Ok((l, rms)) => {
                            new_points.push((l, obs));
                            new_meta.push((set.members.clone(), feats[0], rms));
                        }
                        Err(e) => log::debug!("epoch {k}: stereo candidate dropped: {e}"),
                    }
                }
            });
            if !new_points.is_empty() {
                match stereo_covariance_joint(&new_points, &est.covariance, cfg.stereo.sigma_px) {
                    Ok((p_ll, cross)) => {
                        let mut ids = Vec::new();
                        let mut positions = Vec::new();
                        for (idx, ((l, _), (members, feat, rms))) in new_points.iter().zip(&new_meta).enumerate() {
                            let mut desc = BTreeMap::new();
                            for &(i, kpi) in members {
                                desc.insert(i, keypoints[i][kpi].descriptor.clone());
                            }
                            let pl = Matrix3::from_fn(|a, b| p_ll[(3 * idx + a, 3 * idx + b)]);
                            let id = db.insert(*l, pl, desc, k);
                            anchor.insert(id, *feat);
                            ids.push(id);
                            positions.push(*l);
                            let lead = members[0].0;
                            let c = att_true[lead] * m_acaf.transpose();
                            let err = c * (l - features[*feat].acaf_position);
                            let sig = (c * pl * c.transpose()).diagonal().map(f64::sqrt);
                            let _ = writeln!(
                                stereo_csv,
                                "{k},{id},{},{rms},{},{},{},{},{},{}",
                                members.len(),
                                err.x,
                                err.y,
                                err.z,
                                sig.x,
                                sig.y,
                                sig.z
                            );
                        }
                        let (e, dropped) = augment(&est, &ids, &positions, &p_ll, &cross, cfg.filter.stereo_inflation)
                            .map_err(|e| ScenarioError::Filter(k, e.to_string()))?;
                        for id in dropped {
                            log::warn!("epoch {k}: landmark {id} dropped, augmented covariance indefinite");
                            db.records.remove(&id);
                        }
                        est = e;
                    }
                    Err(e) => log::debug!("epoch {k}: joint stereo covariance failed: {e}"),
                }
            }
        }

        // measurement update
        let n_before = est.layout.n_landmarks;
        let new_ids: BTreeSet<usize> = est.landmark_ids.iter().copied().filter(|id| db.records[id].created_epoch == k).collect();
        let (e, rec) = timer
            .time("measurement_update", || measurement_update(&est, &meas, &model, &cfg.filter))
            .map_err(|e| ScenarioError::Filter(k, e.to_string()))?;
        est = e;
        if cfg.filter.asnc.enabled {
            asnc.update(&rec, &est, &model, &q_used, cfg.cadence);
        }

        // landmark bookkeeping
        for (s, id) in est.landmark_ids.clone().iter().enumerate() {
            if !new_ids.contains(id) {
                db.record_epoch(*id, f2sc_counts.get(id).copied().unwrap_or(0));
            }
            let r = db.records.get_mut(id).expect("tracked landmark in database");
            r.acaf_position = est.landmark_position(s);
            r.covariance = est.landmark_covariance(s);
        }
        let out = db.retire_and_dedupe(cfg.correlation.n_r, cfg.correlation.d_r);
        let leaving: Vec<usize> = out.retired.iter().chain(&out.discarded).copied().filter(|id| est.landmark_slot(*id).is_some()).collect();
        if !leaving.is_empty() {
            est = retire_from_state(&est, &leaving).map_err(|e| ScenarioError::Filter(k, e.to_string()))?.0;
        }
        debug_assert!(est.landmark_ids.iter().all(|id| db.records[id].status == LandmarkStatus::Tracked));
        let _ = n_before;

        // epoch log
        let th = truth_head(&layout0, cfg, &field, &truth);
        let err_pv = DVector::from_iterator(pv.len(), pv.iter().map(|&i| est.mean[i] - th[i]));
        let nees_pv = nees(&err_pv, &sub_covariance(&est.covariance, &pv)).unwrap_or(f64::NAN);
        let mut row = vec![
            k.to_string(),
            f(t),
            est.layout.n_landmarks.to_string(),
            rec.n_pixel.to_string(),
            rec.n_rf.to_string(),
            f(rec.nis),
            rec.dims.to_string(),
            f(nees_pv),
        ];
        for i in 0..head {
            row.push(f(est.mean[i] - th[i]));
            row.push(f(est.covariance[(i, i)].max(0.0).sqrt()));
        }
        for q in &asnc.q_tilde {
            row.extend(q.iter().map(|v| f(*v)));
        }
        fmt_row(&mut filter_csv, &row);

        if cfg.shape.every_orbit && k > 0 && k % per_orbit == 0 {
            if let Some((fit, n)) = timer.time("shape", || fit_database(&db, cfg.shape.degree, cfg.shape.alpha)) {
                let _ = writeln!(shape_hist, "{k},{n},{},{},{}", cfg.shape.degree, fit.nu, shape_rmse(&fit.coefficients, &reference));
            }
        }
    }

    let mut logs = RunLogs::default();
    let final_fit = timer.time("shape", || fit_database(&db, cfg.shape.degree, cfg.shape.alpha));
    if let Some((fit, n)) = &final_fit {
        logs.files.insert("shape.txt".into(), write_shape_file(fit));
        let _ = writeln!(shape_hist, "{n_epochs},{n},{},{},{}", cfg.shape.degree, fit.nu, shape_rmse(&fit.coefficients, &reference));
    }
    logs.files.insert("truth_shape.txt".into(), write_shape_file(&ShapeFit {
        coefficients: truth_shape.clone(),
        alpha: cfg.body.shape_alpha,
        nu: 0.0,
        gcv: None,
        warning: None,
    }));
    logs.files.insert("truth_gravity.txt".into(), write_gravity_file(&field));
    logs.files.insert("filter.csv".into(), filter_csv);
    logs.files.insert("truth.csv".into(), truth_csv);
    logs.files.insert("rf.csv".into(), rf_csv);
    logs.files.insert("keypoints.csv".into(), kp_csv);
    logs.files.insert("correlations.csv".into(), corr_csv);
    logs.files.insert("stereo.csv".into(), stereo_csv);
    logs.files.insert("shape_history.csv".into(), shape_hist);
    logs.files.insert("landmarks.csv".into(), db.to_csv().map_err(|e| ScenarioError::Log("landmarks.csv".into(), e.to_string()))?);
    logs.files.insert("config.toml".into(), cfg.to_toml());
    let plots = timer.time("plots", || emit_plots(&logs, cfg));
    for (k, v) in plots? {
        logs.files.insert(k, v);
    }
    let report = report_from_logs(&logs)?;
    logs.files.insert("report.json".into(), serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(RunOutput { report, logs, timing: timer.0 })
}

/// Pixel helper for callers assembling measurements by hand.
pub fn pixel_measurement(landmark: usize, spacecraft: usize, px: PixelPoint, att: Matrix3<f64>) -> Measurement {
    Measurement::Pixel { landmark, spacecraft, pixel: px.vec(), att }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_duration_run_has_empty_logs() {
        let cfg = ScenarioConfig { orbits: 0.0, ..ScenarioConfig::default() };
        let out = run(&cfg).unwrap();
        assert_eq!(out.logs.get("filter.csv").unwrap().lines().count(), 1);
        assert_eq!(out.logs.get("rf.csv").unwrap().lines().count(), 1);
        assert_eq!(out.report.epochs, 0);
        assert!(out.report.filter.iter().all(|g| g.rmse.is_none() && g.samples == 0));
        assert!(out.report.gravity.is_empty() && out.report.shape.is_none());
        assert_eq!(out.logs.get("plot_errors.csv").unwrap().lines().count(), 1);
        assert_eq!(out.logs.get("plot_shape_ablation.csv").unwrap().lines().count(), 1);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
        assert!(ScenarioConfig::from_toml("cadence = -1.0").is_err());
        assert!(ScenarioConfig::from_toml("bogus = 1").is_err());
        let mut bad = cfg.clone();
        bad.swarm.deputies.clear();
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.apriori.position = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn epoch_count_follows_period() {
        let cfg = ScenarioConfig::default();
        let per = cfg.epochs_per_orbit();
        assert!((295..=305).contains(&per), "{per}");
        assert_eq!(cfg.epochs(), (2.0 * cfg.period() / 300.0).round() as usize);
    }

    #[test]
    fn ground_phase_sampling() {
        let cfg = ScenarioConfig::default();
        let layout = StateLayout::new(3, 4);
        let truth = DVector::from_element(layout.head_len(), 1.0);
        let zero = DVector::zeros(layout.head_len());
        let e = init_from_ground_phase(&cfg, &truth, &layout, &zero);
        assert_eq!(e.mean, truth);
        assert!(e.landmark_ids.is_empty());
        let sig = DVector::from_fn(layout.head_len(), |i, _| 1.0 + i as f64);
        let mut sum = DVector::zeros(layout.head_len());
        let n = 1000;
        for s in 0..n {
            let c = ScenarioConfig { seed: s, ..cfg.clone() };
            let e = init_from_ground_phase(&c, &truth, &layout, &sig);
            sum += (e.mean - &truth).map(|v| v * v);
        }
        for i in 0..layout.head_len() {
            let ratio = (sum[i] / n as f64).sqrt() / sig[i];
            assert!((ratio - 1.0).abs() < 0.1, "{i}: {ratio}");
        }
    }

    #[test]
    fn fibonacci_lattice_is_unit_and_balanced() {
        let d = fibonacci_directions(1000);
        assert!(d.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let mean: Vector3<f64> = d.iter().sum::<Vector3<f64>>() / 1000.0;
        assert!(mean.norm() < 1e-2);
    }
}
