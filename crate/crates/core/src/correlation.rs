//! Keypoint correlation: spacecraft-to-spacecraft matching with consensus
//! and epipolar outlier rejection, correlation sharing across the
//! formation, filter-to-image landmark correlation, and the landmark
//! database with retirement and deduplication.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Matrix6, RowVector3, SMatrix, Vector2, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mahalanobis_threshold, skew, Intrinsics, PixelGate};
use crate::stereo::ViewGeometry;
use crate::truth::KeypointObservation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("no consensus model reached the minimum inlier fraction")]
    ConsensusFailure,
    #[error("landmark database: {0}")]
    Database(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationConfig {
    pub p_m: f64,
    /// Maximum squared descriptor difference δ_f,t.
    pub descriptor_threshold: f64,
    pub w_2d: f64,
    pub w_u: f64,
    pub w_v: f64,
    pub n_r: u32,
    /// Dedupe search radius d_r (m).
    pub d_r: f64,
    pub lowe_ratio: f64,
    pub consensus_iterations: usize,
    /// Consensus inlier threshold in units of the pixel σ; `None` uses the
    /// 1-D Mahalanobis threshold.
    pub consensus_threshold_sigmas: Option<f64>,
    pub consensus_min_inlier_fraction: f64,
    pub sigma_px: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            p_m: 0.001,
            descriptor_threshold: 100.0 * 100.0,
            w_2d: 20.0,
            w_u: 5.0,
            w_v: 5.0,
            n_r: 3,
            d_r: 500.0,
            lowe_ratio: 0.8,
            consensus_iterations: 500,
            consensus_threshold_sigmas: None,
            consensus_min_inlier_fraction: 0.5,
            sigma_px: 2.0,
        }
    }
}

impl CorrelationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.w_2d > 0.0 && self.w_u > 0.0 && self.w_v > 0.0) {
            return Err("correlation weights must be positive".into());
        }
        if self.n_r < 1 {
            return Err("n_r must be at least 1".into());
        }
        if !(self.p_m > 0.0 && self.p_m < 1.0) {
            return Err("p_m must lie in (0, 1)".into());
        }
        if !(self.sigma_px > 0.0) {
            return Err("pixel sigma must be positive".into());
        }
        Ok(())
    }

    pub fn m_t1d(&self) -> f64 {
        mahalanobis_threshold(self.p_m, 1).expect("validated p_m")
    }

    pub fn m_t2d(&self) -> f64 {
        mahalanobis_threshold(self.p_m, 2).expect("validated p_m")
    }
}

pub fn descriptor_distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A putative correspondence between keypoint `a` of one image and
/// keypoint `b` of another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: usize,
    pub b: usize,
    pub distance2: f64,
    pub epipolar_d: Option<f64>,
    pub mahalanobis: Option<f64>,
}

fn nearest_two<'a>(q: &[f64], set: impl Iterator<Item = (usize, &'a Vec<f64>)>) -> (Option<(usize, f64)>, f64) {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (j, d) in set {
        let d2 = descriptor_distance2(q, d);
        match best {
            Some((_, b)) if d2 >= b => second = second.min(d2),
            _ => {
                if let Some((_, b)) = best {
                    second = second.min(b);
                }
                best = Some((j, d2));
            }
        }
    }
    (best, second)
}

/// Mutual nearest neighbours passing the ratio test on descriptor
/// distances. A lone candidate (no second neighbour) is accepted.
pub fn match_descriptors(a: &[KeypointObservation], b: &[KeypointObservation], lowe_ratio: f64) -> Vec<MatchPair> {
    let mut back: Vec<Option<usize>> = Vec::with_capacity(b.len());
    for kb in b {
        let (best, _) = nearest_two(&kb.descriptor, a.iter().map(|k| &k.descriptor).enumerate());
        back.push(best.map(|x| x.0));
    }
    let mut out = Vec::new();
    for (i, ka) in a.iter().enumerate() {
        let (best, second) = nearest_two(&ka.descriptor, b.iter().map(|k| &k.descriptor).enumerate());
        let Some((j, d2)) = best else { continue };
        if !d2.is_finite() || back[j] != Some(i) {
            continue;
        }
        if second.is_finite() && d2.sqrt() >= lowe_ratio * second.sqrt() {
            continue;
        }
        out.push(MatchPair { a: i, b: j, distance2: d2, epipolar_d: None, mahalanobis: None });
    }
    out
}

fn normalized(k: &Intrinsics, px: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0)
}

/// First-order (Sampson) epipolar error of `x2ᵀ E x1 = 0`, normalized units.
pub fn sampson_error(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusOutcome {
    pub inliers: Vec<bool>,
    pub essential: Option<Matrix3<f64>>,
    /// True when there were too few pairs to estimate a model.
    pub passthrough: bool,
}

pub const CONSENSUS_MIN_PAIRS: usize = 5;

/// Sample-consensus essential-matrix rejection. The relative rotation
/// `r21` (camera 1 frame to camera 2 frame) comes from the star trackers,
/// so each hypothesis `E = [t]× R` needs only two correspondences.
/// Hypotheses are scored with a truncated quadratic loss.
pub fn consensus_reject<R: Rng>(
    pixels1: &[Vector2<f64>],
    pixels2: &[Vector2<f64>],
    k1: &Intrinsics,
    k2: &Intrinsics,
    r21: &Matrix3<f64>,
    cfg: &CorrelationConfig,
    rng: &mut R,
) -> Result<ConsensusOutcome, CorrelationError> {
    let n = pixels1.len();
    assert_eq!(n, pixels2.len());
    if n < CONSENSUS_MIN_PAIRS {
        return Ok(ConsensusOutcome { inliers: vec![true; n], essential: None, passthrough: true });
    }
    let x1: Vec<Vector3<f64>> = pixels1.iter().map(|p| normalized(k1, p)).collect();
    let x2: Vec<Vector3<f64>> = pixels2.iter().map(|p| normalized(k2, p)).collect();
    let cons: Vec<Vector3<f64>> = x1.iter().zip(&x2).map(|(a, b)| (r21 * a).cross(b)).collect();
    let focal = 0.25 * (k1.fx + k1.fy + k2.fx + k2.fy);
    let sigmas = cfg.consensus_threshold_sigmas.unwrap_or_else(|| cfg.m_t1d());
    let thr = sigmas * cfg.sigma_px / focal;
    let errors = |t: &Vector3<f64>| -> Vec<f64> {
        let e = skew(t) * r21;
        x1.iter().zip(&x2).map(|(a, b)| sampson_error(&e, a, b)).collect()
    };
    let loss = |errs: &[f64]| errs.iter().map(|e| (e * e).min(thr * thr)).sum::<f64>();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for _ in 0..cfg.consensus_iterations {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let t = cons[i].cross(&cons[j]);
        let norm = t.norm();
        if !(norm > 1e-15) {
            continue;
        }
        let t = t / norm;
        let l = loss(&errors(&t));
        if best.map_or(true, |(b, _)| l < b) {
            best = Some((l, t));
        }
    }
    let Some((_, mut t)) = best else { return Err(CorrelationError::ConsensusFailure) };
    // refit on inliers: t spans the null space of the stacked constraints
    for _ in 0..2 {
        let errs = errors(&t);
        let mut s = Matrix3::zeros();
        let mut count = 0;
        for (c, e) in cons.iter().zip(&errs) {
            if *e < thr {
                let c = c.normalize();
                s += c * c.transpose();
                count += 1;
            }
        }
        if count < 2 {
            break;
        }
        let eig = s.symmetric_eigen();
        let k = eig.eigenvalues.imin();
        t = eig.eigenvectors.column(k).into_owned();
    }
    let inliers: Vec<bool> = errors(&t).into_iter().map(|e| e < thr).collect();
    let frac = inliers.iter().filter(|x| **x).count() as f64 / n as f64;
    if frac < cfg.consensus_min_inlier_fraction {
        return Err(CorrelationError::ConsensusFailure);
    }
    Ok(ConsensusOutcome { inliers, essential: Some(skew(&t) * r21), passthrough: false })
}

/// Epipolar camera description: ACI center estimate, ACI→CF attitude and
/// intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarCamera {
    pub position: Vector3<f64>,
    pub att: Matrix3<f64>,
    pub intrinsics: Intrinsics,
}

impl EpipolarCamera {
    pub fn from_view(v: &ViewGeometry) -> Self {
        Self { position: v.r_aci, att: v.att, intrinsics: v.intrinsics }
    }
}

/// Signed distance of `l2` from the epipolar line of `l1`, with partials
/// with respect to `γ = [r1; r2]`, `l1` and `l2`.
#[derive(Clone, Copy, Debug)]
pub struct EpipolarDistance {
    pub d: f64,
    pub d_gamma: SMatrix<f64, 1, 6>,
    pub d_l1: SMatrix<f64, 1, 2>,
    pub d_l2: SMatrix<f64, 1, 2>,
}

pub fn epipolar_distance(c1: &EpipolarCamera, c2: &EpipolarCamera, l1: &Vector2<f64>, l2: &Vector2<f64>) -> Option<EpipolarDistance> {
    let k1i = c1.intrinsics.matrix().try_inverse()?;
    let k2i = c2.intrinsics.matrix().try_inverse()?;
    let l1h = Vector3::new(l1.x, l1.y, 1.0);
    let l2h = Vector3::new(l2.x, l2.y, 1.0);
    let d1 = c1.att.transpose() * k1i * l1h;
    let b = c1.position - c2.position;
    let a2 = k2i.transpose() * c2.att;
    let zeta = a2 * b.cross(&d1);
    let s = (zeta.x * zeta.x + zeta.y * zeta.y).sqrt();
    if !(s > 0.0) {
        return None;
    }
    let num = zeta.dot(&l2h);
    let d = num / s;
    // ∂d/∂ζ
    let dd_dzeta = RowVector3::new(l2h.x / s - num * zeta.x / s.powi(3), l2h.y / s - num * zeta.y / s.powi(3), 1.0 / s);
    let dzeta_dr1 = a2 * (-skew(&d1));
    let e = Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let dzeta_dl1 = a2 * skew(&b) * c1.att.transpose() * k1i * e;
    let g1 = dd_dzeta * dzeta_dr1;
    let mut d_gamma = SMatrix::<f64, 1, 6>::zeros();
    d_gamma.fixed_view_mut::<1, 3>(0, 0).copy_from(&g1);
    d_gamma.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-g1));
    let d_l1 = dd_dzeta * dzeta_dl1;
    let d_l2 = SMatrix::<f64, 1, 2>::new(zeta.x / s, zeta.y / s);
    Some(EpipolarDistance { d, d_gamma, d_l1, d_l2 })
}

/// Epipolar Mahalanobis gate. Returns, for every pair, `Some(m)` if it
/// passes and `None` if it is rejected (including a singular Σ).
pub fn epipolar_reject(
    pixels1: &[Vector2<f64>],
    pixels2: &[Vector2<f64>],
    c1: &EpipolarCamera,
    c2: &EpipolarCamera,
    p_gamma: &Matrix6<f64>,
    r1: &Matrix2<f64>,
    r2: &Matrix2<f64>,
    threshold: f64,
) -> Vec<(Option<f64>, f64)> {
    pixels1
        .iter()
        .zip(pixels2)
        .map(|(l1, l2)| {
            let Some(ed) = epipolar_distance(c1, c2, l1, l2) else { return (None, f64::NAN) };
            let sigma = (ed.d_gamma * p_gamma * ed.d_gamma.transpose())[(0, 0)]
                + (ed.d_l1 * r1 * ed.d_l1.transpose())[(0, 0)]
                + (ed.d_l2 * r2 * ed.d_l2.transpose())[(0, 0)];
            if !(sigma > 0.0) || !sigma.is_finite() {
                return (None, ed.d);
            }
            let m = ed.d.abs() / sigma.sqrt();
            (if m <= threshold { Some(m) } else { None }, ed.d)
        })
        .collect()
}

/// Keypoints of several spacecraft believed to image the same landmark,
/// as `(spacecraft, keypoint index)` sorted by spacecraft.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorrelatedSet {
    pub members: Vec<(usize, usize)>,
}

/// Combines pairwise matches (keyed by `(i, j)`, `i < j`) into
/// correlated sets. With a middle spacecraft, keypoints matched from the
/// middle to both outer spacecraft form triplets, chosen greedily by the
/// sum of descriptor distances; remaining pairwise matches follow,
/// greedily by distance, skipping keypoints already used.
pub fn share_correlations(matches: &BTreeMap<(usize, usize), Vec<MatchPair>>, middle: Option<usize>) -> Vec<CorrelatedSet> {
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut out = Vec::new();
    if let Some(m) = middle {
        let pairs_with = |o: usize| -> Vec<(usize, usize, f64)> {
            // (middle keypoint, outer keypoint, distance²)
            let key = (m.min(o), m.max(o));
            matches
                .get(&key)
                .map(|v| v.iter().map(|p| if m < o { (p.a, p.b, p.distance2) } else { (p.b, p.a, p.distance2) }).collect())
                .unwrap_or_default()
        };
        let outers: Vec<usize> = {
            let mut s = BTreeSet::new();
            for &(i, j) in matches.keys() {
                for x in [i, j] {
                    if x != m {
                        s.insert(x);
                    }
                }
            }
            s.into_iter().collect()
        };
        if outers.len() == 2 {
            let (o1, o2) = (outers[0], outers[1]);
            let (p1, p2) = (pairs_with(o1), pairs_with(o2));
            let mut cands = Vec::new();
            for &(km, k1, d1) in &p1 {
                for &(km2, k2, d2) in &p2 {
                    if km == km2 {
                        cands.push((d1 + d2, km, k1, k2));
                    }
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
            for (_, km, k1, k2) in cands {
                let keys = [(m, km), (o1, k1), (o2, k2)];
                if keys.iter().any(|k| used.contains(k)) {
                    continue;
                }
                used.extend(keys);
                let mut members = keys.to_vec();
                members.sort();
                out.push(CorrelatedSet { members });
            }
        }
    }
    let mut pairs: Vec<(f64, usize, usize, usize, usize)> =
        matches.iter().flat_map(|(&(i, j), v)| v.iter().map(move |p| (p.distance2, i, p.a, j, p.b))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3, a.4).cmp(&(b.1, b.2, b.3, b.4))));
    for (_, i, a, j, b) in pairs {
        if used.contains(&(i, a)) || used.contains(&(j, b)) {
            continue;
        }
        used.insert((i, a));
        used.insert((j, b));
        out.push(CorrelatedSet { members: vec![(i, a), (j, b)] });
    }
    out
}

/// Tracked landmark as seen by filter-to-image correlation.
#[derive(Clone, Debug)]
pub struct TrackedLandmark<'a> {
    pub id: usize,
    pub position: Vector3<f64>,
    pub descriptors: &'a BTreeMap<usize, Vec<f64>>,
}

impl TrackedLandmark<'_> {
    /// Descriptor from spacecraft `j` when available, otherwise from the
    /// lowest-index spacecraft that has one.
    pub fn descriptor_for(&self, j: usize) -> Option<&Vec<f64>> {
        self.descriptors.get(&j).or_else(|| self.descriptors.values().next())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub landmark: usize,
    pub keypoint: usize,
    pub cost: f64,
    pub m: f64,
    pub m_u: f64,
    pub m_v: f64,
    pub descriptor_distance2: f64,
}

/// Filter-to-image correlation for one image. `p_view` is the 6×6
/// covariance of `[r_j; ψ]` from the filter belief.
pub fn correlate_filter_to_image(
    landmarks: &[TrackedLandmark],
    keypoints: &[KeypointObservation],
    view: &ViewGeometry,
    p_view: &Matrix6<f64>,
    cfg: &CorrelationConfig,
) -> Vec<Assignment> {
    let (t2, t1) = (cfg.m_t2d(), cfg.m_t1d());
    let r = Matrix2::identity() * cfg.sigma_px * cfg.sigma_px;
    let mut best: Vec<Assignment> = Vec::new();
    for lm in landmarks {
        let Ok(jac) = view.jacobians(&lm.position) else { continue };
        let Some(f_i) = lm.descriptor_for(view.spacecraft) else { continue };
        let mut j = SMatrix::<f64, 2, 6>::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jac.d_position);
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jac.d_psi);
        let sigma = j * p_view * j.transpose() + r;
        let Ok(gate) = PixelGate::new(jac.pixel, sigma) else { continue };
        let mut choice: Option<Assignment> = None;
        for (k, kp) in keypoints.iter().enumerate() {
            let (m, mu, mv) = gate.distances(&kp.pixel.vec());
            if m > t2 || mu > t1 || mv > t1 {
                continue;
            }
            let df2 = descriptor_distance2(f_i, &kp.descriptor);
            if df2 > cfg.descriptor_threshold {
                continue;
            }
            let cost = cfg.w_2d * m + cfg.w_u * mu + cfg.w_v * mv + df2;
            if choice.map_or(true, |c| cost < c.cost) {
                choice = Some(Assignment { landmark: lm.id, keypoint: k, cost, m, m_u: mu, m_v: mv, descriptor_distance2: df2 });
            }
        }
        if let Some(c) = choice {
            best.push(c);
        }
    }
    best.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.landmark.cmp(&b.landmark)));
    let mut taken = BTreeSet::new();
    best.into_iter().filter(|a| taken.insert(a.keypoint)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkStatus {
    Tracked,
    Retired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: usize,
    pub acaf_position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub descriptors: BTreeMap<usize, Vec<f64>>,
    pub consecutive_misses: u32,
    pub total_correlations: u32,
    pub status: LandmarkStatus,
    pub created_epoch: usize,
}

impl LandmarkRecord {
    pub fn max_eigenvalue(&self) -> f64 {
        let s = (self.covariance + self.covariance.transpose()) * 0.5;
        s.symmetric_eigenvalues().max()
    }
}

/// `l_o = sqrt(λ*) + sqrt(λ_r) − d`.
pub fn overlap_metric(lambda_a: f64, lambda_b: f64, distance: f64) -> f64 {
    lambda_a.sqrt() + lambda_b.sqrt() - distance
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetirementOutcome {
    pub retired: Vec<usize>,
    /// Deleted because never correlated after initialization.
    pub discarded: Vec<usize>,
    /// Deleted by deduplication (either the new or an older record).
    pub deduplicated: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkDatabase {
    pub records: BTreeMap<usize, LandmarkRecord>,
    next_id: usize,
}

impl LandmarkDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, position: Vector3<f64>, covariance: Matrix3<f64>, descriptors: BTreeMap<usize, Vec<f64>>, epoch: usize) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.records.insert(
            id,
            LandmarkRecord {
                id,
                acaf_position: position,
                covariance,
                descriptors,
                consecutive_misses: 0,
                total_correlations: 0,
                status: LandmarkStatus::Tracked,
                created_epoch: epoch,
            },
        );
        id
    }

    pub fn tracked_ids(&self) -> Vec<usize> {
        self.records.values().filter(|r| r.status == LandmarkStatus::Tracked).map(|r| r.id).collect()
    }

    pub fn retired(&self) -> impl Iterator<Item = &LandmarkRecord> {
        self.records.values().filter(|r| r.status == LandmarkStatus::Retired)
    }

    /// Record this epoch's filter-to-image result for a tracked landmark.
    pub fn record_epoch(&mut self, id: usize, correlations: u32) {
        if let Some(r) = self.records.get_mut(&id) {
            if correlations > 0 {
                r.consecutive_misses = 0;
                r.total_correlations += correlations;
            } else {
                r.consecutive_misses += 1;
            }
        }
    }

    /// Retires landmarks that reached `n_r` misses; never-correlated ones
    /// are deleted instead. Each newly retired landmark is compared against
    /// retired ones within `d_r`; when `l_o < 0` the record with the
    /// smaller maximum eigenvalue is kept.
    pub fn retire_and_dedupe(&mut self, n_r: u32, d_r: f64) -> RetirementOutcome {
        let mut out = RetirementOutcome::default();
        let due: Vec<usize> = self
            .records
            .values()
            .filter(|r| r.status == LandmarkStatus::Tracked && r.consecutive_misses >= n_r)
            .map(|r| r.id)
            .collect();
        for id in due {
            if self.records[&id].total_correlations == 0 {
                self.records.remove(&id);
                out.discarded.push(id);
                continue;
            }
            let (pos, lam) = {
                let r = &self.records[&id];
                (r.acaf_position, r.max_eigenvalue())
            };
            let near: Vec<(usize, f64, f64)> = self
                .retired()
                .map(|r| (r.id, (r.acaf_position - pos).norm(), r.max_eigenvalue()))
                .filter(|(_, d, _)| *d <= d_r)
                .collect();
            self.records.get_mut(&id).unwrap().status = LandmarkStatus::Retired;
            out.retired.push(id);
            for (other, d, lam_r) in near {
                if overlap_metric(lam, lam_r, d) < 0.0 {
                    let keep_new = lam < lam_r || (lam == lam_r && id < other);
                    let victim = if keep_new { other } else { id };
                    self.records.remove(&victim);
                    out.deduplicated.push(victim);
                    if !keep_new {
                        break;
                    }
                }
            }
        }
        out
    }

    /// CSV: `id,status,x,y,z,cxx,cxy,cxz,cyy,cyz,czz,total_correlations`.
    pub fn to_csv(&self) -> Result<String, CorrelationError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CorrelationError::Database(e.to_string());
        w.write_record(["id", "status", "x", "y", "z", "cxx", "cxy", "cxz", "cyy", "cyz", "czz", "total_correlations"]).map_err(err)?;
        for r in self.records.values() {
            let c = &r.covariance;
            let status = match r.status {
                LandmarkStatus::Tracked => "tracked",
                LandmarkStatus::Retired => "retired",
            };
            let mut row = vec![r.id.to_string(), status.to_string()];
            row.extend([r.acaf_position.x, r.acaf_position.y, r.acaf_position.z].iter().map(|v| format!("{v:.17e}")));
            row.extend([c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]].iter().map(|v| format!("{v:.17e}")));
            row.push(r.total_correlations.to_string());
            w.write_record(&row).map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| CorrelationError::Database(e.to_string()))?)
            .map_err(|e| CorrelationError::Database(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self, CorrelationError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut db = Self::new();
        let bad = |m: &str| CorrelationError::Database(m.to_string());
        for rec in rd.records() {
            let rec = rec.map_err(|e| CorrelationError::Database(e.to_string()))?;
            if rec.len() != 12 {
                return Err(bad("expected 12 columns"));
            }
            let f = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad("numeric field"));
            let id: usize = rec[0].trim().parse().map_err(|_| bad("id"))?;
            let status = match rec[1].trim() {
                "tracked" => LandmarkStatus::Tracked,
                "retired" => LandmarkStatus::Retired,
                _ => return Err(bad("status")),
            };
            let (xx, xy, xz, yy, yz, zz) = (f(5)?, f(6)?, f(7)?, f(8)?, f(9)?, f(10)?);
            let rec_out = LandmarkRecord {
                id,
                acaf_position: Vector3::new(f(2)?, f(3)?, f(4)?),
                covariance: Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz),
                descriptors: BTreeMap::new(),
                consecutive_misses: 0,
                total_correlations: rec[11].trim().parse().map_err(|_| bad("total_correlations"))?,
                status,
                created_epoch: 0,
            };
            db.next_id = db.next_id.max(id + 1);
            db.records.insert(id, rec_out);
        }
        Ok(db)
    }

    pub fn positions_and_covariances(&self) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
        self.records.values().map(|r| (r.acaf_position, r.covariance)).unzip()
    }
}

/// Joint 6×6 covariance of two 3-vectors from a state covariance.
pub fn gamma_covariance(p: &nalgebra::DMatrix<f64>, i1: usize, i2: usize) -> Matrix6<f64> {
    let idx = [i1, i1 + 1, i1 + 2, i2, i2 + 1, i2 + 2];
    Matrix6::from_fn(|a, b| p[(idx[a], idx[b])])
}

pub fn unit6(k: usize) -> Vector6<f64> {
    let mut v = Vector6::zeros();
    v[k] = 1.0;
    v
}
