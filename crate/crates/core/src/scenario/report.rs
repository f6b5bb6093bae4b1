//! Run metrics and plot tables, recomputed from the persisted logs only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{reference_vertices, LandmarkDatabase, ScenarioConfig, ScenarioError, REFERENCE_VERTICES};
use crate::dynamics::gravity::parse_gravity_file;
use crate::shape::{
    design_matrix, fit_shape, fit_unregularized, parse_shape_file, radius_variances, shape_rmse, RadiusCovariance, ShapeCoefficients,
    ShapeFitProblem,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: String,
    /// RMS of the estimation error over the final orbit; `None` without data.
    pub rmse: Option<f64>,
    pub mean_sigma: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStat {
    pub degree: usize,
    pub truth_rms: f64,
    pub error_rms: f64,
    pub sigma_rms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStat {
    pub correlations: usize,
    pub true_positives: usize,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StereoStat {
    pub landmarks: usize,
    /// Camera-frame error mean, standard deviation and RMS per axis (m).
    pub mean_error: [f64; 3],
    pub std_error: [f64; 3],
    pub rms_error: [f64; 3],
    /// Mean predicted 1σ per axis (m).
    pub mean_sigma: [f64; 3],
    pub mean_rms_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeStat {
    pub degree: usize,
    pub points: usize,
    pub rmse: f64,
    pub fraction_of_mean_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    /// Rows contributing to the final-orbit statistics.
    pub final_orbit_epochs: usize,
    pub filter: Vec<GroupStat>,
    /// Mean position/velocity NEES over the final orbit and its dimension.
    pub nees_mean: Option<f64>,
    pub nees_dims: usize,
    pub gravity: Vec<DegreeStat>,
    pub filter_to_spacecraft: CorrelationStat,
    pub spacecraft_to_spacecraft: CorrelationStat,
    pub stereo: StereoStat,
    pub shape: Option<ShapeStat>,
    pub landmarks_tracked: usize,
    pub landmarks_retired: usize,
}

impl RunReport {
    pub fn group(&self, name: &str) -> Option<&GroupStat> {
        self.filter.iter().find(|g| g.group == name)
    }
}

/// Parameter group of a head-state label.
fn group_of(label: &str) -> &'static str {
    match label {
        "alpha" | "delta" => "pole",
        "omega" => "spin_rate",
        "mu" => "mu",
        _ if label.starts_with('C') || label.starts_with('S') => "gravity",
        _ if label.ends_with("_db") => "bias_range",
        _ if label.ends_with("_dbdot") => "bias_rate",
        _ if label.ends_with("_cr") => "cr",
        _ if label.contains("_r") => "position",
        _ if label.contains("_v") => "velocity",
        _ => "other",
    }
}

const GROUPS: [&str; 9] = ["position", "velocity", "cr", "bias_range", "bias_rate", "mu", "pole", "spin_rate", "gravity"];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(name: &str, text: &str) -> Result<Self, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| ScenarioError::Log(name.into(), e.to_string()))?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for r in rdr.records() {
            rows.push(r.map_err(|e| ScenarioError::Log(name.into(), e.to_string()))?.iter().map(String::from).collect());
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn num(&self, row: usize, col: usize) -> f64 {
        self.rows[row][col].parse().unwrap_or(f64::NAN)
    }
}

fn need<'a>(logs: &'a super::RunLogs, name: &str) -> Result<&'a str, ScenarioError> {
    logs.get(name).ok_or_else(|| ScenarioError::Log(name.into(), "missing".into()))
}

fn config_of(logs: &super::RunLogs) -> Result<ScenarioConfig, ScenarioError> {
    toml::from_str(need(logs, "config.toml")?).map_err(|e| ScenarioError::Log("config.toml".into(), e.to_string()))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn rms(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
}

fn correlation_stat(t: &Table, method: &str) -> CorrelationStat {
    let (m, tp) = (t.col("method").unwrap_or(1), t.col("true_positive").unwrap_or(6));
    let rows: Vec<&Vec<String>> = t.rows.iter().filter(|r| r[m] == method).collect();
    let hits = rows.iter().filter(|r| r[tp] == "1").count();
    CorrelationStat { correlations: rows.len(), true_positives: hits, rate: (!rows.is_empty()).then(|| hits as f64 / rows.len() as f64) }
}

/// Recomputes the report from the log set of a run.
pub fn report_from_logs(logs: &super::RunLogs) -> Result<RunReport, ScenarioError> {
    let cfg = config_of(logs)?;
    let filter = Table::parse("filter.csv", need(logs, "filter.csv")?)?;
    let n = filter.rows.len();
    let start = n.saturating_sub(cfg.epochs_per_orbit());
    let final_rows = start..n;

    let mut errs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut sigs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (c, h) in filter.header.iter().enumerate() {
        let Some(label) = h.strip_prefix("err_") else { continue };
        let g = group_of(label);
        let sc = filter.col(&format!("sig_{label}")).unwrap();
        for r in final_rows.clone() {
            errs.entry(g).or_default().push(filter.num(r, c));
            sigs.entry(g).or_default().push(filter.num(r, sc));
        }
    }
    let groups = GROUPS
        .iter()
        .map(|g| {
            let e = errs.get(g).cloned().unwrap_or_default();
            GroupStat { group: g.to_string(), rmse: rms(&e), mean_sigma: mean(sigs.get(g).map_or(&[][..], |v| v)), samples: e.len() }
        })
        .collect();
    let nees_col = filter.col("nees_pv").unwrap();
    let nees: Vec<f64> = final_rows.clone().map(|r| filter.num(r, nees_col)).filter(|v| v.is_finite()).collect();

    let truth_gravity = parse_gravity_file(need(logs, "truth_gravity.txt")?)
        .map_err(|e| ScenarioError::Log("truth_gravity.txt".into(), e.to_string()))?;
    let mut gravity = Vec::new();
    if n > 0 {
        for deg in 2..=cfg.filter.gravity_degree {
            let (mut e2, mut s2) = (0.0, 0.0);
            let mut count = 0usize;
            for m in 0..=deg {
                for kind in ["C", "S"] {
                    if kind == "S" && m == 0 {
                        continue;
                    }
                    let label = format!("{kind}{deg}_{m}");
                    let (Some(ce), Some(cs)) = (filter.col(&format!("err_{label}")), filter.col(&format!("sig_{label}"))) else { continue };
                    e2 += filter.num(n - 1, ce).powi(2);
                    s2 += filter.num(n - 1, cs).powi(2);
                    count += 1;
                }
            }
            let denom = (2 * deg + 1) as f64;
            debug_assert_eq!(count, 2 * deg + 1);
            gravity.push(DegreeStat {
                degree: deg,
                truth_rms: truth_gravity.degree_rms(deg),
                error_rms: (e2 / denom).sqrt(),
                sigma_rms: (s2 / denom).sqrt(),
            });
        }
    }

    let corr = Table::parse("correlations.csv", need(logs, "correlations.csv")?)?;
    let stereo_t = Table::parse("stereo.csv", need(logs, "stereo.csv")?)?;
    let mut stereo = StereoStat { landmarks: stereo_t.rows.len(), ..StereoStat::default() };
    if !stereo_t.rows.is_empty() {
        for (a, axis) in ["x", "y", "z"].iter().enumerate() {
            let ce = stereo_t.col(&format!("err_{axis}")).unwrap();
            let cs = stereo_t.col(&format!("sig_{axis}")).unwrap();
            let e: Vec<f64> = (0..stereo_t.rows.len()).map(|r| stereo_t.num(r, ce)).collect();
            let s: Vec<f64> = (0..stereo_t.rows.len()).map(|r| stereo_t.num(r, cs)).collect();
            let mu = mean(&e).unwrap();
            stereo.mean_error[a] = mu;
            stereo.std_error[a] = (e.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
            stereo.rms_error[a] = rms(&e).unwrap();
            stereo.mean_sigma[a] = mean(&s).unwrap();
        }
        let c = stereo_t.col("rms_px").unwrap();
        stereo.mean_rms_px = mean(&(0..stereo_t.rows.len()).map(|r| stereo_t.num(r, c)).collect::<Vec<_>>()).unwrap();
    }

    let hist = Table::parse("shape_history.csv", need(logs, "shape_history.csv")?)?;
    let shape = hist.rows.last().map(|_| {
        let r = hist.rows.len() - 1;
        let rmse = hist.num(r, hist.col("rmse").unwrap());
        ShapeStat {
            degree: hist.num(r, hist.col("degree").unwrap()) as usize,
            points: hist.num(r, hist.col("n_points").unwrap()) as usize,
            rmse,
            fraction_of_mean_radius: rmse / cfg.body.average_radius,
        }
    });

    let db = LandmarkDatabase::from_csv(need(logs, "landmarks.csv")?)
        .map_err(|e| ScenarioError::Log("landmarks.csv".into(), e.to_string()))?;
    let retired = db.retired().count();
    Ok(RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        epochs: n,
        final_orbit_epochs: n - start,
        filter: groups,
        nees_mean: mean(&nees),
        nees_dims: 6 * cfg.swarm.count(),
        gravity,
        filter_to_spacecraft: correlation_stat(&corr, "f2sc"),
        spacecraft_to_spacecraft: correlation_stat(&corr, "s2sc"),
        stereo,
        shape,
        landmarks_tracked: db.records.len() - retired,
        landmarks_retired: retired,
    })
}

/// Loads every log of a run directory and recomputes its report.
pub fn report_from_dir(dir: &Path) -> Result<RunReport, ScenarioError> {
    let mut logs = super::RunLogs::default();
    for name in
        ["config.toml", "filter.csv", "truth_gravity.txt", "correlations.csv", "stereo.csv", "shape_history.csv", "landmarks.csv"]
    {
        logs.files.insert(name.into(), std::fs::read_to_string(dir.join(name))?);
    }
    report_from_logs(&logs)
}

/// Landmark positions and covariances from a database log.
fn database_points(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>), ScenarioError> {
    let db = LandmarkDatabase::from_csv(text).map_err(|e| ScenarioError::Log("landmarks.csv".into(), e.to_string()))?;
    Ok(db.positions_and_covariances())
}

/// RMSE of the three shape estimators over degrees `1..=max`: least squares
/// without regularization, identity regularization and the power-law
/// regularization. Failed fits give `None`.
pub fn shape_ablation(
    points: &[Vector3<f64>],
    covs: &[Matrix3<f64>],
    truth: &ShapeCoefficients,
    alpha: f64,
    max: usize,
) -> Vec<(usize, Option<f64>, Option<f64>, Option<f64>)> {
    let reference = reference_vertices(truth, REFERENCE_VERTICES);
    let var = radius_variances(points, covs);
    (1..=max)
        .map(|deg| {
            let unreg = design_matrix(points, deg)
                .ok()
                .and_then(|(a, r, _)| fit_unregularized(&a, &r).ok())
                .map(|s| shape_rmse(&ShapeCoefficients::from_vector(deg, &s), &reference));
            let fit = |identity: bool| {
                let mut p = ShapeFitProblem::new(points, RadiusCovariance::Diagonal(var.clone()), deg, alpha).ok()?;
                if identity {
                    p.gamma_half = DVector::from_element(p.gamma_half.len(), 1.0);
                }
                fit_shape(&p).ok().map(|f| shape_rmse(&f.coefficients, &reference))
            };
            (deg, unreg, fit(true), fit(false))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Plot-ready tables: errors with 3σ envelopes over time, per-degree gravity
/// RMS, and the shape regularization ablation.
pub fn emit_plots(logs: &super::RunLogs, cfg: &ScenarioConfig) -> Result<BTreeMap<String, String>, ScenarioError> {
    let mut out = BTreeMap::new();
    let filter = Table::parse("filter.csv", need(logs, "filter.csv")?)?;
    let labels: Vec<&str> = filter.header.iter().filter_map(|h| h.strip_prefix("err_")).collect();
    let mut errors = String::from("epoch,time");
    for l in &labels {
        let _ = write!(errors, ",{l}_err,{l}_3sigma");
    }
    errors.push('\n');
    for r in 0..filter.rows.len() {
        let _ = write!(errors, "{},{}", filter.rows[r][0], filter.rows[r][1]);
        for l in &labels {
            let e = filter.num(r, filter.col(&format!("err_{l}")).unwrap());
            let s = filter.num(r, filter.col(&format!("sig_{l}")).unwrap());
            let _ = write!(errors, ",{e},{}", 3.0 * s);
        }
        errors.push('\n');
    }
    out.insert("plot_errors.csv".to_string(), errors);

    let mut grav = String::from("degree,truth_rms,error_rms,sigma_rms\n");
    let mut with_cfg = logs.clone();
    with_cfg.files.insert("config.toml".into(), cfg.to_toml());
    if !filter.rows.is_empty() {
        for d in report_from_logs(&with_cfg)?.gravity {
            let _ = writeln!(grav, "{},{},{},{}", d.degree, d.truth_rms, d.error_rms, d.sigma_rms);
        }
    }
    out.insert("plot_gravity_degree.csv".to_string(), grav);

    let mut abl = String::from("degree,unregularized,identity,power_law\n");
    let (points, covs) = database_points(need(logs, "landmarks.csv")?)?;
    if points.len() >= 2 {
        let (truth, _, _) = parse_shape_file(need(logs, "truth_shape.txt")?)
            .map_err(|e| ScenarioError::Log("truth_shape.txt".into(), e.to_string()))?;
        for (d, a, b, c) in shape_ablation(&points, &covs, &truth, cfg.shape.alpha, cfg.shape.ablation_max_degree) {
            let _ = writeln!(abl, "{d},{},{},{}", opt(a), opt(b), opt(c));
        }
    }
    out.insert("plot_shape_ablation.csv".to_string(), abl);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_groups() {
        assert_eq!(group_of("sc2_rz"), "position");
        assert_eq!(group_of("sc0_vx"), "velocity");
        assert_eq!(group_of("sc1_cr"), "cr");
        assert_eq!(group_of("sc1_db"), "bias_range");
        assert_eq!(group_of("sc1_dbdot"), "bias_rate");
        assert_eq!(group_of("C3_1"), "gravity");
        assert_eq!(group_of("S4_4"), "gravity");
        assert_eq!(group_of("alpha"), "pole");
        assert_eq!(group_of("omega"), "spin_rate");
    }

    #[test]
    fn statistics_helpers() {
        assert_eq!(mean(&[]), None);
        assert_eq!(rms(&[3.0, 4.0]), Some((12.5f64).sqrt()));
        let t = Table::parse("c", "epoch,method,spacecraft,landmark,members,truth_distance,true_positive\n0,f2sc,0,1,1,3,1\n0,f2sc,0,2,1,90,0\n0,s2sc,0,,2,1,1\n").unwrap();
        let s = correlation_stat(&t, "f2sc");
        assert_eq!((s.correlations, s.true_positives, s.rate), (2, 1, Some(0.5)));
        assert_eq!(correlation_stat(&t, "s2sc").rate, Some(1.0));
    }
}
