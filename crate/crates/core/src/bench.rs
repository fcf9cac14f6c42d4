//! Metrics and the benchmark harness.
//!
//! Report CSV schema (one row per dataset, sweep point and method):
//!
//! ```text
//! dataset,k,threshold,method,n_outliers,validity,proximity_mean,proximity_sem,
//! diversity_det,diversity_mean_count,runtime_mean_s,status
//! ```
//!
//! Absent values are empty cells. `status` is `ok` or `failed: <message>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{DcfoError, Result};
use crate::explain::{
    baseline_nearest_inlier, detect_outliers, explain_full_opt, explain_many, explain_one,
    ExplainConfig,
};
use crate::lof::{LofModel, ThresholdPolicy};
use crate::neighbors::dist;

/// Determinants below this are reported as 0.
pub const DET_UNDERFLOW: f64 = 1e-300;

/// Neighbourhood sizes drawn from when no sweep is given.
pub const DEFAULT_K_CHOICES: [usize; 3] = [10, 15, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dcfo,
    FullOpt,
    Baseline,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dcfo => "dcfo",
            Method::FullOpt => "fullopt",
            Method::Baseline => "baseline",
        })
    }
}

impl FromStr for Method {
    type Err = DcfoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dcfo" => Ok(Method::Dcfo),
            "fullopt" => Ok(Method::FullOpt),
            "baseline" => Ok(Method::Baseline),
            other => Err(DcfoError::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

// ── Metrics ───────────────────────────────────────────────────────────

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`); the error is absent for a single value.
pub fn proximity_stats(distances: &[f64]) -> Result<(f64, Option<f64>)> {
    if distances.is_empty() {
        return Err(DcfoError::Empty("no distances".into()));
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    if distances.len() == 1 {
        return Ok((mean, None));
    }
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Some(var.sqrt() / n.sqrt())))
}

/// `det(K)` with `K_ij = 1 / (1 + d(cf_i, cf_j))`.
pub fn diversity_det(cfs: &[Vec<f64>]) -> Result<f64> {
    if cfs.is_empty() {
        return Err(DcfoError::Empty("no counterfactuals".into()));
    }
    let n = cfs.len();
    let kernel = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + dist(&cfs[i], &cfs[j])));
    let det = kernel.lu().determinant();
    Ok(if det.abs() < DET_UNDERFLOW { 0.0 } else { det })
}

/// Diversity as scored for multi-counterfactual requests: 0 when fewer than
/// two counterfactuals were produced.
pub fn diversity_score(cfs: &[Vec<f64>]) -> f64 {
    if cfs.len() < 2 {
        0.0
    } else {
        diversity_det(cfs).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    LowerBetter,
    HigherBetter,
}

/// Mean rank of each method across datasets. Within a dataset methods are
/// ranked `1..=M` with average ranks for ties; a missing score ranks last.
pub fn mean_ranks(
    table: &BTreeMap<String, BTreeMap<String, Option<f64>>>,
    direction: RankDirection,
) -> Result<BTreeMap<String, f64>> {
    if table.is_empty() {
        return Err(DcfoError::Empty("no datasets to rank".into()));
    }
    let methods: BTreeSet<&String> = table.values().flat_map(|row| row.keys()).collect();
    let mut totals: BTreeMap<String, f64> = methods.iter().map(|m| ((*m).clone(), 0.0)).collect();
    for row in table.values() {
        // missing scores sort after every present one
        let mut entries: Vec<(&String, Option<f64>)> = methods
            .iter()
            .map(|m| (*m, row.get(*m).copied().flatten()))
            .collect();
        let cmp = |a: &Option<f64>, b: &Option<f64>| match (a, b) {
            (Some(x), Some(y)) => match direction {
                RankDirection::LowerBetter => x.total_cmp(y),
                RankDirection::HigherBetter => y.total_cmp(x),
            },
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        entries.sort_by(|a, b| cmp(&a.1, &b.1));
        let mut pos = 0;
        while pos < entries.len() {
            let mut end = pos + 1;
            while end < entries.len() && cmp(&entries[pos].1, &entries[end].1).is_eq() {
                end += 1;
            }
            let rank = (pos + 1 + end) as f64 / 2.0;
            for (method, _) in &entries[pos..end] {
                *totals.get_mut(*method).expect("method present") += rank;
            }
            pos = end;
        }
    }
    let n = table.len() as f64;
    Ok(totals.into_iter().map(|(m, t)| (m, t / n)).collect())
}

// ── Reports ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct OutlierOutcome {
    pub index: usize,
    pub distance: f64,
    pub valid: bool,
    pub wall_time: f64,
    /// Number of counterfactuals returned (multi-counterfactual runs only).
    pub count: usize,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub per_outlier: Vec<OutlierOutcome>,
    pub proximity_mean: Option<f64>,
    pub proximity_sem: Option<f64>,
    pub validity: f64,
    pub diversity_det: Option<f64>,
    pub diversity_mean_count: Option<f64>,
    pub runtime_mean: f64,
}

impl MethodReport {
    pub fn from_outcomes(method: Method, per_outlier: Vec<OutlierOutcome>) -> Self {
        let valid: Vec<f64> = per_outlier.iter().filter(|o| o.valid).map(|o| o.distance).collect();
        let (proximity_mean, proximity_sem) = match proximity_stats(&valid) {
            Ok((m, s)) => (Some(m), s),
            Err(_) => (None, None),
        };
        let n = per_outlier.len() as f64;
        let mean_of = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
        let diversity_det = mean_of(per_outlier.iter().filter_map(|o| o.diversity).collect());
        let diversity_mean_count = diversity_det
            .is_some()
            .then(|| per_outlier.iter().map(|o| o.count as f64).sum::<f64>() / n);
        Self {
            method,
            validity: if per_outlier.is_empty() {
                0.0
            } else {
                valid.len() as f64 / n
            },
            runtime_mean: if per_outlier.is_empty() {
                0.0
            } else {
                per_outlier.iter().map(|o| o.wall_time).sum::<f64>() / n
            },
            proximity_mean,
            proximity_sem,
            diversity_det,
            diversity_mean_count,
            per_outlier,
        }
    }

    pub fn n_outliers(&self) -> usize {
        self.per_outlier.len()
    }
}

#[derive(Debug, Clone)]
pub struct NamedDataset {
    pub name: String,
    pub data: std::result::Result<Dataset, String>,
}

impl NamedDataset {
    pub fn new(name: impl Into<String>, data: Dataset) -> Self {
        Self {
            name: name.into(),
            data: Ok(data),
        }
    }

    pub fn failed(name: impl Into<String>, error: impl fmt::Display) -> Self {
        Self {
            name: name.into(),
            data: Err(error.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub threshold: ThresholdPolicy,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Template for every explanation; `k` and `threshold` are overridden
    /// per sweep point.
    pub config: ExplainConfig,
    /// Explicit `(k, threshold)` grid. When absent, `k` is drawn per dataset
    /// from `k_choices` and the template threshold is used.
    pub sweep: Option<Vec<SweepPoint>>,
    pub k_choices: Vec<usize>,
    pub seed: u64,
    /// Counterfactuals requested per outlier for the diversity metric.
    pub diversity_n: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            config: ExplainConfig::default(),
            sweep: None,
            k_choices: DEFAULT_K_CHOICES.to_vec(),
            seed: 0,
            diversity_n: None,
        }
    }
}

/// Results for one dataset at one sweep point.
#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub dataset: String,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub reports: Vec<MethodReport>,
    pub error: Option<String>,
}

impl DatasetReport {
    pub fn report(&self, method: Method) -> Option<&MethodReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

fn sweep_points(opts: &BenchOptions, dataset_index: usize) -> Vec<SweepPoint> {
    match &opts.sweep {
        Some(points) => points.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(dataset_index as u64));
            let choices = if opts.k_choices.is_empty() {
                &DEFAULT_K_CHOICES[..]
            } else {
                &opts.k_choices[..]
            };
            let k = choices[rng.random_range(0..choices.len())];
            vec![SweepPoint {
                k,
                threshold: opts.config.threshold,
            }]
        }
    }
}

fn run_method(
    model: &LofModel,
    method: Method,
    outliers: &[usize],
    threshold: f64,
    cfg: &ExplainConfig,
    diversity_n: Option<usize>,
) -> MethodReport {
    let outcomes = outliers
        .iter()
        .map(|&i| {
            let clock = Instant::now();
            let (result, extra) = match method {
                Method::Dcfo => match diversity_n {
                    Some(n) if n > 1 => match explain_many(model, i, n, cfg) {
                        Ok(mut all) => {
                            let locations: Vec<Vec<f64>> = all
                                .iter()
                                .filter(|r| r.is_found())
                                .map(|r| r.location.clone())
                                .collect();
                            let count = locations.len();
                            (Ok(all.swap_remove(0)), Some((count, diversity_score(&locations))))
                        }
                        Err(e) => (Err(e), Some((0, 0.0))),
                    },
                    _ => (explain_one(model, i, cfg), None),
                },
                Method::FullOpt => (
                    explain_full_opt(model, i, cfg),
                    diversity_n.map(|_| (1, 0.0)),
                ),
                Method::Baseline => (
                    baseline_nearest_inlier(model, i, threshold, cfg.validity_mode),
                    diversity_n.map(|_| (1, 0.0)),
                ),
            };
            let wall_time = clock.elapsed().as_secs_f64();
            let (distance, valid) = match &result {
                Ok(r) => (r.distance, r.is_found()),
                Err(e) => {
                    log::info!("{method} failed on outlier {i}: {e}");
                    (f64::NAN, false)
                }
            };
            OutlierOutcome {
                index: i,
                distance,
                valid,
                wall_time,
                count: extra.map_or(usize::from(valid), |e| e.0),
                diversity: extra.map(|e| e.1),
            }
        })
        .collect();
    MethodReport::from_outcomes(method, outcomes)
}

fn run_point(
    data: &Dataset,
    name: &str,
    point: SweepPoint,
    methods: &[Method],
    opts: &BenchOptions,
) -> DatasetReport {
    let fail = |e: String| DatasetReport {
        dataset: name.to_owned(),
        k: Some(point.k),
        threshold: None,
        reports: Vec::new(),
        error: Some(e),
    };
    let model = match LofModel::build(data.clone(), point.k, Default::default()) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let (t, outliers) = match detect_outliers(&model, point.threshold) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let cfg = ExplainConfig {
        k: point.k,
        threshold: ThresholdPolicy::Fixed(t.value),
        ..opts.config.clone()
    };
    log::info!("{name}: k={} t={:.4} outliers={}", point.k, t.value, outliers.len());
    let reports = methods
        .iter()
        .map(|&m| run_method(&model, m, &outliers, t.value, &cfg, opts.diversity_n))
        .collect();
    DatasetReport {
        dataset: name.to_owned(),
        k: Some(point.k),
        threshold: Some(t.value),
        reports,
        error: None,
    }
}

/// Runs every method on every outlier of every dataset and sweep point.
/// Datasets run in parallel; the output order follows the input order.
pub fn run_benchmark(
    datasets: &[NamedDataset],
    methods: &[Method],
    opts: &BenchOptions,
) -> Vec<DatasetReport> {
    datasets
        .par_iter()
        .enumerate()
        .map(|(di, ds)| {
            let points = sweep_points(opts, di);
            match &ds.data {
                Err(e) => points
                    .iter()
                    .map(|p| DatasetReport {
                        dataset: ds.name.clone(),
                        k: Some(p.k),
                        threshold: None,
                        reports: Vec::new(),
                        error: Some(e.clone()),
                    })
                    .collect::<Vec<_>>(),
                Ok(data) => points
                    .iter()
                    .map(|&p| run_point(data, &ds.name, p, methods, opts))
                    .collect(),
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub const REPORT_HEADER: [&str; 12] = [
    "dataset",
    "k",
    "threshold",
    "method",
    "n_outliers",
    "validity",
    "proximity_mean",
    "proximity_sem",
    "diversity_det",
    "diversity_mean_count",
    "runtime_mean_s",
    "status",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the report CSV. Failed datasets get one row per method with empty
/// metric cells.
pub fn write_report_csv<W: Write>(reports: &[DatasetReport], methods: &[Method], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    for r in reports {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        if let Some(err) = &r.error {
            for m in methods {
                let mut row = vec![r.dataset.clone(), k.clone(), cell(r.threshold), m.to_string()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(format!("failed: {err}"));
                out.write_record(&row)?;
            }
            continue;
        }
        for rep in &r.reports {
            out.write_record([
                r.dataset.clone(),
                k.clone(),
                cell(r.threshold),
                rep.method.to_string(),
                rep.n_outliers().to_string(),
                rep.validity.to_string(),
                cell(rep.proximity_mean),
                cell(rep.proximity_sem),
                cell(rep.diversity_det),
                cell(rep.diversity_mean_count),
                rep.runtime_mean.to_string(),
                "ok".to_owned(),
            ])?;
        }
    }
    out.flush().map_err(|e| DcfoError::io("<report writer>", e))?;
    Ok(())
}
