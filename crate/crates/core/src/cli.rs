//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when an explanation was not found (or every
//! benchmark dataset failed), 2 on input errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{
    mean_ranks, run_benchmark, write_report_csv, BenchOptions, DatasetReport, Method, NamedDataset,
    RankDirection, SweepPoint, DEFAULT_K_CHOICES,
};
use crate::dataset::{load_csv, sample_gaussian, standardize, Dataset, ScalingParams};
use crate::error::{DcfoError, Result};
use crate::explain::{
    baseline_nearest_inlier, detect_outliers, explain_full_opt, explain_many, explain_one, CfStatus,
    CounterfactualResult, ExplainConfig, ValidityMode, DEFAULT_QUEUE_LIMIT,
};
use crate::lof::{LofModel, ThresholdPolicy};
use crate::region::{padded_bbox, region_map_grid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_FOUND: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dcfo", version, about = "Counterfactual explanations for LOF outliers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one or all outliers of a dataset.
    Explain(ExplainArgs),
    /// Run methods over the datasets of a manifest and write a report CSV.
    Benchmark(BenchmarkArgs),
    /// Label a 2D grid with region ids.
    RegionMap(RegionMapArgs),
    /// Write a seeded standard Gaussian sample as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Numeric CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// The first row of the CSV holds column names.
    #[arg(long)]
    pub header: bool,
    /// Standardize every column to zero mean and unit variance.
    #[arg(long)]
    pub standardize: bool,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Option<ScalingParams>)> {
        let data = load_csv(&self.data, self.header)?;
        if self.standardize {
            let (scaled, params) = standardize(&data)?;
            Ok((scaled, Some(params)))
        } else {
            Ok((data, None))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ValidityArg {
    Query,
    Relocation,
}

impl From<ValidityArg> for ValidityMode {
    fn from(v: ValidityArg) -> Self {
        match v {
            ValidityArg::Query => ValidityMode::Query,
            ValidityArg::Relocation => ValidityMode::Relocation,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// `fixed:<v>`, `quantile:<q>` or `auto`.
    #[arg(long, default_value = "auto")]
    pub threshold: ThresholdPolicy,
    /// A point index or `all` for every detected outlier.
    #[arg(long, default_value = "all")]
    pub outlier_index: String,
    /// Counterfactuals per outlier.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Comma-separated column names or indices that must not change.
    #[arg(long)]
    pub non_actionable: Option<String>,
    /// Stricter LOF target for the counterfactual.
    #[arg(long)]
    pub plausibility: Option<f64>,
    /// Recorded in the output; the explanation pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "dcfo")]
    pub method: Method,
    /// Explain outliers on N threads.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_QUEUE_LIMIT)]
    pub queue_limit: usize,
    #[arg(long, value_enum, default_value_t = ValidityArg::Query)]
    pub validity_mode: ValidityArg,
    /// Emit `null` wall times so repeated runs are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    /// TOML manifest of datasets, methods and sweep points.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report CSV; stdout when absent (the summary then goes to stderr).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RegionMapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    /// `x_min,y_min,x_max,y_max`; data bounds padded by 10% when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: Option<String>,
    /// Exclude this outlier and overlay its counterfactual path.
    #[arg(long)]
    pub outlier_index: Option<usize>,
    #[arg(long, default_value = "auto")]
    pub threshold: ThresholdPolicy,
    /// Directory receiving regions.csv, regions_keys.json and regions_path.csv.
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Explain(a) => cmd_explain(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::RegionMap(a) => cmd_region_map(&a),
        Command::Generate(a) => cmd_generate(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DcfoError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DcfoError::io(path, e))
}

// ── explain ───────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct KeyJson {
    pub query_neighbors: Vec<usize>,
    pub neighbor_neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize)]
pub struct CounterfactualJson {
    pub coordinates: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coordinates_unscaled: Option<Vec<f64>>,
    pub distance: f64,
    pub lof_value: f64,
    pub key: KeyJson,
    pub status: CfStatus,
    pub regions_visited: usize,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct OutlierJson {
    pub outlier_index: usize,
    pub original: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original_unscaled: Option<Vec<f64>>,
    pub original_lof: f64,
    pub threshold: f64,
    pub method: Method,
    pub counterfactuals: Vec<CounterfactualJson>,
}

fn parse_mask(spec: &str, data: &Dataset) -> Result<Vec<bool>> {
    let mut mask = vec![true; data.dim()];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        mask[data.column_index(part)?] = false;
    }
    Ok(mask)
}

fn explain_index(
    model: &LofModel,
    i: usize,
    args: &ExplainArgs,
    cfg: &ExplainConfig,
    threshold: f64,
) -> Result<Vec<CounterfactualResult>> {
    match args.method {
        Method::Dcfo if args.n > 1 => explain_many(model, i, args.n, cfg),
        Method::Dcfo => explain_one(model, i, cfg).map(|r| vec![r]),
        Method::FullOpt => explain_full_opt(model, i, cfg).map(|r| vec![r]),
        Method::Baseline => {
            let bound = crate::opt::constraint_with_margin(threshold, cfg.plausibility_target)?;
            baseline_nearest_inlier(model, i, bound, cfg.validity_mode).map(|r| vec![r])
        }
    }
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<i32> {
    let (data, scaling) = args.data.load()?;
    let mask = args
        .non_actionable
        .as_deref()
        .map(|s| parse_mask(s, &data))
        .transpose()?;
    let model = LofModel::build(data, args.k, Default::default())?;
    let (t, detected) = detect_outliers(&model, args.threshold)?;
    let indices = if args.outlier_index.trim().eq_ignore_ascii_case("all") {
        detected
    } else {
        let i: usize = args.outlier_index.trim().parse().map_err(|_| {
            DcfoError::InvalidParameter(format!(
                "--outlier-index must be an index or `all`, got {:?}",
                args.outlier_index
            ))
        })?;
        vec![i]
    };
    let cfg = ExplainConfig {
        k: args.k,
        threshold: ThresholdPolicy::Fixed(t.value),
        plausibility_target: args.plausibility,
        actionable_mask: mask,
        queue_limit: args.queue_limit,
        validity_mode: args.validity_mode.into(),
        ..ExplainConfig::default()
    };
    log::info!(
        "k={} threshold={} ({}), {} outlier(s) to explain",
        args.k,
        t.value,
        t.policy,
        indices.len()
    );

    let work = |&i: &usize| explain_index(&model, i, args, &cfg, t.value);
    let results: Vec<Vec<CounterfactualResult>> = match args.parallel {
        Some(threads) if threads > 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| DcfoError::InvalidParameter(e.to_string()))?
            .install(|| indices.par_iter().map(work).collect::<Result<_>>())?,
        _ => indices.iter().map(work).collect::<Result<_>>()?,
    };

    let unscale = |x: &[f64]| scaling.as_ref().map(|s| s.invert(x));
    let mut all_found = true;
    let doc: Vec<OutlierJson> = indices
        .iter()
        .zip(results)
        .map(|(&i, cfs)| {
            let original = model.data().point(i).to_vec();
            OutlierJson {
                outlier_index: i,
                original_unscaled: unscale(&original),
                original,
                original_lof: model.lof_scores()[i],
                threshold: t.value,
                method: args.method,
                counterfactuals: cfs
                    .into_iter()
                    .map(|r| {
                        all_found &= r.is_found();
                        CounterfactualJson {
                            coordinates_unscaled: unscale(&r.location),
                            coordinates: r.location,
                            distance: r.distance,
                            lof_value: r.lof_value,
                            key: KeyJson {
                                query_neighbors: r.key.query_neighbors,
                                neighbor_neighbors: r.key.neighbor_neighbors,
                            },
                            status: r.status,
                            regions_visited: r.regions_visited,
                            wall_time_s: (!args.no_timing).then_some(r.wall_time),
                        }
                    })
                    .collect(),
            }
        })
        .collect();

    match &args.output {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &doc)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| DcfoError::io(path, e))?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &doc)?;
            writeln!(out).map_err(|e| DcfoError::io("<stdout>", e))?;
        }
    }
    Ok(if all_found { EXIT_OK } else { EXIT_NOT_FOUND })
}

// ── benchmark ─────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub methods: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
    pub diversity_n: Option<usize>,
    pub queue_limit: Option<usize>,
    pub k_choices: Option<Vec<usize>>,
    /// Threshold rule when no sweep is given; defaults to `auto`.
    pub threshold: Option<String>,
    #[serde(rename = "dataset", default)]
    pub datasets: Vec<ManifestDataset>,
    #[serde(default)]
    pub sweep: Vec<ManifestSweep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDataset {
    pub name: Option<String>,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub header: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSweep {
    pub k: usize,
    pub threshold: String,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| DcfoError::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DcfoError::Manifest(e.to_string()))?;
    if manifest.datasets.is_empty() {
        return Err(DcfoError::Manifest("no [[dataset]] entries".into()));
    }
    if manifest.methods.is_empty() {
        return Err(DcfoError::Manifest("no methods".into()));
    }
    Ok(manifest)
}

fn summary(reports: &[DatasetReport], methods: &[Method], mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "{:<20} {:>4} {:>8} {:<9} {:>5} {:>8} {:>10}",
        "dataset", "k", "t", "method", "n", "validity", "proximity"
    )?;
    let mut table = std::collections::BTreeMap::new();
    for (ri, r) in reports.iter().enumerate() {
        let k = r.k.map_or_else(|| "-".into(), |k| k.to_string());
        if let Some(e) = &r.error {
            writeln!(w, "{:<20} {:>4} failed: {e}", r.dataset, k)?;
            continue;
        }
        let t = r.threshold.map_or_else(|| "-".into(), |t| format!("{t:.4}"));
        let mut row = std::collections::BTreeMap::new();
        for m in &r.reports {
            let prox = m.proximity_mean.map_or_else(|| "NA".into(), |p| format!("{p:.4}"));
            writeln!(
                w,
                "{:<20} {:>4} {:>8} {:<9} {:>5} {:>8.2} {:>10}",
                r.dataset,
                k,
                t,
                m.method,
                m.n_outliers(),
                m.validity,
                prox
            )?;
            row.insert(m.method.to_string(), m.proximity_mean);
        }
        table.insert(format!("{ri:04}:{}", r.dataset), row);
    }
    if let Ok(ranks) = mean_ranks(&table, RankDirection::LowerBetter) {
        write!(w, "mean proximity rank:")?;
        for m in methods {
            if let Some(r) = ranks.get(&m.to_string()) {
                write!(w, " {m}={r:.2}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<i32> {
    let manifest = load_manifest(&args.manifest)?;
    let methods: Vec<Method> = manifest
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;
    let sweep = if manifest.sweep.is_empty() {
        None
    } else {
        Some(
            manifest
                .sweep
                .iter()
                .map(|s| {
                    Ok(SweepPoint {
                        k: s.k,
                        threshold: s.threshold.parse()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let mut config = ExplainConfig::default();
    if let Some(t) = &manifest.threshold {
        config.threshold = t.parse()?;
    }
    if let Some(q) = manifest.queue_limit {
        config.queue_limit = q;
    }
    let opts = BenchOptions {
        config,
        sweep,
        k_choices: manifest.k_choices.clone().unwrap_or_else(|| DEFAULT_K_CHOICES.to_vec()),
        seed: manifest.seed,
        diversity_n: manifest.diversity_n,
    };

    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let datasets: Vec<NamedDataset> = manifest
        .datasets
        .iter()
        .map(|d| {
            let path = base.join(&d.path);
            let name = d.name.clone().unwrap_or_else(|| {
                d.path
                    .file_stem()
                    .map_or_else(|| d.path.display().to_string(), |s| s.to_string_lossy().into())
            });
            let loaded = load_csv(&path, d.header).and_then(|data| {
                if manifest.standardize {
                    standardize(&data).map(|(s, _)| s)
                } else {
                    Ok(data)
                }
            });
            match loaded {
                Ok(data) => NamedDataset::new(name, data),
                Err(e) => {
                    log::error!("dataset {name}: {e}");
                    NamedDataset::failed(name, e)
                }
            }
        })
        .collect();

    let reports = run_benchmark(&datasets, &methods, &opts);
    match &args.output {
        Some(path) => {
            let w = create(path)?;
            write_report_csv(&reports, &methods, w)?;
            summary(&reports, &methods, std::io::stdout().lock()).map_err(|e| DcfoError::io("<stdout>", e))?;
        }
        None => {
            write_report_csv(&reports, &methods, std::io::stdout().lock())?;
            summary(&reports, &methods, std::io::stderr().lock()).map_err(|e| DcfoError::io("<stderr>", e))?;
        }
    }
    let succeeded = reports.iter().any(|r| r.error.is_none());
    Ok(if succeeded { EXIT_OK } else { EXIT_NOT_FOUND })
}

// ── region-map ────────────────────────────────────────────────────────

fn parse_bbox(s: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| DcfoError::InvalidParameter(format!("bad bbox value {v:?}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 4 {
        return Err(DcfoError::InvalidParameter(format!(
            "bbox needs 4 values x_min,y_min,x_max,y_max, got {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn cmd_region_map(args: &RegionMapArgs) -> Result<i32> {
    let (data, _) = args.data.load()?;
    if data.dim() != 2 {
        return Err(DcfoError::Dimension {
            expected: 2,
            found: data.dim(),
        });
    }
    let model = LofModel::build(data, args.k, Default::default())?;
    let bbox = match &args.bbox {
        Some(s) => parse_bbox(s)?,
        None => padded_bbox(&model, 0.1).to_vec(),
    };
    let map = region_map_grid(&model, &bbox, args.resolution, args.outlier_index)?;
    let dir = &args.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| DcfoError::io(dir, e))?;

    let csv_path = dir.join("regions.csv");
    let mut w = create(&csv_path)?;
    map.write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| DcfoError::io(&csv_path, e))?;

    let keys_path = dir.join("regions_keys.json");
    let mut w = create(&keys_path)?;
    serde_json::to_writer_pretty(&mut w, &map.keys_json())?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| DcfoError::io(&keys_path, e))?;
    log::info!("{} distinct regions on a {}x{} grid", map.distinct_regions(), args.resolution, args.resolution);

    let mut code = EXIT_OK;
    if let Some(i) = args.outlier_index {
        let cfg = ExplainConfig {
            k: args.k,
            threshold: args.threshold,
            ..ExplainConfig::default()
        };
        let cf = explain_one(&model, i, &cfg)?;
        if !cf.is_found() {
            code = EXIT_NOT_FOUND;
        }
        let path_file = dir.join("regions_path.csv");
        let mut w = create(&path_file)?;
        let origin = model.data().point(i);
        let mut rows = vec![("origin", origin.to_vec())];
        let last = cf.path.len().saturating_sub(1);
        rows.extend(cf.path[..last].iter().map(|p| ("intermediate", p.clone())));
        rows.push(("final", cf.location.clone()));
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(w, "step,kind,x,y,region_id")?;
            for (step, (kind, p)) in rows.iter().enumerate() {
                let id = map
                    .cell_of(p)
                    .map(|(r, c)| map.id_at(r, c).to_string())
                    .unwrap_or_default();
                writeln!(w, "{step},{kind},{},{},{id}", p[0], p[1])?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| DcfoError::io(&path_file, e))?;
    }
    Ok(code)
}

// ── generate ──────────────────────────────────────────────────────────

pub fn cmd_generate(args: &GenerateArgs) -> Result<i32> {
    let names = (0..args.dim).map(|c| format!("x{c}")).collect();
    let data = sample_gaussian(args.n, args.dim, args.seed)?.with_column_names(names)?;
    data.save_csv(&args.output)?;
    Ok(EXIT_OK)
}
