//! Counterfactual search for LOF outliers.
//!
//! [`explain_one`] optimizes inside the region of the outlier, and whenever
//! the optimum lands in a different region restarts from there. Every point
//! the optimizer evaluates outside its current region is remembered in a FIFO
//! exploration queue; when the search would re-enter a region it already
//! started from, it resumes from the oldest queued point instead.
//! [`explain_many`] keeps draining that queue to collect counterfactuals from
//! pairwise distinct regions.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{DcfoError, Result};
use crate::lof::{lof_relocated_with, select_threshold, LofModel, ResolvedThreshold, ThresholdPolicy};
use crate::neighbors::dist;
use crate::opt::{
    constraint_with_margin, minimize_in_region, OptProblem, Tolerances, DEFAULT_MAX_ITERATIONS,
};
use crate::region::{key_of, GradientMode, NeighborhoodKey};

pub const DEFAULT_QUEUE_LIMIT: usize = 64;

/// Which LOF a candidate location is judged by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidityMode {
    /// Score of the location as a new point, with the outlier removed.
    #[default]
    Query,
    /// Score of the outlier after moving it to the location and refitting.
    Relocation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub k: usize,
    pub threshold: ThresholdPolicy,
    pub plausibility_target: Option<f64>,
    /// `None` means every coordinate is actionable.
    pub actionable_mask: Option<Vec<bool>>,
    /// Maximum number of regions one search may start from.
    pub queue_limit: usize,
    pub tolerances: Tolerances,
    pub max_iterations: usize,
    pub gradient_mode: GradientMode,
    pub validity_mode: ValidityMode,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            threshold: ThresholdPolicy::Auto,
            plausibility_target: None,
            actionable_mask: None,
            queue_limit: DEFAULT_QUEUE_LIMIT,
            tolerances: Tolerances::default(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            gradient_mode: GradientMode::Analytic,
            validity_mode: ValidityMode::Query,
        }
    }
}

impl ExplainConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    fn validate(&self, m: &LofModel) -> Result<Vec<bool>> {
        if self.k != m.k() {
            return Err(DcfoError::InvalidParameter(format!(
                "config k = {} but model k = {}",
                self.k,
                m.k()
            )));
        }
        if self.queue_limit == 0 {
            return Err(DcfoError::InvalidParameter("queue_limit must be >= 1".into()));
        }
        self.threshold.validate()?;
        match &self.actionable_mask {
            None => Ok(vec![true; m.dim()]),
            Some(mask) if mask.len() != m.dim() => Err(DcfoError::Dimension {
                expected: m.dim(),
                found: mask.len(),
            }),
            Some(mask) if !mask.iter().any(|&a| a) => Err(DcfoError::InvalidParameter(
                "at least one coordinate must be actionable".into(),
            )),
            Some(mask) => Ok(mask.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfStatus {
    Found,
    /// The exploration queue ran empty.
    Exhausted,
    /// The region budget was spent.
    Limit,
    /// A candidate was produced but fails the validity check.
    Invalid,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterfactualResult {
    pub origin_index: usize,
    pub location: Vec<f64>,
    pub distance: f64,
    pub lof_value: f64,
    pub key: NeighborhoodKey,
    pub status: CfStatus,
    pub regions_visited: usize,
    pub wall_time: f64,
    /// Optimizer solutions of each visited region, in visiting order.
    #[serde(skip)]
    pub path: Vec<Vec<f64>>,
}

impl CounterfactualResult {
    pub fn is_found(&self) -> bool {
        self.status == CfStatus::Found
    }
}

/// Resolves the threshold of `policy` and lists the points scoring above it.
pub fn detect_outliers(m: &LofModel, policy: ThresholdPolicy) -> Result<(ResolvedThreshold, Vec<usize>)> {
    let t = select_threshold(m.lof_scores(), policy)?;
    let outliers = m
        .lof_scores()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > t.value)
        .map(|(i, _)| i)
        .collect();
    Ok((t, outliers))
}

struct Setup {
    threshold: f64,
    bound: f64,
    mask: Vec<bool>,
}

fn setup(m: &LofModel, i: usize, cfg: &ExplainConfig) -> Result<Setup> {
    let mask = cfg.validate(m)?;
    m.check_index(i)?;
    let threshold = select_threshold(m.lof_scores(), cfg.threshold)?.value;
    let score = m.lof_scores()[i];
    if score <= threshold {
        return Err(DcfoError::NotAnOutlier {
            index: i,
            score,
            threshold,
        });
    }
    let bound = constraint_with_margin(threshold, cfg.plausibility_target)?;
    Ok(Setup {
        threshold,
        bound,
        mask,
    })
}

fn judged_value(m: &LofModel, i: usize, x: &[f64], mode: ValidityMode) -> Result<f64> {
    match mode {
        ValidityMode::Query => m.lof_query(x, Some(i)),
        ValidityMode::Relocation => lof_relocated_with(m.data(), m.k(), i, x, m.policy()),
    }
}

enum Outcome {
    Found { location: Vec<f64> },
    Exhausted { last: Vec<f64> },
    Limit { last: Vec<f64> },
}

/// Most regions combined in one joint solve.
const MAX_JOINT_KEYS: usize = 8;

enum Joint {
    Found(Vec<f64>),
    Moved(Vec<f64>, NeighborhoodKey),
    Failed,
}

struct Run {
    outcome: Outcome,
    regions: usize,
    path: Vec<Vec<f64>>,
}

/// Shared search state: regions already used as a start and the FIFO
/// exploration queue, deduplicated by key.
struct Explorer<'a> {
    model: &'a LofModel,
    cfg: &'a ExplainConfig,
    index: usize,
    origin: Vec<f64>,
    threshold: f64,
    bound: f64,
    mask: Vec<bool>,
    started: HashSet<NeighborhoodKey>,
    queue: VecDeque<(Vec<f64>, NeighborhoodKey)>,
    queued: HashSet<NeighborhoodKey>,
}

impl<'a> Explorer<'a> {
    fn new(model: &'a LofModel, cfg: &'a ExplainConfig, index: usize, setup: &Setup) -> Self {
        Self {
            model,
            cfg,
            index,
            origin: model.data().point(index).to_vec(),
            threshold: setup.threshold,
            bound: setup.bound,
            mask: setup.mask.clone(),
            started: HashSet::new(),
            queue: VecDeque::new(),
            queued: HashSet::new(),
        }
    }

    fn key(&self, x: &[f64]) -> Result<NeighborhoodKey> {
        key_of(self.model, x, Some(self.index))
    }

    fn pop(&mut self) -> Option<(Vec<f64>, NeighborhoodKey)> {
        while let Some((x, key)) = self.queue.pop_front() {
            if !self.started.contains(&key) {
                return Some((x, key));
            }
        }
        None
    }

    fn enqueue_trace(&mut self, trace: Vec<Vec<f64>>, current: &NeighborhoodKey) -> Result<()> {
        for x in trace {
            let key = self.key(&x)?;
            if &key != current && !self.started.contains(&key) && !self.queued.contains(&key) {
                self.queued.insert(key.clone());
                self.queue.push_back((x, key));
            }
        }
        Ok(())
    }

    fn optimize(
        &self,
        start: &[f64],
        key: &NeighborhoodKey,
        joint: &[NeighborhoodKey],
    ) -> Result<crate::opt::OptResult> {
        let problem = OptProblem {
            origin: self.origin.clone(),
            key: key.clone(),
            threshold: self.bound,
            actionable_mask: self.mask.clone(),
            start: start.to_vec(),
            tolerances: self.cfg.tolerances,
            max_iterations: self.cfg.max_iterations,
            gradient_mode: self.cfg.gradient_mode,
            joint_keys: joint.to_vec(),
        };
        minimize_in_region(&problem, self.model)
    }

    /// One search from `start`, visiting at most `limit` regions.
    fn run(&mut self, start: Vec<f64>, limit: usize) -> Result<Run> {
        let mut x = start;
        let mut key = self.key(&x)?;
        let mut regions = 0;
        let mut path = Vec::new();
        loop {
            if self.started.contains(&key) {
                match self.pop() {
                    Some((nx, nk)) => {
                        x = nx;
                        key = nk;
                        continue;
                    }
                    None => {
                        return Ok(Run {
                            outcome: Outcome::Exhausted { last: x },
                            regions,
                            path,
                        })
                    }
                }
            }
            if regions >= limit {
                return Ok(Run {
                    outcome: Outcome::Limit { last: x },
                    regions,
                    path,
                });
            }
            self.started.insert(key.clone());
            regions += 1;

            let opt = self.optimize(&x, &key, &[])?;
            let feasible = opt.is_feasible(self.bound, self.cfg.tolerances.constraint_tol);
            let solution = opt.solution.clone();
            self.enqueue_trace(opt.trace, &key)?;
            let next_key = self.key(&solution)?;
            debug!(
                "outlier {}: region {} -> {:?}, LOF_K {:.6}, same region {}",
                self.index,
                regions,
                opt.status,
                opt.constraint_value,
                next_key == key
            );
            path.push(solution.clone());

            if next_key == key && feasible {
                return Ok(Run {
                    outcome: Outcome::Found { location: solution },
                    regions,
                    path,
                });
            }
            if self.started.contains(&next_key) && regions < limit {
                // the optima of two started regions lie across their shared
                // boundary: solve both constraints together
                match self.joint(solution.clone(), vec![key.clone(), next_key.clone()], &mut regions, limit, &mut path)? {
                    Joint::Found(location) => {
                        return Ok(Run {
                            outcome: Outcome::Found { location },
                            regions,
                            path,
                        })
                    }
                    Joint::Moved(nx, nk) => {
                        x = nx;
                        key = nk;
                        continue;
                    }
                    Joint::Failed => {}
                }
            }
            // a new region continues from the solution; a known one falls
            // through to the queue at the top of the loop
            x = solution;
            key = next_key;
        }
    }

    /// Optimizes under the joint constraint of `keys`, adding the key of each
    /// solution that lands in another started region.
    fn joint(
        &mut self,
        mut start: Vec<f64>,
        mut keys: Vec<NeighborhoodKey>,
        regions: &mut usize,
        limit: usize,
        path: &mut Vec<Vec<f64>>,
    ) -> Result<Joint> {
        while keys.len() <= MAX_JOINT_KEYS && *regions < limit {
            *regions += 1;
            let opt = self.optimize(&start, &keys[0], &keys[1..])?;
            let feasible = opt.is_feasible(self.bound, self.cfg.tolerances.constraint_tol);
            let solution = opt.solution.clone();
            self.enqueue_trace(opt.trace, &keys[0])?;
            let next_key = self.key(&solution)?;
            debug!(
                "outlier {}: joint solve over {} regions -> {:?}, LOF {:.6}",
                self.index,
                keys.len(),
                opt.status,
                opt.constraint_value
            );
            path.push(solution.clone());
            if keys.contains(&next_key) {
                return Ok(if feasible {
                    Joint::Found(solution)
                } else {
                    Joint::Failed
                });
            }
            if !self.started.contains(&next_key) {
                return Ok(Joint::Moved(solution, next_key));
            }
            keys.push(next_key);
            start = solution;
        }
        Ok(Joint::Failed)
    }

    /// Bound a candidate must meet under the configured validity mode.
    fn judge(&self) -> f64 {
        match self.cfg.validity_mode {
            ValidityMode::Query => self.bound,
            ValidityMode::Relocation => self.threshold,
        }
    }

    fn finish(&self, run: Run, started: Instant) -> Result<CounterfactualResult> {
        let (location, status) = match run.outcome {
            Outcome::Found { location } => (location, CfStatus::Found),
            Outcome::Exhausted { last } => (last, CfStatus::Exhausted),
            Outcome::Limit { last } => (last, CfStatus::Limit),
        };
        let key = self.key(&location)?;
        let lof_value = judged_value(self.model, self.index, &location, self.cfg.validity_mode)?;
        let status = match status {
            CfStatus::Found if lof_value > self.judge() + self.cfg.tolerances.constraint_tol => {
                CfStatus::Invalid
            }
            s => s,
        };
        Ok(CounterfactualResult {
            origin_index: self.index,
            distance: dist(&location, &self.origin),
            location,
            lof_value,
            key,
            status,
            regions_visited: run.regions,
            wall_time: started.elapsed().as_secs_f64(),
            path: run.path,
        })
    }
}

/// Closest counterfactual for outlier `i`.
pub fn explain_one(m: &LofModel, i: usize, cfg: &ExplainConfig) -> Result<CounterfactualResult> {
    let clock = Instant::now();
    let s = setup(m, i, cfg)?;
    let mut explorer = Explorer::new(m, cfg, i, &s);
    let run = explorer.run(explorer.origin.clone(), cfg.queue_limit)?;
    explorer.finish(run, clock)
}

/// Up to `n` counterfactuals for outlier `i` from pairwise distinct regions.
/// The first is the one [`explain_one`] returns.
pub fn explain_many(
    m: &LofModel,
    i: usize,
    n: usize,
    cfg: &ExplainConfig,
) -> Result<Vec<CounterfactualResult>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let clock = Instant::now();
    let s = setup(m, i, cfg)?;
    let mut explorer = Explorer::new(m, cfg, i, &s);
    let first = explorer.run(explorer.origin.clone(), cfg.queue_limit)?;
    let mut budget = cfg.queue_limit.saturating_mul(n).saturating_sub(first.regions);
    let first = explorer.finish(first, clock)?;
    if !first.is_found() {
        return Ok(vec![first]);
    }
    let mut accepted: HashSet<NeighborhoodKey> = HashSet::from([first.key.clone()]);
    let mut results = vec![first];

    while results.len() < n && budget > 0 {
        let Some((x, _)) = explorer.pop() else { break };
        let clock = Instant::now();
        let run = explorer.run(x, cfg.queue_limit.min(budget))?;
        budget = budget.saturating_sub(run.regions);
        let exhausted = matches!(run.outcome, Outcome::Exhausted { .. });
        let cf = explorer.finish(run, clock)?;
        if cf.is_found() && !accepted.contains(&cf.key) {
            accepted.insert(cf.key.clone());
            results.push(cf);
        }
        if exhausted {
            break;
        }
    }
    Ok(results)
}

/// Ablation without region recursion: one optimization with the key of the
/// outlier frozen, accepted only if the optimum stays in that region.
pub fn explain_full_opt(m: &LofModel, i: usize, cfg: &ExplainConfig) -> Result<CounterfactualResult> {
    let clock = Instant::now();
    let s = setup(m, i, cfg)?;
    let explorer = Explorer::new(m, cfg, i, &s);
    let judge = explorer.judge();
    let origin = explorer.origin.clone();
    let key = explorer.key(&origin)?;
    let opt = explorer.optimize(&origin, &key, &[])?;
    let location = opt.solution;
    let final_key = explorer.key(&location)?;
    let lof_value = judged_value(m, i, &location, cfg.validity_mode)?;
    let status = if final_key == key && lof_value <= judge + cfg.tolerances.constraint_tol {
        CfStatus::Found
    } else {
        CfStatus::Exhausted
    };
    Ok(CounterfactualResult {
        origin_index: i,
        distance: dist(&location, &origin),
        path: vec![location.clone()],
        location,
        lof_value,
        key: final_key,
        status,
        regions_visited: 1,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

/// Moves the outlier onto the nearest point scoring at most `t`.
pub fn baseline_nearest_inlier(
    m: &LofModel,
    i: usize,
    t: f64,
    mode: ValidityMode,
) -> Result<CounterfactualResult> {
    let clock = Instant::now();
    m.check_index(i)?;
    let origin = m.data().point(i);
    let nearest = m
        .lof_scores()
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != i && s <= t)
        .map(|(j, _)| (dist(origin, m.data().point(j)), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or(DcfoError::NoInlier { threshold: t })?;
    let location = m.data().point(nearest.1).to_vec();
    let lof_value = judged_value(m, i, &location, mode)?;
    Ok(CounterfactualResult {
        origin_index: i,
        distance: nearest.0,
        key: key_of(m, &location, Some(i))?,
        status: if lof_value <= t {
            CfStatus::Found
        } else {
            CfStatus::Invalid
        },
        path: vec![location.clone()],
        location,
        lof_value,
        regions_visited: 0,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_gaussian, Dataset};
    use crate::lof::build_model;

    fn micro() -> LofModel {
        let d = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]).unwrap();
        build_model(d, 2).unwrap()
    }

    fn micro_cfg() -> ExplainConfig {
        ExplainConfig {
            threshold: ThresholdPolicy::Fixed(1.5),
            ..ExplainConfig::with_k(2)
        }
    }

    #[test]
    fn micro_explain_one() {
        let m = micro();
        let r = explain_one(&m, 3, &micro_cfg()).unwrap();
        assert_eq!(r.status, CfStatus::Found);
        assert_eq!(r.regions_visited, 1);
        assert!(m.lof_query(&r.location, Some(3)).unwrap() <= 1.5 + 1e-6);
        assert!(r.distance < 8.0);
        assert!((r.location[0] - 57.0 / 14.0).abs() < 1e-6);
    }

    #[test]
    fn micro_baseline() {
        let m = micro();
        let r = baseline_nearest_inlier(&m, 3, 1.5, ValidityMode::Query).unwrap();
        assert_eq!(r.location, vec![2.0]);
        assert_eq!(r.distance, 8.0);
        assert!(matches!(
            baseline_nearest_inlier(&m, 3, 0.5, ValidityMode::Query),
            Err(DcfoError::NoInlier { .. })
        ));
    }

    #[test]
    fn rejects_inlier() {
        let m = micro();
        assert!(matches!(
            explain_one(&m, 0, &micro_cfg()),
            Err(DcfoError::NotAnOutlier { .. })
        ));
        let bad_k = ExplainConfig {
            k: 3,
            ..micro_cfg()
        };
        assert!(explain_one(&m, 3, &bad_k).is_err());
    }

    #[test]
    fn many_with_one_matches_one() {
        let m = build_model(sample_gaussian(200, 2, 31).unwrap(), 10).unwrap();
        let cfg = ExplainConfig::with_k(10);
        let (_, outliers) = detect_outliers(&m, cfg.threshold).unwrap();
        let i = outliers[0];
        let one = explain_one(&m, i, &cfg).unwrap();
        let many = explain_many(&m, i, 1, &cfg).unwrap();
        assert_eq!(many.len(), 1);
        assert_eq!(many[0].location, one.location);
        assert_eq!(many[0].key, one.key);
    }

    #[test]
    fn detect_two_step() {
        let m = build_model(sample_gaussian(300, 2, 2).unwrap(), 10).unwrap();
        let (t, out) = detect_outliers(&m, ThresholdPolicy::Auto).unwrap();
        if m.lof_scores().iter().any(|&s| s > 1.5) {
            assert_eq!(t.value, 1.5);
        } else {
            assert!(out.len() >= 14 && out.len() <= 16, "{}", out.len());
        }
        assert!(out.iter().all(|&i| m.lof_scores()[i] > t.value));
    }

    #[test]
    fn detect_identical_scores_flags_nothing() {
        // regular lattice: every interior point has the same score, but the
        // border does not; use a ring instead where all points are equivalent
        let rows: Vec<Vec<f64>> = (0..24)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 24.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let m = build_model(Dataset::from_rows(&rows).unwrap(), 4).unwrap();
        let s = m.lof_scores();
        let spread = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - s.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9);
        // exact ties are required for the degenerate branch
        let same: Vec<f64> = vec![1.0; 24];
        let t = select_threshold(&same, ThresholdPolicy::Auto).unwrap();
        assert_eq!(same.iter().filter(|&&v| v > t.value).count(), 0);
    }
}
