//! Region-wise constrained minimization.
//!
//! Solves
//!
//! ```text
//! minimize    |x - origin|^2
//! subject to  LOF_K(x) <= threshold
//! ```
//!
//! over the actionable coordinates only, with a sequential quadratic
//! programming method: damped BFGS approximation of the Lagrangian Hessian,
//! a closed-form QP for the single linearized inequality, an l1 merit
//! function with Armijo backtracking, and one second-order correction per
//! iteration. The squared distance is minimized internally; the reported
//! objective is the plain Euclidean distance.
//!
//! Extra keys in [`OptProblem::joint_keys`] tighten the constraint to the
//! maximum of every listed `LOF_K`, which stays convex and bounds the true LOF
//! from above anywhere inside the union of those regions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DcfoError, Result};
use crate::lof::LofModel;
use crate::region::{central_difference, key_of, GradientMode, NeighborhoodKey, RegionFunction};

/// A start with `LOF_K > RESTORATION_TRIGGER * threshold` first runs a
/// feasibility-restoration phase that ignores the objective.
pub const RESTORATION_TRIGGER: f64 = 2.0;
pub const RESTORATION_ITERATIONS: usize = 50;

const ARMIJO: f64 = 1e-4;
const MIN_STEP_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub constraint_tol: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-6,
            grad_tol: 1e-6,
            step_tol: 1e-9,
        }
    }
}

pub const DEFAULT_MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone)]
pub struct OptProblem {
    pub origin: Vec<f64>,
    pub key: NeighborhoodKey,
    pub threshold: f64,
    pub actionable_mask: Vec<bool>,
    pub start: Vec<f64>,
    pub tolerances: Tolerances,
    pub max_iterations: usize,
    pub gradient_mode: GradientMode,
    /// Further keys whose frozen LOF must also satisfy the bound.
    pub joint_keys: Vec<NeighborhoodKey>,
}

impl OptProblem {
    /// Problem with every coordinate actionable and default tolerances.
    pub fn new(origin: Vec<f64>, key: NeighborhoodKey, threshold: f64, start: Vec<f64>) -> Self {
        Self {
            actionable_mask: vec![true; origin.len()],
            origin,
            key,
            threshold,
            start,
            tolerances: Tolerances::default(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            gradient_mode: GradientMode::Analytic,
            joint_keys: Vec::new(),
        }
    }

    /// Whether `key` is the problem key or one of the joint keys.
    pub fn covers(&self, key: &NeighborhoodKey) -> bool {
        &self.key == key || self.joint_keys.contains(key)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for (name, len) in [
            ("origin", self.origin.len()),
            ("start", self.start.len()),
            ("actionable mask", self.actionable_mask.len()),
        ] {
            if len != dim {
                return Err(DcfoError::InvalidParameter(format!(
                    "{name} has length {len}, expected {dim}"
                )));
            }
        }
        if !self.actionable_mask.iter().any(|&a| a) {
            return Err(DcfoError::InvalidParameter(
                "at least one coordinate must be actionable".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(DcfoError::InvalidParameter(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.start.iter().chain(&self.origin).any(|v| !v.is_finite()) {
            return Err(DcfoError::InvalidParameter("non-finite start or origin".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    /// Converged on the frozen problem, but the solution's true key differs
    /// from the problem key.
    LeftRegionWarning,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub solution: Vec<f64>,
    /// Euclidean distance from the solution to the origin.
    pub objective: f64,
    /// `LOF_K` at the solution.
    pub constraint_value: f64,
    pub status: OptStatus,
    /// Every evaluated point, starting with the start point.
    pub trace: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Multiplier of the LOF constraint at the last QP.
    pub multiplier: f64,
    /// `|grad f + multiplier * grad c|_inf` over the actionable coordinates.
    pub kkt_residual: f64,
    /// Merit before and after each accepted SQP step, same penalty for both.
    pub merit_steps: Vec<(f64, f64)>,
}

impl OptResult {
    /// Whether the solution satisfies the frozen constraint within `tol`.
    pub fn is_feasible(&self, threshold: f64, tol: f64) -> bool {
        self.constraint_value <= threshold + tol
    }
}

/// Effective bound used during optimization: the plausibility target when
/// set, otherwise the threshold itself.
pub fn constraint_with_margin(threshold: f64, plausibility_target: Option<f64>) -> Result<f64> {
    match plausibility_target {
        None => Ok(threshold),
        Some(p) if p > threshold => Err(DcfoError::InvalidParameter(format!(
            "plausibility target {p} exceeds threshold {threshold}"
        ))),
        Some(p) if p <= 0.0 || p.is_nan() => Err(DcfoError::InvalidParameter(format!(
            "plausibility target must be > 0, got {p}"
        ))),
        Some(p) => Ok(p),
    }
}

/// Objective and constraint restricted to the actionable coordinates.
struct Reduced<'a> {
    regions: Vec<RegionFunction<'a>>,
    mode: GradientMode,
    origin: &'a [f64],
    base: Vec<f64>,
    active: Vec<usize>,
    threshold: f64,
    trace: Vec<Vec<f64>>,
}

struct Point {
    z: DVector<f64>,
    f: f64,
    c: f64,
    g: DVector<f64>,
    a: DVector<f64>,
}

impl Reduced<'_> {
    fn expand(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut x = self.base.clone();
        for (&i, v) in self.active.iter().zip(z.iter()) {
            x[i] = *v;
        }
        x
    }

    /// Objective and constraint only; used for line-search trials.
    fn values(&mut self, z: &DVector<f64>) -> (Vec<f64>, f64, f64) {
        let x = self.expand(z);
        let f: f64 = x.iter().zip(self.origin).map(|(a, b)| (a - b) * (a - b)).sum();
        let c = self.constraint(&x) - self.threshold;
        self.trace.push(x.clone());
        (x, f, c)
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        self.regions.iter().map(|r| r.value(x)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn derivatives(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let full = match self.mode {
            GradientMode::Analytic => {
                let top = self
                    .regions
                    .iter()
                    .map(|r| r.value(x))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
                    .0;
                self.regions[top].gradient(x)
            }
            GradientMode::Numeric => central_difference(|z| self.constraint(z), x),
        };
        let g = DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&i| 2.0 * (x[i] - self.origin[i])),
        );
        let a = DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| full[i]));
        (g, a)
    }

    fn point(&mut self, z: DVector<f64>) -> Point {
        let (x, f, c) = self.values(&z);
        let (g, a) = self.derivatives(&x);
        Point { z, f, c, g, a }
    }

    fn complete(&self, z: DVector<f64>, f: f64, c: f64) -> Point {
        let x = self.expand(&z);
        let (g, a) = self.derivatives(&x);
        Point { z, f, c, g, a }
    }
}

/// Minimizes the distance to `p.origin` subject to `LOF_K <= p.threshold`
/// inside the region of `p.key`, moving only actionable coordinates.
pub fn minimize_in_region(p: &OptProblem, m: &LofModel) -> Result<OptResult> {
    p.validate(m.dim())?;
    let active: Vec<usize> = (0..m.dim()).filter(|&i| p.actionable_mask[i]).collect();
    let mut prob = Reduced {
        regions: std::iter::once(&p.key)
            .chain(&p.joint_keys)
            .map(|k| RegionFunction::new(m, k))
            .collect::<Result<_>>()?,
        mode: p.gradient_mode,
        origin: &p.origin,
        base: p.start.clone(),
        threshold: p.threshold,
        trace: Vec::new(),
        active,
    };
    let tol = p.tolerances;
    let n = prob.active.len();
    let z0 = DVector::from_iterator(n, prob.active.iter().map(|&i| p.start[i]));
    let mut cur = prob.point(z0);

    if cur.c > (RESTORATION_TRIGGER - 1.0) * p.threshold {
        cur = restore_feasibility(&mut prob, cur, p.threshold);
    }

    let mut hess = DMatrix::<f64>::identity(n, n) * 2.0;
    let mut penalty = 0.0_f64;
    let mut merit_steps = Vec::new();
    let mut multiplier = 0.0;
    let mut kkt_residual = f64::INFINITY;
    let mut status = OptStatus::IterationLimit;
    let mut iterations = 0;

    while iterations < p.max_iterations {
        iterations += 1;
        let chol = match hess.clone().cholesky() {
            Some(c) => c,
            None => {
                hess = DMatrix::identity(n, n) * 2.0;
                hess.clone()
                    .cholesky()
                    .ok_or_else(|| DcfoError::Numerical("singular QP Hessian".into()))?
            }
        };
        let v = chol.solve(&cur.g);
        let w = chol.solve(&cur.a);
        let aw = cur.a.dot(&w);
        let (step, lambda) = if cur.c - cur.a.dot(&v) <= 0.0 {
            (-&v, 0.0)
        } else if aw <= f64::MIN_POSITIVE || !aw.is_finite() {
            // violated with a vanishing constraint gradient: every nearby
            // neighbour is on its k-distance branch and LOF_K is at its minimum
            status = OptStatus::Infeasible;
            break;
        } else {
            let lambda = (cur.c - cur.a.dot(&v)) / aw;
            (-&v - &w * lambda, lambda)
        };
        if step.iter().any(|s| !s.is_finite()) {
            return Err(DcfoError::Numerical("non-finite QP step".into()));
        }
        multiplier = lambda;
        kkt_residual = (&cur.g + &cur.a * lambda).amax();

        let zscale = cur.z.amax().max(1.0);
        let small_step = step.amax() <= tol.step_tol * zscale;
        if cur.c <= tol.constraint_tol
            && (kkt_residual <= tol.grad_tol * cur.g.amax().max(1.0) || small_step)
        {
            status = OptStatus::Converged;
            break;
        }
        if small_step {
            status = OptStatus::Infeasible;
            break;
        }

        penalty = penalty.max(1.1 * lambda + 1e-10);
        let merit0 = cur.f + penalty * cur.c.max(0.0);
        let slope = cur.g.dot(&step) - penalty * cur.c.max(0.0);

        let accepted = line_search(&mut prob, &cur, &step, &w, aw, penalty, merit0, slope);
        let Some((z_new, f_new, c_new)) = accepted else {
            status = if cur.c <= tol.constraint_tol {
                OptStatus::Converged
            } else {
                OptStatus::Infeasible
            };
            break;
        };
        let next = prob.complete(z_new, f_new, c_new);
        merit_steps.push((merit0, next.f + penalty * next.c.max(0.0)));

        // damped BFGS on the Lagrangian gradient
        let s = &next.z - &cur.z;
        let y = (&next.g + &next.a * lambda) - (&cur.g + &cur.a * lambda);
        let bs = &hess * &s;
        let sbs = s.dot(&bs);
        let sy = s.dot(&y);
        if sbs > 1e-300 {
            let y = if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                &y * theta + &bs * (1.0 - theta)
            } else {
                y
            };
            let sy = s.dot(&y);
            if sy > 1e-300 {
                hess += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
            }
        }

        let moved = s.amax();
        cur = next;
        if moved <= tol.step_tol * cur.z.amax().max(1.0) && cur.c <= tol.constraint_tol {
            status = OptStatus::Converged;
            break;
        }
    }

    if status == OptStatus::IterationLimit && cur.c > tol.constraint_tol {
        status = OptStatus::Infeasible;
    }

    let solution = prob.expand(&cur.z);
    if status == OptStatus::Converged && !p.covers(&key_of(m, &solution, p.key.excluded)?) {
        status = OptStatus::LeftRegionWarning;
    }
    let objective = solution
        .iter()
        .zip(&p.origin)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(OptResult {
        constraint_value: cur.c + p.threshold,
        solution,
        objective,
        status,
        trace: prob.trace,
        iterations,
        multiplier,
        kkt_residual,
        merit_steps,
    })
}

/// Minimum-norm Newton steps on the constraint alone until the start is no
/// longer badly infeasible.
fn restore_feasibility(prob: &mut Reduced<'_>, mut cur: Point, threshold: f64) -> Point {
    for _ in 0..RESTORATION_ITERATIONS {
        if cur.c <= (RESTORATION_TRIGGER - 1.0) * threshold {
            break;
        }
        let na2 = cur.a.norm_squared();
        if na2 <= f64::MIN_POSITIVE {
            break;
        }
        let step = &cur.a * (-cur.c / na2);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= 1e-8 {
            let z = &cur.z + &step * alpha;
            let (_, f, c) = prob.values(&z);
            if c <= cur.c * (1.0 - ARMIJO * alpha) {
                accepted = Some((z, f, c));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((z, f, c)) => cur = prob.complete(z, f, c),
            None => break,
        }
    }
    cur
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    prob: &mut Reduced<'_>,
    cur: &Point,
    step: &DVector<f64>,
    w: &DVector<f64>,
    aw: f64,
    penalty: f64,
    merit0: f64,
    slope: f64,
) -> Option<(DVector<f64>, f64, f64)> {
    let merit = |f: f64, c: f64| f + penalty * c.max(0.0);
    let mut alpha = 1.0;
    let mut soc_tried = false;
    while alpha >= MIN_STEP_FRACTION {
        let z = &cur.z + step * alpha;
        let (_, f, c) = prob.values(&z);
        if merit(f, c) <= merit0 + ARMIJO * alpha * slope {
            return Some((z, f, c));
        }
        // second-order correction against the Maratos effect
        if !soc_tried && alpha == 1.0 && c > 0.0 && aw > f64::MIN_POSITIVE {
            soc_tried = true;
            let zc = &z - w * (c / aw);
            let (_, fc, cc) = prob.values(&zc);
            if merit(fc, cc) <= merit0 + ARMIJO * slope {
                return Some((zc, fc, cc));
            }
        }
        alpha *= 0.5;
    }
    None
}
