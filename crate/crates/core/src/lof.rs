//! Exact Local Outlier Factor.
//!
//! For a point `p` with neighbour list `knn(p)`:
//!
//! * `rd(p, o) = max(k_distance(o), d(p, o))`
//! * `lrd(p) = k / sum_{o in knn(p)} rd(p, o)`
//! * `LOF(p) = sum_{o in knn(p)} lrd(o) / (k * lrd(p))`
//!
//! A [`LofModel`] stores, besides the usual per-point quantities, the `k + 1`
//! nearest neighbours of every point. Removing one point `e` from the dataset
//! only changes the neighbour lists that contained `e`, and the replacement is
//! always the `(k + 1)`-th neighbour, so the exclusion-adjusted structures
//! used for counterfactual queries are rebuilt in `O(n k)` and cached per
//! excluded index.

use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::dataset::{check_point, Dataset};
use crate::error::{DcfoError, Result};
use crate::neighbors::{dist, Neighbor, NeighborIndex};

/// Floor applied to every reachability distance under [`DuplicatePolicy::Epsilon`].
pub const RD_FLOOR: f64 = 1e-12;

/// What to do when a neighbourhood collapses to distance 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicatePolicy {
    /// Clamp reachability distances below [`RD_FLOOR`] to [`RD_FLOOR`].
    #[default]
    Epsilon,
    /// Refuse to build a model where some k-distance is 0.
    Reject,
}

/// Neighbour lists, k-distances and densities of every point, optionally with
/// one point removed from the dataset.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    excluded: Option<usize>,
    knn: Vec<Vec<usize>>,
    k_distances: Vec<f64>,
    lrd: Vec<f64>,
}

impl Neighborhoods {
    pub fn excluded(&self) -> Option<usize> {
        self.excluded
    }

    /// Ordered neighbour list of point `j`; empty for the excluded point.
    pub fn knn(&self, j: usize) -> &[usize] {
        &self.knn[j]
    }

    pub fn k_distance(&self, j: usize) -> f64 {
        self.k_distances[j]
    }

    pub fn lrd(&self, j: usize) -> f64 {
        self.lrd[j]
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distances
    }

    pub fn lrd_values(&self) -> &[f64] {
        &self.lrd
    }
}

#[derive(Debug)]
pub struct LofModel {
    data: Arc<Dataset>,
    k: usize,
    policy: DuplicatePolicy,
    index: NeighborIndex,
    /// k + 1 nearest neighbours of every point (itself excluded) with distances.
    extended: Vec<Vec<(usize, f64)>>,
    base: Neighborhoods,
    lof_scores: Vec<f64>,
    exclusions: Vec<OnceLock<Neighborhoods>>,
}

/// Builds an LOF model with the default duplicate policy.
pub fn build_model(data: impl Into<Arc<Dataset>>, k: usize) -> Result<LofModel> {
    LofModel::build(data, k, DuplicatePolicy::default())
}

impl LofModel {
    pub fn build(data: impl Into<Arc<Dataset>>, k: usize, policy: DuplicatePolicy) -> Result<Self> {
        let data = data.into();
        let n = data.len();
        if k == 0 {
            return Err(DcfoError::InvalidParameter("k must be >= 1".into()));
        }
        if n < k + 2 {
            return Err(DcfoError::KTooLarge { k, n });
        }
        let index = NeighborIndex::build(&data);
        let extended: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                index
                    .knn(&data, data.point(i), k + 1, &[i])
                    .into_iter()
                    .map(|nb| (nb.index, nb.sq_dist.sqrt()))
                    .collect()
            })
            .collect();

        let knn: Vec<Vec<usize>> = extended
            .iter()
            .map(|e| e[..k].iter().map(|&(j, _)| j).collect())
            .collect();
        let k_distances: Vec<f64> = extended.iter().map(|e| e[k - 1].1).collect();
        if policy == DuplicatePolicy::Reject {
            if let Some(i) = k_distances.iter().position(|&d| d == 0.0) {
                return Err(DcfoError::DuplicateNeighborhood { index: i, k });
            }
        }

        let mut model = Self {
            exclusions: (0..n).map(|_| OnceLock::new()).collect(),
            data,
            k,
            policy,
            index,
            extended,
            base: Neighborhoods {
                excluded: None,
                knn,
                k_distances,
                lrd: Vec::new(),
            },
            lof_scores: Vec::new(),
        };
        model.base.lrd = model.compute_lrd(&model.base.knn, &model.base.k_distances, None);
        model.lof_scores = (0..n)
            .map(|i| {
                let sum: f64 = model.base.knn[i].iter().map(|&j| model.base.lrd[j]).sum();
                sum / (k as f64 * model.base.lrd[i])
            })
            .collect();
        Ok(model)
    }

    fn compute_lrd(&self, knn: &[Vec<usize>], kd: &[f64], excluded: Option<usize>) -> Vec<f64> {
        (0..self.data.len())
            .map(|i| {
                if Some(i) == excluded {
                    return f64::NAN;
                }
                let p = self.data.point(i);
                let sum: f64 = knn[i]
                    .iter()
                    .map(|&o| self.clamp_rd(kd[o].max(dist(p, self.data.point(o)))))
                    .sum();
                self.k as f64 / sum
            })
            .collect()
    }

    #[inline]
    pub(crate) fn clamp_rd(&self, rd: f64) -> f64 {
        match self.policy {
            DuplicatePolicy::Epsilon => rd.max(RD_FLOOR),
            DuplicatePolicy::Reject => rd,
        }
    }

    fn compute_exclusion(&self, e: usize) -> Neighborhoods {
        let k = self.k;
        let mut knn = Vec::with_capacity(self.data.len());
        let mut k_distances = Vec::with_capacity(self.data.len());
        for (j, ext) in self.extended.iter().enumerate() {
            if j == e {
                knn.push(Vec::new());
                k_distances.push(f64::NAN);
                continue;
            }
            let list: Vec<(usize, f64)> = ext.iter().copied().filter(|&(o, _)| o != e).take(k).collect();
            k_distances.push(list[k - 1].1);
            knn.push(list.into_iter().map(|(o, _)| o).collect());
        }
        let lrd = self.compute_lrd(&knn, &k_distances, Some(e));
        Neighborhoods {
            excluded: Some(e),
            knn,
            k_distances,
            lrd,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Dataset> {
        Arc::clone(&self.data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn policy(&self) -> DuplicatePolicy {
        self.policy
    }

    pub fn knn_list(&self, i: usize) -> &[usize] {
        self.base.knn(i)
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.base.k_distances
    }

    pub fn lrd_values(&self) -> &[f64] {
        &self.base.lrd
    }

    pub fn lof_scores(&self) -> &[f64] {
        &self.lof_scores
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(DcfoError::IndexOutOfRange {
                index: i,
                n: self.len(),
            });
        }
        Ok(())
    }

    /// Neighbourhood structures of the dataset with `excluded` removed.
    /// Exclusion views are computed on first use and cached.
    pub fn neighborhoods(&self, excluded: Option<usize>) -> Result<&Neighborhoods> {
        match excluded {
            None => Ok(&self.base),
            Some(e) => {
                self.check_index(e)?;
                // n >= k + 2 at build, so n - 1 >= k + 1 always holds here
                Ok(self.exclusions[e].get_or_init(|| self.compute_exclusion(e)))
            }
        }
    }

    /// The `k` nearest dataset points to `x`, ignoring `excluded`.
    pub fn query_knn(&self, x: &[f64], excluded: Option<usize>) -> Result<Vec<Neighbor>> {
        check_point(x, self.dim())?;
        if let Some(e) = excluded {
            self.check_index(e)?;
        }
        let skip: &[usize] = match &excluded {
            Some(e) => std::slice::from_ref(e),
            None => &[],
        };
        Ok(self.index.knn(&self.data, x, self.k, skip))
    }

    /// `max(k_distance(p_j), d(x, p_j))` under the full dataset.
    pub fn reachability_distance(&self, from_x: &[f64], to_j: usize) -> Result<f64> {
        self.check_index(to_j)?;
        check_point(from_x, self.dim())?;
        Ok(self.base.k_distances[to_j].max(dist(from_x, self.data.point(to_j))))
    }

    /// LOF that a hypothetical new point at `x` would receive against the
    /// dataset without `excluded`. The query never enters any neighbour list.
    pub fn lof_query(&self, x: &[f64], excluded: Option<usize>) -> Result<f64> {
        let view = self.neighborhoods(excluded)?;
        let neighbors = self.query_knn(x, excluded)?;
        Ok(self.score_with(view, x, neighbors.iter().map(|n| n.index)))
    }

    /// LOF of `x` with its neighbour set fixed to `neighbors`.
    pub(crate) fn score_with(
        &self,
        view: &Neighborhoods,
        x: &[f64],
        neighbors: impl Iterator<Item = usize>,
    ) -> f64 {
        let mut rd_sum = 0.0;
        let mut lrd_sum = 0.0;
        let mut count = 0usize;
        for j in neighbors {
            rd_sum += self.clamp_rd(view.k_distances[j].max(dist(x, self.data.point(j))));
            lrd_sum += view.lrd[j];
            count += 1;
        }
        // lrd(x) = count / rd_sum
        lrd_sum * rd_sum / (count as f64 * count as f64)
    }
}

/// LOF of point `i` after moving it to `x` and refitting on the modified
/// dataset.
pub fn lof_relocated(data: &Dataset, k: usize, i: usize, x: &[f64]) -> Result<f64> {
    lof_relocated_with(data, k, i, x, DuplicatePolicy::default())
}

pub fn lof_relocated_with(
    data: &Dataset,
    k: usize,
    i: usize,
    x: &[f64],
    policy: DuplicatePolicy,
) -> Result<f64> {
    let moved = data.with_point_replaced(i, x)?;
    let model = LofModel::build(moved, k, policy)?;
    Ok(model.lof_scores[i])
}

// ── Thresholds ────────────────────────────────────────────────────────

/// Conventional fixed LOF threshold.
pub const DEFAULT_FIXED_THRESHOLD: f64 = 1.5;
/// Quantile used when the fixed threshold flags nothing.
pub const FALLBACK_QUANTILE: f64 = 0.95;

/// How the outlier threshold `t` is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Linear-interpolated quantile of the score distribution.
    Quantile(f64),
    /// Fixed 1.5, falling back to the 0.95 quantile if no score exceeds it.
    #[default]
    Auto,
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Fixed(v) if !(v > 0.0 && v.is_finite()) => Err(
                DcfoError::InvalidParameter(format!("fixed threshold must be > 0, got {v}")),
            ),
            ThresholdPolicy::Quantile(q) if !(q > 0.0 && q < 1.0) => Err(
                DcfoError::InvalidParameter(format!("quantile must lie in (0, 1), got {q}")),
            ),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::Fixed(v) => write!(f, "fixed:{v}"),
            ThresholdPolicy::Quantile(q) => write!(f, "quantile:{q}"),
            ThresholdPolicy::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = DcfoError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let policy = if s.eq_ignore_ascii_case("auto") {
            ThresholdPolicy::Auto
        } else if let Some((kind, value)) = s.split_once(':') {
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| DcfoError::InvalidParameter(format!("bad threshold value {value:?}")))?;
            match kind.trim() {
                "fixed" => ThresholdPolicy::Fixed(v),
                "quantile" => ThresholdPolicy::Quantile(v),
                other => {
                    return Err(DcfoError::InvalidParameter(format!(
                        "unknown threshold kind {other:?}"
                    )))
                }
            }
        } else {
            return Err(DcfoError::InvalidParameter(format!(
                "threshold must be fixed:<v>, quantile:<q> or auto, got {s:?}"
            )));
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// A policy together with the threshold it resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedThreshold {
    pub policy: ThresholdPolicy,
    pub value: f64,
}

/// Linear-interpolation quantile (the "type 7" rule).
pub fn quantile(scores: &[f64], q: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resolves `policy` against `scores`.
pub fn select_threshold(scores: &[f64], policy: ThresholdPolicy) -> Result<ResolvedThreshold> {
    if scores.is_empty() {
        return Err(DcfoError::Empty("no scores to threshold".into()));
    }
    policy.validate()?;
    let value = match policy {
        ThresholdPolicy::Fixed(v) => v,
        ThresholdPolicy::Quantile(q) => quantile(scores, q),
        ThresholdPolicy::Auto => {
            if scores.iter().any(|&s| s > DEFAULT_FIXED_THRESHOLD) {
                DEFAULT_FIXED_THRESHOLD
            } else {
                quantile(scores, FALLBACK_QUANTILE)
            }
        }
    };
    Ok(ResolvedThreshold { policy, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_gaussian;

    fn micro() -> LofModel {
        let d = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]).unwrap();
        build_model(d, 2).unwrap()
    }

    #[test]
    fn micro_dataset_values() {
        let m = micro();
        assert_eq!(m.k_distances(), &[2.0, 1.0, 2.0, 9.0]);
        let lrd = [2.0 / 3.0, 0.5, 2.0 / 3.0, 2.0 / 17.0];
        for (a, b) in m.lrd_values().iter().zip(lrd) {
            assert!((a - b).abs() < 1e-12);
        }
        let lof = [0.875, 4.0 / 3.0, 0.875, 119.0 / 24.0];
        for (a, b) in m.lof_scores().iter().zip(lof) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.knn_list(1), &[0, 2]);
    }

    #[test]
    fn reachability_examples() {
        let m = micro();
        // p4 -> p3: max(2, 8)
        assert_eq!(m.reachability_distance(&[10.0], 2).unwrap(), 8.0);
        // p2 -> p1: k-distance dominates
        assert_eq!(m.reachability_distance(&[1.0], 0).unwrap(), 2.0);
        assert_eq!(m.reachability_distance(&[-5.0], 0).unwrap(), 5.0);
        assert!(matches!(
            m.reachability_distance(&[0.0], 4),
            Err(DcfoError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn query_with_exclusion_matches_refit() {
        let m = micro();
        // {0,1,2} plus a query at 10
        let v = m.lof_query(&[10.0], Some(3)).unwrap();
        assert!((v - 119.0 / 24.0).abs() < 1e-12);
        assert!(m.lof_query(&[1.0], Some(9)).is_err());
    }

    #[test]
    fn uniform_grid_query_near_one() {
        let d = Dataset::from_rows(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let m = build_model(d, 2).unwrap();
        let v = m.lof_query(&[4.5], None).unwrap();
        assert!((0.8..=1.2).contains(&v), "{v}");
    }

    #[test]
    fn exclusion_view_matches_fresh_model() {
        let d = sample_gaussian(60, 3, 21).unwrap();
        let m = build_model(d.clone(), 4).unwrap();
        for e in [0, 17, 59] {
            let view = m.neighborhoods(Some(e)).unwrap();
            let rows: Vec<Vec<f64>> = (0..d.len()).filter(|&i| i != e).map(|i| d.point(i).to_vec()).collect();
            let fresh = build_model(Dataset::from_rows(&rows).unwrap(), 4).unwrap();
            let remap = |i: usize| if i < e { i } else { i + 1 };
            for (fi, i) in (0..d.len()).filter(|&i| i != e).enumerate() {
                let a: Vec<usize> = fresh.knn_list(fi).iter().map(|&j| remap(j)).collect();
                assert_eq!(view.knn(i), a.as_slice());
                assert!((view.lrd(i) - fresh.lrd_values()[fi]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relocation_identity() {
        let d = sample_gaussian(30, 2, 3).unwrap();
        let m = build_model(d.clone(), 3).unwrap();
        for i in [0, 11] {
            let v = lof_relocated(&d, 3, i, d.point(i)).unwrap();
            assert!((v - m.lof_scores()[i]).abs() <= 1e-12 * v.abs());
        }
    }

    #[test]
    fn relocation_onto_duplicate() {
        let d = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]).unwrap();
        // {0,1,2,2}: hand oracle
        // knn: p1 {p2,p3} kd 2 | p2 {p1,p3} kd 1 | p3 {p4,p2} kd 1 | p4 {p3,p2} kd 1
        // lrd: p1 2/(1+2)=2/3 | p2 2/(2+1)=2/3 | p3 2/(1+1)=1 | p4 2/(1+1)=1
        // LOF p4 = (1 + 2/3) / (2 * 1) = 5/6
        let v = lof_relocated(&d, 2, 3, &[2.0]).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn reject_policy_on_duplicates() {
        let d = Dataset::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![5.0]]).unwrap();
        assert!(matches!(
            LofModel::build(d.clone(), 2, DuplicatePolicy::Reject),
            Err(DcfoError::DuplicateNeighborhood { .. })
        ));
        let m = LofModel::build(d, 2, DuplicatePolicy::Epsilon).unwrap();
        assert!(m.lof_scores().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn k_too_large() {
        let d = sample_gaussian(5, 2, 1).unwrap();
        assert!(matches!(build_model(d.clone(), 4), Err(DcfoError::KTooLarge { .. })));
        assert!(build_model(d.clone(), 3).is_ok());
        assert!(build_model(d, 0).is_err());
    }

    #[test]
    fn thresholds() {
        let t = select_threshold(&[1.0, 2.0, 3.0, 4.0], ThresholdPolicy::Quantile(0.5)).unwrap();
        assert_eq!(t.value, 2.5);
        let low = [1.0, 1.1, 1.4];
        assert_eq!(select_threshold(&low, ThresholdPolicy::Fixed(1.5)).unwrap().value, 1.5);
        let auto = select_threshold(&low, ThresholdPolicy::Auto).unwrap().value;
        assert!((auto - quantile(&low, 0.95)).abs() < 1e-15);
        assert!(select_threshold(&[], ThresholdPolicy::Auto).is_err());
        assert!(select_threshold(&low, ThresholdPolicy::Quantile(1.0)).is_err());
    }

    #[test]
    fn quantile_flags_five_of_hundred() {
        let d = sample_gaussian(100, 1, 99).unwrap();
        let scores: Vec<f64> = d.flat().iter().map(|v| v.exp()).collect();
        let t = select_threshold(&scores, ThresholdPolicy::Quantile(0.95)).unwrap().value;
        assert_eq!(scores.iter().filter(|&&s| s > t).count(), 5);
    }

    #[test]
    fn parse_policy() {
        assert_eq!("auto".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Auto);
        assert_eq!("fixed:1.5".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(1.5));
        assert_eq!(
            "quantile:0.95".parse::<ThresholdPolicy>().unwrap(),
            ThresholdPolicy::Quantile(0.95)
        );
        assert!("fixed:-1".parse::<ThresholdPolicy>().is_err());
        assert!("median".parse::<ThresholdPolicy>().is_err());
    }
}
