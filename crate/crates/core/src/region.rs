//! Region keys and the frozen-neighbourhood LOF.
//!
//! The key of a location `x` is its kNN set together with the kNN set of each
//! of those neighbours. All locations sharing a key form a region, and inside
//! a region the LOF of `x` only depends on `x` through the distances to its
//! (fixed) neighbours:
//!
//! ```text
//! LOF_K(x) = (sum_j lrd(p_j) / k^2) * sum_j max(k_distance(p_j), d(x, p_j))
//! ```
//!
//! The query never enters a neighbour list, so `lrd(p_j)` and
//! `k_distance(p_j)` are constants of the (exclusion-adjusted) model. `LOF_K`
//! is therefore a positive multiple of a sum of maxima of norms: convex,
//! continuous, and smooth except where `d(x, p_j) = k_distance(p_j)` or
//! `x = p_j`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::check_point;
use crate::error::{DcfoError, Result};
use crate::lof::{LofModel, Neighborhoods};
use crate::neighbors::dist;

/// Default tolerance of the kink detector used by gradient checks.
pub const KINK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborhoodKey {
    pub excluded: Option<usize>,
    /// kNN of the location, ordered by `(distance, index)`.
    pub query_neighbors: Vec<usize>,
    /// kNN list of each entry of `query_neighbors`, in the same order.
    pub neighbor_neighbors: Vec<Vec<usize>>,
    #[serde(skip)]
    canonical: Vec<usize>,
}

impl NeighborhoodKey {
    fn new(excluded: Option<usize>, query_neighbors: Vec<usize>, view: &Neighborhoods) -> Self {
        let neighbor_neighbors: Vec<Vec<usize>> =
            query_neighbors.iter().map(|&j| view.knn(j).to_vec()).collect();
        let canonical = canonical_form(&query_neighbors, &neighbor_neighbors);
        Self {
            excluded,
            query_neighbors,
            neighbor_neighbors,
            canonical,
        }
    }

    /// Rebuilds a key from its raw parts (for example after deserializing).
    pub fn from_parts(
        excluded: Option<usize>,
        query_neighbors: Vec<usize>,
        neighbor_neighbors: Vec<Vec<usize>>,
    ) -> Self {
        let canonical = canonical_form(&query_neighbors, &neighbor_neighbors);
        Self {
            excluded,
            query_neighbors,
            neighbor_neighbors,
            canonical,
        }
    }

    pub fn k(&self) -> usize {
        self.query_neighbors.len()
    }

    /// Every point index referenced by the key.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.query_neighbors
            .iter()
            .chain(self.neighbor_neighbors.iter().flatten())
            .copied()
    }
}

// Sorted neighbour set followed by each neighbour's sorted list, in the
// sorted neighbour order. All lists have length k, so flattening is lossless.
fn canonical_form(query: &[usize], nn: &[Vec<usize>]) -> Vec<usize> {
    let mut pairs: Vec<(usize, &Vec<usize>)> = query.iter().copied().zip(nn).collect();
    pairs.sort_by_key(|p| p.0);
    let mut out: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    for (_, list) in pairs {
        let mut l = list.clone();
        l.sort_unstable();
        out.extend(l);
    }
    out
}

impl PartialEq for NeighborhoodKey {
    fn eq(&self, other: &Self) -> bool {
        self.excluded == other.excluded && self.canonical == other.canonical
    }
}

impl Eq for NeighborhoodKey {}

impl Hash for NeighborhoodKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.excluded.hash(state);
        self.canonical.hash(state);
    }
}

/// Key of location `x` with `excluded` removed from the dataset.
pub fn key_of(m: &LofModel, x: &[f64], excluded: Option<usize>) -> Result<NeighborhoodKey> {
    let view = m.neighborhoods(excluded)?;
    let q: Vec<usize> = m.query_knn(x, excluded)?.iter().map(|n| n.index).collect();
    Ok(NeighborhoodKey::new(excluded, q, view))
}

/// `LOF_K` and its gradient for one frozen key.
#[derive(Debug, Clone)]
pub struct RegionFunction<'a> {
    model: &'a LofModel,
    neighbors: Vec<usize>,
    k_distances: Vec<f64>,
    scale: f64,
}

impl<'a> RegionFunction<'a> {
    pub fn new(model: &'a LofModel, key: &NeighborhoodKey) -> Result<Self> {
        let n = model.len();
        if let Some(bad) = key.indices().find(|&i| i >= n) {
            return Err(DcfoError::IndexOutOfRange { index: bad, n });
        }
        if key.query_neighbors.is_empty() {
            return Err(DcfoError::InvalidParameter("empty key".into()));
        }
        if let Some(e) = key.excluded {
            if key.indices().any(|i| i == e) {
                return Err(DcfoError::InvalidParameter(format!(
                    "key references its excluded point {e}"
                )));
            }
        }
        let view = model.neighborhoods(key.excluded)?;
        let kk = key.k() as f64;
        let lrd_sum: f64 = key.query_neighbors.iter().map(|&j| view.lrd(j)).sum();
        Ok(Self {
            model,
            k_distances: key.query_neighbors.iter().map(|&j| view.k_distance(j)).collect(),
            neighbors: key.query_neighbors.clone(),
            scale: lrd_sum / (kk * kk),
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let data = self.model.data();
        let rd_sum: f64 = self
            .neighbors
            .iter()
            .zip(&self.k_distances)
            .map(|(&j, &kd)| self.model.clamp_rd(kd.max(dist(x, data.point(j)))))
            .sum();
        self.scale * rd_sum
    }

    /// Analytic gradient. At a kink the distance branch is used; neighbours
    /// in the k-distance (or floor) branch contribute nothing, including a
    /// neighbour at distance 0.
    pub fn gradient_into(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let data = self.model.data();
        for (&j, &kd) in self.neighbors.iter().zip(&self.k_distances) {
            let p = data.point(j);
            let d = dist(x, p);
            if d > 0.0 && d >= kd && self.model.clamp_rd(d) == d {
                for ((g, xi), pi) in grad.iter_mut().zip(x).zip(p) {
                    *g += self.scale * (xi - pi) / d;
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient_into(x, &mut g);
        g
    }

    /// Whether `x` lies within `tol` of a max-kink of some neighbour.
    pub fn near_kink(&self, x: &[f64], tol: f64) -> bool {
        let data = self.model.data();
        self.neighbors
            .iter()
            .zip(&self.k_distances)
            .any(|(&j, &kd)| (dist(x, data.point(j)) - kd).abs() <= tol)
    }

    /// Whether `x` coincides with a neighbour of the key.
    pub fn coincident_neighbor(&self, x: &[f64]) -> Option<usize> {
        let data = self.model.data();
        self.neighbors
            .iter()
            .copied()
            .find(|&j| dist(x, data.point(j)) == 0.0)
    }
}

/// LOF evaluated with the neighbourhood structure frozen to `key`.
pub fn lof_region(m: &LofModel, key: &NeighborhoodKey, x: &[f64]) -> Result<f64> {
    check_point(x, m.dim())?;
    Ok(RegionFunction::new(m, key)?.value(x))
}

/// How `grad_lof_region` computes derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences with step `1e-6 * max(1, |x_i|)`.
    Numeric,
}

pub fn grad_lof_region(m: &LofModel, key: &NeighborhoodKey, x: &[f64]) -> Result<Vec<f64>> {
    grad_lof_region_with(m, key, x, GradientMode::Analytic)
}

pub fn grad_lof_region_with(
    m: &LofModel,
    key: &NeighborhoodKey,
    x: &[f64],
    mode: GradientMode,
) -> Result<Vec<f64>> {
    check_point(x, m.dim())?;
    let f = RegionFunction::new(m, key)?;
    if let Some(index) = f.coincident_neighbor(x) {
        return Err(DcfoError::GradientUndefined { index });
    }
    Ok(match mode {
        GradientMode::Analytic => f.gradient(x),
        GradientMode::Numeric => central_difference(|z| f.value(z), x),
    })
}

pub(crate) fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            z[i] = x[i] + h;
            let up = f(&z);
            z[i] = x[i] - h;
            let down = f(&z);
            z[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ── Region map ────────────────────────────────────────────────────────

/// Dense region labels over a regular 2D grid.
#[derive(Debug, Clone)]
pub struct RegionMap {
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: [f64; 4],
    pub resolution: usize,
    /// Row-major ids: `ids[row * resolution + col]`, row along the second axis.
    pub ids: Vec<usize>,
    /// `keys[id]` is the key shared by every cell labelled `id`.
    pub keys: Vec<NeighborhoodKey>,
    pub excluded: Option<usize>,
}

impl RegionMap {
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        cell_center(&self.bbox, self.resolution, row, col)
    }

    pub fn id_at(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.resolution + col]
    }

    /// Grid cell containing `x`, if inside the bounding box.
    pub fn cell_of(&self, x: &[f64]) -> Option<(usize, usize)> {
        let [x0, y0, x1, y1] = self.bbox;
        let fx = (x[0] - x0) / (x1 - x0);
        let fy = (x[1] - y0) / (y1 - y0);
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return None;
        }
        let r = self.resolution;
        let col = ((fx * r as f64) as usize).min(r - 1);
        let row = ((fy * r as f64) as usize).min(r - 1);
        Some((row, col))
    }

    pub fn distinct_regions(&self) -> usize {
        self.keys.len()
    }

    /// `row,col,region_id` lines with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,region_id")?;
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                writeln!(w, "{row},{col},{}", self.id_at(row, col))?;
            }
        }
        Ok(())
    }

    pub fn keys_json(&self) -> serde_json::Value {
        let regions: Vec<serde_json::Value> = self
            .keys
            .iter()
            .enumerate()
            .map(|(id, key)| {
                serde_json::json!({
                    "id": id,
                    "query_neighbors": key.query_neighbors,
                    "neighbor_neighbors": key.neighbor_neighbors,
                })
            })
            .collect();
        serde_json::json!({
            "excluded": self.excluded,
            "bbox": self.bbox,
            "resolution": self.resolution,
            "regions": regions,
        })
    }
}

fn cell_center(bbox: &[f64; 4], res: usize, row: usize, col: usize) -> [f64; 2] {
    let [x0, y0, x1, y1] = *bbox;
    [
        x0 + (col as f64 + 0.5) * (x1 - x0) / res as f64,
        y0 + (row as f64 + 0.5) * (y1 - y0) / res as f64,
    ]
}

/// Labels every cell of a `resolution x resolution` grid over `bbox`
/// (`[x_min, y_min, x_max, y_max]`) with the id of the key at its center.
/// Ids are assigned in row-major order of first appearance.
pub fn region_map_grid(
    m: &LofModel,
    bbox: &[f64],
    resolution: usize,
    excluded: Option<usize>,
) -> Result<RegionMap> {
    if m.dim() != 2 {
        return Err(DcfoError::Dimension {
            expected: 2,
            found: m.dim(),
        });
    }
    if resolution < 2 {
        return Err(DcfoError::InvalidParameter(format!(
            "resolution must be >= 2, got {resolution}"
        )));
    }
    let bbox: [f64; 4] = bbox.try_into().map_err(|_| DcfoError::Dimension {
        expected: 4,
        found: bbox.len(),
    })?;
    if !(bbox[2] > bbox[0] && bbox[3] > bbox[1]) || bbox.iter().any(|v| !v.is_finite()) {
        return Err(DcfoError::InvalidParameter(format!("degenerate bounding box {bbox:?}")));
    }

    let cells: Vec<NeighborhoodKey> = (0..resolution * resolution)
        .into_par_iter()
        .map(|c| key_of(m, &cell_center(&bbox, resolution, c / resolution, c % resolution), excluded))
        .collect::<Result<_>>()?;

    let mut lookup: HashMap<NeighborhoodKey, usize> = HashMap::new();
    let mut keys = Vec::new();
    let ids = cells
        .into_iter()
        .map(|key| {
            *lookup.entry(key.clone()).or_insert_with(|| {
                keys.push(key);
                keys.len() - 1
            })
        })
        .collect();
    Ok(RegionMap {
        bbox,
        resolution,
        ids,
        keys,
        excluded,
    })
}

/// Data bounds padded by `pad` of the extent on each side.
pub fn padded_bbox(m: &LofModel, pad: f64) -> [f64; 4] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in m.data().points() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext = [(hi[0] - lo[0]).max(1e-9), (hi[1] - lo[1]).max(1e-9)];
    [
        lo[0] - pad * ext[0],
        lo[1] - pad * ext[1],
        hi[0] + pad * ext[0],
        hi[1] + pad * ext[1],
    ]
}
