//! Datasets: CSV ingestion, standardization and synthetic Gaussian samples.
//!
//! Points are stored row-major in one flat buffer. Point indices `0..n` are
//! stable for the lifetime of a [`Dataset`]; every other module refers to
//! points by these indices.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DcfoError, Result};

/// Per-column affine scaling recorded by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingParams {
    pub mean: Vec<f64>,
    /// Sample standard deviation; 1.0 for constant columns.
    pub stddev: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ScalingParams {
    /// Maps raw coordinates into the standardized space.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Maps standardized coordinates back to the raw space.
    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    column_names: Option<Vec<String>>,
    scaling: Option<ScalingParams>,
}

impl Dataset {
    /// Builds a dataset from a flat row-major buffer.
    pub fn from_flat(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DcfoError::InvalidParameter("dimension must be >= 1".into()));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(DcfoError::Dimension {
                expected: dim,
                found: points.len() % dim,
            });
        }
        let n = points.len() / dim;
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(DcfoError::NonFinite {
                row: pos / dim,
                column: pos % dim,
            });
        }
        Ok(Self {
            points,
            n,
            dim,
            column_names: None,
            scaling: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| DcfoError::Empty("no rows".into()))?;
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(DcfoError::Ragged {
                    row: r + 1,
                    expected: dim,
                    found: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(flat, dim)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim {
            return Err(DcfoError::Dimension {
                expected: self.dim,
                found: names.len(),
            });
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    pub fn scaling(&self) -> Option<&ScalingParams> {
        self.scaling.as_ref()
    }

    /// Returns a copy with point `i` moved to `x`.
    pub fn with_point_replaced(&self, i: usize, x: &[f64]) -> Result<Self> {
        if i >= self.n {
            return Err(DcfoError::IndexOutOfRange {
                index: i,
                n: self.n,
            });
        }
        check_point(x, self.dim)?;
        let mut out = self.clone();
        out.points[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        Ok(out)
    }

    /// Resolves a column reference given either as a 0-based index or as a
    /// header name.
    pub fn column_index(&self, reference: &str) -> Result<usize> {
        let reference = reference.trim();
        if let Ok(idx) = reference.parse::<usize>() {
            if idx < self.dim {
                return Ok(idx);
            }
            return Err(DcfoError::IndexOutOfRange {
                index: idx,
                n: self.dim,
            });
        }
        self.column_names
            .as_ref()
            .and_then(|names| names.iter().position(|c| c == reference))
            .ok_or_else(|| DcfoError::InvalidParameter(format!("unknown column {reference:?}")))
    }

    /// Writes the dataset as CSV using shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        if let Some(names) = &self.column_names {
            w.write_record(names)?;
        }
        for p in self.points() {
            w.write_record(p.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| DcfoError::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| DcfoError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn check_point(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(DcfoError::Dimension {
            expected: dim,
            found: x.len(),
        });
    }
    if let Some(c) = x.iter().position(|v| !v.is_finite()) {
        return Err(DcfoError::NonFinite { row: 0, column: c });
    }
    Ok(())
}

/// Loads a numeric CSV file. Rows and columns in errors are 1-based and count
/// data rows only (the header is not row 1).
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DcfoError::io(path, e))?;
    read_csv(file, has_header)
}

pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let names = if has_header {
        let h = rdr.headers()?.clone();
        if h.is_empty() {
            return Err(DcfoError::Empty("missing header row".into()));
        }
        Some(h.iter().map(str::to_owned).collect::<Vec<_>>())
    } else {
        None
    };

    let mut dim = names.as_ref().map(Vec::len);
    let mut flat = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let expected = *dim.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DcfoError::Ragged {
                row,
                expected,
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DcfoError::Parse {
                row,
                column: c + 1,
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(DcfoError::NonFinite {
                    row: r,
                    column: c,
                });
            }
            flat.push(v);
        }
    }
    let dim = match dim {
        Some(d) if !flat.is_empty() => d,
        _ => return Err(DcfoError::Empty("no data rows".into())),
    };
    let ds = Dataset::from_flat(flat, dim)?;
    match names {
        Some(n) => ds.with_column_names(n),
        None => Ok(ds),
    }
}

/// Centers and scales every non-constant column to sample mean 0 and sample
/// standard deviation 1 (n - 1 denominator). Constant columns are kept as is.
pub fn standardize(d: &Dataset) -> Result<(Dataset, ScalingParams)> {
    let n = d.len();
    if n < 2 {
        return Err(DcfoError::InvalidParameter(
            "standardize needs at least 2 points".into(),
        ));
    }
    let dim = d.dim();
    let mut mean = vec![0.0; dim];
    for p in d.points() {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut var = vec![0.0; dim];
    for p in d.points() {
        for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut stddev = Vec::with_capacity(dim);
    let mut constant = Vec::with_capacity(dim);
    for (j, s) in var.iter().enumerate() {
        let sd = (s / (n - 1) as f64).sqrt();
        // relative test so that columns of large magnitude with rounding
        // noise are still recognised as constant
        let scale = mean[j].abs().max(1.0);
        if sd <= 1e-14 * scale {
            stddev.push(1.0);
            constant.push(true);
            mean[j] = 0.0;
        } else {
            stddev.push(sd);
            constant.push(false);
        }
    }
    let params = ScalingParams {
        mean,
        stddev,
        constant,
    };
    let flat = d.points().flat_map(|p| params.apply(p)).collect();
    let mut out = Dataset::from_flat(flat, dim)?;
    out.column_names = d.column_names.clone();
    out.scaling = Some(params.clone());
    Ok((out, params))
}

/// Draws `n` i.i.d. standard normal points in `dim` dimensions.
pub fn sample_gaussian(n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(DcfoError::InvalidParameter(format!(
            "sample_gaussian needs n >= 1 and dim >= 1 (got n={n}, dim={dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = (0..n * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Dataset::from_flat(flat, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, header: bool) -> Result<Dataset> {
        read_csv(s.as_bytes(), header)
    }

    #[test]
    fn loads_single_column() {
        let d = parse("0\n1\n2", false).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 1));
        assert_eq!(d.point(2), &[2.0]);
        assert!(d.column_names().is_none());
    }

    #[test]
    fn loads_header() {
        let d = parse("a,b\n1.5,2.5\n", true).unwrap();
        assert_eq!((d.len(), d.dim()), (1, 2));
        assert_eq!(d.column_names().unwrap(), &["a", "b"]);
        assert_eq!(d.point(0), &[1.5, 2.5]);
        assert_eq!(d.column_index("b").unwrap(), 1);
        assert_eq!(d.column_index("0").unwrap(), 0);
    }

    #[test]
    fn parse_error_names_cell() {
        match parse("1,x\n", false) {
            Err(DcfoError::Parse { row, column, .. }) => assert_eq!((row, column), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_ragged_and_empty() {
        assert!(matches!(
            parse("1,2\n3\n", false),
            Err(DcfoError::Ragged { row: 2, .. })
        ));
        assert!(matches!(parse("", false), Err(DcfoError::Empty(_))));
        assert!(matches!(parse("a,b\n", true), Err(DcfoError::Empty(_))));
        assert!(matches!(
            parse("1\nnan\n", false),
            Err(DcfoError::NonFinite { .. })
        ));
    }

    #[test]
    fn standardize_two_points() {
        let d = Dataset::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let (s, p) = standardize(&d).unwrap();
        // mean 1, sample stddev sqrt(2): outputs -1/sqrt(2), +1/sqrt(2)
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.stddev[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.point(0)[0] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s.point(1)[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_column() {
        let d = Dataset::from_rows(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 4.0]]).unwrap();
        let (s, p) = standardize(&d).unwrap();
        assert_eq!(p.constant, vec![true, false]);
        assert_eq!(p.stddev[0], 1.0);
        for i in 0..3 {
            assert_eq!(s.point(i)[0], 5.0);
        }
        assert!(standardize(&Dataset::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn standardize_idempotent_and_invertible() {
        let d = sample_gaussian(50, 3, 11).unwrap();
        let d = Dataset::from_flat(d.flat().iter().map(|v| 3.0 * v + 7.0).collect(), 3).unwrap();
        let (s1, p1) = standardize(&d).unwrap();
        let (s2, _) = standardize(&s1).unwrap();
        for (a, b) in s1.flat().iter().zip(s2.flat()) {
            assert!((a - b).abs() < 1e-9);
        }
        for i in 0..d.len() {
            let back = p1.invert(s1.point(i));
            for (a, b) in back.iter().zip(d.point(i)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = sample_gaussian(500, 2, 7).unwrap();
        let b = sample_gaussian(500, 2, 7).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), sample_gaussian(500, 2, 8).unwrap().flat());
        assert!(sample_gaussian(0, 2, 1).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let d = sample_gaussian(10_000, 1, 1).unwrap();
        let n = d.len() as f64;
        let mean = d.flat().iter().sum::<f64>() / n;
        let sd = (d.flat().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn csv_round_trip() {
        let d = sample_gaussian(40, 3, 5)
            .unwrap()
            .with_column_names(vec!["x".into(), "y".into(), "z".into()])
            .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), true).unwrap();
        assert_eq!(back.flat(), d.flat());
        assert_eq!(back.column_names(), d.column_names());
    }
}
