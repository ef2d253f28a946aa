//! Core data containers: score tables, feature matrices, calibration/test
//! splits, label distributions, and the derived per-trial rng streams.
//!
//! Scores are ingested from files, never computed from models. A score table
//! holds the full `S(X_i, y)` grid plus the true label of every sample; the
//! feature matrix is row-aligned with it and only consulted by
//! data-dependent size rules.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-sample, per-label non-conformity scores together with the true labels.
///
/// Entry `(i, y)` is `S(X_i, y)`; every score is finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scores: Vec<f64>, // row-major, num_samples x num_labels
    true_labels: Vec<usize>,
    num_labels: usize,
}

impl ScoreTable {
    pub fn new(rows: Vec<Vec<f64>>, true_labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("score table has no rows".into()));
        }
        if rows.len() != true_labels.len() {
            return Err(Error::Validation(format!(
                "{} score rows but {} labels",
                rows.len(),
                true_labels.len()
            )));
        }
        let num_labels = rows[0].len();
        if num_labels < 2 {
            return Err(Error::Validation(
                "score table needs at least two label columns".into(),
            ));
        }
        let mut scores = Vec::with_capacity(rows.len() * num_labels);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_labels {
                return Err(Error::Validation(format!(
                    "row {} has {} scores, expected {}",
                    i,
                    row.len(),
                    num_labels
                )));
            }
            for (y, &s) in row.iter().enumerate() {
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::Validation(format!(
                        "score ({i}, {y}) = {s} is not a finite non-negative value"
                    )));
                }
            }
            scores.extend_from_slice(row);
        }
        for (i, &label) in true_labels.iter().enumerate() {
            if label >= num_labels {
                return Err(Error::Validation(format!(
                    "row {i} has label {label}, but only {num_labels} label columns"
                )));
            }
        }
        Ok(Self {
            scores,
            true_labels,
            num_labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.true_labels.len()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// The score row `S(X_i, ·)` over all candidate labels.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn score(&self, i: usize, y: usize) -> f64 {
        self.scores[i * self.num_labels + y]
    }

    pub fn true_label(&self, i: usize) -> usize {
        self.true_labels[i]
    }

    /// `S(X_i, Y_i)`, the score at the sample's own label.
    pub fn true_score(&self, i: usize) -> f64 {
        self.score(i, self.true_labels[i])
    }

    /// Reads the CSV representation (`label,s_0,...,s_{K-1}` header).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        if headers.is_empty() || &headers[0] != "label" {
            return Err(Error::Parse {
                row: 0,
                message: "expected header starting with `label`".into(),
            });
        }
        for (idx, field) in headers.iter().skip(1).enumerate() {
            if field != format!("s_{idx}") {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("expected score column `s_{idx}`, found `{field}`"),
                });
            }
        }
        let num_labels = headers.len() - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in csv_reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                row: i + 1,
                message: e.to_string(),
            })?;
            if record.len() != num_labels + 1 {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {} fields, found {}", num_labels + 1, record.len()),
                });
            }
            let label: usize = record[0].parse().map_err(|_| Error::Parse {
                row: i + 1,
                message: format!("label `{}` is not a non-negative integer", &record[0]),
            })?;
            let mut row = Vec::with_capacity(num_labels);
            for y in 0..num_labels {
                let s: f64 = record[y + 1].parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    message: format!("score `{}` is not a number", &record[y + 1]),
                })?;
                row.push(s);
            }
            rows.push(row);
            labels.push(label);
        }
        Self::new(rows, labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }

    /// Writes the CSV representation; floats use the shortest round-trip form
    /// so save -> load -> save is byte-identical.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let mut header = String::from("label");
        for y in 0..self.num_labels {
            let _ = write!(header, ",s_{y}");
        }
        writeln!(writer, "{header}")?;
        for i in 0..self.num_samples() {
            let mut line = self.true_labels[i].to_string();
            for &s in self.row(i) {
                let _ = write!(line, ",{s}");
            }
            writeln!(writer, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_csv(&mut writer)?;
        writer.flush()?;
        Ok(())
    }
}

/// Per-sample real feature vectors, row-aligned with a [`ScoreTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>, // row-major
    rows: usize,
    cols: usize,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("feature matrix has no rows".into()));
        }
        let cols = rows[0].len();
        if cols == 0 {
            return Err(Error::Validation("feature rows are empty".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Validation(format!(
                    "feature row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "feature row {i} contains a non-finite entry"
                    )));
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            data,
            rows: rows.len(),
            cols,
        })
    }

    /// Builds a matrix by selecting `indices` rows of `self`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            data,
            rows: indices.len(),
            cols: self.cols,
        }
    }

    pub(crate) fn from_raw(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        for (idx, field) in headers.iter().enumerate() {
            if field != format!("f_{idx}") {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("expected feature column `f_{idx}`, found `{field}`"),
                });
            }
        }
        let cols = headers.len();
        let mut rows = Vec::new();
        for (i, record) in csv_reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                row: i + 1,
                message: e.to_string(),
            })?;
            if record.len() != cols {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {} fields, found {}", cols, record.len()),
                });
            }
            let mut row = Vec::with_capacity(cols);
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    message: format!("feature `{field}` is not a number"),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let mut header = String::new();
        for c in 0..self.cols {
            if c > 0 {
                header.push(',');
            }
            let _ = write!(header, "f_{c}");
        }
        writeln!(writer, "{header}")?;
        for i in 0..self.rows {
            let mut line = String::new();
            for (c, &v) in self.row(i).iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{v}");
            }
            writeln!(writer, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_csv(&mut writer)?;
        writer.flush()?;
        Ok(())
    }
}

/// A probability vector over the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probabilities: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Validation("empty label distribution".into()));
        }
        let mut sum = 0.0;
        for &p in &probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// A random partition into `n` calibration indices and one test index.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSplit {
    calibration_indices: Vec<usize>,
    test_index: usize,
}

impl CalibrationSplit {
    pub fn new(calibration_indices: Vec<usize>, test_index: usize) -> Result<Self> {
        if calibration_indices.len() < 2 {
            return Err(Error::Validation(
                "calibration set needs at least two samples".into(),
            ));
        }
        let mut seen = calibration_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation(
                "calibration indices are not distinct".into(),
            ));
        }
        if calibration_indices.contains(&test_index) {
            return Err(Error::Validation(
                "test index also appears in the calibration set".into(),
            ));
        }
        Ok(Self {
            calibration_indices,
            test_index,
        })
    }

    pub fn calibration(&self) -> &[usize] {
        &self.calibration_indices
    }

    pub fn test_index(&self) -> usize {
        self.test_index
    }

    pub fn n(&self) -> usize {
        self.calibration_indices.len()
    }
}

/// Draws `n + 1` distinct indices uniformly without replacement; the first
/// `n` become the calibration set and the last the test point.
pub fn split_sample(
    num_samples: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<CalibrationSplit> {
    if n + 1 > num_samples {
        return Err(Error::InsufficientData {
            needed: n + 1,
            available: num_samples,
        });
    }
    let drawn = rand::seq::index::sample(rng, num_samples, n + 1).into_vec();
    let test_index = drawn[n];
    let calibration_indices = drawn[..n].to_vec();
    CalibrationSplit::new(calibration_indices, test_index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based mixing of `(master_seed, stream_index)` into a stream seed.
///
/// Every per-trial stream depends only on the pair, so trials reproduce
/// bit-identically regardless of execution order or parallelism.
pub fn derive_stream_seed(master_seed: u64, stream_index: u64) -> u64 {
    let a = splitmix64(master_seed);
    splitmix64(a ^ stream_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The rng stream owned by one trial.
pub fn trial_rng(master_seed: u64, trial_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_stream_seed(master_seed, trial_index))
}
