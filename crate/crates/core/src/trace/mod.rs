//! Activation-trace data types, on-disk formats and proper/calibration splitting.
//!
//! Activations are held as `f32`, the precision they are stored at on disk;
//! every statistic computed from them widens to `f64` first.

mod binary;
mod csv;

use std::collections::HashSet;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use self::binary::{decode_binary, encode_binary, MAGIC, VERSION};

/// Activation values of the monitored neurons for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector(Vec<f32>);

impl ActivationVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("activations", "vector must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("activations", "values must be finite"));
        }
        Ok(ActivationVector(values))
    }

    /// Narrows `f64` activations (as produced by the reference network).
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for ActivationVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub sample_id: u64,
    pub activations: ActivationVector,
    pub label: Option<u32>,
}

impl TraceRecord {
    pub fn new(sample_id: u64, activations: ActivationVector, label: Option<u32>) -> Self {
        TraceRecord {
            sample_id,
            activations,
            label,
        }
    }
}

/// Largest class label; the binary format stores labels as i32.
pub const MAX_LABEL: u32 = i32::MAX as u32;

/// A validated collection of trace records sharing one activation width.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    records: Vec<TraceRecord>,
    n_neurons: usize,
}

impl TraceDataset {
    pub fn new(n_neurons: usize, records: Vec<TraceRecord>) -> Result<Self> {
        if n_neurons == 0 {
            return Err(Error::param("n_neurons", "must be positive"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.activations.len() != n_neurons {
                return Err(Error::DimensionMismatch {
                    expected: n_neurons,
                    found: r.activations.len(),
                });
            }
            if !seen.insert(r.sample_id) {
                return Err(Error::DuplicateSampleId(r.sample_id));
            }
            if let Some(l) = r.label.filter(|&l| l > MAX_LABEL) {
                return Err(Error::param("label", format!("{l} exceeds {MAX_LABEL}")));
            }
        }
        Ok(TraceDataset { records, n_neurons })
    }

    /// Builds a dataset from raw rows, assigning sample ids `0..n`.
    pub fn from_rows(rows: Vec<Vec<f32>>, labels: Option<Vec<u32>>) -> Result<Self> {
        let n_neurons = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::DimensionMismatch {
                    expected: rows.len(),
                    found: l.len(),
                });
            }
        }
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let label = labels.as_ref().map(|l| l[i]);
                Ok(TraceRecord::new(
                    i as u64,
                    ActivationVector::new(row)?,
                    label,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_neurons, records)
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.records.iter().any(|r| r.label.is_some())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    /// SHA-256 over the canonical binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(encode_binary(self)))
    }
}

impl<'a> IntoIterator for &'a TraceDataset {
    type Item = &'a TraceRecord;
    type IntoIter = std::slice::Iter<'a, TraceRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Binary,
    Csv,
}

impl TraceFormat {
    /// Guesses the format from a file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TraceFormat::Csv,
            _ => TraceFormat::Binary,
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>, format: TraceFormat) -> Result<TraceDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        TraceFormat::Binary => decode_binary(&bytes),
        TraceFormat::Csv => csv::decode_csv(&bytes),
    }
}

pub fn save_trace(
    dataset: &TraceDataset,
    path: impl AsRef<Path>,
    format: TraceFormat,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bytes = match format {
        TraceFormat::Binary => encode_binary(dataset),
        TraceFormat::Csv => csv::encode_csv(dataset)?,
    };
    crate::io::write_atomic(path.as_ref(), &bytes)
}

/// Proper-training / calibration partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub proper: TraceDataset,
    pub calibration: TraceDataset,
}

/// Seeded shuffle, then the first `split_index` records become the proper set.
pub fn split_dataset(
    dataset: &TraceDataset,
    split_index: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let len = dataset.len();
    if split_index == 0 || split_index >= len {
        return Err(Error::SplitOutOfRange { split_index, len });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let pick = |idx: &[usize]| {
        let records = idx.iter().map(|&i| dataset.records[i].clone()).collect();
        TraceDataset {
            records,
            n_neurons: dataset.n_neurons,
        }
    };
    Ok(DatasetSplit {
        proper: pick(&order[..split_index]),
        calibration: pick(&order[split_index..]),
    })
}
