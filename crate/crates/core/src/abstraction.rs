//! Per-neuron Gaussian interval abstraction.
//!
//! Fitting records the mean and the Bessel-corrected standard deviation of
//! every neuron, either over the whole dataset (class-agnostic) or separately
//! per class label. A neuron's activation is inside when it lies in the
//! closed interval `[mu - k*sigma, mu + k*sigma]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::TraceDataset;

pub const DEFAULT_K: f64 = 2.0;

/// Half-width used for neurons whose fitted sigma is exactly zero.
pub const ZERO_SIGMA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClassAgnostic,
    PerClass,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::ClassAgnostic => "class_agnostic",
            Mode::PerClass => "per_class",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_agnostic" => Ok(Mode::ClassAgnostic),
            "per_class" => Ok(Mode::PerClass),
            other => Err(Error::param("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Fitted statistics plus the interval bounds derived from them.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    stats: Vec<NeuronStats>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Table {
    fn new(stats: Vec<NeuronStats>, k: f64) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::param("stats", "table must not be empty"));
        }
        if let Some(s) = stats
            .iter()
            .find(|s| !s.mu.is_finite() || !s.sigma.is_finite() || s.sigma < 0.0)
        {
            return Err(Error::param(
                "stats",
                format!("invalid neuron statistics mu={} sigma={}", s.mu, s.sigma),
            ));
        }
        let (lo, hi) = stats
            .iter()
            .map(|s| {
                if s.sigma == 0.0 {
                    (s.mu - ZERO_SIGMA_TOLERANCE, s.mu + ZERO_SIGMA_TOLERANCE)
                } else {
                    (s.mu - k * s.sigma, s.mu + k * s.sigma)
                }
            })
            .unzip();
        Ok(Table { stats, lo, hi })
    }

    #[inline]
    fn outside(&self, x: &[f32], monitored: Option<&[usize]>) -> usize {
        let is_out = |i: usize, v: f32| {
            let v = f64::from(v);
            !(v >= self.lo[i] && v <= self.hi[i])
        };
        match monitored {
            None => x.iter().enumerate().filter(|&(i, &v)| is_out(i, v)).count(),
            Some(idx) => idx.iter().filter(|&&i| is_out(i, x[i])).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tables {
    ClassAgnostic(Table),
    PerClass(BTreeMap<u32, Table>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAbstraction {
    k: f64,
    n_neurons: usize,
    tables: Tables,
    monitored: Option<Vec<usize>>,
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::param(
            "k",
            format!("{k} must be a positive finite number"),
        ))
    }
}

/// Two-pass mean and sample standard deviation per column, in `f64`.
fn column_stats(rows: &[&[f32]], n_neurons: usize) -> Vec<NeuronStats> {
    let n = rows.len() as f64;
    let mut sum = vec![0.0f64; n_neurons];
    for row in rows {
        for (s, &v) in sum.iter_mut().zip(row.iter()) {
            *s += f64::from(v);
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut ss = vec![0.0f64; n_neurons];
    for row in rows {
        for ((acc, &v), m) in ss.iter_mut().zip(row.iter()).zip(&mean) {
            let d = f64::from(v) - m;
            *acc += d * d;
        }
    }
    mean.into_iter()
        .zip(ss)
        .map(|(mu, ss)| NeuronStats {
            mu,
            sigma: (ss / (n - 1.0)).sqrt(),
        })
        .collect()
}

impl GaussianAbstraction {
    pub fn fit(dataset: &TraceDataset, mode: Mode, k: f64) -> Result<Self> {
        check_k(k)?;
        let n_neurons = dataset.n_neurons();
        let tables = match mode {
            Mode::ClassAgnostic => {
                if dataset.len() < 2 {
                    return Err(Error::TooFewSamples {
                        required: 2,
                        found: dataset.len(),
                    });
                }
                let rows: Vec<&[f32]> = dataset.iter().map(|r| r.activations.as_slice()).collect();
                Tables::ClassAgnostic(Table::new(column_stats(&rows, n_neurons), k)?)
            }
            Mode::PerClass => {
                if dataset.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let mut groups: BTreeMap<u32, Vec<&[f32]>> = BTreeMap::new();
                for r in dataset {
                    let label = r.label.ok_or(Error::MissingLabels {
                        sample_id: r.sample_id,
                    })?;
                    groups
                        .entry(label)
                        .or_default()
                        .push(r.activations.as_slice());
                }
                let mut tables = BTreeMap::new();
                for (class, rows) in groups {
                    if rows.len() < 2 {
                        return Err(Error::ClassTooSmall {
                            class,
                            count: rows.len(),
                        });
                    }
                    tables.insert(class, Table::new(column_stats(&rows, n_neurons), k)?);
                }
                Tables::PerClass(tables)
            }
        };
        Ok(GaussianAbstraction {
            k,
            n_neurons,
            tables,
            monitored: None,
        })
    }

    pub fn class_agnostic(stats: Vec<NeuronStats>, k: f64) -> Result<Self> {
        check_k(k)?;
        let n_neurons = stats.len();
        Ok(GaussianAbstraction {
            k,
            n_neurons,
            tables: Tables::ClassAgnostic(Table::new(stats, k)?),
            monitored: None,
        })
    }

    pub fn per_class(stats: BTreeMap<u32, Vec<NeuronStats>>, k: f64) -> Result<Self> {
        check_k(k)?;
        let n_neurons = stats
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::param("stats", "no classes"))?;
        let mut tables = BTreeMap::new();
        for (class, s) in stats {
            if s.len() != n_neurons {
                return Err(Error::DimensionMismatch {
                    expected: n_neurons,
                    found: s.len(),
                });
            }
            tables.insert(class, Table::new(s, k)?);
        }
        Ok(GaussianAbstraction {
            k,
            n_neurons,
            tables: Tables::PerClass(tables),
            monitored: None,
        })
    }

    /// Restricts monitoring to the given neuron indices (strictly increasing).
    pub fn with_monitored(mut self, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("monitored", "index set must not be empty"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param(
                "monitored",
                "indices must be strictly increasing",
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_neurons) {
            return Err(Error::param(
                "monitored",
                format!("index {bad} out of range for {} neurons", self.n_neurons),
            ));
        }
        self.monitored = if indices.len() == self.n_neurons {
            None
        } else {
            Some(indices)
        };
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        match self.tables {
            Tables::ClassAgnostic(_) => Mode::ClassAgnostic,
            Tables::PerClass(_) => Mode::PerClass,
        }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    /// Explicit monitored subset, `None` when every neuron is monitored.
    pub fn monitored(&self) -> Option<&[usize]> {
        self.monitored.as_deref()
    }

    /// `|M|`.
    pub fn monitored_len(&self) -> usize {
        self.monitored.as_ref().map_or(self.n_neurons, Vec::len)
    }

    /// The class-agnostic table, if this is a class-agnostic abstraction.
    pub fn stats(&self) -> Option<&[NeuronStats]> {
        match &self.tables {
            Tables::ClassAgnostic(t) => Some(&t.stats),
            Tables::PerClass(_) => None,
        }
    }

    pub fn class_stats(&self) -> Option<BTreeMap<u32, &[NeuronStats]>> {
        match &self.tables {
            Tables::ClassAgnostic(_) => None,
            Tables::PerClass(m) => Some(m.iter().map(|(c, t)| (*c, t.stats.as_slice())).collect()),
        }
    }

    /// Number of monitored neurons outside their interval.
    pub fn outside_count(&self, x: &[f32], class_label: Option<u32>) -> Result<usize> {
        if x.len() != self.n_neurons {
            return Err(Error::DimensionMismatch {
                expected: self.n_neurons,
                found: x.len(),
            });
        }
        let table = match &self.tables {
            Tables::ClassAgnostic(t) => t,
            Tables::PerClass(m) => {
                let c = class_label.ok_or(Error::MissingClassLabel)?;
                m.get(&c).ok_or(Error::UnknownClass(c))?
            }
        };
        Ok(table.outside(x, self.monitored.as_deref()))
    }

    pub fn outside_fraction(&self, x: &[f32], class_label: Option<u32>) -> Result<f64> {
        let out = self.outside_count(x, class_label)?;
        Ok(out as f64 / self.monitored_len() as f64)
    }

    /// The weakened interval condition: at least `min_inside_fraction` of the
    /// monitored neurons must be inside. With 1.0 this is the strict
    /// all-neurons condition.
    pub fn percentage_check(
        &self,
        x: &[f32],
        class_label: Option<u32>,
        min_inside_fraction: f64,
    ) -> Result<bool> {
        if !(0.0..=1.0).contains(&min_inside_fraction) {
            return Err(Error::param(
                "min_inside_fraction",
                format!("{min_inside_fraction} is outside [0, 1]"),
            ));
        }
        let m = self.monitored_len();
        let inside = m - self.outside_count(x, class_label)?;
        Ok(inside as f64 / m as f64 >= min_inside_fraction)
    }
}
