//! Inductive conformal anomaly detection on top of the Gaussian abstraction.
//!
//! The nonconformity of an input is the fraction of monitored neurons outside
//! their interval. Calibration scores every record of a held-out calibration
//! set; the p-value of a new score is the fraction of calibration scores that
//! are greater than or equal to it.

use rayon::prelude::*;

use crate::abstraction::{GaussianAbstraction, Mode};
use crate::error::{Error, Result};
use crate::trace::TraceDataset;

/// Fraction of monitored neurons outside their interval, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NonconformityScore(f64);

impl NonconformityScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(NonconformityScore(value))
        } else {
            Err(Error::param("score", format!("{value} is outside [0, 1]")))
        }
    }

    fn from_counts(outside: usize, monitored: usize) -> Self {
        NonconformityScore(outside as f64 / monitored as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// An exact rational p-value `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PValue {
    numerator: u32,
    denominator: u32,
}

impl PValue {
    pub fn new(numerator: u32, denominator: u32) -> Result<Self> {
        if denominator == 0 || numerator > denominator {
            return Err(Error::param(
                "p_value",
                format!("{numerator}/{denominator} is not a valid p-value"),
            ));
        }
        Ok(PValue {
            numerator,
            denominator,
        })
    }

    pub fn numerator(self) -> u32 {
        self.numerator
    }

    pub fn denominator(self) -> u32 {
        self.denominator
    }

    pub fn value(self) -> f64 {
        f64::from(self.numerator) / f64::from(self.denominator)
    }

    /// `self < tau`, decided without rounding the p-value itself.
    pub fn is_below(self, tau: f64) -> bool {
        f64::from(self.numerator) < tau * f64::from(self.denominator)
    }
}

pub fn nonconformity(
    abs: &GaussianAbstraction,
    x: &[f32],
    class_label: Option<u32>,
) -> Result<NonconformityScore> {
    let out = abs.outside_count(x, class_label)?;
    Ok(NonconformityScore::from_counts(out, abs.monitored_len()))
}

/// Sorted (ascending) calibration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationScores {
    scores: Vec<f64>,
}

impl CalibrationScores {
    pub fn from_scores(mut scores: Vec<f64>) -> Result<Self> {
        Self::check_values(&scores)?;
        scores.sort_by(f64::total_cmp);
        Ok(CalibrationScores { scores })
    }

    /// Accepts already sorted scores, rejecting anything unsorted.
    pub fn from_sorted(scores: Vec<f64>) -> Result<Self> {
        Self::check_values(&scores)?;
        if scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArtifact(
                "calibration scores are not sorted".into(),
            ));
        }
        Ok(CalibrationScores { scores })
    }

    fn check_values(scores: &[f64]) -> Result<()> {
        if scores.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if scores.len() > u32::MAX as usize {
            return Err(Error::param("calibration", "too many calibration scores"));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::param(
                "calibration",
                format!("score {s} outside [0, 1]"),
            ));
        }
        Ok(())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `|{s in cal : s >= score}| / |cal|` via binary search.
    pub fn p_value(&self, score: NonconformityScore) -> PValue {
        let first_ge = self.scores.partition_point(|&s| s < score.0);
        PValue {
            numerator: (self.scores.len() - first_ge) as u32,
            denominator: self.scores.len() as u32,
        }
    }
}

/// Scores every calibration record against `abs`; record labels are used in
/// per-class mode.
pub fn calibrate(
    abs: &GaussianAbstraction,
    calibration: &TraceDataset,
) -> Result<CalibrationScores> {
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if calibration.n_neurons() != abs.n_neurons() {
        return Err(Error::DimensionMismatch {
            expected: abs.n_neurons(),
            found: calibration.n_neurons(),
        });
    }
    let scores = calibration
        .records()
        .par_iter()
        .map(|r| nonconformity(abs, &r.activations, r.label).map(NonconformityScore::value))
        .collect::<Result<Vec<_>>>()?;
    CalibrationScores::from_scores(scores)
}

/// Full (transductive) conformal p-value with leave-one-out refits.
///
/// Quadratic in `|training|`; kept as a reference for the inductive variant.
/// The test score is computed against the abstraction fitted on all of
/// `training`, each training score against the fit that leaves it out.
pub fn cad_p_value(training: &TraceDataset, x: &[f32], k: f64) -> Result<PValue> {
    let n = training.len();
    if n < 3 {
        return Err(Error::TooFewSamples {
            required: 3,
            found: n,
        });
    }
    let full = GaussianAbstraction::fit(training, Mode::ClassAgnostic, k)?;
    let test_score = nonconformity(&full, x, None)?;

    let mut count = 0u32;
    for i in 0..n {
        let rest: Vec<_> = training
            .records()
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.clone())
            .collect();
        let rest = TraceDataset::new(training.n_neurons(), rest)?;
        let loo = GaussianAbstraction::fit(&rest, Mode::ClassAgnostic, k)?;
        let s = nonconformity(&loo, &training.records()[i].activations, None)?;
        if s >= test_score {
            count += 1;
        }
    }
    PValue::new(count, n as u32)
}
