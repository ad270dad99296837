//! The runtime decision layer.
//!
//! A [`MonitorArtifact`] freezes a fitted abstraction, its calibration scores
//! and the p-value threshold `tau`. [`MonitorArtifact::check`] is the hot
//! path: one pass over the monitored neurons and one binary search.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{GaussianAbstraction, Mode, NeuronStats, DEFAULT_K};
use crate::error::{Error, Result};
use crate::icad::{calibrate, nonconformity, CalibrationScores, NonconformityScore, PValue};
use crate::trace::TraceDataset;

pub const SCHEMA_VERSION: u32 = 1;

/// The experimental threshold: OOD when fewer than 5% of calibration scores
/// are at least as large.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub tau: f64,
    pub k: f64,
    pub mode: Mode,
    pub layer: String,
    /// Monitored neuron indices; absent means the whole layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitored: Option<Vec<usize>>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            mode: Mode::ClassAgnostic,
            layer: String::new(),
            monitored: None,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param(
                "tau",
                format!("{} is outside [0, 1]", self.tau),
            ));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::param("k", format!("{} must be positive", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 over the proper and calibration dataset hashes.
    pub hash: String,
    /// Unix seconds.
    pub created: u64,
}

impl Provenance {
    pub fn combine(proper_hash: &str, calibration_hash: &str, created: u64) -> Self {
        let mut h = Sha256::new();
        h.update(proper_hash.as_bytes());
        h.update(b":");
        h.update(calibration_hash.as_bytes());
        Provenance {
            hash: hex::encode(h.finalize()),
            created,
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Id => "ID",
            Decision::Ood => "OOD",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub sample_id: u64,
    pub score: NonconformityScore,
    pub p: PValue,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub id: usize,
    pub ood: usize,
}

impl Summary {
    pub fn from_verdicts(verdicts: &[Verdict]) -> Self {
        let ood = verdicts
            .iter()
            .filter(|v| v.decision == Decision::Ood)
            .count();
        Summary {
            id: verdicts.len() - ood,
            ood,
        }
    }

    pub fn total(&self) -> usize {
        self.id + self.ood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub verdicts: Vec<Verdict>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorArtifact {
    config: MonitorConfig,
    abstraction: GaussianAbstraction,
    calibration: CalibrationScores,
    provenance: Provenance,
}

/// Fits on `proper`, calibrates on `calibration` and freezes the result.
pub fn build_monitor(
    proper: &TraceDataset,
    calibration: &TraceDataset,
    config: MonitorConfig,
) -> Result<MonitorArtifact> {
    config.validate()?;
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if proper.n_neurons() != calibration.n_neurons() {
        return Err(Error::DimensionMismatch {
            expected: proper.n_neurons(),
            found: calibration.n_neurons(),
        });
    }
    let ids: HashSet<u64> = proper.iter().map(|r| r.sample_id).collect();
    if let Some(r) = calibration.iter().find(|r| ids.contains(&r.sample_id)) {
        return Err(Error::OverlappingSamples(r.sample_id));
    }
    let mut abstraction = GaussianAbstraction::fit(proper, config.mode, config.k)?;
    if let Some(m) = &config.monitored {
        abstraction = abstraction.with_monitored(m.clone())?;
    }
    let scores = calibrate(&abstraction, calibration)?;
    let provenance = Provenance::combine(
        &proper.content_hash(),
        &calibration.content_hash(),
        unix_now(),
    );
    MonitorArtifact::new(config, abstraction, scores, provenance)
}

impl MonitorArtifact {
    pub fn new(
        config: MonitorConfig,
        abstraction: GaussianAbstraction,
        calibration: CalibrationScores,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        if abstraction.k() != config.k || abstraction.mode() != config.mode {
            return Err(Error::InvalidArtifact(
                "config does not match abstraction".into(),
            ));
        }
        if abstraction.monitored().map(<[usize]>::to_vec)
            != config
                .monitored
                .clone()
                .filter(|m| m.len() != abstraction.n_neurons())
        {
            return Err(Error::InvalidArtifact(
                "monitored set does not match abstraction".into(),
            ));
        }
        // Every calibration score must be a count over |M|.
        let m = abstraction.monitored_len() as f64;
        if calibration
            .scores()
            .iter()
            .any(|s| ((s * m).round() / m) != *s)
        {
            return Err(Error::InvalidArtifact(
                "calibration scores are not fractions of the monitored neuron count".into(),
            ));
        }
        Ok(MonitorArtifact {
            config,
            abstraction,
            calibration,
            provenance,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn abstraction(&self) -> &GaussianAbstraction {
        &self.abstraction
    }

    pub fn calibration(&self) -> &CalibrationScores {
        &self.calibration
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn n_neurons(&self) -> usize {
        self.abstraction.n_neurons()
    }

    /// Same artifact with a different threshold.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.config.tau = tau;
        self.config.validate()?;
        Ok(self)
    }

    pub fn check(&self, x: &[f32], sample_id: u64) -> Result<Verdict> {
        self.check_labeled(x, None, sample_id)
    }

    /// As [`check`](Self::check), supplying the class label per-class monitors need.
    pub fn check_labeled(
        &self,
        x: &[f32],
        class_label: Option<u32>,
        sample_id: u64,
    ) -> Result<Verdict> {
        let score = nonconformity(&self.abstraction, x, class_label)?;
        let p = self.calibration.p_value(score);
        let decision = if p.is_below(self.config.tau) {
            Decision::Ood
        } else {
            Decision::Id
        };
        Ok(Verdict {
            sample_id,
            score,
            p,
            decision,
        })
    }

    pub fn check_batch(&self, dataset: &TraceDataset) -> Result<BatchResult> {
        if !dataset.is_empty() && dataset.n_neurons() != self.n_neurons() {
            return Err(Error::DimensionMismatch {
                expected: self.n_neurons(),
                found: dataset.n_neurons(),
            });
        }
        let verdicts = dataset
            .records()
            .par_iter()
            .map(|r| self.check_labeled(&r.activations, r.label, r.sample_id))
            .collect::<Result<Vec<_>>>()?;
        let summary = Summary::from_verdicts(&verdicts);
        Ok(BatchResult { verdicts, summary })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ArtifactRepr::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.version,
                expected: SCHEMA_VERSION,
            });
        }
        let repr: ArtifactRepr = serde_json::from_str(text)?;
        repr.into_artifact()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_monitor(monitor: &MonitorArtifact, path: impl AsRef<Path>) -> Result<()> {
    monitor.save(path)
}

pub fn load_monitor(path: impl AsRef<Path>) -> Result<MonitorArtifact> {
    MonitorArtifact::load(path)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRepr {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl TableRepr {
    fn from_stats(stats: &[NeuronStats]) -> Self {
        TableRepr {
            mu: stats.iter().map(|s| s.mu).collect(),
            sigma: stats.iter().map(|s| s.sigma).collect(),
        }
    }

    fn into_stats(self) -> Result<Vec<NeuronStats>> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::InvalidArtifact(format!(
                "{} means but {} standard deviations",
                self.mu.len(),
                self.sigma.len()
            )));
        }
        Ok(self
            .mu
            .into_iter()
            .zip(self.sigma)
            .map(|(mu, sigma)| NeuronStats { mu, sigma })
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum StatsRepr {
    PerClass {
        per_class: BTreeMap<String, TableRepr>,
    },
    ClassAgnostic(TableRepr),
}

impl StatsRepr {
    fn from_abstraction(a: &GaussianAbstraction) -> Self {
        match a.class_stats() {
            Some(m) => StatsRepr::PerClass {
                per_class: m
                    .into_iter()
                    .map(|(c, s)| (c.to_string(), TableRepr::from_stats(s)))
                    .collect(),
            },
            None => {
                StatsRepr::ClassAgnostic(TableRepr::from_stats(a.stats().expect("class agnostic")))
            }
        }
    }

    fn into_abstraction(
        self,
        mode: Mode,
        k: f64,
        monitored: Option<Vec<usize>>,
    ) -> Result<GaussianAbstraction> {
        let a = match (self, mode) {
            (StatsRepr::ClassAgnostic(t), Mode::ClassAgnostic) => {
                GaussianAbstraction::class_agnostic(t.into_stats()?, k)?
            }
            (StatsRepr::PerClass { per_class }, Mode::PerClass) => {
                let m = per_class
                    .into_iter()
                    .map(|(c, t)| {
                        let class = c.parse::<u32>().map_err(|_| {
                            Error::InvalidArtifact(format!("class key {c:?} is not an integer"))
                        })?;
                        Ok((class, t.into_stats()?))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                GaussianAbstraction::per_class(m, k)?
            }
            _ => {
                return Err(Error::InvalidArtifact(format!(
                    "stats layout does not match mode {mode}"
                )))
            }
        };
        match monitored {
            Some(m) => a.with_monitored(m),
            None => Ok(a),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationRepr {
    sorted_scores: Vec<f64>,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactRepr {
    version: u32,
    config: MonitorConfig,
    stats: StatsRepr,
    calibration: CalibrationRepr,
    provenance: Provenance,
}

impl From<&MonitorArtifact> for ArtifactRepr {
    fn from(m: &MonitorArtifact) -> Self {
        ArtifactRepr {
            version: SCHEMA_VERSION,
            config: m.config.clone(),
            stats: StatsRepr::from_abstraction(&m.abstraction),
            calibration: CalibrationRepr {
                sorted_scores: m.calibration.scores().to_vec(),
                n: m.calibration.len(),
            },
            provenance: m.provenance.clone(),
        }
    }
}

impl ArtifactRepr {
    fn into_artifact(self) -> Result<MonitorArtifact> {
        if self.calibration.n != self.calibration.sorted_scores.len() {
            return Err(Error::InvalidArtifact(format!(
                "calibration n = {} but {} scores present",
                self.calibration.n,
                self.calibration.sorted_scores.len()
            )));
        }
        let abstraction = self.stats.into_abstraction(
            self.config.mode,
            self.config.k,
            self.config.monitored.clone(),
        )?;
        let calibration = CalibrationScores::from_sorted(self.calibration.sorted_scores)?;
        MonitorArtifact::new(self.config, abstraction, calibration, self.provenance)
    }
}

/// A fitted abstraction waiting for calibration, as written by `actmon fit`.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedAbstraction {
    pub abstraction: GaussianAbstraction,
    /// Content hash of the proper training set.
    pub proper_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FittedRepr {
    version: u32,
    k: f64,
    mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monitored: Option<Vec<usize>>,
    stats: StatsRepr,
    proper_hash: String,
}

impl FittedAbstraction {
    pub fn fit(proper: &TraceDataset, mode: Mode, k: f64) -> Result<Self> {
        Ok(FittedAbstraction {
            abstraction: GaussianAbstraction::fit(proper, mode, k)?,
            proper_hash: proper.content_hash(),
        })
    }

    /// Calibrates into a full monitor artifact.
    pub fn calibrate(
        self,
        calibration: &TraceDataset,
        tau: f64,
        layer: impl Into<String>,
    ) -> Result<MonitorArtifact> {
        let config = MonitorConfig {
            tau,
            k: self.abstraction.k(),
            mode: self.abstraction.mode(),
            layer: layer.into(),
            monitored: self.abstraction.monitored().map(<[usize]>::to_vec),
        };
        config.validate()?;
        let scores = calibrate(&self.abstraction, calibration)?;
        let provenance =
            Provenance::combine(&self.proper_hash, &calibration.content_hash(), unix_now());
        MonitorArtifact::new(config, self.abstraction, scores, provenance)
    }

    pub fn to_json(&self) -> Result<String> {
        let repr = FittedRepr {
            version: SCHEMA_VERSION,
            k: self.abstraction.k(),
            mode: self.abstraction.mode(),
            monitored: self.abstraction.monitored().map(<[usize]>::to_vec),
            stats: StatsRepr::from_abstraction(&self.abstraction),
            proper_hash: self.proper_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.version,
                expected: SCHEMA_VERSION,
            });
        }
        let r: FittedRepr = serde_json::from_str(text)?;
        Ok(FittedAbstraction {
            abstraction: r.stats.into_abstraction(r.mode, r.k, r.monitored)?,
            proper_hash: r.proper_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize)]
struct VerdictRow {
    sample_id: u64,
    score: f64,
    p_num: u32,
    p_den: u32,
    decision: Decision,
}

impl From<&Verdict> for VerdictRow {
    fn from(v: &Verdict) -> Self {
        VerdictRow {
            sample_id: v.sample_id,
            score: v.score.value(),
            p_num: v.p.numerator(),
            p_den: v.p.denominator(),
            decision: v.decision,
        }
    }
}

/// One JSON object per line: `sample_id, score, p_num, p_den, decision`.
pub fn verdicts_to_jsonl(verdicts: &[Verdict]) -> Result<String> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(&VerdictRow::from(v))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn verdicts_to_csv(verdicts: &[Verdict]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for v in verdicts {
        w.serialize(VerdictRow::from(v))
            .map_err(|e| Error::InvalidArtifact(e.to_string()))?;
    }
    if verdicts.is_empty() {
        w.write_record(["sample_id", "score", "p_num", "p_den", "decision"])
            .map_err(|e| Error::InvalidArtifact(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArtifact(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
