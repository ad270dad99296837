//! Desk-scale reproduction of the detection experiments.
//!
//! [`run_experiment`] draws in-distribution images from a [`SceneGenerator`],
//! traces them through a seeded reference network, fits and calibrates a
//! monitor per selected layer, and scores the held-out images under every
//! perturbation of the sweep plus a foreign-distribution generator.

mod histogram;
mod scene;

pub use histogram::{bin_index, histogram, Histogram, DEFAULT_BINS};
pub use scene::{SceneGenerator, SceneSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{Mode, DEFAULT_K};
use crate::error::{Error, Result};
use crate::icad::PValue;
use crate::monitor::{build_monitor, Decision, MonitorArtifact, MonitorConfig, DEFAULT_TAU};
use crate::perturb::{derive_seed, Perturbation, PerturbationSpec};
use crate::refnet::{init_network, ArchSpec, LayerKind, Network, Shape};
use crate::trace::{split_dataset, ActivationVector, TraceDataset, TraceRecord};

// Independent random streams derived from the plan seed.
const STREAM_NETWORK: u64 = 1;
const STREAM_ID: u64 = 2;
const STREAM_FOREIGN: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_TEST: u64 = 5;

/// Which traced layer the monitor watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    LastBatchNorm,
    LastLeakyRelu,
    /// Raw trace index: 0 is the input, `i` the output of layer `i - 1`.
    Index(usize),
}

impl LayerSelector {
    pub fn resolve(self, net: &Network) -> Result<usize> {
        let idx = match self {
            LayerSelector::LastBatchNorm => net.last_trace_index_of(LayerKind::BatchNorm),
            LayerSelector::LastLeakyRelu => net.last_trace_index_of(LayerKind::LeakyRelu),
            LayerSelector::Index(i) => net.trace_width(i).map(|_| i),
        };
        idx.ok_or_else(|| Error::param("layer", format!("{self} does not exist in the network")))
    }
}

impl std::fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelector::LastBatchNorm => f.write_str("last_batch_norm"),
            LayerSelector::LastLeakyRelu => f.write_str("last_leaky_relu"),
            LayerSelector::Index(i) => write!(f, "trace_{i}"),
        }
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_batch_norm" => Ok(LayerSelector::LastBatchNorm),
            "last_leaky_relu" => Ok(LayerSelector::LastLeakyRelu),
            other => other
                .strip_prefix("trace_")
                .unwrap_or(other)
                .parse()
                .map(LayerSelector::Index)
                .map_err(|_| Error::param("layer", format!("unknown layer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub network: ArchSpec,
    pub n_proper: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub scene: SceneSpec,
    pub foreign: SceneSpec,
    pub sweep: Vec<PerturbationSpec>,
    pub tau: f64,
    pub k: f64,
    pub mode: Mode,
    pub layers: Vec<LayerSelector>,
    pub n_bins: usize,
    /// Refit batchnorm running statistics on the ID pool before tracing.
    #[serde(default = "yes")]
    pub fit_batch_norm: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let seed = 2021;
        let sweep = [
            Perturbation::Gaussian { variance: 0.02 },
            Perturbation::Gaussian { variance: 0.04 },
            Perturbation::Gaussian { variance: 0.06 },
            Perturbation::Impulse { p: 0.03 },
            Perturbation::Impulse { p: 0.06 },
            Perturbation::Fgsm { epsilon: 0.02 },
            Perturbation::Fgsm { epsilon: 0.04 },
            Perturbation::Fgsm { epsilon: 0.06 },
        ]
        .into_iter()
        .map(|p| PerturbationSpec::new(p, seed))
        .collect();
        ExperimentPlan {
            seed,
            network: ArchSpec::reference(),
            n_proper: 500,
            n_calibration: 100,
            n_test: 100,
            scene: SceneSpec::in_distribution(),
            foreign: SceneSpec::foreign(),
            sweep,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            mode: Mode::ClassAgnostic,
            layers: vec![LayerSelector::LastBatchNorm, LayerSelector::LastLeakyRelu],
            n_bins: DEFAULT_BINS,
            fit_batch_norm: true,
        }
    }
}

impl ExperimentPlan {
    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.n_proper < 2 {
            return Err(Error::param(
                "n_proper",
                "need at least two proper training samples",
            ));
        }
        if self.n_calibration == 0 {
            return Err(Error::param(
                "n_calibration",
                "need at least one calibration sample",
            ));
        }
        if self.n_test == 0 {
            return Err(Error::param("n_test", "need at least one test sample"));
        }
        if self.sweep.is_empty() {
            return Err(Error::param("sweep", "perturbation sweep is empty"));
        }
        if self.layers.is_empty() {
            return Err(Error::param("layers", "no monitored layer selected"));
        }
        if self.n_bins == 0 {
            return Err(Error::param("n_bins", "need at least one bin"));
        }
        MonitorConfig {
            tau: self.tau,
            k: self.k,
            mode: self.mode,
            ..Default::default()
        }
        .validate()?;
        for p in &self.sweep {
            p.perturbation.validate()?;
        }
        self.scene.validate()?;
        self.foreign.validate()?;
        Ok(())
    }

    fn image_dims(&self) -> (usize, usize) {
        match self.network.input_shape {
            Shape::Grid(h, w) => (h, w),
            Shape::Flat(n) => (1, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub layer: String,
    pub name: String,
    pub n: usize,
    pub id_count: usize,
    pub ood_count: usize,
    pub mean_p: f64,
    /// Numerators over the shared calibration-set size.
    pub p_numerators: Vec<u32>,
    pub p_denominator: u32,
    pub histogram: Histogram,
}

impl ConditionResult {
    fn from_verdicts(
        layer: &str,
        name: &str,
        p_values: &[PValue],
        decisions: &[Decision],
        n_bins: usize,
    ) -> Result<Self> {
        let ood_count = decisions.iter().filter(|d| **d == Decision::Ood).count();
        let n = p_values.len();
        let den = p_values.first().map_or(1, |p| p.denominator());
        let sum: u64 = p_values.iter().map(|p| p.numerator() as u64).sum();
        Ok(ConditionResult {
            layer: layer.to_string(),
            name: name.to_string(),
            n,
            id_count: n - ood_count,
            ood_count,
            mean_p: if n == 0 {
                0.0
            } else {
                sum as f64 / (n as f64 * den as f64)
            },
            p_numerators: p_values.iter().map(|p| p.numerator()).collect(),
            p_denominator: den,
            histogram: histogram(p_values, n_bins)?,
        })
    }

    pub fn detection_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.ood_count as f64 / self.n as f64
        }
    }

    /// `layer/name`, the key used for file names and table rows.
    pub fn key(&self) -> String {
        format!("{}/{}", self.layer, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub n_proper: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub tau: f64,
    pub k: f64,
    pub mode: Mode,
    pub n_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    pub conditions: Vec<ConditionResult>,
}

impl ExperimentReport {
    pub fn condition(&self, layer: &str, name: &str) -> Option<&ConditionResult> {
        self.conditions
            .iter()
            .find(|c| c.layer == layer && c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ExperimentReport = serde_json::from_str(text)?;
        for c in &report.conditions {
            if c.id_count + c.ood_count != c.n
                || c.histogram.total() != c.n
                || c.p_numerators.len() != c.n
            {
                return Err(Error::InvalidArtifact(format!(
                    "condition {} has inconsistent counts",
                    c.key()
                )));
            }
        }
        Ok(report)
    }
}

pub const ID_CONDITION: &str = "id";
pub const FOREIGN_CONDITION: &str = "foreign";

/// Inputs shared by every layer: one ID pool, perturbed test copies and
/// foreign samples.
struct Inputs {
    network: Network,
    pool: Vec<Vec<f64>>,
    conditions: Vec<(String, Vec<Vec<f64>>)>,
}

fn draw(generator: &SceneGenerator, seed: u64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| generator.sample(derive_seed(seed, i as u64)))
        .collect()
}

fn prepare(plan: &ExperimentPlan) -> Result<Inputs> {
    let (h, w) = plan.image_dims();
    let id_gen = SceneGenerator::new(plan.scene.clone(), h, w)?;
    let foreign_gen = SceneGenerator::new(plan.foreign.clone(), h, w)?;
    let n_pool = plan.n_proper + plan.n_calibration;
    let pool = draw(&id_gen, derive_seed(plan.seed, STREAM_ID), n_pool);
    let network = build_network(plan, &pool)?;
    let test = draw(&id_gen, derive_seed(plan.seed, STREAM_TEST), plan.n_test);

    let mut conditions = vec![(ID_CONDITION.to_string(), test.clone())];
    for spec in &plan.sweep {
        let net = &network;
        let perturbed = test
            .par_iter()
            .enumerate()
            .map(|(i, x)| spec.apply(Some(net), x, i as u64))
            .collect::<Result<Vec<_>>>()?;
        conditions.push((spec.perturbation.label(), perturbed));
    }
    let foreign = draw(
        &foreign_gen,
        derive_seed(plan.seed, STREAM_FOREIGN),
        plan.n_test,
    );
    conditions.push((FOREIGN_CONDITION.to_string(), foreign));
    Ok(Inputs {
        network,
        pool,
        conditions,
    })
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Traces `inputs` at `layer`. Labels are the network's predicted class,
/// recorded only when `labeled`.
pub fn trace_inputs(
    net: &Network,
    inputs: &[Vec<f64>],
    layer: usize,
    id_offset: u64,
    labeled: bool,
) -> Result<TraceDataset> {
    let width = net
        .trace_width(layer)
        .ok_or_else(|| Error::param("layer", format!("trace index {layer} out of range")))?;
    let records = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (out, trace) = net.forward_with_trace(x)?;
            let act = trace.layer(layer).expect("resolved layer index");
            let label = labeled.then(|| argmax(&out));
            Ok(TraceRecord::new(
                id_offset + i as u64,
                ActivationVector::from_f64(act)?,
                label,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    TraceDataset::new(width, records)
}

fn run_layer(
    plan: &ExperimentPlan,
    inputs: &Inputs,
    selector: LayerSelector,
) -> Result<Vec<ConditionResult>> {
    let layer = selector.resolve(&inputs.network)?;
    let labeled = plan.mode == Mode::PerClass;
    let pool = trace_inputs(&inputs.network, &inputs.pool, layer, 0, labeled)?;
    let split = split_dataset(&pool, plan.n_proper, derive_seed(plan.seed, STREAM_SPLIT))?;
    let config = MonitorConfig {
        tau: plan.tau,
        k: plan.k,
        mode: plan.mode,
        layer: selector.to_string(),
        monitored: None,
    };
    let monitor = build_monitor(&split.proper, &split.calibration, config)?;
    let offset = pool.len() as u64;
    let name = selector.to_string();
    inputs
        .conditions
        .par_iter()
        .map(|(cond, xs)| {
            let traces = trace_inputs(&inputs.network, xs, layer, offset, labeled)?;
            evaluate(&monitor, &traces, &name, cond, plan.n_bins)
        })
        .collect()
}

fn evaluate(
    monitor: &MonitorArtifact,
    traces: &TraceDataset,
    layer: &str,
    name: &str,
    n_bins: usize,
) -> Result<ConditionResult> {
    let batch = monitor.check_batch(traces)?;
    let ps: Vec<PValue> = batch.verdicts.iter().map(|v| v.p).collect();
    let ds: Vec<Decision> = batch.verdicts.iter().map(|v| v.decision).collect();
    ConditionResult::from_verdicts(layer, name, &ps, &ds, n_bins)
}

/// The network an [`ExperimentPlan`] uses; FGSM attacks and trace files can
/// be reproduced from it.
pub fn plan_network(plan: &ExperimentPlan) -> Result<Network> {
    plan.validate()?;
    let (h, w) = plan.image_dims();
    let id_gen = SceneGenerator::new(plan.scene.clone(), h, w)?;
    let pool = draw(
        &id_gen,
        derive_seed(plan.seed, STREAM_ID),
        plan.n_proper + plan.n_calibration,
    );
    build_network(plan, &pool)
}

fn build_network(plan: &ExperimentPlan, pool: &[Vec<f64>]) -> Result<Network> {
    let network = init_network(&plan.network, derive_seed(plan.seed, STREAM_NETWORK))?;
    if plan.fit_batch_norm {
        network.fit_batch_norm(pool)
    } else {
        Ok(network)
    }
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.validate()?;
    let inputs = prepare(plan)?;
    let mut conditions = Vec::new();
    for &selector in &plan.layers {
        conditions.extend(run_layer(plan, &inputs, selector)?);
    }
    Ok(ExperimentReport {
        metadata: ReportMetadata {
            seed: plan.seed,
            n_proper: plan.n_proper,
            n_calibration: plan.n_calibration,
            n_test: plan.n_test,
            tau: plan.tau,
            k: plan.k,
            mode: plan.mode,
            n_bins: plan.n_bins,
        },
        conditions,
    })
}

/// One report per calibration-set size, all scoring the same test inputs.
pub fn calibration_sweep(plan: &ExperimentPlan, sizes: &[usize]) -> Result<Vec<ExperimentReport>> {
    let mut variants = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let p = ExperimentPlan {
            n_calibration: n,
            ..plan.clone()
        };
        p.validate()?;
        variants.push(p);
    }
    variants.iter().map(run_experiment).collect()
}
