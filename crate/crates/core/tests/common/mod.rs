#![allow(dead_code)]

use actmon::refnet::{init_network, ArchSpec, LayerArch, LayerKind, Network, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Inputs whose leaky pre-activations come this close to the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn random_arch(rng: &mut ChaCha8Rng) -> ArchSpec {
    use LayerArch::*;
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    ArchSpec {
        input_shape: Shape::Grid(h, w),
        layers: vec![
            Conv2d {
                height: rng.random_range(1..=3),
                width: rng.random_range(1..=3),
            },
            BatchNorm,
            LeakyRelu,
            Dense {
                units: rng.random_range(2..=6),
            },
            BatchNorm,
            LeakyRelu,
            Dense {
                units: rng.random_range(1..=4),
            },
        ],
    }
}

fn near_kink(net: &Network, x: &[f64]) -> bool {
    let (_, trace) = net.forward_with_trace(x).unwrap();
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind() == LayerKind::LeakyRelu)
        .any(|(i, _)| {
            trace
                .layer(i)
                .unwrap()
                .iter()
                .any(|v| v.abs() < KINK_MARGIN)
        })
}

fn loss(net: &Network, x: &[f64], target: &[f64]) -> f64 {
    net.forward(x)
        .unwrap()
        .iter()
        .zip(target)
        .map(|(y, t)| (y - t) * (y - t))
        .sum()
}

/// Largest componentwise relative error between the analytic input gradient
/// and central differences, over `n_nets` random small networks.
pub fn max_gradient_error(n_nets: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n_nets {
        let net = init_network(&random_arch(&mut rng), seed ^ (i as u64 + 1)).unwrap();
        let n_in = net.input_shape().numel();
        let n_out = net.output_shape().numel();
        let x = loop {
            let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            if !near_kink(&net, &x) {
                break x;
            }
        };
        let target: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = net.input_gradient(&x, &target).unwrap();
        for j in 0..n_in {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += FD_STEP;
            down[j] -= FD_STEP;
            let fd = (loss(&net, &up, &target) - loss(&net, &down, &target)) / (2.0 * FD_STEP);
            let a = analytic[j];
            let scale = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}

use std::path::PathBuf;

use actmon::abstraction::{GaussianAbstraction, Mode, NeuronStats};
use actmon::icad::CalibrationScores;
use actmon::monitor::{MonitorArtifact, MonitorConfig, Provenance};
use actmon::trace::{ActivationVector, TraceDataset, TraceRecord};

pub const GOLDEN_CREATED: u64 = 1_700_000_000;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

/// Values chosen to exercise sign, subnormal, extreme and non-dyadic f32s.
pub fn golden_trace() -> TraceDataset {
    let rows: [(u64, [f32; 4], Option<u32>); 3] = [
        (10, [1.5, -2.25, 0.1, 0.0], Some(0)),
        (
            11,
            [f32::MAX, f32::MIN_POSITIVE / 2.0, -1e-7, 3.0e8],
            Some(7),
        ),
        (42, [-0.0, 1.0 / 3.0, 65504.0, -1.0], Some(0)),
    ];
    let records = rows
        .into_iter()
        .map(|(id, v, label)| {
            TraceRecord::new(id, ActivationVector::new(v.to_vec()).unwrap(), label)
        })
        .collect();
    TraceDataset::new(4, records).unwrap()
}

pub fn golden_monitor() -> MonitorArtifact {
    let stats = [(0.0, 1.0), (1.0, 0.5), (-0.5, 0.0), (0.1, 0.3)]
        .into_iter()
        .map(|(mu, sigma)| NeuronStats { mu, sigma })
        .collect();
    let abstraction = GaussianAbstraction::class_agnostic(stats, 2.0).unwrap();
    let calibration = CalibrationScores::from_scores(vec![0.0, 0.25, 0.0, 1.0, 0.5]).unwrap();
    let hash = golden_trace().content_hash();
    let config = MonitorConfig {
        layer: "last_leaky_relu".into(),
        ..MonitorConfig::default()
    };
    assert_eq!(config.mode, Mode::ClassAgnostic);
    MonitorArtifact::new(
        config,
        abstraction,
        calibration,
        Provenance::combine(&hash, &hash, GOLDEN_CREATED),
    )
    .unwrap()
}

/// Decodes the trace fixture, compares it bit for bit with [`golden_trace`]
/// and re-encodes it to the same bytes.
pub fn check_golden_trace() -> Result<(), String> {
    use actmon::trace::{encode_binary, load_trace, TraceFormat};
    let path = golden_dir().join("trace.atrc");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = load_trace(&path, TraceFormat::Binary).map_err(|e| e.to_string())?;
    let expected = golden_trace();
    if loaded.len() != expected.len() || loaded.n_neurons() != expected.n_neurons() {
        return Err("trace fixture shape changed".into());
    }
    let bits = |r: &TraceRecord| {
        r.activations
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    for (a, b) in loaded.records().iter().zip(expected.records()) {
        if bits(a) != bits(b) || a.sample_id != b.sample_id || a.label != b.label {
            return Err(format!("record {} differs", b.sample_id));
        }
    }
    if encode_binary(&loaded) != bytes {
        return Err("re-encoded trace differs from fixture bytes".into());
    }
    Ok(())
}

/// Parses the monitor fixture and requires the serialized form to be unchanged.
pub fn check_golden_monitor() -> Result<(), String> {
    let path = golden_dir().join("monitor.json");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let loaded = MonitorArtifact::from_json(&text).map_err(|e| e.to_string())?;
    if loaded.to_json().map_err(|e| e.to_string())? != text {
        return Err("re-serialized monitor differs from fixture".into());
    }
    if loaded.to_json().unwrap() != golden_monitor().to_json().unwrap() {
        return Err("fixture does not match the expected monitor".into());
    }
    Ok(())
}
