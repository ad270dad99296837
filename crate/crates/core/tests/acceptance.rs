//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use actmon::abstraction::{GaussianAbstraction, Mode, NeuronStats};
use actmon::experiment::{
    plan_network, run_experiment, trace_inputs, ConditionResult, ExperimentPlan, ExperimentReport,
    LayerSelector, SceneGenerator, FOREIGN_CONDITION, ID_CONDITION,
};
use actmon::icad::{cad_p_value, CalibrationScores, NonconformityScore};
use actmon::monitor::{build_monitor, MonitorArtifact, MonitorConfig, Provenance};
use actmon::perturb::Perturbation;
use actmon::refnet::Shape;
use actmon::trace::{split_dataset, TraceDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const AC1_PAIRS: usize = 1000;
const AC1_BUDGET: Duration = Duration::from_secs(1);
const AC2_INSTANCES: usize = 50;
const AC2_BUDGET: Duration = Duration::from_secs(10);
const AC3_NEURONS: usize = 64;
const AC3_SAMPLES: usize = 10_000;
/// Two-sided mass of a standard normal within two standard deviations.
const AC3_TARGET: f64 = 0.9545;
const AC3_TOL: f64 = 0.01;
const AC4_CALIBRATION: usize = 100;
const AC4_PROPER: usize = 500;
const AC4_HELD_OUT: usize = 100;
const AC4_HELD_OUT_MAX: f64 = 0.10;
const AC4_SELF_MAX: f64 = 0.05;
/// One calibration sample's worth of slack for tied scores.
const AC4_TIE_SLACK: f64 = 1.0 / AC4_CALIBRATION as f64;
const AC5_BUDGET: Duration = Duration::from_secs(120);
const DETECTION_MIN: f64 = 0.95;
const AC9_NETS: usize = 100;
const AC10_NEURONS: usize = 10_000;
const AC10_RUNS: usize = 501;
const AC10_BUDGET: Duration = Duration::from_millis(1);

const PRIMARY_LAYER: LayerSelector = LayerSelector::LastLeakyRelu;
const INFO_LAYER: LayerSelector = LayerSelector::LastBatchNorm;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rate(c: &ConditionResult) -> f64 {
    c.detection_rate()
}

fn condition<'a>(
    report: &'a ExperimentReport,
    layer: LayerSelector,
    name: &str,
) -> &'a ConditionResult {
    report
        .condition(&layer.to_string(), name)
        .unwrap_or_else(|| panic!("missing condition {layer}/{name}"))
}

fn ac1_binary_search_p_value() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..AC1_PAIRS {
        let m = rng.random_range(1..=64u32);
        let n = rng.random_range(1..=200);
        let cal: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..=m)) / f64::from(m))
            .collect();
        let score = f64::from(rng.random_range(0..=m)) / f64::from(m);
        let p = CalibrationScores::from_scores(cal.clone())
            .unwrap()
            .p_value(NonconformityScore::new(score).unwrap());
        let mut count = 0u32;
        for s in &cal {
            if *s >= score {
                count += 1;
            }
        }
        if (p.numerator(), p.denominator()) != (count, n as u32) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < AC1_BUDGET,
        format!(
            "{AC1_PAIRS} pairs, {mismatches} mismatches, {:.3} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Number of coordinates of `probe` outside `mean +- k * sd` of `rows`,
/// using the sample standard deviation and a 1e-9 band when it is zero.
fn oracle_outside(rows: &[&[f32]], probe: &[f32], k: f64) -> u32 {
    let n = rows.len() as f64;
    let mut outside = 0;
    for j in 0..probe.len() {
        let mean = rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / n;
        let ss: f64 = rows.iter().map(|r| (f64::from(r[j]) - mean).powi(2)).sum();
        let sd = (ss / (n - 1.0)).sqrt();
        let v = f64::from(probe[j]);
        let half = if sd == 0.0 { 1e-9 } else { k * sd };
        if v < mean - half || v > mean + half {
            outside += 1;
        }
    }
    outside
}

fn oracle_cad(rows: &[Vec<f32>], x: &[f32], k: f64) -> (u32, u32) {
    let all: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let test = oracle_outside(&all, x, k);
    let mut count = 0;
    for i in 0..rows.len() {
        let rest: Vec<&[f32]> = (0..rows.len())
            .filter(|&j| j != i)
            .map(|j| rows[j].as_slice())
            .collect();
        // equal denominators, so outside counts compare like fractions
        if oracle_outside(&rest, &rows[i], k) >= test {
            count += 1;
        }
    }
    (count, rows.len() as u32)
}

fn ac2_full_cad() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..AC2_INSTANCES {
        let n = rng.random_range(3..=10);
        let d = rng.random_range(1..=8);
        let constant = rng.random_range(0..d);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        if j == constant {
                            0.5
                        } else {
                            rng.random_range(-1.0f32..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let k = [1.0, 1.5, 2.0][rng.random_range(0..3)];
        let ds = TraceDataset::from_rows(rows.clone(), None).unwrap();
        let p = cad_p_value(&ds, &x, k).unwrap();
        if (p.numerator(), p.denominator()) != oracle_cad(&rows, &x, k) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < AC2_BUDGET,
        format!(
            "{AC2_INSTANCES} instances, {mismatches} mismatches, {:.3} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn gaussian_rows(rng: &mut ChaCha8Rng, dists: &[Normal<f64>], n: usize) -> TraceDataset {
    let rows = (0..n)
        .map(|_| dists.iter().map(|d| d.sample(rng) as f32).collect())
        .collect();
    TraceDataset::from_rows(rows, None).unwrap()
}

fn ac3_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dists: Vec<Normal<f64>> = (0..AC3_NEURONS)
        .map(|_| Normal::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..2.0)).unwrap())
        .collect();
    let fit = gaussian_rows(&mut rng, &dists, AC3_SAMPLES);
    let fresh = gaussian_rows(&mut rng, &dists, AC3_SAMPLES);
    let abs = GaussianAbstraction::fit(&fit, Mode::ClassAgnostic, 2.0).unwrap();
    let outside: usize = fresh
        .records()
        .iter()
        .map(|r| abs.outside_count(r.activations.as_slice(), None).unwrap())
        .sum();
    let inside = 1.0 - outside as f64 / (AC3_SAMPLES * AC3_NEURONS) as f64;
    outcome(
        (inside - AC3_TARGET).abs() <= AC3_TOL,
        format!(
            "inside rate {:.4} (target {AC3_TARGET} +- {AC3_TOL})",
            inside
        ),
    )
}

fn ac4_false_alarms(report: &ExperimentReport, plan: &ExperimentPlan) -> (Outcome, String) {
    let net = plan_network(plan).unwrap();
    let Shape::Grid(h, w) = net.input_shape() else {
        panic!("reference network takes images");
    };
    let generator = SceneGenerator::new(plan.scene.clone(), h, w).unwrap();
    let draw = |base: u64, n: usize| -> Vec<Vec<f64>> {
        (0..n as u64).map(|i| generator.sample(base + i)).collect()
    };
    let pool = draw(0xACC4_0000, AC4_PROPER + AC4_CALIBRATION);
    let held_out = draw(0xACC4_8000, AC4_HELD_OUT);
    let layer = PRIMARY_LAYER.resolve(&net).unwrap();
    let traces = trace_inputs(&net, &pool, layer, 0, false).unwrap();
    let split = split_dataset(&traces, AC4_PROPER, 44).unwrap();
    let monitor =
        build_monitor(&split.proper, &split.calibration, MonitorConfig::default()).unwrap();
    let self_rate = monitor.check_batch(&split.calibration).unwrap().summary.ood as f64
        / AC4_CALIBRATION as f64;
    let fresh = trace_inputs(&net, &held_out, layer, pool.len() as u64, false).unwrap();
    let fresh_rate = monitor.check_batch(&fresh).unwrap().summary.ood as f64 / AC4_HELD_OUT as f64;
    let experiment_rate = rate(condition(report, PRIMARY_LAYER, ID_CONDITION));
    let pass = self_rate <= AC4_SELF_MAX + AC4_TIE_SLACK
        && fresh_rate <= AC4_HELD_OUT_MAX
        && experiment_rate <= AC4_HELD_OUT_MAX;
    let info_rate = rate(condition(report, INFO_LAYER, ID_CONDITION));
    (
        outcome(
            pass,
            format!(
                "calibration self-rate {self_rate:.2}, held-out {fresh_rate:.2}, experiment id {experiment_rate:.2} ({PRIMARY_LAYER})"
            ),
        ),
        format!("{INFO_LAYER} experiment id false-alarm rate {info_rate:.2}"),
    )
}

fn gaussian_trend(report: &ExperimentReport, layer: LayerSelector) -> (bool, String) {
    let mut names = vec![ID_CONDITION.to_string()];
    names.extend([0.02, 0.04, 0.06].map(|variance| Perturbation::Gaussian { variance }.label()));
    let conds: Vec<&ConditionResult> = names.iter().map(|n| condition(report, layer, n)).collect();
    let means: Vec<f64> = conds.iter().map(|c| c.mean_p).collect();
    let strictly_decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let top = rate(conds[3]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    (
        strictly_decreasing && top >= DETECTION_MIN,
        format!(
            "mean p {} over variance 0/0.02/0.04/0.06, detection at 0.06 {top:.2}",
            shown.join(" > ")
        ),
    )
}

fn impulse(report: &ExperimentReport, layer: LayerSelector) -> (bool, String) {
    let lo = rate(condition(
        report,
        layer,
        &Perturbation::Impulse { p: 0.03 }.label(),
    ));
    let hi = rate(condition(
        report,
        layer,
        &Perturbation::Impulse { p: 0.06 }.label(),
    ));
    (
        hi >= DETECTION_MIN && hi >= lo,
        format!("detection {lo:.2} at 0.03, {hi:.2} at 0.06"),
    )
}

fn fgsm(report: &ExperimentReport, layer: LayerSelector) -> (bool, String) {
    let rates: Vec<f64> = [0.02, 0.04, 0.06]
        .iter()
        .map(|&epsilon| {
            rate(condition(
                report,
                layer,
                &Perturbation::Fgsm { epsilon }.label(),
            ))
        })
        .collect();
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.2}")).collect();
    (
        rates.windows(2).all(|w| w[1] >= w[0]),
        format!(
            "detection {} over epsilon 0.02/0.04/0.06",
            shown.join(" -> ")
        ),
    )
}

fn foreign(report: &ExperimentReport, layer: LayerSelector) -> (bool, String) {
    let c = condition(report, layer, FOREIGN_CONDITION);
    let zero = c.p_numerators.iter().filter(|&&n| n == 0).count();
    let frac = zero as f64 / c.n as f64;
    (
        frac >= DETECTION_MIN,
        format!("{zero}/{} samples with p = 0", c.n),
    )
}

fn ac9_gradient() -> Outcome {
    let err = common::max_gradient_error(AC9_NETS, 909);
    outcome(
        err < common::FD_REL_TOL,
        format!("{AC9_NETS} networks, max relative error {err:.2e}"),
    )
}

fn ac10_hot_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let stats = (0..AC10_NEURONS)
        .map(|_| NeuronStats {
            mu: rng.random_range(-1.0..1.0),
            sigma: rng.random_range(0.1..1.0),
        })
        .collect();
    let abstraction = GaussianAbstraction::class_agnostic(stats, 2.0).unwrap();
    let cal: Vec<f64> = (0..100)
        .map(|_| f64::from(rng.random_range(0..=500u32)) / AC10_NEURONS as f64)
        .collect();
    let monitor = MonitorArtifact::new(
        MonitorConfig::default(),
        abstraction,
        CalibrationScores::from_scores(cal).unwrap(),
        Provenance::combine("", "", 0),
    )
    .unwrap();
    let x: Vec<f32> = (0..AC10_NEURONS)
        .map(|_| rng.random_range(-2.0f32..2.0))
        .collect();
    let mut times: Vec<Duration> = (0..AC10_RUNS)
        .map(|i| {
            let t = Instant::now();
            std::hint::black_box(monitor.check(std::hint::black_box(&x), i as u64).unwrap());
            t.elapsed()
        })
        .collect();
    times.sort();
    let median = times[AC10_RUNS / 2];
    outcome(
        median < AC10_BUDGET,
        format!(
            "median {:.1} us over {AC10_RUNS} checks of {AC10_NEURONS} neurons",
            median.as_secs_f64() * 1e6
        ),
    )
}

fn ac11_formats() -> Outcome {
    match common::check_golden_trace().and_then(|()| common::check_golden_monitor()) {
        Ok(()) => outcome(true, "trace and monitor fixtures round-trip exactly"),
        Err(e) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    let mut lines: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut info: Vec<String> = Vec::new();

    lines.push((
        "AC1",
        "icad p-value equals direct count",
        ac1_binary_search_p_value(),
    ));
    lines.push((
        "AC2",
        "full conformal p-value equals double-loop oracle",
        ac2_full_cad(),
    ));
    lines.push(("AC3", "k = 2 interval coverage", ac3_coverage()));

    let plan = ExperimentPlan::default();
    let start = Instant::now();
    let report = run_experiment(&plan).expect("default experiment");
    let elapsed = start.elapsed();

    let (ac4, ac4_info) = ac4_false_alarms(&report, &plan);
    lines.push(("AC4", "in-distribution false-alarm bound", ac4));
    info.push(ac4_info);

    let (ok, detail) = gaussian_trend(&report, PRIMARY_LAYER);
    lines.push((
        "AC5",
        "gaussian noise severity trend",
        outcome(
            ok && elapsed < AC5_BUDGET,
            format!("{detail}; experiment {:.1} s", elapsed.as_secs_f64()),
        ),
    ));
    let (ok, detail) = impulse(&report, PRIMARY_LAYER);
    lines.push(("AC6", "impulse noise detection", outcome(ok, detail)));
    let (ok, detail) = fgsm(&report, PRIMARY_LAYER);
    lines.push(("AC7", "fgsm detection monotone", outcome(ok, detail)));
    let (ok, detail) = foreign(&report, PRIMARY_LAYER);
    lines.push((
        "AC8",
        "foreign distribution collapses to p = 0",
        outcome(ok, detail),
    ));

    type Check = fn(&ExperimentReport, LayerSelector) -> (bool, String);
    for (name, check) in [
        ("gaussian", gaussian_trend as Check),
        ("impulse", impulse),
        ("fgsm", fgsm),
        ("foreign", foreign),
    ] {
        let (ok, detail) = check(&report, INFO_LAYER);
        info.push(format!(
            "{INFO_LAYER} {name}: {} ({detail})",
            if ok { "holds" } else { "does not hold" }
        ));
    }

    lines.push((
        "AC9",
        "input gradient matches finite differences",
        ac9_gradient(),
    ));
    lines.push(("AC10", "monitor check hot path", ac10_hot_path()));
    lines.push(("AC11", "format stability", ac11_formats()));

    let mut failed = 0;
    for (id, name, o) in &lines {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("{tag} {id} {name}: {}", o.detail);
    }
    for line in &info {
        println!("INFO {line}");
    }
    println!(
        "{} of {} criteria passed",
        lines.len() - failed,
        lines.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
