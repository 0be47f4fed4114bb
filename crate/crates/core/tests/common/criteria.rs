//! Fast model-level properties, shared by the unit-style integration tests
//! and the acceptance harness. Each check panics on violation and returns a
//! short summary.

use super::{random_tensor, rng};
use medusa::autodiff::{ParamStore, Tape};
use medusa::backbone::{BackboneConfig, PREFIX as BACKBONE_PREFIX};
use medusa::data::{batch_images, batch_target, generate_sample, validate_sample, SceneSpec};
use medusa::experiments::{resource_report, ExperimentConfig};
use medusa::heads::{HeadKind, HeadOptions, SpatialAttention, TaskSpec};
use medusa::layers::{Forward, Initializer};
use medusa::losses::{delta_mtl, task_loss, TaskPerformance};
use medusa::model::Medusa;
use rand::Rng;

pub const GATE_INPUTS: usize = 1000;
pub const DELTA_PAIRS: usize = 100;
pub const DELTA_TOL: f64 = 1e-12;
pub const VALIDATOR_SAMPLES: u64 = 1000;

fn assert_gate(values: &[f64], context: &str) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &g in values {
        assert!((0.5..1.0).contains(&g), "{context}: gate value {g} outside [0.5, 1)");
        lo = lo.min(g);
        hi = hi.max(g);
    }
    (lo, hi)
}

/// Gate values of stand-alone attention blocks on random inputs, then of
/// every attention block inside a full model on random images.
pub fn gate_bound() -> String {
    let mut r = rng(100);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut count = 0usize;
    for i in 0..GATE_INPUTS {
        let c = r.gen_range(1..9);
        let side = r.gen_range(2..7);
        let batch = r.gen_range(1..4);
        let amplitude = [0.1, 1.0, 3.0][i % 3];
        let training = i % 2 == 0;
        let mut store = ParamStore::new();
        let att = SpatialAttention::new(&mut store, &Initializer::new(i as u64), "att", c).unwrap();
        let x = random_tensor(&mut r, &[batch, c, side, side], amplitude);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut fw = Forward::new(&mut tape, &mut store, training);
        let (_, gate) = att.forward_with_gate(&mut fw, xv).unwrap();
        let (l, h) = assert_gate(tape.value(gate).data(), "stand-alone");
        lo = lo.min(l);
        hi = hi.max(h);
        count += tape.value(gate).numel();
    }

    let mut model = Medusa::new(BackboneConfig::default(), 7).unwrap();
    model.add_head(TaskSpec::depth(), HeadOptions::default()).unwrap();
    let head = model.heads()[0].clone();
    for training in [true, false] {
        let mut tape = Tape::new();
        let img = tape.constant(random_tensor(&mut r, &[2, 3, 32, 32], 1.0));
        let pyramid = model.extract_features(&mut tape, img, training).unwrap();
        let mut fw = Forward::new(&mut tape, model.store_mut(), training);
        let attention = head.attention_modules();
        let scales = pyramid.features.len();
        let sfa_gates: Vec<_> = attention[..scales]
            .iter()
            .zip(&pyramid.features)
            .map(|(a, &f)| a.forward_with_gate(&mut fw, f).unwrap().1)
            .collect();
        let feats = head.apply_sfa(&mut fw, &pyramid).unwrap();
        let refined = head.refine(&mut fw, &feats).unwrap();
        let msa_gates: Vec<_> = attention[scales..]
            .iter()
            .zip(&refined)
            .map(|(a, &f)| a.forward_with_gate(&mut fw, f).unwrap().1)
            .collect();
        assert_eq!(msa_gates.len(), scales);
        for g in sfa_gates.into_iter().chain(msa_gates) {
            let (l, h) = assert_gate(tape.value(g).data(), "in model");
            lo = lo.min(l);
            hi = hi.max(h);
            count += tape.value(g).numel();
        }
    }
    format!("{count} gate values in [{lo:.4}, {hi:.6}]")
}

/// One backward per task over a shared forward: other heads receive no
/// gradient at all, the backbone does.
pub fn head_isolation() -> String {
    let mut model = Medusa::new(BackboneConfig::default(), 3).unwrap();
    let specs = [
        TaskSpec::depth(),
        TaskSpec::segmentation(),
        TaskSpec::edges(),
        TaskSpec::normals(),
    ];
    for (i, s) in specs.iter().enumerate() {
        let options = HeadOptions {
            kind: if i % 2 == 0 { HeadKind::Msa } else { HeadKind::HrHead },
            sfa: i < 2,
        };
        model.add_head(s.clone(), options).unwrap();
    }
    let sample = generate_sample(&SceneSpec::default(), 0);
    let images = batch_images(&[&sample]).unwrap();
    let mut backbone_nonzero = 0;
    for target_task in &specs {
        model.store_mut().zero_grad();
        let mut tape = Tape::new();
        let outputs = model.forward(&mut tape, &images, None, true).unwrap();
        let (_, out) = outputs.iter().find(|(n, _)| *n == target_task.name).unwrap();
        let target = batch_target(&[&sample], target_task.label).unwrap();
        let loss = task_loss(&mut tape, target_task.loss_kind, out.prediction, &target).unwrap();
        tape.backward(loss, model.store_mut()).unwrap();

        let own = format!("head.{}.", target_task.name);
        let mut own_nonzero = 0;
        for (_, p) in model.store().iter() {
            let nonzero = p.grad.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
            if p.name.starts_with(BACKBONE_PREFIX) {
                backbone_nonzero += nonzero as usize;
            } else if p.name.starts_with(&own) {
                own_nonzero += nonzero as usize;
            } else {
                assert!(!nonzero, "loss of {} reached {}", target_task.name, p.name);
            }
        }
        assert!(own_nonzero > 0, "{} head received no gradient", target_task.name);
        assert!(
            backbone_nonzero > 0,
            "backbone received no gradient from {}",
            target_task.name
        );
    }
    model.store_mut().zero_grad();
    format!("{} heads isolated", specs.len())
}

/// Builds models with 1..=6 copies of one head and checks the counts are
/// affine in the task count, then that the pairwise design crosses over.
pub fn linear_scaling() -> String {
    let backbone = BackboneConfig::default();
    for options in [
        HeadOptions::default(),
        HeadOptions {
            kind: HeadKind::HrHead,
            sfa: false,
        },
    ] {
        let counts: Vec<usize> = (1..=6)
            .map(|t| {
                let mut m = Medusa::new(backbone.clone(), 0).unwrap();
                for k in 0..t {
                    let mut spec = TaskSpec::depth();
                    spec.name = format!("depth{k}");
                    m.add_head(spec, options).unwrap();
                }
                let brute: usize = m
                    .store()
                    .iter()
                    .filter(|(_, p)| p.is_learnable())
                    .map(|(_, p)| p.value.numel())
                    .sum();
                assert_eq!(brute, m.param_count());
                assert_eq!(brute, m.expected_param_count());
                brute
            })
            .collect();
        let step = counts[1] - counts[0];
        for (t, &c) in counts.iter().enumerate() {
            assert_eq!(c, counts[0] + t * step, "residual at T={}", t + 1);
        }
    }
    let report = resource_report(&ExperimentConfig::default(), 6).unwrap();
    let crossover = report.crossover.expect("pairwise never exceeds single-task");
    for r in &report.rows {
        assert_eq!(r.medusa, report.backbone + r.tasks * report.head);
    }
    format!("affine with zero residual, pairwise crosses single-task at T={crossover}")
}

fn perf(name: &str, lower_is_better: bool, value: f64) -> TaskPerformance {
    let mut task = TaskSpec::depth();
    task.name = name.to_string();
    task.lower_is_better = lower_is_better;
    TaskPerformance { task, value }
}

/// `(1/T) Σ (−1)^l (M_m − M_b) / M_b`, written out term by term.
fn hand_delta(rows: &[(bool, f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(lower, m, b) in rows {
        let term = (m - b) / b;
        total += if lower { -term } else { term };
    }
    total / rows.len() as f64
}

pub fn delta_oracle() -> String {
    let worked = delta_mtl(
        &[perf("depth", true, 0.54), perf("segm", false, 0.42)],
        &[perf("depth", true, 0.60), perf("segm", false, 0.40)],
    )
    .unwrap();
    assert!(
        (worked.aggregate - 0.075).abs() < DELTA_TOL,
        "worked example gave {}",
        worked.aggregate
    );

    let mut r = rng(200);
    let mut worst: f64 = 0.0;
    for _ in 0..DELTA_PAIRS {
        let n = r.gen_range(1..7);
        let rows: Vec<(bool, f64, f64)> = (0..n)
            .map(|_| (r.gen_bool(0.5), r.gen_range(0.01..5.0), r.gen_range(0.01..5.0)))
            .collect();
        let m: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, &(l, m, _))| perf(&format!("t{i}"), l, m))
            .collect();
        let b: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, &(l, _, b))| perf(&format!("t{i}"), l, b))
            .collect();
        let got = delta_mtl(&m, &b).unwrap().aggregate;
        let err = (got - hand_delta(&rows)).abs();
        assert!(err < DELTA_TOL, "delta off by {err}");
        worst = worst.max(err);
    }
    format!(
        "worked example {:+.4}%, {DELTA_PAIRS} random pairs, max error {worst:.1e}",
        100.0 * worked.aggregate
    )
}

pub fn data_validator() -> String {
    let spec = SceneSpec::default();
    for i in 0..VALIDATOR_SAMPLES {
        let problems = validate_sample(&generate_sample(&spec, i)).unwrap();
        assert!(problems.is_empty(), "sample {i}: {problems:?}");
    }
    format!("{VALIDATOR_SAMPLES} samples consistent")
}
