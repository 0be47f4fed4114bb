mod common;

use std::collections::BTreeSet;

use common::{criteria, random_tensor, rng};
use medusa::autodiff::{ParamStore, Tape};
use medusa::backbone::{BackboneConfig, PREFIX as BACKBONE_PREFIX};
use medusa::data::{batch_images, batch_target, generate_sample, SceneSpec};
use medusa::heads::{HeadKind, HeadOptions, TaskSpec};
use medusa::losses::task_loss;
use medusa::model::Medusa;
use proptest::prelude::*;

#[test]
fn gate_values_stay_in_half_open_band() {
    criteria::gate_bound();
}

#[test]
fn task_losses_only_reach_their_own_head() {
    criteria::head_isolation();
}

#[test]
fn parameter_count_is_affine_in_tasks() {
    criteria::linear_scaling();
}

fn full_model(seed: u64) -> Medusa {
    let mut m = Medusa::new(BackboneConfig::default(), seed).unwrap();
    m.add_head(TaskSpec::depth(), HeadOptions::default()).unwrap();
    m.add_head(
        TaskSpec::segmentation(),
        HeadOptions {
            kind: HeadKind::HrHead,
            sfa: true,
        },
    )
    .unwrap();
    m.add_head(
        TaskSpec::edges(),
        HeadOptions {
            kind: HeadKind::Msa,
            sfa: false,
        },
    )
    .unwrap();
    m
}

#[test]
fn head_parameter_names_are_disjoint() {
    let m = full_model(0);
    let mut seen = BTreeSet::new();
    for head in m.heads() {
        let prefix = head.prefix();
        let names: Vec<&str> = m
            .store()
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| n.starts_with(&prefix))
            .collect();
        assert!(!names.is_empty());
        for n in names {
            assert!(seen.insert(n.to_string()), "{n} shared");
        }
    }
    // Within one head the SFA and MSA gates never share parameters.
    let head = m.head("depth").unwrap();
    let mut gate_names = BTreeSet::new();
    for att in head.attention_modules() {
        for conv in [&att.gate.conv, &att.value.conv] {
            assert!(gate_names.insert(conv.weight));
        }
    }
    assert_eq!(gate_names.len(), 2 * 2 * BackboneConfig::default().num_scales());
}

#[test]
fn msa_and_hrhead_agree_on_output_shape() {
    let sample = generate_sample(&SceneSpec::default(), 1);
    let images = batch_images(&[&sample, &sample]).unwrap();
    for spec in [TaskSpec::depth(), TaskSpec::segmentation(), TaskSpec::normals()] {
        let mut shapes = Vec::new();
        for kind in [HeadKind::Msa, HeadKind::HrHead] {
            let mut m = Medusa::new(BackboneConfig::default(), 0).unwrap();
            m.add_head(spec.clone(), HeadOptions { kind, sfa: true }).unwrap();
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &images, None, false).unwrap();
            shapes.push(tape.shape(out[0].1.prediction).to_vec());
        }
        assert_eq!(shapes[0], shapes[1]);
        assert_eq!(shapes[0], vec![2, spec.out_channels, 64, 64]);
    }
}

fn backbone_grads(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX) && p.is_learnable())
        .flat_map(|(_, p)| {
            p.grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect()
}

#[test]
fn backbone_gradients_add_across_tasks() {
    let mut m = full_model(4);
    let sample = generate_sample(&SceneSpec::default(), 2);
    let images = batch_images(&[&sample]).unwrap();
    // Eval mode keeps BN statistics fixed across the repeated passes.
    let run = |m: &mut Medusa, tasks: &[&str]| {
        m.store_mut().zero_grad();
        let mut tape = Tape::new();
        let outputs = m.forward(&mut tape, &images, None, false).unwrap();
        let mut total = None;
        for (name, out) in &outputs {
            if !tasks.contains(&name.as_str()) {
                continue;
            }
            let spec = m.head(name).unwrap().spec().clone();
            let target = batch_target(&[&sample], spec.label).unwrap();
            let l = task_loss(&mut tape, spec.loss_kind, out.prediction, &target).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        tape.backward(total.unwrap(), m.store_mut()).unwrap();
        backbone_grads(m.store())
    };
    let joint = run(&mut m, &["depth", "segm", "edges"]);
    let parts: Vec<Vec<f64>> = ["depth", "segm", "edges"].iter().map(|t| run(&mut m, &[t])).collect();
    let mut nonzero = 0;
    for (i, j) in joint.iter().enumerate() {
        let sum: f64 = parts.iter().map(|p| p[i]).sum();
        assert!((j - sum).abs() <= 1e-12 * (1.0 + j.abs()), "{j} vs {sum}");
        nonzero += (*j != 0.0) as usize;
    }
    assert!(nonzero > 0);
}

#[test]
fn forward_is_deterministic() {
    let images = random_tensor(&mut rng(9), &[2, 3, 32, 32], 1.0);
    let run = || {
        let mut m = full_model(11);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &images, None, true).unwrap();
        out.iter()
            .flat_map(|(_, o)| tape.value(o.prediction).data().to_vec())
            .collect::<Vec<f64>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_shapes_follow_scales(side in 1usize..4, batch in 1usize..3, seed in 0u64..100) {
        let h = 32 * side;
        let mut m = Medusa::new(BackboneConfig::default(), seed).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(random_tensor(&mut rng(seed), &[batch, 3, h, 32], 1.0));
        let pyr = m.extract_features(&mut tape, img, false).unwrap();
        let cfg = BackboneConfig::default();
        for ((f, &s), &c) in pyr.features.iter().zip(&cfg.scales).zip(&cfg.channels) {
            prop_assert_eq!(tape.shape(*f), &[batch, c, h / s, 32 / s][..]);
        }
    }

    #[test]
    fn head_count_difference_is_constant(t in 2usize..7, msa in any::<bool>(), sfa in any::<bool>()) {
        let options = HeadOptions { kind: if msa { HeadKind::Msa } else { HeadKind::HrHead }, sfa };
        let count = |n: usize| {
            let mut m = Medusa::new(BackboneConfig::default(), 0).unwrap();
            for k in 0..n {
                let mut spec = TaskSpec::segmentation();
                spec.name = format!("s{k}");
                m.add_head(spec, options).unwrap();
            }
            m.param_count()
        };
        prop_assert_eq!(count(t) - count(t - 1), count(2) - count(1));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let mut m = full_model(0);
    let mut tape = Tape::new();
    let odd = random_tensor(&mut rng(0), &[1, 3, 30, 32], 1.0);
    assert!(m.forward(&mut tape, &odd, None, false).is_err());
    let gray = random_tensor(&mut rng(0), &[1, 1, 32, 32], 1.0);
    assert!(m.forward(&mut tape, &gray, None, false).is_err());
    assert!(m.add_head(TaskSpec::depth(), HeadOptions::default()).is_err());
    let missing = random_tensor(&mut rng(0), &[1, 3, 32, 32], 1.0);
    assert!(m
        .forward(&mut tape, &missing, Some(&["parts".to_string()]), false)
        .is_err());
}
