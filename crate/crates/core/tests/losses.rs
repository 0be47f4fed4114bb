mod common;

use common::criteria;
use medusa::autodiff::{Tape, Tensor};
use medusa::heads::TaskSpec;
use medusa::losses::{cross_entropy, delta_mtl, miou, rmse, weighted_bce, TaskPerformance, IGNORE_INDEX};
use proptest::collection::vec;
use proptest::prelude::*;

#[test]
fn delta_matches_hand_computation() {
    criteria::delta_oracle();
}

fn perf(name: &str, lower: bool, value: f64) -> TaskPerformance {
    let mut task = TaskSpec::depth();
    task.name = name.into();
    task.lower_is_better = lower;
    TaskPerformance { task, value }
}

fn rows() -> impl Strategy<Value = Vec<(bool, f64, f64)>> {
    vec((any::<bool>(), 0.01f64..10.0, 0.01f64..10.0), 1..6)
}

fn split(rows: &[(bool, f64, f64)]) -> (Vec<TaskPerformance>, Vec<TaskPerformance>) {
    let m = rows
        .iter()
        .enumerate()
        .map(|(i, &(l, m, _))| perf(&format!("t{i}"), l, m))
        .collect();
    let b = rows
        .iter()
        .enumerate()
        .map(|(i, &(l, _, b))| perf(&format!("t{i}"), l, b))
        .collect();
    (m, b)
}

proptest! {
    #[test]
    fn flipping_direction_negates_that_term(rows in rows(), pick in any::<prop::sample::Index>()) {
        let (m, b) = split(&rows);
        let before = delta_mtl(&m, &b).unwrap();
        let k = pick.index(rows.len());
        let mut flipped = rows.clone();
        flipped[k].0 = !flipped[k].0;
        let (m2, b2) = split(&flipped);
        let after = delta_mtl(&m2, &b2).unwrap();
        for i in 0..rows.len() {
            let expected = if i == k { -before.per_task_relative[i] } else { before.per_task_relative[i] };
            prop_assert_eq!(after.per_task_relative[i], expected);
        }
    }

    #[test]
    fn rescaling_one_task_leaves_delta_unchanged(rows in rows(), pick in any::<prop::sample::Index>(), c in 0.01f64..100.0) {
        let (m, b) = split(&rows);
        let k = pick.index(rows.len());
        let mut scaled = rows.clone();
        scaled[k].1 *= c;
        scaled[k].2 *= c;
        let (m2, b2) = split(&scaled);
        let (x, y) = (delta_mtl(&m, &b).unwrap(), delta_mtl(&m2, &b2).unwrap());
        prop_assert!((x.aggregate - y.aggregate).abs() < 1e-12);
        let mean = y.per_task_relative.iter().sum::<f64>() / rows.len() as f64;
        prop_assert!((y.aggregate - mean).abs() < 1e-15);
    }

    #[test]
    fn classification_losses_are_non_negative(
        logits in vec(-20.0f64..20.0, 12),
        labels in vec(0usize..4, 3),
        bits in vec(any::<bool>(), 12),
        p in 0.0f64..1.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4, 1, 3], logits.clone()).unwrap());
        let ce = cross_entropy(&mut tape, x, &labels, IGNORE_INDEX).unwrap();
        prop_assert!(tape.value(ce).data()[0] >= 0.0);
        let y = tape.constant(Tensor::new(vec![1, 1, 3, 4], logits).unwrap());
        let t = Tensor::new(vec![1, 1, 3, 4], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let bce = weighted_bce(&mut tape, y, &t, p).unwrap();
        prop_assert!(tape.value(bce).data()[0] >= 0.0);
    }

    #[test]
    fn metrics_stay_in_range(pred in vec(0usize..5, 1..64), seed in any::<u64>(), values in vec(-5.0f64..5.0, 1..64)) {
        let gt: Vec<usize> = pred.iter().enumerate().map(|(i, &p)| (p + (seed as usize >> (i % 32))) % 5).collect();
        let m = miou(&pred, &gt, 5, IGNORE_INDEX).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(miou(&gt, &gt, 5, IGNORE_INDEX).unwrap(), 1.0);
        let zeros = vec![0.0; values.len()];
        prop_assert!(rmse(&values, &zeros, None).unwrap() >= 0.0);
    }
}
