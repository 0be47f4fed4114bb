//! Oracle and finite-difference checks for every differentiable operation.
//! Shared by the gradient tests and the acceptance harness.

use super::{check_module, random_tensor, rng};
use medusa::autodiff::gradcheck::{check, GradCheckConfig};
use medusa::autodiff::{ParamStore, RunningStats, Tape, Tensor, Var, BN_EPS};
use medusa::backbone::{Backbone, BackboneConfig, ScalePyramid};
use medusa::heads::{HeadKind, HeadOptions, SpatialAttention, TaskHead, TaskSpec};
use medusa::layers::{ConvBlock, Forward, Initializer, ResidualBlock};
use medusa::losses::{cross_entropy, l1_loss, weighted_bce, IGNORE_INDEX};
use rand::Rng;

pub const INSTANCES: usize = 20;

fn nested_loop_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((b_ * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_matches_nested_loop_oracle() {
    let mut r = rng(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = random_tensor(&mut r, &[2, 3, 5, 5], 1.0);
        let w = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
        let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let expected = nested_loop_conv(&x, &w, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let bv = tape.constant(Tensor::new(vec![4], b).unwrap());
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(tape.shape(y), expected.shape());
        for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-10, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

/// Half-pixel bilinear sample of a single-channel image with edge clamping.
fn bilinear_oracle(img: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for oy in 0..h * factor {
        let (y0, y1, fy) = src(oy, h);
        for ox in 0..w * factor {
            let (x0, x1, fx) = src(ox, w);
            let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
            let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

pub fn bilinear_matches_oracle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let expected = bilinear_oracle(&[0.0, 1.0, 2.0, 3.0], 2, 2, 2);
    // First row by hand: 0, 0.25, 0.75, 1.
    assert!((expected[1] - 0.25).abs() < 1e-15 && (expected[2] - 0.75).abs() < 1e-15);
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-10);
    }

    let mut r = rng(2);
    for factor in [2, 3, 4] {
        let img = random_tensor(&mut r, &[1, 1, 3, 5], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let y = tape.upsample_bilinear(x, factor).unwrap();
        let expected = bilinear_oracle(img.data(), 3, 5, factor);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

pub fn batch_norm_normalizes_batch() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[4, 2, 3, 3], 10.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let y = tape.batch_norm(xv, g, b, &mut stats, true, BN_EPS).unwrap();
    let y = tape.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..9).map(move |i| (n, i)))
            .map(|(n, i)| y.data()[(n * 2 + c) * 9 + i])
            .collect();
        let mean = vals.iter().sum::<f64>() / 36.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

/// Runs `f` on `INSTANCES` random input sets drawn by `make`.
fn sweep<M, F>(seed: u64, make: M, f: F)
where
    M: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> medusa::Result<Var> + Copy,
{
    let mut r = rng(seed);
    for i in 0..INSTANCES {
        let inputs = make(&mut r);
        let report = check(&inputs, f, GradCheckConfig::default()).unwrap();
        assert!(
            report.passed(),
            "instance {i}: {:?}",
            &report.failures[..report.failures.len().min(3)]
        );
    }
}

/// Contracts an output with a fixed pseudo-random weighting so that no
/// gradient is trivially uniform.
fn probe_sum(tape: &mut Tape, y: Var) -> medusa::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 13) as f64 - 6.5) / 6.0);
    let w = tape.constant(w);
    let p = tape.hadamard(y, w)?;
    Ok(tape.sum(p))
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize, usize) {
    (
        r.gen_range(1..3),
        r.gen_range(1..4),
        r.gen_range(2..5),
        r.gen_range(2..5),
    )
}

pub fn elementwise_ops_pass_finite_differences() {
    let one = |r: &mut rand_chacha::ChaCha8Rng| {
        let (n, c, h, w) = dims(r);
        vec![random_tensor(r, &[n, c, h, w], 2.0)]
    };
    let two = |r: &mut rand_chacha::ChaCha8Rng| {
        let (n, c, h, w) = dims(r);
        vec![
            random_tensor(r, &[n, c, h, w], 2.0),
            random_tensor(r, &[n, c, h, w], 2.0),
        ]
    };
    sweep(10, one, |t, v| {
        let y = t.relu(v[0]);
        probe_sum(t, y)
    });
    sweep(11, one, |t, v| {
        let y = t.sigmoid(v[0]);
        probe_sum(t, y)
    });
    sweep(12, one, |t, v| {
        let y = t.scale(v[0], -1.7);
        probe_sum(t, y)
    });
    sweep(13, one, |t, v| {
        let y = t.mean(v[0]);
        Ok(t.scale(y, 3.0))
    });
    sweep(14, two, |t, v| {
        let y = t.hadamard(v[0], v[1])?;
        probe_sum(t, y)
    });
    sweep(15, two, |t, v| {
        let y = t.add(v[0], v[1])?;
        probe_sum(t, y)
    });
}

pub fn structural_ops_pass_finite_differences() {
    sweep(
        20,
        |r| {
            let (n, _, h, w) = dims(r);
            let (ca, cb) = (r.gen_range(1..4), r.gen_range(1..4));
            vec![
                random_tensor(r, &[n, ca, h, w], 1.0),
                random_tensor(r, &[n, cb, h, w], 1.0),
            ]
        },
        |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            probe_sum(t, y)
        },
    );
    for factor in [2, 4] {
        sweep(
            21 + factor as u64,
            |r| {
                let (n, c, h, w) = dims(r);
                vec![random_tensor(r, &[n, c, h, w], 1.0)]
            },
            move |t, v| {
                let y = t.upsample_bilinear(v[0], factor)?;
                probe_sum(t, y)
            },
        );
    }
}

pub fn concat_of_sum_has_unit_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 2, 4, 4]), true);
    let b = tape.leaf(Tensor::zeros(&[2, 3, 4, 4]), true);
    let y = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 4, 4]);
    let s = tape.sum(y);
    tape.backward(s, &mut ParamStore::new()).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0));
    assert!(tape.grad(b).unwrap().iter().all(|&g| g == 1.0));
}

pub fn conv_passes_finite_differences() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        sweep(
            30 + stride as u64 + k as u64,
            |r| {
                let (n, ci, h, w) = dims(r);
                let co = r.gen_range(1..4);
                vec![
                    random_tensor(r, &[n, ci, h + 1, w + 1], 1.0),
                    random_tensor(r, &[co, ci, k, k], 1.0),
                    random_tensor(r, &[co], 1.0),
                ]
            },
            move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                probe_sum(t, y)
            },
        );
    }
}

pub fn batch_norm_passes_finite_differences() {
    for training in [true, false] {
        sweep(
            40 + training as u64,
            |r| {
                let (n, c, h, w) = dims(r);
                vec![
                    random_tensor(r, &[n + 1, c, h, w], 2.0),
                    random_tensor(r, &[c], 1.5),
                    random_tensor(r, &[c], 1.0),
                ]
            },
            move |t, v| {
                let c = t.value(v[1]).numel();
                let mut stats = RunningStats::new(c);
                for (i, m) in stats.mean.iter_mut().enumerate() {
                    *m = 0.1 * i as f64;
                }
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, training, BN_EPS)?;
                probe_sum(t, y)
            },
        );
    }
}

pub fn losses_pass_finite_differences() {
    sweep(
        50,
        |r| {
            let (n, c, h, w) = dims(r);
            vec![
                random_tensor(r, &[n, c, h, w], 1.0),
                random_tensor(r, &[n, c, h, w], 1.0),
            ]
        },
        |t, v| l1_loss(t, v[0], v[1]),
    );
    for ignore in [false, true] {
        sweep(
            51 + ignore as u64,
            |r| {
                let (n, _, h, w) = dims(r);
                vec![random_tensor(r, &[n, 4, h, w], 3.0)]
            },
            move |t, v| {
                let (n, c, h, w) = t.value(v[0]).dims4()?;
                let labels: Vec<usize> = (0..n * h * w)
                    .map(|i| {
                        if ignore && i % 3 == 0 {
                            IGNORE_INDEX
                        } else {
                            (i * 5 + 1) % c
                        }
                    })
                    .collect();
                cross_entropy(t, v[0], &labels, IGNORE_INDEX)
            },
        );
    }
    for p in [0.95, 0.5, 0.2] {
        sweep(
            55,
            |r| {
                let (n, _, h, w) = dims(r);
                vec![random_tensor(r, &[n, 1, h, w], 4.0)]
            },
            move |t, v| {
                let target = Tensor::from_fn(t.shape(v[0]), |i| ((i * 3) % 4 == 0) as u8 as f64);
                weighted_bce(t, v[0], &target, p)
            },
        );
    }
}

pub fn conv_block_and_residual_pass_finite_differences() {
    let mut r = rng(60);
    for i in 0..INSTANCES {
        let c = r.gen_range(1..4);
        let mut store = ParamStore::new();
        let init = Initializer::new(i as u64);
        let block = ConvBlock::new(&mut store, &init, "blk", c, c + 1, 3, 1 + i % 2).unwrap();
        let res = ResidualBlock::new(&mut store, &init, "res", c).unwrap();
        let x = random_tensor(&mut r, &[2, c, 4, 4], 1.0);
        check_module(&store, &x, i % 2 == 0, |fw, x| {
            let a = block.forward(fw, x)?;
            let b = res.forward(fw, x)?;
            let pa = probe_sum(fw.tape, a)?;
            let pb = probe_sum(fw.tape, b)?;
            fw.tape.add(pa, pb)
        });
    }
}

pub fn attention_passes_finite_differences() {
    let mut r = rng(70);
    for i in 0..INSTANCES {
        let c = r.gen_range(1..4);
        let mut store = ParamStore::new();
        let att = SpatialAttention::new(&mut store, &Initializer::new(i as u64), "att", c).unwrap();
        let x = random_tensor(&mut r, &[2, c, 3, 3], 1.0);
        check_module(&store, &x, i % 2 == 0, |fw, x| {
            let y = att.forward(fw, x)?;
            probe_sum(fw.tape, y)
        });
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        scales: vec![2, 4],
        channels: vec![2, 3],
        stem_channels: 2,
        blocks_per_scale: 1,
    }
}

pub fn heads_pass_finite_differences() {
    let cfg = tiny_backbone();
    let mut r = rng(80);
    let tasks = [TaskSpec::depth(), TaskSpec::segmentation(), TaskSpec::edges()];
    for i in 0..INSTANCES {
        let options = HeadOptions {
            kind: if i % 2 == 0 { HeadKind::Msa } else { HeadKind::HrHead },
            sfa: i % 4 < 2,
        };
        let spec = tasks[i % 3].clone();
        let mut store = ParamStore::new();
        let head = TaskHead::new(&mut store, &Initializer::new(i as u64), &cfg, spec, options).unwrap();
        // The two scales are packed into one input and split by channel.
        let x = random_tensor(&mut r, &[2, 2, 4, 4], 1.0);
        let f1 = random_tensor(&mut r, &[2, 3, 2, 2], 1.0);
        check_module(&store, &x, true, |fw, x| {
            let f1 = fw.tape.constant(f1.clone());
            let out = head.forward(fw, &ScalePyramid { features: vec![x, f1] })?;
            let mut loss = probe_sum(fw.tape, out.prediction)?;
            for p in out.initial {
                let l = probe_sum(fw.tape, p)?;
                loss = fw.tape.add(loss, l)?;
            }
            Ok(loss)
        });
    }
}

pub fn backbone_passes_finite_differences() {
    let cfg = tiny_backbone();
    let mut r = rng(90);
    for i in 0..INSTANCES {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &Initializer::new(i as u64), cfg.clone()).unwrap();
        let x = random_tensor(&mut r, &[2, 3, 8, 8], 1.0);
        check_module(&store, &x, i % 2 == 0, |fw, x| {
            let pyr = bb.extract_features(fw, x)?;
            let a = probe_sum(fw.tape, pyr.features[0])?;
            let b = probe_sum(fw.tape, pyr.features[1])?;
            fw.tape.add(a, b)
        });
    }
}

pub fn sequential_backward_accumulates() {
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &Initializer::new(5), "b", 2, 2, 3, 1).unwrap();
    let x = random_tensor(&mut rng(5), &[2, 2, 3, 3], 1.0);
    let run = |store: &mut ParamStore, which: u8| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut fw = Forward::new(&mut tape, store, true);
        let y = block.forward(&mut fw, xv).unwrap();
        let l = match which {
            0 => tape.sum(y),
            _ => probe_sum(&mut tape, y).unwrap(),
        };
        tape.backward(l, store).unwrap();
    };
    let grads = |s: &ParamStore| -> Vec<f64> {
        s.iter()
            .filter(|(_, p)| p.requires_grad())
            .flat_map(|(_, p)| p.grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_default())
            .collect()
    };
    let mut both = store.clone();
    run(&mut both, 0);
    run(&mut both, 1);
    let mut a = store.clone();
    run(&mut a, 0);
    let mut b = store.clone();
    run(&mut b, 1);
    for ((s, x), y) in grads(&both).iter().zip(grads(&a)).zip(grads(&b)) {
        assert!((s - (x + y)).abs() <= 1e-12 * (1.0 + s.abs()));
    }
}

/// Every check above, in order.
pub const ALL: &[(&str, fn())] = &[
    ("conv_matches_nested_loop_oracle", conv_matches_nested_loop_oracle),
    ("bilinear_matches_oracle", bilinear_matches_oracle),
    ("batch_norm_normalizes_batch", batch_norm_normalizes_batch),
    (
        "elementwise_ops_pass_finite_differences",
        elementwise_ops_pass_finite_differences,
    ),
    (
        "structural_ops_pass_finite_differences",
        structural_ops_pass_finite_differences,
    ),
    ("concat_of_sum_has_unit_gradient", concat_of_sum_has_unit_gradient),
    ("conv_passes_finite_differences", conv_passes_finite_differences),
    (
        "batch_norm_passes_finite_differences",
        batch_norm_passes_finite_differences,
    ),
    ("losses_pass_finite_differences", losses_pass_finite_differences),
    (
        "conv_block_and_residual_pass_finite_differences",
        conv_block_and_residual_pass_finite_differences,
    ),
    (
        "attention_passes_finite_differences",
        attention_passes_finite_differences,
    ),
    ("heads_pass_finite_differences", heads_pass_finite_differences),
    ("backbone_passes_finite_differences", backbone_passes_finite_differences),
    ("sequential_backward_accumulates", sequential_backward_accumulates),
];
