//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;

use medusa::autodiff::{ParamStore, Tape, Tensor, Var};
use medusa::layers::Forward;
use medusa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], amplitude: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-amplitude..amplitude))
}

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-8;

fn run<F>(store: &ParamStore, x: &Tensor, training: bool, f: &F) -> f64
where
    F: Fn(&mut Forward, Var) -> Result<Var>,
{
    let mut store = store.clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut fw = Forward::new(&mut tape, &mut store, training);
    let loss = f(&mut fw, xv).unwrap();
    tape.value(loss).data()[0]
}

fn assert_close(what: &str, analytic: f64, numeric: f64) {
    let abs = (analytic - numeric).abs();
    let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
    assert!(
        abs <= ABS_TOL || rel <= REL_TOL,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// Central finite-difference check of a module with respect to its input
/// and every learnable parameter. The store is cloned for each evaluation
/// so running statistics never leak between probes.
pub fn check_module<F>(store: &ParamStore, x: &Tensor, training: bool, f: F)
where
    F: Fn(&mut Forward, Var) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = {
        let mut fw = Forward::new(&mut tape, &mut analytic_store, training);
        f(&mut fw, xv).unwrap()
    };
    tape.backward(loss, &mut analytic_store).unwrap();

    let dx = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + STEP;
        let plus = run(store, &probe, training, &f);
        probe.data_mut()[i] = x0 - STEP;
        let minus = run(store, &probe, training, &f);
        probe.data_mut()[i] = x0;
        assert_close(&format!("input[{i}]"), dx[i], (plus - minus) / (2.0 * STEP));
    }

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = analytic_store.get(id);
        let grad = p
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let name = p.name.clone();
        let mut probe_store = store.clone();
        for i in 0..grad.len() {
            let v0 = store.value(id).data()[i];
            probe_store.get_mut(id).value.data_mut()[i] = v0 + STEP;
            let plus = run(&probe_store, x, training, &f);
            probe_store.get_mut(id).value.data_mut()[i] = v0 - STEP;
            let minus = run(&probe_store, x, training, &f);
            probe_store.get_mut(id).value.data_mut()[i] = v0;
            assert_close(&format!("{name}[{i}]"), grad[i], (plus - minus) / (2.0 * STEP));
        }
    }
}
