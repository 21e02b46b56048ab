//! Analytic gradients against central finite differences, in smoothed mode
//! (the surrogate replaces the step in the forward pass too).

// The oracles index plainly, mirroring the equations they check.
#![allow(clippy::needless_range_loop)]

use msvit_core::attention::{MssaBlock, MssaVariant, Smlp, SsaBlock};
use msvit_core::autograd::{Tape, Var};
use msvit_core::embedding::{GVariant, SpemsfBlock};
use msvit_core::layers::{ConvBn, ConvBnLif};
use msvit_core::neuron::LifParams;
use msvit_core::norm::Mode;
use msvit_core::params::{ParamId, ParamStore};
use msvit_core::tensor::Tensor;
use msvit_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// At 1e-3 the truncation error alone exceeds 1e-4 relative on small gradients.
const EPS: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|)`, with differences below `1e-9` treated as exact.
fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d < 1e-9 {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

/// Loss closure: builds the graph on a fresh tape and returns the scalar.
type LossFn<'a> = dyn Fn(&mut Tape, &ParamStore) -> Var + 'a;

fn check(store: &mut ParamStore, loss: &LossFn<'_>, samples: usize, seed: u64) -> f64 {
    let mut tape = Tape::new(Mode::Train).smoothed(true);
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.param_ids().collect();
    let total: usize = ids.iter().map(|&id| store.param(id).numel()).sum();
    let eval = |store: &ParamStore| {
        let mut t = Tape::new(Mode::Train).smoothed(true);
        let v = loss(&mut t, store);
        t.value(v).data()[0]
    };
    let mut worst = 0.0f64;
    for _ in 0..samples.min(total) {
        // Uniform over scalars, not over tensors.
        let mut k = rng.random_range(0..total);
        let mut id = ids[0];
        for &cand in &ids {
            let n = store.param(cand).numel();
            if k < n {
                id = cand;
                break;
            }
            k -= n;
        }
        let orig = store.param(id).data()[k];
        store.param_mut(id).data_mut()[k] = orig + EPS;
        let up = eval(store);
        store.param_mut(id).data_mut()[k] = orig - EPS;
        let down = eval(store);
        store.param_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let e = rel_err(analytic, numeric);
        assert!(
            e < 1e-4,
            "{}[{k}]: analytic {analytic:e} vs numeric {numeric:e}",
            store.param_name(id)
        );
        worst = worst.max(e);
    }
    worst
}

/// Mean-pools a `[T, B, C, H, W]` activation, applies a linear classifier,
/// and takes cross-entropy against fixed labels.
struct Readout {
    w: ParamId,
    b: ParamId,
    labels: Vec<usize>,
}

impl Readout {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c: usize, batch: usize) -> Self {
        let w = store.add_param("readout.w", rand_tensor(&[3, c], rng, -1.0, 1.0));
        let b = store.add_param("readout.b", rand_tensor(&[3], rng, -0.5, 0.5));
        Self {
            w,
            b,
            labels: (0..batch).map(|i| i % 3).collect(),
        }
    }

    fn loss(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let p = tape.mean_pool(h).unwrap();
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let logits = tape.linear("readout", p, w, b).unwrap();
        tape.cross_entropy(logits, &self.labels).unwrap()
    }
}

fn lif() -> LifParams {
    LifParams::default()
}

#[test]
fn linear_ce_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::default();
    let w = store.add_param("w", rand_tensor(&[4, 5], &mut rng, -1.0, 1.0));
    let b = store.add_param("b", rand_tensor(&[4], &mut rng, -1.0, 1.0));
    let x = rand_tensor(&[1, 5], &mut rng, -2.0, 2.0);
    let label = 2;
    let mut tape = Tape::new(Mode::Train);
    let xv = tape.input(x.clone());
    let wv = tape.param(&store, w);
    let bv = tape.param(&store, b);
    let logits = tape.linear("fc", xv, wv, bv).unwrap();
    let loss = tape.cross_entropy(logits, &[label]).unwrap();
    let g = tape.backward(loss).unwrap();

    // Closed form: dL/dz = softmax(z) - onehot; dW = dz x^T; db = dz.
    let z: Vec<f64> = (0..4)
        .map(|i| {
            (0..5)
                .map(|j| store.param(w).data()[i * 5 + j] * x.data()[j])
                .sum::<f64>()
                + store.param(b).data()[i]
        })
        .collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
    let dz: Vec<f64> = (0..4)
        .map(|i| (z[i] - zmax).exp() / denom - if i == label { 1.0 } else { 0.0 })
        .collect();
    for i in 0..4 {
        assert!((g.get(b).unwrap().data()[i] - dz[i]).abs() < 1e-6);
        for j in 0..5 {
            let expect = dz[i] * x.data()[j];
            assert!((g.get(w).unwrap().data()[i * 5 + j] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::default();
    let unit = ConvBnLif::new(&mut store, &mut rng, "c", 2, 4, 3, 1, 1, lif());
    let readout = Readout::new(&mut store, &mut rng, 4, 2);
    let x = rand_tensor(&[2, 2, 2, 4, 4], &mut rng, -2.0, 2.0);
    let mut tape = Tape::new(Mode::Train);
    let xv = tape.input(x);
    let h = unit.forward(&mut tape, &store, xv).unwrap();
    let l = readout.loss(&mut tape, &store, h);
    let g = tape.backward_with(l, 0.0).unwrap();
    assert!(g.iter().count() > 0);
    for (_, t) in g.iter() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_without_forward_fails() {
    let mut recorded = Tape::new(Mode::Train);
    let a = recorded.input(Tensor::zeros(&[1]));
    let b = recorded.input(Tensor::zeros(&[1]));
    let empty = Tape::new(Mode::Train);
    assert!(matches!(empty.backward(b), Err(Error::MissingForward(_))));
    let _ = a;
}

#[test]
fn conv_bn_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::default();
    let conv = ConvBn::new(&mut store, &mut rng, "c", 3, 4, 3, 2, 1);
    let readout = Readout::new(&mut store, &mut rng, 4, 2);
    let x = rand_tensor(&[2, 2, 3, 6, 6], &mut rng, -1.0, 1.0);
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.input(x.clone());
        let h = conv.forward(tape, store, xv).unwrap();
        readout.loss(tape, store, h)
    };
    check(&mut store, &loss, 60, 30);
}

#[test]
fn lif_surrogate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::default();
    let unit = ConvBnLif::new(&mut store, &mut rng, "c", 2, 4, 1, 1, 0, lif());
    let readout = Readout::new(&mut store, &mut rng, 4, 2);
    let x = rand_tensor(&[4, 2, 2, 3, 3], &mut rng, -2.0, 2.0);
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.input(x.clone());
        let h = unit.forward(tape, store, xv).unwrap();
        readout.loss(tape, store, h)
    };
    check(&mut store, &loss, 40, 40);
}

#[test]
fn mssa_gate_path_gradients() {
    for variant in [MssaVariant::PQ, MssaVariant::Q] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let block = MssaBlock::new(&mut store, &mut rng, "m", 4, variant, true, lif());
        let readout = Readout::new(&mut store, &mut rng, 4, 2);
        let x = rand_tensor(&[2, 2, 4, 3, 3], &mut rng, 0.0, 1.0);
        let loss = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.input(x.clone());
            let h = block.forward(tape, store, xv).unwrap();
            readout.loss(tape, store, h)
        };
        check(&mut store, &loss, 60, 50);
    }
}

#[test]
fn ssa_path_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::default();
    let block = SsaBlock::new(&mut store, &mut rng, "s", 8, 2, 0.5, lif());
    let readout = Readout::new(&mut store, &mut rng, 8, 2);
    let x = rand_tensor(&[2, 2, 8, 2, 2], &mut rng, 0.0, 1.0);
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.input(x.clone());
        let h = block.forward(tape, store, xv).unwrap();
        readout.loss(tape, store, h)
    };
    check(&mut store, &loss, 60, 60);
}

#[test]
fn smlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::default();
    let mlp = Smlp::new(&mut store, &mut rng, "mlp", 4, 2, lif());
    let readout = Readout::new(&mut store, &mut rng, 4, 2);
    let x = rand_tensor(&[2, 2, 4, 2, 2], &mut rng, 0.0, 1.0);
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.input(x.clone());
        let h = mlp.forward(tape, store, xv).unwrap();
        readout.loss(tape, store, h)
    };
    check(&mut store, &loss, 60, 70);
}

#[test]
fn spemsf_gradients() {
    for variant in [GVariant::G1, GVariant::G2] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::default();
        let block = SpemsfBlock::new(&mut store, &mut rng, "e", 2, 4, variant, lif()).unwrap();
        let readout = Readout::new(&mut store, &mut rng, 4, 2);
        let x = rand_tensor(&[2, 2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let loss = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.input(x.clone());
            let h = block.forward(tape, store, xv).unwrap();
            readout.loss(tape, store, h)
        };
        check(&mut store, &loss, 60, 80);
    }
}

#[test]
fn fan_out_accumulates() {
    // Both operands of the add share one producer.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::default();
    let w = store.add_param("w", rand_tensor(&[2, 3], &mut rng, -1.0, 1.0));
    let b = store.add_param("b", Tensor::zeros(&[2]));
    let x = rand_tensor(&[1, 3], &mut rng, -1.0, 1.0);
    let loss = |tape: &mut Tape, s: &ParamStore| {
        let xv = tape.input(x.clone());
        let wv = tape.param(s, w);
        let bv = tape.param(s, b);
        let z = tape.linear("fc", xv, wv, bv).unwrap();
        let z = tape.add(z, z).unwrap();
        tape.cross_entropy(z, &[1]).unwrap()
    };
    check(&mut store, &loss, 8, 90);
}
