//! Central finite-difference gradient checks for single layers.

use airtemp_core::nn::{Layer, LayerKind, LayerSpec, ParamStore, Tape, Var};
use airtemp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for piecewise-linear layers.
const STEP: f64 = 1e-3;
/// Attention is smooth; a wider step keeps f32 rounding in the forward pass
/// from dominating the difference.
const SMOOTH_STEP: f64 = 1e-2;
/// Coordinates probed per tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 48;
/// Minimum distance of every ReLU input from zero at the checked point.
const KINK_MARGIN: f32 = 0.01;
/// Signs of every ReLU input inside the layer. A probe whose perturbation
/// flips any of them straddles a kink, where no derivative exists.
fn kink_signature(layer: &Layer, store: &ParamStore, x: &Tensor) -> Vec<bool> {
    relu_inputs(layer, store, x).into_iter().map(|z| z > 0.0).collect()
}

fn relu_inputs(layer: &Layer, store: &ParamStore, x: &Tensor) -> Vec<f32> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let pre: Vec<Var> = match layer {
        Layer::Relu => vec![xv],
        Layer::Residual(r) => {
            let h = r.first.forward(&mut tape, store, xv).unwrap();
            let a = tape.relu(h);
            let y = r.second.forward(&mut tape, store, a).unwrap();
            let skip = match &r.projection {
                Some(p) => p.forward(&mut tape, store, xv).unwrap(),
                None => xv,
            };
            let y = tape.add(y, skip).unwrap();
            if r.final_relu {
                vec![h, y]
            } else {
                vec![h]
            }
        }
        _ => vec![],
    };
    pre.into_iter()
        .flat_map(|v| tape.value(v).data().to_vec())
        .collect()
}

/// Outcome of one layer check.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    /// Worst norm-wise relative error over the input and each parameter tensor.
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes skipped because they straddle a kink.
    pub kinks: usize,
}

/// Input shape used for each layer kind.
pub fn input_shape(kind: LayerKind) -> (Vec<usize>, usize, usize) {
    match kind {
        LayerKind::Dense => (vec![5, 7], 7, 4),
        LayerKind::Conv3x3 => (vec![3, 6, 5], 3, 4),
        LayerKind::Relu => (vec![4, 9], 9, 9),
        LayerKind::ResidualBlock => (vec![3, 5, 6], 3, 5),
        LayerKind::DenseResidualBlock => (vec![6, 5], 5, 7),
        LayerKind::SelfAttention => (vec![3, 64], 64, 64),
    }
}

fn loss(values: &[f32], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(&v, &w)| v as f64 * w).sum()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_input(shape: &[usize], kind: LayerKind, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.random_range(-1.0..1.0);
        // keep bare ReLU inputs off the kink
        if kind == LayerKind::Relu && v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Compares analytic gradients of the layer input and every parameter tensor
/// against central differences of a random linear functional of the output.
pub fn check_layer(kind: LayerKind, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shape, i, o) = input_shape(kind);
    let mut store = ParamStore::new();
    let layer = LayerSpec::new(kind, i, o).build(&mut store, "l", &mut rng).unwrap();
    // Biases start at zero; randomize everything so no term is trivially exact.
    // Redraw until every ReLU input is clear of its kink.
    let x = loop {
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = random_input(&shape, kind, &mut rng);
        if relu_inputs(&layer, &store, &x).iter().all(|z| z.abs() >= KINK_MARGIN) {
            break x;
        }
    };

    let forward = |store: &ParamStore, x: &Tensor| -> Vec<f32> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = layer.forward(&mut tape, store, xv).unwrap();
        tape.value(y).data().to_vec()
    };

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = layer.forward(&mut tape, &store, xv).unwrap();
    let out_shape = tape.value(y).shape().to_vec();
    let n_out: usize = out_shape.iter().product();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let seed_t = Tensor::new(out_shape, weights.iter().map(|&w| w as f32).collect()).unwrap();
    store.zero_grad();
    let grads = tape.backward_from(y, seed_t, &mut store).unwrap();

    let base_sig = kink_signature(&layer, &store, &x);
    let step = if kind == LayerKind::SelfAttention { SMOOTH_STEP } else { STEP } as f32;
    let mut worst: f64 = 0.0;
    let (mut n_probes, mut kinks) = (0, 0);
    let probes = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= MAX_PROBES {
            (0..len).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
        }
    };

    let gx = grads.get(xv).unwrap().data().to_vec();
    let idx = probes(x.len(), &mut rng);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &k in &idx {
        let mut xp = x.clone();
        xp.data_mut()[k] += step;
        let mut xm = x.clone();
        xm.data_mut()[k] -= step;
        n_probes += 1;
        if kink_signature(&layer, &store, &xp) != base_sig || kink_signature(&layer, &store, &xm) != base_sig {
            kinks += 1;
            continue;
        }
        let h = xp.data()[k] as f64 - xm.data()[k] as f64;
        numeric.push((loss(&forward(&store, &xp), &weights) - loss(&forward(&store, &xm), &weights)) / h);
        analytic.push(gx[k] as f64);
    }
    worst = worst.max(rel_err(&analytic, &numeric));

    for id in store.ids().collect::<Vec<_>>() {
        let g = store.grad(id).unwrap().data().to_vec();
        let idx = probes(g.len(), &mut rng);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &k in &idx {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let up = store.value(id).data()[k] as f64;
            let lp = loss(&forward(&store, &x), &weights);
            let crosses_up = kink_signature(&layer, &store, &x) != base_sig;
            store.value_mut(id).data_mut()[k] = orig - step;
            let down = store.value(id).data()[k] as f64;
            let lm = loss(&forward(&store, &x), &weights);
            let crosses_down = kink_signature(&layer, &store, &x) != base_sig;
            store.value_mut(id).data_mut()[k] = orig;
            n_probes += 1;
            if crosses_up || crosses_down {
                kinks += 1;
                continue;
            }
            numeric.push((lp - lm) / (up - down));
            analytic.push(g[k] as f64);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    CheckResult {
        max_rel_err: worst,
        probes: n_probes,
        kinks,
    }
}

pub const ALL_KINDS: [LayerKind; 6] = [
    LayerKind::Dense,
    LayerKind::Conv3x3,
    LayerKind::Relu,
    LayerKind::ResidualBlock,
    LayerKind::DenseResidualBlock,
    LayerKind::SelfAttention,
];

