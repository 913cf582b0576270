mod common;

use airtemp_core::nn::{conv2d_forward, dense_forward, relu_forward, self_attention_forward, LayerKind, LayerSpec, ParamStore};
use airtemp_core::{Error, Tensor};
use common::gradcheck::{check_layer, ALL_KINDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = w.shape()[0];
    let mut out = vec![0.0f64; o * h * wd];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[oc] as f64;
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ic * h + sy as usize) * wd + sx as usize] as f64;
                            let wv = w.data()[((oc * c + ic) * 3 + ky) * 3 + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn attention_oracle(x: &[f32], wq: &[f32], wk: &[f32], wv: &[f32]) -> Vec<f64> {
    let proj = |w: &[f32]| -> Vec<f64> {
        let mut out = vec![0.0; 64];
        for t in 0..8 {
            for o in 0..8 {
                out[t * 8 + o] = (0..8).map(|i| x[t * 8 + i] as f64 * w[o * 8 + i] as f64).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut y: Vec<f64> = x.iter().map(|&a| a as f64).collect();
    for i in 0..8 {
        let scores: Vec<f64> = (0..8)
            .map(|j| (0..8).map(|d| q[i * 8 + d] * k[j * 8 + d]).sum::<f64>() / 8f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for d in 0..8 {
            y[i * 8 + d] += (0..8).map(|j| scores[j].exp() / z * v[j * 8 + d]).sum::<f64>();
        }
    }
    y
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() <= tol * (1.0 + w.abs()), "{g} vs {w}");
    }
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, o, h, w) in [(1, 1, 1, 1), (3, 4, 5, 7), (5, 2, 8, 3)] {
        let x = random(&[c, h, w], &mut rng);
        let wt = random(&[o, c, 3, 3], &mut rng);
        let b = random(&[o], &mut rng);
        let y = conv2d_forward(&x, &wt, &b).unwrap();
        assert_eq!(y.shape(), &[o, h, w]);
        assert_close(y.data(), &conv_oracle(&x, &wt, &b), 1e-5);
    }
}

#[test]
fn dense_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[6, 11], &mut rng);
    let w = random(&[4, 11], &mut rng);
    let b = random(&[4], &mut rng);
    let y = dense_forward(&x, &w, &b).unwrap();
    let mut want = Vec::new();
    for r in 0..6 {
        for o in 0..4 {
            want.push(b.data()[o] as f64 + (0..11).map(|i| x.data()[r * 11 + i] as f64 * w.data()[o * 11 + i] as f64).sum::<f64>());
        }
    }
    assert_close(y.data(), &want, 1e-5);
}

#[test]
fn relu_clamps_negatives_only() {
    let x = Tensor::new(vec![5], vec![-2.0, -0.0, 0.0, 1e-30, 3.5]).unwrap();
    assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 0.0, 1e-30, 3.5]);
}

#[test]
fn attention_matches_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 64], &mut rng);
    let (wq, wk, wv) = (random(&[8, 8], &mut rng), random(&[8, 8], &mut rng), random(&[8, 8], &mut rng));
    let y = self_attention_forward(&x, &wq, &wk, &wv).unwrap();
    for r in 0..4 {
        let want = attention_oracle(&x.data()[r * 64..(r + 1) * 64], wq.data(), wk.data(), wv.data());
        assert_close(&y.data()[r * 64..(r + 1) * 64], &want, 1e-5);
    }
}

#[test]
fn zero_queries_attend_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 64], &mut rng);
    let wv = random(&[8, 8], &mut rng);
    let zero = Tensor::zeros(&[8, 8]);
    let y = self_attention_forward(&x, &zero, &random(&[8, 8], &mut rng), &wv).unwrap();
    let v = attention_oracle(x.data(), zero.data(), zero.data(), wv.data());
    assert_close(y.data(), &v, 1e-5);
}

#[test]
fn gradients_match_finite_differences() {
    for kind in ALL_KINDS {
        for seed in 0..20 {
            let r = check_layer(kind, seed);
            assert!(r.max_rel_err < 1e-3, "{kind:?} seed {seed}: relative error {:.3e}", r.max_rel_err);
            assert!(r.kinks * 10 <= r.probes, "{kind:?} seed {seed}: {} of {} probes on kinks", r.kinks, r.probes);
        }
    }
}

#[test]
fn shape_mismatches_are_dimension_errors() {
    let x = Tensor::zeros(&[2, 3, 3]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    let b = Tensor::zeros(&[1]);
    assert!(matches!(conv2d_forward(&x, &w, &b), Err(Error::Dimension(_))));
    assert!(matches!(
        dense_forward(&Tensor::zeros(&[2, 5]), &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        self_attention_forward(&Tensor::zeros(&[2, 32]), &Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8, 8])),
        Err(Error::Dimension(_))
    ));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(LayerSpec::new(LayerKind::SelfAttention, 32, 32).build(&mut store, "a", &mut rng).is_err());
    assert!(LayerSpec::new(LayerKind::Relu, 3, 4).build(&mut store, "r", &mut rng).is_err());
}
