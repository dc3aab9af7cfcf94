use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "{what}[{i}]: {x} vs {y}");
    }
}

// ── Independent oracles ─────────────────────────────────────────────────

/// Six-loop cross-correlation, written without reference to the graph op.
fn conv2d_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bn in 0..n {
        for of in 0..f {
            for r in 0..oh {
                for s in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (r * stride + i) as isize - padding as isize;
                                let iw = (s * stride + j) as isize - padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += x.data()
                                        [((bn * c + ic) * h + ih as usize) * w + iw as usize]
                                        * k.data()[((of * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((bn * f + of) * oh + r) * ow + s] = acc;
                }
            }
        }
    }
    (out, vec![n, f, oh, ow])
}

/// Naive dot-product affine map.
fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = b.data()[j];
            for p in 0..d {
                acc += x.data()[i * d + p] * w.data()[p * k + j];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// Direct-summation cross entropy (no max-subtraction trick).
fn cross_entropy_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / sum).ln();
    }
    total / n as f64
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

// ── conv2d ──────────────────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel_copies_input() {
    let mut r = rng(0);
    let x = rand_tensor(vec![1, 1, 3, 3], &mut r);
    let k = Tensor::new(vec![1.0], vec![1, 1, 1, 1]).unwrap();
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(&x), g.constant(&k));
    let out = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_close(g.data(out), x.data(), 1e-15, "identity conv");
}

#[test]
fn conv2d_zero_kernel_gives_zero() {
    let mut r = rng(1);
    let x = rand_tensor(vec![2, 3, 5, 5], &mut r);
    let k = Tensor::zeros(vec![4, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(&x), g.constant(&k));
    let out = g.conv2d(xv, kv, 1, 1).unwrap();
    assert!(g.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_naive_loop_oracle() {
    let mut r = rng(2);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_tensor(vec![2, 3, 8, 8], &mut r);
        let k = rand_tensor(vec![4, 3, 3, 3], &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(&x), g.constant(&k));
        let out = g.conv2d(xv, kv, stride, padding).unwrap();
        let (expect, shape) = conv2d_oracle(&x, &k, stride, padding);
        assert_eq!(g.shape(out), &shape[..]);
        assert_close(g.data(out), &expect, 1e-10, "conv2d vs oracle");
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let x: Tensor = Tensor::zeros(vec![1, 3, 4, 4]);
    let k: Tensor = Tensor::zeros(vec![2, 4, 3, 3]);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(&x), g.constant(&k));
    let err = g.conv2d(xv, kv, 1, 0).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }), "got {err:?}");
}

// ── linear ──────────────────────────────────────────────────────────────

#[test]
fn linear_identity_weight_is_identity() {
    let mut r = rng(3);
    let x = rand_tensor(vec![3, 4], &mut r);
    let mut w: Tensor = Tensor::zeros(vec![4, 4]);
    for i in 0..4 {
        w.data_mut()[i * 4 + i] = 1.0;
    }
    let b = Tensor::zeros(vec![4]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
    let out = g.linear(xv, wv, bv).unwrap();
    assert_close(g.data(out), x.data(), 1e-15, "identity linear");
}

#[test]
fn linear_zero_weight_returns_bias_rows() {
    let x = Tensor::full(vec![3, 4], 7.0);
    let w = Tensor::zeros(vec![4, 2]);
    let b = Tensor::new(vec![0.5, -1.5], vec![2]).unwrap();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
    let out = g.linear(xv, wv, bv).unwrap();
    for row in 0..3 {
        assert_eq!(&g.data(out)[row * 2..row * 2 + 2], &[0.5, -1.5]);
    }
}

#[test]
fn linear_matches_naive_oracle() {
    let mut r = rng(4);
    let x = rand_tensor(vec![5, 7], &mut r);
    let w = rand_tensor(vec![7, 3], &mut r);
    let b = rand_tensor(vec![3], &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
    let out = g.linear(xv, wv, bv).unwrap();
    assert_close(g.data(out), &linear_oracle(&x, &w, &b), 1e-10, "linear vs oracle");
}

#[test]
fn linear_rejects_dimension_mismatch() {
    let x: Tensor = Tensor::zeros(vec![2, 3]);
    let w: Tensor = Tensor::zeros(vec![4, 2]);
    let b: Tensor = Tensor::zeros(vec![2]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
    assert!(g.linear(xv, wv, bv).is_err());
}

// ── elementwise and pooling ─────────────────────────────────────────────

#[test]
fn relu_clamps_negatives() {
    let x = Tensor::new(vec![-1.0, 0.0, 2.0], vec![3]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let out = g.relu(xv);
    assert_eq!(g.data(out), &[0.0, 0.0, 2.0]);
}

#[test]
fn global_avg_pool_of_constant_map() {
    let x = Tensor::full(vec![2, 3, 4, 4], 2.5);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let out = g.global_avg_pool(xv).unwrap();
    assert_eq!(g.shape(out), &[2, 3]);
    assert!(g.data(out).iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn avg_pool2d_two_by_two() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let out = g.avg_pool2d(xv, 2, 2).unwrap();
    assert_eq!(g.shape(out), &[1, 1, 1, 1]);
    assert!((g.data(out)[0] - 2.5).abs() < 1e-12);
}

// ── softmax cross entropy ───────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let logits: Tensor = Tensor::zeros(vec![4, 10]);
    let mut g = Graph::new();
    let lv = g.constant(&logits);
    let loss = g.softmax_cross_entropy(lv, &[0, 3, 5, 9]).unwrap();
    assert!((g.data(loss)[0] - 10.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_decreases_with_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 10.0, 100.0] {
        let mut logits: Tensor = Tensor::zeros(vec![1, 5]);
        logits.data_mut()[2] = margin;
        let mut g = Graph::new();
        let lv = g.constant(&logits);
        let loss = g.softmax_cross_entropy(lv, &[2]).unwrap();
        let l = g.data(loss)[0];
        assert!(l < last, "loss should fall as margin grows: {l} !< {last}");
        last = l;
    }
    assert!(last < 1e-10, "loss should approach zero at margin 100, got {last}");
}

#[test]
fn cross_entropy_matches_direct_summation_oracle() {
    let mut r = rng(5);
    let logits = rand_tensor(vec![6, 4], &mut r);
    let labels = [0, 1, 2, 3, 1, 2];
    let mut g = Graph::new();
    let lv = g.constant(&logits);
    let loss = g.softmax_cross_entropy(lv, &labels).unwrap();
    let expect = cross_entropy_oracle(&logits, &labels);
    assert!((g.data(loss)[0] - expect).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let logits: Tensor = Tensor::zeros(vec![2, 3]);
    let mut g = Graph::new();
    let lv = g.constant(&logits);
    let err = g.softmax_cross_entropy(lv, &[0, 3]).unwrap_err();
    assert!(matches!(err, TensorError::LabelOutOfRange { label: 3, classes: 3 }));
}

// ── backward ────────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0], vec![3]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    assert_close(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0], 1e-12, "d sum(x^2)");
}

#[test]
fn backward_unreached_leaf_gets_no_gradient() {
    let x = Tensor::new(vec![1.0], vec![1]).unwrap().with_grad();
    let y = Tensor::new(vec![5.0], vec![1]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let yv = g.leaf(&y);
    let loss = g.sum_all(xv);
    g.backward(loss).unwrap();
    assert!(g.grad(yv).is_none(), "loss does not depend on y");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let err = g.backward(xv).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn backward_scaling_is_linear() {
    let mut r = rng(6);
    let x = rand_tensor(vec![4, 3], &mut r).with_grad();
    let grads_for = |a: f64| {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let sq = g.mul(xv, xv).unwrap();
        let base = g.mean_all(sq);
        let loss = g.scale(base, a);
        g.backward(loss).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let g1 = grads_for(1.0);
    let g3 = grads_for(3.0);
    for (a, b) in g1.iter().zip(&g3) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn frozen_parameters_never_receive_gradients() {
    let mut store = ParamStore::new();
    let wid = store.add("w", Tensor::new(vec![2.0, -1.0], vec![2]).unwrap());
    store.get_mut(wid).frozen = true;
    let mut g = Graph::new();
    let wv = g.param(&store, wid);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    assert!(g.grad(wv).is_none());
    store.absorb_grads(&g);
    assert!(store.get(wid).value.grad.is_none());
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = Tensor::new(vec![1.5, -0.5], vec![2]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let d = g.detach(xv);
    let prod = g.mul(xv, d).unwrap();
    let loss = g.sum_all(prod);
    g.backward(loss).unwrap();
    // d(x * detach(x))/dx = detach(x), not 2x.
    assert_close(g.grad(xv).unwrap(), x.data(), 1e-12, "detached grad");
}

// ── finite-difference gradient checks over the full op set ──────────────

#[test]
fn gradcheck_composed_network_ops() {
    let mut r = rng(7);
    for case in 0..20 {
        let x = rand_tensor(vec![2, 3, 6, 6], &mut r);
        let k = rand_tensor(vec![4, 3, 3, 3], &mut r);
        let w = rand_tensor(vec![4, 3], &mut r);
        let b = rand_tensor(vec![3], &mut r);
        let labels = vec![r.random_range(0..3), r.random_range(0..3)];

        // Gradient w.r.t. the input through conv -> relu -> pool -> linear -> CE.
        let kc = k.clone();
        let wc = w.clone();
        let bc = b.clone();
        let lc = labels.clone();
        let err = finite_diff_check(
            move |g, xv| {
                let kv = g.constant(&kc);
                let c = g.conv2d(xv, kv, 1, 1)?;
                let a = g.relu(c);
                let p = g.avg_pool2d(a, 2, 2)?;
                let pooled = g.global_avg_pool(p)?;
                let wv = g.constant(&wc);
                let bv = g.constant(&bc);
                let logits = g.linear(pooled, wv, bv)?;
                g.softmax_cross_entropy(logits, &lc)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "case {case}: input gradcheck failed with {err}");

        // Gradient w.r.t. the kernel through the same pipeline.
        let xc = x.clone();
        let wc = w.clone();
        let bc = b.clone();
        let lc = labels.clone();
        let err = finite_diff_check(
            move |g, kv| {
                let xv = g.constant(&xc);
                let c = g.conv2d(xv, kv, 1, 1)?;
                let a = g.relu(c);
                let p = g.avg_pool2d(a, 2, 2)?;
                let pooled = g.global_avg_pool(p)?;
                let wv = g.constant(&wc);
                let bv = g.constant(&bc);
                let logits = g.linear(pooled, wv, bv)?;
                g.softmax_cross_entropy(logits, &lc)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "case {case}: kernel gradcheck failed with {err}");
    }
}

#[test]
fn gradcheck_stat_style_ops() {
    let mut r = rng(8);
    for case in 0..20 {
        let x = rand_tensor(vec![3, 4, 2, 2], &mut r);
        let c = Tensor::uniform(vec![4], 0.5, 1.5, &mut r);

        let cc = c.clone();
        let err = finite_diff_check(
            move |g, xv| {
                let mu = g.channel_mean(xv)?;
                let centered = g.channel_sub(xv, mu)?;
                let sq = g.mul(centered, centered)?;
                let var = g.channel_mean(sq)?;
                let shifted = g.add_scalar(var, 1e-3);
                let sigma = g.sqrt(shifted);
                let xhat = g.channel_div(centered, sigma)?;
                let cv = g.constant(&cc);
                let scaled = g.channel_mul(xhat, cv)?;
                let sp = g.softplus(scaled);
                Ok(g.mean_all(sp))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "case {case}: stat-op gradcheck failed with {err}");

        // Through the channel vector side: concat + slice + scale.
        let xc = x.clone();
        let err = finite_diff_check(
            move |g, cv| {
                let xv = g.constant(&xc);
                let half = g.scale(cv, 0.5);
                let both = g.concat(cv, half)?;
                let lo = g.slice(both, 0, 4)?;
                let hi = g.slice(both, 4, 4)?;
                let summed = g.add(lo, hi)?;
                let applied = g.channel_mul(xv, summed)?;
                Ok(g.mean_all(applied))
            },
            &c,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "case {case}: channel-vector gradcheck failed with {err}");
    }
}

#[test]
fn f32_tensors_run_the_same_ops() {
    let x: Tensor<f32> = Tensor::new(vec![1.0f32, -2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let xv = g.constant(&x);
    let r = g.relu(xv);
    let loss = g.mean_all(r);
    assert!((g.data(loss)[0] - 2.0).abs() < 1e-6);
}

// ── properties ──────────────────────────────────────────────────────────

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_conv2d_matches_oracle(seed in 0u64..500) {
        let mut r = rng(seed);
        let n = r.random_range(1..3usize);
        let c = r.random_range(1..4usize);
        let f = r.random_range(1..4usize);
        let h = r.random_range(3..7usize);
        let k = r.random_range(1..=3usize.min(h));
        let x = rand_tensor(vec![n, c, h, h], &mut r);
        let kern = rand_tensor(vec![f, c, k, k], &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(&x), g.constant(&kern));
        let out = g.conv2d(xv, kv, 1, 0).unwrap();
        let (expect, _) = conv2d_oracle(&x, &kern, 1, 0);
        for (a, b) in g.data(out).iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn prop_outputs_stay_finite(seed in 0u64..500) {
        let mut r = rng(seed);
        let x = rand_tensor(vec![2, 3, 4, 4], &mut r);
        let k = rand_tensor(vec![2, 3, 3, 3], &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(&x), g.constant(&k));
        let c = g.conv2d(xv, kv, 1, 1).unwrap();
        let a = g.relu(c);
        let p = g.global_avg_pool(a).unwrap();
        prop_assert!(g.check_finite(p, "pipeline").is_ok());
    }
}
