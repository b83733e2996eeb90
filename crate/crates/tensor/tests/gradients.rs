use featinv_tensor::gradcheck::check_gradient;
use featinv_tensor::{concat, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn all_coords(t: &Tensor, max: usize) -> Vec<usize> {
    let step = (t.numel() / max).max(1);
    (0..t.numel()).step_by(step).take(max).collect()
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn project<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Var<'g> {
    let w = g.constant(random(y.shape(), seed));
    y.mul(w).sum()
}

fn assert_grad<F>(x: &Tensor, f: F)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let coords = all_coords(x, 24);
    let chk = check_gradient(x, &coords, 1e-5, f);
    let err = chk.max_relative_error(1e-6);
    assert!(err < 1e-5, "relative error {err}: {:?}", chk.probes);
}

#[test]
fn elementwise_ops() {
    let x = random(vec![3, 4], 1);
    assert_grad(&x, |g, v| project(g, v.square(), 2));
    assert_grad(&x, |g, v| project(g, v.sigmoid(), 3));
    assert_grad(&x, |g, v| project(g, v.tanh(), 4));
    assert_grad(&x, |g, v| project(g, v.gelu(), 5));
    assert_grad(&x, |g, v| project(g, v.scale(3.0).log_cosh(), 6));
    assert_grad(&x, |g, v| project(g, v.leaky_relu(0.2), 7));
    assert_grad(&x, |g, v| {
        let c = g.constant(random(vec![3, 4], 8));
        project(g, v.mul(c).sub(v.square()).add(c), 9)
    });
    assert_grad(&x, |g, v| {
        let c = g.constant(random(vec![3, 4], 10));
        v.mse(c)
    });
    assert_grad(&x, |_, v| v.mean().add(v.sum().scale(0.5)));
}

#[test]
fn shape_ops() {
    let x = random(vec![2, 5, 3], 11);
    assert_grad(&x, |g, v| project(g, v.narrow(1, 1, 3), 12));
    assert_grad(&x, |g, v| {
        let a = v.narrow(2, 0, 1);
        let b = v.narrow(2, 1, 2);
        project(g, concat(&[b, a, b], 2), 13)
    });
    assert_grad(&x, |g, v| project(g, v.reshape(vec![10, 3]).transpose_last2(), 14));
    assert_grad(&x, |g, v| project(g, v.mean_last(), 15));
}

#[test]
fn dense_ops() {
    let x = random(vec![4, 3], 20);
    assert_grad(&x, |g, v| {
        let w = g.constant(random(vec![3, 5], 21));
        project(g, v.matmul(w), 22)
    });
    let w = random(vec![3, 5], 23);
    assert_grad(&w, |g, v| {
        let a = g.constant(random(vec![4, 3], 24));
        project(g, a.matmul(v), 25)
    });
    let b = random(vec![2, 3, 4], 26);
    assert_grad(&b, |g, v| {
        let o = g.constant(random(vec![2, 4, 2], 27));
        project(g, v.bmm(o), 28)
    });
    assert_grad(&b, |g, v| {
        let o = g.constant(random(vec![2, 5, 3], 29));
        project(g, o.bmm(v), 30)
    });
    assert_grad(&x, |g, v| project(g, v.softmax_last(), 31));
    assert_grad(&x, |g, v| project(g, v.standardize_last(1e-5), 32));
    assert_grad(&x, |g, v| project(g, v.standardize_last(0.0), 33));
    assert_grad(&x, |_, v| v.scale(2.0).cross_entropy(&[0, 2, 1, 1]));
    let gain = random(vec![3], 34);
    assert_grad(&gain, |g, v| {
        let a = g.constant(random(vec![4, 3], 35));
        project(g, a.mul_last(v).add_bias_last(v), 36)
    });
    assert_grad(&x, |g, v| {
        let gn = g.constant(random(vec![3], 37));
        project(g, v.mul_last(gn).add_bias_last(gn), 38)
    });
}

#[test]
fn convolutions() {
    let x = random(vec![2, 3, 6, 5], 40);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        assert_grad(&x, |g, v| {
            let w = g.constant(random(vec![4, 3, 3, 3], 41));
            project(g, v.conv2d(w, stride, pad), 42)
        });
        let w = random(vec![4, 3, 3, 3], 43);
        assert_grad(&w, |g, v| {
            let inp = g.constant(random(vec![2, 3, 6, 5], 44));
            project(g, inp.conv2d(v, stride, pad), 45)
        });
    }
    let y = random(vec![2, 3, 4, 3], 46);
    assert_grad(&y, |g, v| {
        let w = g.constant(random(vec![3, 2, 4, 4], 47));
        project(g, v.conv_transpose2d(w, 2, 1, 0), 48)
    });
    let w = random(vec![3, 2, 3, 3], 49);
    assert_grad(&w, |g, v| {
        let inp = g.constant(random(vec![2, 3, 4, 3], 50));
        project(g, inp.conv_transpose2d(v, 2, 1, 1), 51)
    });
}

#[test]
fn spatial_ops() {
    let x = random(vec![2, 3, 6, 6], 60);
    assert_grad(&x, |g, v| project(g, v.avg_pool2d(2), 61));
    assert_grad(&x, |g, v| project(g, v.global_avg_pool(), 62));
    assert_grad(&x, |g, v| project(g, v.resize_bilinear(4, 9), 63));
    assert_grad(&x, |g, v| project(g, v.resize_bilinear(13, 5), 64));
    assert_grad(&x, |_, v| v.total_variation());
    assert_grad(&x, |g, v| project(g, v.standardize_channels(1e-5), 65));
    let c = random(vec![3], 66);
    assert_grad(&c, |g, v| {
        let a = g.constant(random(vec![2, 3, 6, 6], 67));
        project(g, a.mul_channel(v).add_channel(v), 68)
    });
    assert_grad(&x, |g, v| {
        let gn = g.constant(random(vec![3], 69));
        let b = g.constant(random(vec![2, 3], 70));
        project(g, v.mul_channel(gn).add_channel(gn).add_sample_channel(b), 71)
    });
    let b = random(vec![2, 3], 72);
    assert_grad(&b, |g, v| {
        let a = g.constant(random(vec![2, 3, 6, 6], 73));
        project(g, a.add_sample_channel(v), 74)
    });
}

/// Brute-force reference for the total-variation op.
fn tv_oracle(t: &Tensor) -> f64 {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let at = |b: usize, ch: usize, i: usize, j: usize| t.data()[((b * c + ch) * h + i) * w + j];
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for (di, dj) in [(1, 0), (0, 1)] {
                        if i + di < h && j + dj < w {
                            let d = at(b, ch, i + di, j + dj) - at(b, ch, i, j);
                            total += d * d;
                        }
                    }
                }
            }
        }
    }
    total / (n * h * w) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// <conv(x), y> == <x, conv_transpose(y)> for shared weights.
    #[test]
    fn conv_transpose_is_adjoint(seed in 0u64..1000, stride in 1usize..3) {
        let g = Graph::new();
        let w = random(vec![4, 3, 3, 3], seed);
        let x = g.constant(random(vec![1, 3, 7, 6], seed + 1));
        let y = x.conv2d(g.constant(w.clone()), stride, 1);
        let r = g.constant(random(y.shape(), seed + 2));
        let lhs = y.mul(r).sum().item();
        // conv_transpose weight layout is [in, out, kh, kw] = [4, 3, 3, 3].
        let out_pad = if stride == 2 { 1 } else { 0 };
        let back = r.conv_transpose2d(g.constant(w), stride, 1, out_pad);
        prop_assume!(back.shape() == x.shape());
        let rhs = back.mul(x).sum().item();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tv_matches_pairwise_oracle(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7) {
        let t = random(vec![2, 3, h, w], seed);
        let g = Graph::new();
        let got = g.constant(t.clone()).total_variation().item();
        prop_assert!((got - tv_oracle(&t)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_layer_trains_and_evaluates() {
    use featinv_tensor::module::{apply_norm_stats, Ctx};
    use featinv_tensor::nn::BatchNorm2d;

    let mut bn = BatchNorm2d::new(3);
    let x = random(vec![4, 3, 2, 2], 80).map(|v| 2.0 * v + 1.0);
    let g = Graph::new();
    let mut ctx = Ctx::training(&g);
    let y = bn.forward(&mut ctx, g.constant(x.clone()));
    let out = y.to_tensor();
    assert!(out.mean().abs() < 1e-9);
    let stats = ctx.take_norm_stats();
    apply_norm_stats(&mut bn, &stats, 1.0);
    // With momentum 1 the running stats equal the batch stats, so the
    // inference path reproduces the training output.
    let g2 = Graph::new();
    let mut frozen = Ctx::frozen(&g2);
    let y2 = bn.forward(&mut frozen, g2.constant(x)).to_tensor();
    for (a, b) in out.data().iter().zip(y2.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}
