//! Matrix products and row-wise operations over the last axis.

use crate::graph::Var;
use crate::linalg::gemm;
use crate::tensor::Tensor;

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("row op on a scalar");
    (shape.iter().product::<usize>() / d.max(1), d)
}

/// Standardize each row in place; returns per-row inverse std.
fn standardize_rows(data: &mut [f64], rows: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * is;
        }
        inv.push(is);
    }
    inv
}

/// Backward of row standardization given normalized outputs `y`.
/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))`
pub(crate) fn standardize_backward(dy: &[f64], y: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..dy.len() {
        out[i] = inv_std * (dy[i] - mean_dy - y[i] * mean_dyy);
    }
}

impl<'g> Var<'g> {
    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                let (a, b) = (v[0], v[1]);
                assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                assert_eq!(k, b.shape()[0], "matmul inner dims {:?} {:?}", a.shape(), b.shape());
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
                Tensor::new(vec![m, n], c)
            },
            Box::new(|c| {
                let (a, b) = (c.inputs[0], c.inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let g = c.grad.data();
                let da = c.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut d, 0.0);
                    Tensor::new(vec![m, k], d)
                });
                let db = c.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut d, 0.0);
                    Tensor::new(vec![k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                let (a, b) = (v[0], v[1]);
                assert!(a.rank() == 3 && b.rank() == 3, "bmm expects rank-3 tensors");
                let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                assert_eq!(bs, b.shape()[0], "bmm batch mismatch");
                assert_eq!(k, b.shape()[1], "bmm inner dims");
                let mut c = vec![0.0; bs * m * n];
                for i in 0..bs {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        false,
                        &mut c[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                Tensor::new(vec![bs, m, n], c)
            },
            Box::new(|c| {
                let (a, b) = (c.inputs[0], c.inputs[1]);
                let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let g = c.grad.data();
                let da = c.needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    Tensor::new(a.shape().to_vec(), d)
                });
                let db = c.needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    Tensor::new(b.shape().to_vec(), d)
                });
                vec![da, db]
            }),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(self) -> Var<'g> {
        fn tr(t: &Tensor) -> Tensor {
            let s = t.shape();
            let r = s.len();
            assert!(r >= 2, "transpose_last2 on rank {r}");
            let (m, n) = (s[r - 2], s[r - 1]);
            let batches = t.numel() / (m * n).max(1);
            let mut out = vec![0.0; t.numel()];
            for b in 0..batches {
                let src = &t.data()[b * m * n..(b + 1) * m * n];
                let dst = &mut out[b * m * n..(b + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, out)
        }
        self.graph
            .op(&[self], |v| tr(v[0]), Box::new(|c| vec![Some(tr(c.grad))]))
    }

    /// Add `bias[d]` to every row of `[..., d]`.
    pub fn add_bias_last(self, bias: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, bias],
            |v| {
                let (rows, d) = split_last(v[0].shape());
                assert_eq!(v[1].shape(), &[d], "add_bias_last: bias shape");
                let mut out = v[0].clone();
                for r in 0..rows {
                    for (x, b) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(v[1].data()) {
                        *x += b;
                    }
                }
                out
            },
            Box::new(|c| {
                let (rows, d) = split_last(c.grad.shape());
                let db = c.needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for (a, g) in acc.iter_mut().zip(&c.grad.data()[r * d..(r + 1) * d]) {
                            *a += g;
                        }
                    }
                    Tensor::new(vec![d], acc)
                });
                vec![Some(c.grad.clone()), db]
            }),
        )
    }

    /// Multiply every row of `[..., d]` by `gain[d]`.
    pub fn mul_last(self, gain: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, gain],
            |v| {
                let (rows, d) = split_last(v[0].shape());
                assert_eq!(v[1].shape(), &[d], "mul_last: gain shape");
                let mut out = v[0].clone();
                for r in 0..rows {
                    for (x, g) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(v[1].data()) {
                        *x *= g;
                    }
                }
                out
            },
            Box::new(|c| {
                let (rows, d) = split_last(c.grad.shape());
                let (x, gain, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let dx = c.needs[0].then(|| {
                    let mut out = c.grad.clone();
                    for r in 0..rows {
                        for (o, gv) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gain) {
                            *o *= gv;
                        }
                    }
                    out
                });
                let dg = c.needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * x[r * d + j];
                        }
                    }
                    Tensor::new(vec![d], acc)
                });
                vec![dx, dg]
            }),
        )
    }

    /// Zero-mean, unit-variance rows over the last axis, using the
    /// population variance plus `eps`.
    pub fn standardize_last(self, eps: f64) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| {
                let (rows, d) = split_last(v[0].shape());
                let mut out = v[0].clone();
                standardize_rows(out.data_mut(), rows, d, eps);
                out
            },
            Box::new(move |c| {
                let (rows, d) = split_last(c.grad.shape());
                let x = c.inputs[0].data();
                let y = c.output.data();
                let g = c.grad.data();
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let sl = r * d..(r + 1) * d;
                    standardize_backward(&g[sl.clone()], &y[sl.clone()], inv, &mut dx[sl]);
                }
                vec![Some(Tensor::new(c.grad.shape().to_vec(), dx))]
            }),
        )
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(self) -> Var<'g> {
        self.graph.op(
            &[self],
            |v| {
                let s = v[0].shape();
                let (rows, d) = split_last(s);
                let x = v[0].data();
                let out = (0..rows).map(|r| x[r * d..(r + 1) * d].iter().sum::<f64>() / d as f64).collect();
                Tensor::new(s[..s.len() - 1].to_vec(), out)
            },
            Box::new(|c| {
                let (_, d) = split_last(c.inputs[0].shape());
                let g = c.grad.data();
                vec![Some(Tensor::from_fn(c.inputs[0].shape().to_vec(), |i| g[i / d] / d as f64))]
            }),
        )
    }

    pub fn softmax_last(self) -> Var<'g> {
        self.graph.op(
            &[self],
            |v| {
                let (rows, d) = split_last(v[0].shape());
                let mut out = v[0].clone();
                for r in 0..rows {
                    let row = &mut out.data_mut()[r * d..(r + 1) * d];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                out
            },
            Box::new(|c| {
                let (rows, d) = split_last(c.grad.shape());
                let y = c.output.data();
                let g = c.grad.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let sl = r * d..(r + 1) * d;
                    let dot: f64 = g[sl.clone()].iter().zip(&y[sl.clone()]).map(|(a, b)| a * b).sum();
                    for i in sl {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(Tensor::new(c.grad.shape().to_vec(), dx))]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of logits `[n, classes]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g> {
        let labels = labels.to_vec();
        let labels_b = labels.clone();
        self.graph.op(
            &[self],
            move |v| {
                let (rows, d) = split_last(v[0].shape());
                assert_eq!(rows, labels.len(), "cross_entropy: label count");
                let x = v[0].data();
                let mut total = 0.0;
                for (r, &l) in labels.iter().enumerate() {
                    assert!(l < d, "cross_entropy: label {l} out of {d} classes");
                    let row = &x[r * d..(r + 1) * d];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    total += lse - row[l];
                }
                Tensor::scalar(total / rows as f64)
            },
            Box::new(move |c| {
                let (rows, d) = split_last(c.inputs[0].shape());
                let x = c.inputs[0].data();
                let k = c.grad.item() / rows as f64;
                let mut dx = vec![0.0; x.len()];
                for (r, &l) in labels_b.iter().enumerate() {
                    let row = &x[r * d..(r + 1) * d];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..d {
                        let p = (row[j] - m).exp() / s;
                        dx[r * d + j] = k * (p - if j == l { 1.0 } else { 0.0 });
                    }
                }
                vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), dx))]
            }),
        )
    }
}
