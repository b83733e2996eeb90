//! Elementwise arithmetic, activations, reductions and reshaping.

use crate::graph::Var;
use crate::tensor::{numel, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

/// `ln cosh(t)` without overflow for large `|t|`.
pub fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl<'g> Var<'g> {
    fn unary_map(self, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'g> {
        // df receives (input, output)
        self.graph.op(
            &[self],
            |v| v[0].map(f),
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let y = c.output.data();
                let g = c.grad.data();
                let d = (0..x.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(c.grad.shape().to_vec(), d))]
            }),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                same_shape(v[0], v[1], "add");
                v[0].zip_map(v[1], |a, b| a + b)
            },
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                same_shape(v[0], v[1], "sub");
                v[0].zip_map(v[1], |a, b| a - b)
            },
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                same_shape(v[0], v[1], "mul");
                v[0].zip_map(v[1], |a, b| a * b)
            },
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, b| g * b)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| v[0].map(|x| x * s),
            Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| v[0].map(|x| x + s),
            Box::new(|c| vec![Some(c.grad.clone())]),
        )
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary_map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary_map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| v[0].map(|x| if x > 0.0 { x } else { slope * x }),
            Box::new(move |c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { slope * g }),
                )]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary_map(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary_map(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary_map(gelu, |x, _| gelu_grad(x))
    }

    /// Overflow-safe `ln cosh(x)`.
    pub fn log_cosh(self) -> Var<'g> {
        self.unary_map(log_cosh, |x, _| x.tanh())
    }

    pub fn sum(self) -> Var<'g> {
        self.graph.op(
            &[self],
            |v| Tensor::scalar(v[0].sum()),
            Box::new(|c| {
                let g = c.grad.item();
                vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g> {
        self.graph.op(
            &[self],
            |v| Tensor::scalar(v[0].mean()),
            Box::new(|c| {
                let n = c.inputs[0].numel() as f64;
                let g = c.grad.item() / n;
                vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Mean of `(self - other)^2` over all elements.
    pub fn mse(self, other: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, other],
            |v| {
                same_shape(v[0], v[1], "mse");
                let s: f64 = v[0]
                    .data()
                    .iter()
                    .zip(v[1].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Tensor::scalar(s / v[0].numel() as f64)
            },
            Box::new(|c| {
                let k = 2.0 * c.grad.item() / c.inputs[0].numel() as f64;
                let d = c.inputs[0].zip_map(c.inputs[1], |a, b| k * (a - b));
                let db = c.needs[1].then(|| d.map(|x| -x));
                vec![c.needs[0].then_some(d), db]
            }),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let shape = shape.into();
        self.graph.op(
            &[self],
            move |v| v[0].clone().reshape(shape),
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape().to_vec()))]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| {
                let x = v[0];
                let s = x.shape();
                assert!(axis < s.len(), "narrow: axis {axis} of {s:?}");
                assert!(start + len <= s[axis], "narrow: range out of bounds for {s:?}");
                let outer = numel(&s[..axis]);
                let inner = numel(&s[axis + 1..]);
                let mut shape = s.to_vec();
                shape[axis] = len;
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * s[axis] + start) * inner;
                    out.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                Tensor::new(shape, out)
            },
            Box::new(move |c| {
                let s = c.inputs[0].shape();
                let outer = numel(&s[..axis]);
                let inner = numel(&s[axis + 1..]);
                let mut d = Tensor::zeros(s.to_vec());
                let g = c.grad.data();
                for o in 0..outer {
                    let base = (o * s[axis] + start) * inner;
                    let src = o * len * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(d)]
            }),
        )
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty(), "concat of nothing");
    let g = vars[0].graph;
    g.op(
        vars,
        move |v| {
            let first = v[0].shape();
            let outer = numel(&first[..axis]);
            let inner = numel(&first[axis + 1..]);
            let mut total = 0;
            for t in v {
                let s = t.shape();
                assert_eq!(s.len(), first.len(), "concat: rank mismatch");
                for (d, (&a, &b)) in s.iter().zip(first).enumerate() {
                    assert!(d == axis || a == b, "concat: shape mismatch {s:?} vs {first:?}");
                }
                total += s[axis];
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in v {
                    let w = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(shape, out)
        },
        Box::new(move |c| {
            let s = c.grad.shape();
            let outer = numel(&s[..axis]);
            let inner = numel(&s[axis + 1..]);
            let mut offset = 0;
            c.inputs
                .iter()
                .zip(c.needs)
                .map(|(t, &need)| {
                    let w = t.shape()[axis] * inner;
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = o * s[axis] * inner + start;
                            d.extend_from_slice(&c.grad.data()[base..base + w]);
                        }
                        Tensor::new(t.shape().to_vec(), d)
                    })
                })
                .collect()
        }),
    )
}

/// Elementwise sum of equally shaped variables.
pub fn add_all<'g>(vars: &[Var<'g>]) -> Var<'g> {
    assert!(!vars.is_empty(), "add_all of nothing");
    let g = vars[0].graph;
    g.op(
        vars,
        |v| {
            let mut acc = v[0].clone();
            for t in &v[1..] {
                acc.add_scaled(t, 1.0);
            }
            acc
        },
        Box::new(|c| c.needs.iter().map(|&n| n.then(|| c.grad.clone())).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn log_cosh_is_stable() {
        assert_eq!(log_cosh(0.0), 0.0);
        let big = log_cosh(2000.0);
        assert!(big.is_finite());
        assert!((big - (2000.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(vec![2, 5, 3], |i| i as f64));
        let a = x.narrow(1, 0, 2);
        let b = x.narrow(1, 2, 3);
        let y = concat(&[a, b], 1);
        assert_eq!(*y.value(), *x.value());
        let grads = g.backward(y.square().sum());
        let want = x.value().map(|v| 2.0 * v);
        assert_eq!(grads.get(x).unwrap(), &want);
    }

    #[test]
    fn mse_grad_to_both_sides() {
        let g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 3.0]));
        let b = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]));
        let l = a.mse(b);
        assert_eq!(l.item(), 5.0);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[-1.0, -3.0]);
    }
}
