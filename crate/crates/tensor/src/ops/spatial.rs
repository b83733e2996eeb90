//! Operations on `[batch, channels, height, width]` tensors.

use crate::graph::Var;
use crate::linalg::gemm;
use crate::ops::dense::standardize_backward;
use crate::tensor::Tensor;

fn nchw(t: &Tensor, op: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{op}: expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Geometry of a strided, zero-padded 2-D window sweep.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `img [c, h, w] -> cols [c*kh*kw, oh*ow]`
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.oh, self.ow);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulate columns back into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.oh, self.ow);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

/// Output size of a transposed convolution along one axis.
pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    ((input.max(1) - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation; `weight` is `[out, in, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let geom = move |x: &Tensor, w: &Tensor| {
            let (_, c, h, wd) = nchw(x, "conv2d");
            let ws = w.shape();
            assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
            assert_eq!(ws[1], c, "conv2d: weight expects {} input channels, got {c}", ws[1]);
            let oh = conv_out_size(h, ws[2], stride, pad).expect("conv2d: kernel larger than input");
            let ow = conv_out_size(wd, ws[3], stride, pad).expect("conv2d: kernel larger than input");
            Window { c, h, w: wd, kh: ws[2], kw: ws[3], stride, pad, oh, ow }
        };
        self.graph.op(
            &[self, weight],
            move |v| {
                let (x, w) = (v[0], v[1]);
                let win = geom(x, w);
                let n = x.shape()[0];
                let co = w.shape()[0];
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut out = vec![0.0; n * co * win.cols()];
                let in_sz = win.c * win.h * win.w;
                for b in 0..n {
                    win.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
                    gemm(
                        co,
                        win.rows(),
                        win.cols(),
                        w.data(),
                        false,
                        &cols,
                        false,
                        &mut out[b * co * win.cols()..(b + 1) * co * win.cols()],
                        0.0,
                    );
                }
                Tensor::new(vec![n, co, win.oh, win.ow], out)
            },
            Box::new(move |c| {
                let (x, w) = (c.inputs[0], c.inputs[1]);
                let win = geom(x, w);
                let n = x.shape()[0];
                let co = w.shape()[0];
                let in_sz = win.c * win.h * win.w;
                let out_sz = co * win.cols();
                let g = c.grad.data();
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut dx = c.needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = c.needs[1].then(|| vec![0.0; w.numel()]);
                for b in 0..n {
                    let gb = &g[b * out_sz..(b + 1) * out_sz];
                    if let Some(dw) = dw.as_mut() {
                        win.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
                        gemm(co, win.cols(), win.rows(), gb, false, &cols, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(win.rows(), co, win.cols(), w.data(), true, gb, false, &mut cols, 0.0);
                        win.col2im(&cols, &mut dx[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
                ]
            }),
        )
    }

    /// Transposed convolution; `weight` is `[in, out, kh, kw]`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g> {
        // The output image plays the role of a conv2d input.
        let geom = move |x: &Tensor, w: &Tensor| {
            let (_, ci, h, wd) = nchw(x, "conv_transpose2d");
            let ws = w.shape();
            assert_eq!(ws.len(), 4, "conv_transpose2d weight must be rank 4");
            assert_eq!(ws[0], ci, "conv_transpose2d: weight expects {} input channels, got {ci}", ws[0]);
            assert!(out_pad < stride.max(1), "conv_transpose2d: out_pad must be < stride");
            let oh = conv_transpose_out_size(h, ws[2], stride, pad, out_pad)
                .expect("conv_transpose2d: padding too large");
            let ow = conv_transpose_out_size(wd, ws[3], stride, pad, out_pad)
                .expect("conv_transpose2d: padding too large");
            Window { c: ws[1], h: oh, w: ow, kh: ws[2], kw: ws[3], stride, pad, oh: h, ow: wd }
        };
        self.graph.op(
            &[self, weight],
            move |v| {
                let (x, w) = (v[0], v[1]);
                let win = geom(x, w);
                let n = x.shape()[0];
                let ci = w.shape()[0];
                let in_sz = ci * win.cols();
                let out_sz = win.c * win.h * win.w;
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut out = vec![0.0; n * out_sz];
                for b in 0..n {
                    gemm(
                        win.rows(),
                        ci,
                        win.cols(),
                        w.data(),
                        true,
                        &x.data()[b * in_sz..(b + 1) * in_sz],
                        false,
                        &mut cols,
                        0.0,
                    );
                    win.col2im(&cols, &mut out[b * out_sz..(b + 1) * out_sz]);
                }
                Tensor::new(vec![n, win.c, win.h, win.w], out)
            },
            Box::new(move |c| {
                let (x, w) = (c.inputs[0], c.inputs[1]);
                let win = geom(x, w);
                let n = x.shape()[0];
                let ci = w.shape()[0];
                let in_sz = ci * win.cols();
                let out_sz = win.c * win.h * win.w;
                let g = c.grad.data();
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut dx = c.needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = c.needs[1].then(|| vec![0.0; w.numel()]);
                for b in 0..n {
                    win.im2col(&g[b * out_sz..(b + 1) * out_sz], &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            ci,
                            win.rows(),
                            win.cols(),
                            w.data(),
                            false,
                            &cols,
                            false,
                            &mut dx[b * in_sz..(b + 1) * in_sz],
                            0.0,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            ci,
                            win.cols(),
                            win.rows(),
                            &x.data()[b * in_sz..(b + 1) * in_sz],
                            false,
                            &cols,
                            true,
                            dw,
                            1.0,
                        );
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
                ]
            }),
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool2d(self, k: usize) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| {
                let (n, c, h, w) = nchw(v[0], "avg_pool2d");
                assert!(k > 0 && h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
                let (oh, ow) = (h / k, w / k);
                let x = v[0].data();
                let scale = 1.0 / (k * k) as f64;
                let mut out = vec![0.0; n * c * oh * ow];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            out[(p * oh + y / k) * ow + xx / k] += x[(p * h + y) * w + xx] * scale;
                        }
                    }
                }
                Tensor::new(vec![n, c, oh, ow], out)
            },
            Box::new(move |c| {
                let (n, ch, h, w) = nchw(c.inputs[0], "avg_pool2d");
                let (oh, ow) = (h / k, w / k);
                let g = c.grad.data();
                let scale = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; n * ch * h * w];
                for p in 0..n * ch {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] = g[(p * oh + y / k) * ow + xx / k] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), dx))]
            }),
        )
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(self) -> Var<'g> {
        let (n, c, h, w) = nchw(&self.value(), "global_avg_pool");
        self.reshape(vec![n, c, h * w]).mean_last()
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let (n, c, h, w) = nchw(&self.value(), "resize_bilinear");
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let (ty_b, tx_b) = (ty.clone(), tx.clone());
        self.graph.op(
            &[self],
            move |v| {
                let x = v[0].data();
                let mut out = vec![0.0; n * c * out_h * out_w];
                for p in 0..n * c {
                    let src = &x[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                            out[(p * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
                        }
                    }
                }
                Tensor::new(vec![n, c, out_h, out_w], out)
            },
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty_b.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx_b.iter().enumerate() {
                            let gv = g[(p * out_h + oy) * out_w + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            }),
        )
    }

    /// Squared-difference total variation, averaged over the batch:
    /// `(1/HW) * sum_c sum_ij (x[i+1,j]-x[i,j])^2 + (x[i,j+1]-x[i,j])^2`,
    /// with differences taken only where the neighbour exists.
    pub fn total_variation(self) -> Var<'g> {
        self.graph.op(
            &[self],
            |v| {
                let (n, c, h, w) = nchw(v[0], "total_variation");
                let x = v[0].data();
                let mut total = 0.0;
                for p in 0..n * c {
                    let s = &x[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let here = s[i * w + j];
                            if i + 1 < h {
                                let d = s[(i + 1) * w + j] - here;
                                total += d * d;
                            }
                            if j + 1 < w {
                                let d = s[i * w + j + 1] - here;
                                total += d * d;
                            }
                        }
                    }
                }
                Tensor::scalar(total / (n * h * w) as f64)
            },
            Box::new(|cx| {
                let (n, c, h, w) = nchw(cx.inputs[0], "total_variation");
                let x = cx.inputs[0].data();
                let k = 2.0 * cx.grad.item() / (n * h * w) as f64;
                let mut dx = vec![0.0; x.len()];
                for p in 0..n * c {
                    let base = p * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let at = base + i * w + j;
                            if i + 1 < h {
                                let d = k * (x[at + w] - x[at]);
                                dx[at + w] += d;
                                dx[at] -= d;
                            }
                            if j + 1 < w {
                                let d = k * (x[at + 1] - x[at]);
                                dx[at + 1] += d;
                                dx[at] -= d;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(cx.inputs[0].shape().to_vec(), dx))]
            }),
        )
    }

    /// Add `bias[c]` to every pixel of channel `c`.
    pub fn add_channel(self, bias: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, bias],
            |v| {
                let (n, c, h, w) = nchw(v[0], "add_channel");
                assert_eq!(v[1].shape(), &[c], "add_channel: bias shape");
                let mut out = v[0].clone();
                let hw = h * w;
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += v[1].data()[(i / hw) % c];
                }
                let _ = n;
                out
            },
            Box::new(|cx| {
                let (_, c, h, w) = nchw(cx.grad, "add_channel");
                let db = cx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, g) in cx.grad.data().iter().enumerate() {
                        acc[(i / (h * w)) % c] += g;
                    }
                    Tensor::new(vec![c], acc)
                });
                vec![Some(cx.grad.clone()), db]
            }),
        )
    }

    /// Multiply channel `c` by `gain[c]`.
    pub fn mul_channel(self, gain: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, gain],
            |v| {
                let (_, c, h, w) = nchw(v[0], "mul_channel");
                assert_eq!(v[1].shape(), &[c], "mul_channel: gain shape");
                let mut out = v[0].clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x *= v[1].data()[(i / (h * w)) % c];
                }
                out
            },
            Box::new(|cx| {
                let (_, c, h, w) = nchw(cx.grad, "mul_channel");
                let (x, gain) = (cx.inputs[0].data(), cx.inputs[1].data());
                let dx = cx.needs[0].then(|| {
                    Tensor::from_fn(cx.grad.shape().to_vec(), |i| {
                        cx.grad.data()[i] * gain[(i / (h * w)) % c]
                    })
                });
                let dg = cx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, g) in cx.grad.data().iter().enumerate() {
                        acc[(i / (h * w)) % c] += g * x[i];
                    }
                    Tensor::new(vec![c], acc)
                });
                vec![dx, dg]
            }),
        )
    }

    /// Add a per-sample, per-channel `bias[n, c]`.
    pub fn add_sample_channel(self, bias: Var<'g>) -> Var<'g> {
        self.graph.op(
            &[self, bias],
            |v| {
                let (n, c, h, w) = nchw(v[0], "add_sample_channel");
                assert_eq!(v[1].shape(), &[n, c], "add_sample_channel: bias shape");
                let mut out = v[0].clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += v[1].data()[i / (h * w)];
                }
                out
            },
            Box::new(|cx| {
                let (n, c, h, w) = nchw(cx.grad, "add_sample_channel");
                let db = cx.needs[1].then(|| {
                    let mut acc = vec![0.0; n * c];
                    for (i, g) in cx.grad.data().iter().enumerate() {
                        acc[i / (h * w)] += g;
                    }
                    Tensor::new(vec![n, c], acc)
                });
                vec![Some(cx.grad.clone()), db]
            }),
        )
    }

    /// Per-channel standardization over batch and space (batch-norm core).
    pub fn standardize_channels(self, eps: f64) -> Var<'g> {
        self.graph.op(
            &[self],
            move |v| {
                let (n, c, h, w) = nchw(v[0], "standardize_channels");
                let (mean, var) = channel_moments(v[0]);
                let hw = h * w;
                let mut out = v[0].clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    *x = (*x - mean[ch]) / (var[ch] + eps).sqrt();
                }
                let _ = n;
                out
            },
            Box::new(move |cx| {
                let (n, c, h, w) = nchw(cx.grad, "standardize_channels");
                let (_, var) = channel_moments(cx.inputs[0]);
                let hw = h * w;
                let gather = |t: &[f64], ch: usize| -> Vec<f64> {
                    (0..n).flat_map(|b| t[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec()).collect()
                };
                let mut dx = vec![0.0; cx.grad.numel()];
                for ch in 0..c {
                    let dy = gather(cx.grad.data(), ch);
                    let y = gather(cx.output.data(), ch);
                    let mut d = vec![0.0; dy.len()];
                    standardize_backward(&dy, &y, 1.0 / (var[ch] + eps).sqrt(), &mut d);
                    for b in 0..n {
                        dx[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .copy_from_slice(&d[b * hw..(b + 1) * hw]);
                    }
                }
                vec![Some(Tensor::new(cx.grad.shape().to_vec(), dx))]
            }),
        )
    }
}

/// Per-channel mean and population variance of an NCHW tensor.
pub fn channel_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = nchw(t, "channel_moments");
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for (i, x) in t.data().iter().enumerate() {
        mean[(i / hw) % c] += x;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, x) in t.data().iter().enumerate() {
        let ch = (i / hw) % c;
        var[ch] += (x - mean[ch]) * (x - mean[ch]);
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Source taps `(i0, i1, frac)` for each output coordinate.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn conv_output_sizes() {
        assert_eq!(conv_out_size(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_size(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_size(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1, 0), Some(16));
    }

    #[test]
    fn conv_with_delta_kernel_is_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new(vec![1, 1, 3, 3], k));
        assert_eq!(*x.conv2d(w, 1, 1).value(), *x.value());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 2, 5, 3], |i| (i as f64).sin()));
        assert_eq!(*x.resize_bilinear(5, 3).value(), *x.value());
    }

    #[test]
    fn tv_hand_example() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]));
        assert_eq!(x.total_variation().item(), 0.5);
    }

    #[test]
    fn pooling_of_constant() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
        let y = x.avg_pool2d(2).to_tensor();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }
}
