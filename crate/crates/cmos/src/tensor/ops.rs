//! Raw numeric kernels behind the graph ops.
//!
//! Layout is channels-last throughout: images are `[B,H,W,C]` (or `[H,W,C]`),
//! kernels `[kh,kw,Cin,Cout]`. Inner loops run over the contiguous channel
//! axis so the compiler can vectorize them.

use super::{Padding, Scalar};
use crate::error::{Error, Result};

/// Resolved convolution geometry, stride fixed at 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub batched: bool,
}

impl ConvDims {
    pub fn resolve(ishape: &[usize], kshape: &[usize], padding: Padding) -> Result<ConvDims> {
        let (b, h, w, cin, batched) = match ishape {
            [h, w, c] => (1, *h, *w, *c, false),
            [b, h, w, c] => (*b, *h, *w, *c, true),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d input must have rank 3 or 4, got {ishape:?}"
                )))
            }
        };
        let [kh, kw, kcin, cout] = match kshape {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d kernel must have rank 4, got {kshape:?}"
                )))
            }
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d channel count",
                left: ishape.to_vec(),
                right: kshape.to_vec(),
            });
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::InvalidArgument(format!(
                        "valid conv2d kernel {kh}x{kw} exceeds input {h}x{w}"
                    )));
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
        };
        Ok(ConvDims {
            b,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            pad_top,
            pad_left,
            batched,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.b, self.oh, self.ow, self.cout]
        } else {
            vec![self.oh, self.ow, self.cout]
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; d.b * d.oh * d.ow * d.cout];
    let mut acc = vec![T::ZERO; d.cout];
    for b in 0..d.b {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                acc.fill(T::ZERO);
                for ky in 0..d.kh {
                    let yy = oy as isize + ky as isize - d.pad_top as isize;
                    if yy < 0 || yy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let xx = ox as isize + kx as isize - d.pad_left as isize;
                        if xx < 0 || xx >= d.w as isize {
                            continue;
                        }
                        let in_base =
                            (((b * d.h + yy as usize) * d.w) + xx as usize) * d.cin;
                        let k_base = (ky * d.kw + kx) * d.cin * d.cout;
                        for ci in 0..d.cin {
                            let v = input[in_base + ci];
                            let krow = &kernel[k_base + ci * d.cout..k_base + (ci + 1) * d.cout];
                            for (a, &k) in acc.iter_mut().zip(krow) {
                                *a += v * k;
                            }
                        }
                    }
                }
                let o_base = ((b * d.oh + oy) * d.ow + ox) * d.cout;
                out[o_base..o_base + d.cout].copy_from_slice(&acc);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    input: &[T],
    kernel: &[T],
    d: &ConvDims,
    want_dinput: bool,
    want_dkernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dinput = want_dinput.then(|| vec![T::ZERO; input.len()]);
    let mut dkernel = want_dkernel.then(|| vec![T::ZERO; kernel.len()]);
    for b in 0..d.b {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let g = &dout[((b * d.oh + oy) * d.ow + ox) * d.cout..][..d.cout];
                for ky in 0..d.kh {
                    let yy = oy as isize + ky as isize - d.pad_top as isize;
                    if yy < 0 || yy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let xx = ox as isize + kx as isize - d.pad_left as isize;
                        if xx < 0 || xx >= d.w as isize {
                            continue;
                        }
                        let in_base =
                            (((b * d.h + yy as usize) * d.w) + xx as usize) * d.cin;
                        let k_base = (ky * d.kw + kx) * d.cin * d.cout;
                        if let Some(dk) = dkernel.as_deref_mut() {
                            for ci in 0..d.cin {
                                let v = input[in_base + ci];
                                let dkrow = &mut dk[k_base + ci * d.cout..][..d.cout];
                                for (dw, &go) in dkrow.iter_mut().zip(g) {
                                    *dw += v * go;
                                }
                            }
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            for ci in 0..d.cin {
                                let krow = &kernel[k_base + ci * d.cout..][..d.cout];
                                let mut s = T::ZERO;
                                for (&k, &go) in krow.iter().zip(g) {
                                    s += k * go;
                                }
                                di[in_base + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (dinput, dkernel)
}

/// 2x2 max pooling, ceil mode: trailing odd rows/columns form partial windows.
/// Returns the pooled values plus the flat input index of each window maximum
/// (first index wins on ties), which the backward pass scatters into.
pub(crate) fn maxpool2d_forward<T: Scalar>(
    input: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![T::ZERO; b * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = None::<(T, usize)>;
                    for dy in 0..2usize {
                        let y = oy * 2 + dy;
                        if y >= h {
                            break;
                        }
                        for dx in 0..2usize {
                            let x = ox * 2 + dx;
                            if x >= w {
                                break;
                            }
                            let idx = (((bi * h + y) * w) + x) * c + ch;
                            let v = input[idx];
                            match best {
                                Some((bv, _)) if bv >= v => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (v, idx) = best.expect("nonempty window");
                    let o = (((bi * oh + oy) * ow) + ox) * c + ch;
                    out[o] = v;
                    argmax[o] = idx;
                }
            }
        }
    }
    (out, argmax, oh, ow)
}

/// `a [m,k] * b [k,n] -> out [m,n]`, accumulating into `out`.
pub(crate) fn mm_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `x [m,n] * y^T` with `y [k,n]` -> out `[m,k]`, accumulating.
pub(crate) fn mm_abt_acc<T: Scalar>(out: &mut [T], x: &[T], y: &[T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let x_row = &x[i * n..(i + 1) * n];
        for p in 0..k {
            let y_row = &y[p * n..(p + 1) * n];
            let mut s = T::ZERO;
            for (&xv, &yv) in x_row.iter().zip(y_row) {
                s += xv * yv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `a^T * y` with `a [m,k]`, `y [m,n]` -> out `[k,n]`, accumulating.
pub(crate) fn mm_atb_acc<T: Scalar>(out: &mut [T], a: &[T], y: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let y_row = &y[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &yv) in o_row.iter_mut().zip(y_row) {
                *o += av * yv;
            }
        }
    }
}

/// Softmax along `axis`, stabilized by per-lane max subtraction.
pub(crate) fn softmax_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::ZERO; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = data[at(0)];
            for k in 1..len {
                mx = mx.maximum(data[at(k)]);
            }
            let mut sum = T::ZERO;
            for k in 0..len {
                let e = (data[at(k)] - mx).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    out
}

/// Gradient of softmax: `dx = y * (dy - sum(dy * y))` per lane.
pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::ZERO;
            for k in 0..len {
                dot += dy[at(k)] * y[at(k)];
            }
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

/// Mean over the batch of `-ln softmax(logits)[label]`. Returns the saved
/// softmax probabilities alongside the loss.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    batch: usize,
    classes: usize,
    labels: &[usize],
) -> (Vec<T>, T) {
    let probs = softmax_axis(logits, &[batch, classes], 1);
    let mut loss = T::ZERO;
    for (b, &label) in labels.iter().enumerate() {
        loss += -(probs[b * classes + label].ln());
    }
    (probs, loss / T::from_f64(batch as f64))
}

/// Endpoint-aligned linear interpolation of `[n0, c]` rows onto `n` rows.
/// Source position of output row `j` is `j * (n0 - 1) / (n - 1)`.
pub(crate) fn interp_rows_forward<T: Scalar>(input: &[T], n0: usize, c: usize, n: usize) -> Vec<T> {
    if n == n0 {
        return input.to_vec();
    }
    let mut out = vec![T::ZERO; n * c];
    let step = (n0 - 1) as f64 / (n - 1) as f64;
    for j in 0..n {
        let pos = j as f64 * step;
        let lo = (pos.floor() as usize).min(n0 - 1);
        let hi = (lo + 1).min(n0 - 1);
        let frac = T::from_f64(pos - lo as f64);
        let w_lo = T::ONE - frac;
        for ch in 0..c {
            out[j * c + ch] = w_lo * input[lo * c + ch] + frac * input[hi * c + ch];
        }
    }
    out
}

pub(crate) fn interp_rows_backward<T: Scalar>(dout: &[T], n0: usize, c: usize, n: usize) -> Vec<T> {
    if n == n0 {
        return dout.to_vec();
    }
    let mut dinput = vec![T::ZERO; n0 * c];
    let step = (n0 - 1) as f64 / (n - 1) as f64;
    for j in 0..n {
        let pos = j as f64 * step;
        let lo = (pos.floor() as usize).min(n0 - 1);
        let hi = (lo + 1).min(n0 - 1);
        let frac = T::from_f64(pos - lo as f64);
        let w_lo = T::ONE - frac;
        for ch in 0..c {
            let g = dout[j * c + ch];
            dinput[lo * c + ch] += w_lo * g;
            dinput[hi * c + ch] += frac * g;
        }
    }
    dinput
}

