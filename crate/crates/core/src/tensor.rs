//! Dense row-major tensors and the handful of kernels the network needs.
//!
//! Every backward kernel here is hand-derived from its forward definition and
//! checked against central finite differences in the tests. All kernels are
//! deterministic: identical inputs produce bitwise-identical outputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, shape carried explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// NaN/Inf detection; call at module boundaries, not in inner loops.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn map_into<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// `c[p][r] = sum_q a[p][q] * b[q][r]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (p, q) = a.dims2("matmul")?;
    let (qb, r) = b.dims2("matmul")?;
    if q != qb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut c = Tensor::zeros(&[p, r]);
    for i in 0..p {
        let a_row = &a.data[i * q..(i + 1) * q];
        let c_row = &mut c.data[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
    Ok(c)
}

/// Gradients of `matmul`: `grad_a = grad_c * b^T`, `grad_b = a^T * grad_c`.
pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad_c: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (p, q) = a.dims2("matmul_backward")?;
    let (qb, r) = b.dims2("matmul_backward")?;
    let (pc, rc) = grad_c.dims2("matmul_backward")?;
    if q != qb || p != pc || r != rc {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            lhs: a.shape.clone(),
            rhs: grad_c.shape.clone(),
        });
    }
    let mut grad_a = Tensor::zeros(&[p, q]);
    let mut grad_b = Tensor::zeros(&[q, r]);
    for i in 0..p {
        let g_row = &grad_c.data[i * r..(i + 1) * r];
        let a_row = &a.data[i * q..(i + 1) * q];
        let ga_row = &mut grad_a.data[i * q..(i + 1) * q];
        for k in 0..q {
            let b_row = &b.data[k * r..(k + 1) * r];
            let mut acc = S::zero();
            for (&g, &bv) in g_row.iter().zip(b_row) {
                acc += g * bv;
            }
            ga_row[k] += acc;
            let aik = a_row[k];
            let gb_row = &mut grad_b.data[k * r..(k + 1) * r];
            for (gb, &g) in gb_row.iter_mut().zip(g_row) {
                *gb += aik * g;
            }
        }
    }
    Ok((grad_a, grad_b))
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2-D cross-correlation over `[Cin, H, W]` with kernels `[Cout, Cin, kh, kw]`.
///
/// `H' = floor((H + 2*pad - kh) / stride) + 1`, same for `W'`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (params, _) = conv_check(input, kernels, bias, stride, pad)?;
    let ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        out_h,
        out_w,
    } = params;
    let mut out = Tensor::zeros(&[cout, out_h, out_w]);
    for co in 0..cout {
        let b = bias.data[co];
        let out_ch = &mut out.data[co * out_h * out_w..(co + 1) * out_h * out_w];
        for v in out_ch.iter_mut() {
            *v = b;
        }
        for ci in 0..cin {
            let in_ch = &input.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let weight = kernels.data[((co * cin + ci) * kh + ky) * kw + kx];
                    // Valid output ranges keep iy = oy*stride + ky - pad inside [0, h).
                    let (oy0, oy1) = valid_out_range(out_h, h, ky, stride, pad);
                    let (ox0, ox1) = valid_out_range(out_w, w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = &in_ch[iy * w..(iy + 1) * w];
                        let out_row = &mut out_ch[oy * out_w..(oy + 1) * out_w];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            out_row[ox] += weight * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, kernels, and bias.
/// `grad_bias[c]` is the spatial sum of `grad_out[c]`.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let bias_probe = Tensor::zeros(&[kernels.shape[0]]);
    let (params, _) = conv_check(input, kernels, &bias_probe, stride, pad)?;
    let ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        out_h,
        out_w,
    } = params;
    let (gc, gh, gw) = grad_out.dims3("conv2d_backward")?;
    if (gc, gh, gw) != (cout, out_h, out_w) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape.clone(),
            rhs: vec![cout, out_h, out_w],
        });
    }

    let mut grad_input = Tensor::zeros(&[cin, h, w]);
    let mut grad_kernels = Tensor::zeros(kernels.shape());
    let mut grad_bias = Tensor::zeros(&[cout]);

    for co in 0..cout {
        let g_ch = &grad_out.data[co * out_h * out_w..(co + 1) * out_h * out_w];
        grad_bias.data[co] = g_ch.iter().copied().sum();
        for ci in 0..cin {
            let in_ch = &input.data[ci * h * w..(ci + 1) * h * w];
            let gi_ch = &mut grad_input.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let weight = kernels.data[widx];
                    let mut wacc = S::zero();
                    let (oy0, oy1) = valid_out_range(out_h, h, ky, stride, pad);
                    let (ox0, ox1) = valid_out_range(out_w, w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = &in_ch[iy * w..(iy + 1) * w];
                        let gi_row = &mut gi_ch[iy * w..(iy + 1) * w];
                        let g_row = &g_ch[oy * out_w..(oy + 1) * out_w];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            let g = g_row[ox];
                            wacc += g * in_row[ix];
                            gi_row[ix] += weight * g;
                        }
                    }
                    grad_kernels.data[widx] += wacc;
                }
            }
        }
    }
    Ok((grad_input, grad_kernels, grad_bias))
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_check<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<(ConvDims, ())> {
    let (cin, h, w) = input.dims3("conv2d")?;
    let (cout, kcin, kh, kw) = match kernels.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: kernels.shape.clone(),
                rhs: input.shape.clone(),
            })
        }
    };
    if kcin != cin || bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: kernels.shape.clone(),
            rhs: input.shape.clone(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::invalid(format!(
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok((
        ConvDims {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            out_h: conv_out_dim(h, kh, stride, pad),
            out_w: conv_out_dim(w, kw, stride, pad),
        },
        (),
    ))
}

/// Output positions `o` for which `o*stride + k - pad` lands inside `[0, input_dim)`.
fn valid_out_range(out_dim: usize, input_dim: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_incl = (input_dim - 1 + pad).saturating_sub(k) / stride;
    (lo.min(out_dim), (hi_incl + 1).min(out_dim))
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    out
}

/// Passes gradient where `x > 0`; the subgradient at 0 is taken as 0.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(x.shape, grad_out.shape);
    let mut out = grad_out.clone();
    for (g, &xv) in out.data.iter_mut().zip(&x.data) {
        if xv <= S::zero() {
            *g = S::zero();
        }
    }
    out
}

/// Windowed max over `[C, H, W]`. `argmax` records the flat input index of each
/// winner so the backward pass can route gradient; ties break to the lowest
/// flat index.
pub fn maxpool2d<S: Scalar>(
    input: &Tensor<S>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    if kh > h || kw > w {
        return Err(Error::invalid(format!(
            "maxpool2d: window {}x{} exceeds input {}x{}",
            kh, kw, h, w
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("maxpool2d: stride must be >= 1"));
    }
    let out_h = (h - kh) / stride + 1;
    let out_w = (w - kw) / stride + 1;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let mut argmax = vec![0usize; c * out_h * out_w];
    for ci in 0..c {
        let ch_off = ci * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut best = input.data[ch_off + y0 * w + x0];
                let mut best_idx = ch_off + y0 * w + x0;
                for y in y0..y0 + kh {
                    for x in x0..x0 + kw {
                        let idx = ch_off + y * w + x;
                        let v = input.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * out_h + oy) * out_w + ox;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient back to its recorded argmax position.
pub fn maxpool2d_backward<S: Scalar>(
    argmax: &[usize],
    grad_out: &Tensor<S>,
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_backward",
            lhs: vec![argmax.len()],
            rhs: grad_out.shape.clone(),
        });
    }
    let mut grad_input = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        grad_input.data[idx] += g;
    }
    Ok(grad_input)
}

/// SGD with momentum and weight decay, in place:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_update<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    momentum_buf: &mut Tensor<S>,
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if param.shape != grad.shape || param.shape != momentum_buf.shape {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: param.shape.clone(),
            rhs: grad.shape.clone(),
        });
    }
    grad.assert_finite("sgd_update gradient")?;
    for ((p, &g), v) in param
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(&mut momentum_buf.data)
    {
        *v = momentum * *v + g + weight_decay * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}
