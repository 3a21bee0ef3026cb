//! Forward kernels on plain tensors, and the vector-Jacobian products the tape
//! replays. Nothing here touches a [`Tape`](crate::Tape).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn, Zip};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Reduces a broadcast gradient back onto `shape` by summing the expanded axes.
pub(crate) fn sum_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = g.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
) -> Result<Tensor> {
    if broadcast_shape(a.shape(), b.shape()).is_none() {
        return Err(shape_err(
            op,
            format!("{:?} and {:?} do not broadcast", a.shape(), b.shape()),
        ));
    }
    Tensor::from_array(f(a.array(), b.array())).ensure_finite(op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

// ---------------------------------------------------------------------------
// matmul

struct BatchPlan {
    shape: Vec<usize>,
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
}

/// Maps every broadcast batch position to the flat batch slot of each operand.
fn batch_plan(a: &[usize], b: &[usize]) -> Option<BatchPlan> {
    let shape = broadcast_shape(a, b)?;
    let rank = shape.len();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let total: usize = shape.iter().product();
    let mut a_idx = Vec::with_capacity(total);
    let mut b_idx = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    for _ in 0..total {
        let (mut fa, mut fb) = (0, 0);
        for d in 0..rank {
            fa = fa * pa[d] + if pa[d] == 1 { 0 } else { index[d] };
            fb = fb * pb[d] + if pb[d] == 1 { 0 } else { index[d] };
        }
        a_idx.push(fa);
        b_idx.push(fb);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Some(BatchPlan { shape, a_idx, b_idx })
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(BatchPlan, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: {a:?} x {b:?}"),
        ));
    }
    let plan = batch_plan(&a[..a.len() - 2], &b[..b.len() - 2]).ok_or_else(|| {
        shape_err("matmul", format!("batch dims of {a:?} and {b:?} do not broadcast"))
    })?;
    Ok((plan, m, k, n))
}

/// Batched matrix product over the last two axes with broadcast batch dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (plan, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; plan.a_idx.len() * m * n];
    for (i, (&ia, &ib)) in plan.a_idx.iter().zip(&plan.b_idx).enumerate() {
        let av = ArrayView2::from_shape((m, k), &a.data()[ia * m * k..(ia + 1) * m * k]).unwrap();
        let bv = ArrayView2::from_shape((k, n), &b.data()[ib * k * n..(ib + 1) * k * n]).unwrap();
        let mut ov = ArrayViewMut2::from_shape((m, n), &mut out[i * m * n..(i + 1) * m * n]).unwrap();
        general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    let mut shape = plan.shape;
    shape.extend([m, n]);
    Tensor::new(&shape, out)?.ensure_finite("matmul")
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (plan, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (i, (&ia, &ib)) in plan.a_idx.iter().zip(&plan.b_idx).enumerate() {
        let av = ArrayView2::from_shape((m, k), &a.data()[ia * m * k..(ia + 1) * m * k]).unwrap();
        let bv = ArrayView2::from_shape((k, n), &b.data()[ib * k * n..(ib + 1) * k * n]).unwrap();
        let gv = ArrayView2::from_shape((m, n), &g.data()[i * m * n..(i + 1) * m * n]).unwrap();
        let mut gav = ArrayViewMut2::from_shape((m, k), &mut ga[ia * m * k..(ia + 1) * m * k]).unwrap();
        general_mat_mul(1.0, &gv, &bv.t(), 1.0, &mut gav);
        let mut gbv = ArrayViewMut2::from_shape((k, n), &mut gb[ib * k * n..(ib + 1) * k * n]).unwrap();
        general_mat_mul(1.0, &av.t(), &gv, 1.0, &mut gbv);
    }
    (
        Tensor::new(a.shape(), ga).expect("same shape"),
        Tensor::new(b.shape(), gb).expect("same shape"),
    )
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

impl ConvGeom {
    fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (batch, c_in, h, w, batched) = match *input {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("input must be [C,H,W] or [B,C,H,W], got {input:?}"),
                ))
            }
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be [C_out,C_in,kH,kW], got {kernel:?}"),
            ));
        };
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = padding;
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * ph,
                    w + 2 * pw
                ),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / stride.0 + 1,
            ow: (w + 2 * pw - kw) / stride.1 + 1,
            batched,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.c_out, self.oh, self.ow]
        } else {
            vec![self.c_out, self.oh, self.ow]
        }
    }

    /// Input row feeding output row `o` through kernel row `k`, if inside the image.
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < len)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        match self.src(oi, ki, self.sh, self.ph, self.h) {
                            None => line.fill(0.0),
                            Some(ii) => {
                                let base = (c * self.h + ii) * self.w;
                                for (oj, v) in line.iter_mut().enumerate() {
                                    *v = self
                                        .src(oj, kj, self.sw, self.pw, self.w)
                                        .map_or(0.0, |jj| x[base + jj]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let Some(ii) = self.src(oi, ki, self.sh, self.ph, self.h) else {
                            continue;
                        };
                        let base = (c * self.h + ii) * self.w;
                        for oj in 0..self.ow {
                            if let Some(jj) = self.src(oj, kj, self.sw, self.pw, self.w) {
                                gx[base + jj] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[C_in, H, W]` or `[B, C_in, H, W]`; `kernel` is
/// `[C_out, C_in, kH, kW]`. Output spatial extent is
/// `floor((H + 2p - k) / s) + 1` per axis.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let plane = g.oh * g.ow;
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; g.patch() * plane];
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let kv = ArrayView2::from_shape((g.c_out, g.patch()), kernel.data()).unwrap();
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let cv = ArrayView2::from_shape((g.patch(), plane), &cols[..]).unwrap();
        let mut ov = ArrayViewMut2::from_shape(
            (g.c_out, plane),
            &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane],
        )
        .unwrap();
        general_mat_mul(1.0, &kv, &cv, 0.0, &mut ov);
    }
    Tensor::new(&g.out_shape(), out)?.ensure_finite("conv2d")
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> (Tensor, Tensor) {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding).expect("validated");
    let plane = g.oh * g.ow;
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; g.patch() * plane];
    let mut gcols = vec![0.0; g.patch() * plane];
    let mut gx = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let kv = ArrayView2::from_shape((g.c_out, g.patch()), kernel.data()).unwrap();
    for b in 0..g.batch {
        let gv = ArrayView2::from_shape(
            (g.c_out, plane),
            &grad.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane],
        )
        .unwrap();
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let cv = ArrayView2::from_shape((g.patch(), plane), &cols[..]).unwrap();
        let mut gkv = ArrayViewMut2::from_shape((g.c_out, g.patch()), &mut gk[..]).unwrap();
        general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut gkv);

        let mut gcv = ArrayViewMut2::from_shape((g.patch(), plane), &mut gcols[..]).unwrap();
        general_mat_mul(1.0, &kv.t(), &gv, 0.0, &mut gcv);
        g.col2im(&gcols, &mut gx[b * in_len..(b + 1) * in_len]);
    }
    (
        Tensor::new(input.shape(), gx).expect("same shape"),
        Tensor::new(kernel.shape(), gk).expect("same shape"),
    )
}

// ---------------------------------------------------------------------------
// softmax

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.ndim() {
        return Err(invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let mut out = x.array().clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = lane.iter().sum();
        lane.mapv_inplace(|v| v / sum);
    }
    Tensor::from_array(out).ensure_finite("softmax")
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let mut gx = ArrayD::zeros(IxDyn(y.shape()));
    Zip::from(gx.lanes_mut(Axis(axis)))
        .and(y.array().lanes(Axis(axis)))
        .and(g.array().lanes(Axis(axis)))
        .for_each(|mut gx, y, g| {
            let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for ((o, &yv), &gv) in gx.iter_mut().zip(y.iter()).zip(g.iter()) {
                *o = yv * (gv - dot);
            }
        });
    Tensor::from_array(gx)
}

// ---------------------------------------------------------------------------
// adaptive average pooling over the last axis

/// Half-open source ranges `[floor(i*T/T_out), ceil((i+1)*T/T_out))`.
///
/// Neighbouring bins overlap by one element when `T` is not a multiple of
/// `T_out`.
pub fn adaptive_bins(t: usize, t_out: usize) -> Vec<(usize, usize)> {
    (0..t_out)
        .map(|i| (i * t / t_out, ((i + 1) * t).div_ceil(t_out)))
        .collect()
}

pub fn adaptive_avg_pool_time(x: &Tensor, t_out: usize) -> Result<Tensor> {
    let Some(&t) = x.shape().last() else {
        return Err(shape_err("adaptive_avg_pool_time", "input is a scalar"));
    };
    if t_out == 0 {
        return Err(invalid("adaptive_avg_pool_time", "output length must be >= 1"));
    }
    let bins = adaptive_bins(t, t_out);
    let rows = x.len() / t;
    let mut out = Vec::with_capacity(rows * t_out);
    for row in x.data().chunks_exact(t) {
        for &(s, e) in &bins {
            out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = t_out;
    Tensor::new(&shape, out)
}

pub(crate) fn adaptive_avg_pool_backward(input_shape: &[usize], g: &Tensor) -> Tensor {
    let t = *input_shape.last().unwrap();
    let t_out = *g.shape().last().unwrap();
    let bins = adaptive_bins(t, t_out);
    let mut gx = Tensor::zeros(input_shape);
    for (dst, src) in gx.data_mut().chunks_exact_mut(t).zip(g.data().chunks_exact(t_out)) {
        for (&(s, e), &gv) in bins.iter().zip(src) {
            let share = gv / (e - s) as f64;
            dst[s..e].iter_mut().for_each(|v| *v += share);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// normalization

/// Output of a normalization forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormForward {
    pub output: Tensor,
    /// `(x - mean) * inv_std`, before the affine transform.
    pub normalized: Tensor,
    /// One entry per channel (batch norm) or per row (layer norm).
    pub inv_std: Vec<f64>,
    /// Batch mean per channel; empty for eval-mode batch norm and layer norm.
    pub mean: Vec<f64>,
    /// Unbiased batch variance per channel; empty unless computed from the batch.
    pub var_unbiased: Vec<f64>,
}

fn bn_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(shape_err(
            "batch_norm",
            format!("input must be [B, C, ...], got {:?}", x.shape()),
        ));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    Ok((b, c, x.len() / (b * c)))
}

fn check_channel_vec(op: &'static str, t: &Tensor, c: usize) -> Result<()> {
    if t.len() != c {
        return Err(shape_err(
            op,
            format!("expected {c} per-channel values, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Per-channel normalization over every axis except axis 1.
///
/// With `running = None` the batch statistics are used (train mode);
/// otherwise the supplied `(mean, var)` are used (eval mode).
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<(&Tensor, &Tensor)>,
    eps: f64,
) -> Result<NormForward> {
    let (b, c, r) = bn_dims(x)?;
    check_channel_vec("batch_norm", gamma, c)?;
    check_channel_vec("batch_norm", beta, c)?;
    let data = x.data();
    let at = |bi: usize, ci: usize, ri: usize| (bi * c + ci) * r + ri;
    let n = b * r;
    let (mean, var, var_unbiased) = match running {
        Some((rm, rv)) => {
            check_channel_vec("batch_norm", rm, c)?;
            check_channel_vec("batch_norm", rv, c)?;
            (rm.to_vec(), rv.to_vec(), Vec::new())
        }
        None => {
            if n < 2 {
                return Err(crate::TensorError::SingleElementBatch(n));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    for ri in 0..r {
                        s += data[at(bi, ci, ri)];
                    }
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    for ri in 0..r {
                        let d = data[at(bi, ci, ri)] - m;
                        ss += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = ss / n as f64;
            }
            let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
            (mean, var, unbiased)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let (g, be) = (gamma.data()[ci], beta.data()[ci]);
            for ri in 0..r {
                let i = at(bi, ci, ri);
                let xh = (data[i] - mean[ci]) * inv_std[ci];
                normalized[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    Ok(NormForward {
        output: Tensor::new(x.shape(), out)?.ensure_finite("batch_norm")?,
        normalized: Tensor::new(x.shape(), normalized)?,
        inv_std,
        mean: if running.is_none() { mean } else { Vec::new() },
        var_unbiased,
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn batch_norm_backward(
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    g: &Tensor,
    train: bool,
) -> (Tensor, Tensor, Tensor) {
    let shape = normalized.shape();
    let (b, c) = (shape[0], shape[1]);
    let r = normalized.len() / (b * c);
    let n = (b * r) as f64;
    let at = |bi: usize, ci: usize, ri: usize| (bi * c + ci) * r + ri;
    let (xh, gd) = (normalized.data(), g.data());
    let mut gx = vec![0.0; normalized.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ci in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for bi in 0..b {
            for ri in 0..r {
                let i = at(bi, ci, ri);
                sum_g += gd[i];
                sum_gx += gd[i] * xh[i];
            }
        }
        gg[ci] = sum_gx;
        gb[ci] = sum_g;
        let scale = gamma.data()[ci] * inv_std[ci];
        for bi in 0..b {
            for ri in 0..r {
                let i = at(bi, ci, ri);
                gx[i] = if train {
                    scale * (gd[i] - sum_g / n - xh[i] * sum_gx / n)
                } else {
                    scale * gd[i]
                };
            }
        }
    }
    (
        Tensor::new(shape, gx).unwrap(),
        Tensor::new(gamma.shape(), gg).unwrap(),
        Tensor::new(gamma.shape(), gb).unwrap(),
    )
}

/// Normalizes each row of the last axis, then applies `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<NormForward> {
    let Some(&d) = x.shape().last() else {
        return Err(shape_err("layer_norm", "input is a scalar"));
    };
    check_channel_vec("layer_norm", gamma, d)?;
    check_channel_vec("layer_norm", beta, d)?;
    let rows = x.len() / d;
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (j, v) in row.iter().enumerate() {
            let xh = (v - mean) * is;
            normalized.push(xh);
            out.push(gamma.data()[j] * xh + beta.data()[j]);
        }
    }
    Ok(NormForward {
        output: Tensor::new(x.shape(), out)?.ensure_finite("layer_norm")?,
        normalized: Tensor::new(x.shape(), normalized)?,
        inv_std,
        mean: Vec::new(),
        var_unbiased: Vec::new(),
    })
}

pub(crate) fn layer_norm_backward(
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *normalized.shape().last().unwrap();
    let mut gx = Vec::with_capacity(normalized.len());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut gxh = vec![0.0; d];
    for ((xh, gr), &is) in normalized
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(inv_std)
    {
        for j in 0..d {
            gg[j] += gr[j] * xh[j];
            gb[j] += gr[j];
            gxh[j] = gr[j] * gamma.data()[j];
        }
        let mean_g = gxh.iter().sum::<f64>() / d as f64;
        let mean_gx = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx.push(is * (gxh[j] - mean_g - xh[j] * mean_gx));
        }
    }
    (
        Tensor::new(normalized.shape(), gx).unwrap(),
        Tensor::new(gamma.shape(), gg).unwrap(),
        Tensor::new(gamma.shape(), gb).unwrap(),
    )
}
