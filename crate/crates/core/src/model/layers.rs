use dualpath_tensor::{Tensor, Var};

use super::params::{Ctx, Init, ParamId, StatsId};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: init.uniform(format!("{name}.weight"), &[d_in, d_out], d_in),
            b: bias.then(|| init.constant(format!("{name}.bias"), &[d_out], 0.0)),
            d_in,
            d_out,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.p(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(ctx.p(b))?,
            None => y,
        })
    }
}

/// Convolution, batch norm, ReLU, then a 1x1 convolution to the output width.
///
/// The first convolution has no bias since batch norm removes it.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub proj: ParamId,
    pub proj_bias: Option<ParamId>,
    pub padding: (usize, usize),
    pub c_out: usize,
}

impl ConvBlock {
    /// `kernel` is `(kH, kW)`; both extents must be odd for same-size output.
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        kernel: (usize, usize),
        out_bias: bool,
    ) -> Self {
        let (kh, kw) = kernel;
        Self {
            conv: init.uniform(format!("{name}.conv.weight"), &[hidden, c_in, kh, kw], c_in * kh * kw),
            gamma: init.constant(format!("{name}.bn.weight"), &[hidden], 1.0),
            beta: init.constant(format!("{name}.bn.bias"), &[hidden], 0.0),
            stats: init.stats(format!("{name}.bn"), hidden),
            proj: init.uniform(format!("{name}.proj.weight"), &[c_out, hidden, 1, 1], hidden),
            proj_bias: out_bias.then(|| init.constant(format!("{name}.proj.bias"), &[c_out], 0.0)),
            padding: (kh / 2, kw / 2),
            c_out,
        }
    }

    /// `x` is `[B, C, H, W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.conv2d(ctx.p(self.conv), (1, 1), self.padding)?;
        let h = ctx.batch_norm(h, self.gamma, self.beta, self.stats)?.relu()?;
        let y = h.conv2d(ctx.p(self.proj), (1, 1), (0, 0))?;
        Ok(match self.proj_bias {
            Some(b) => y.add(ctx.p(b).reshape(&[1, self.c_out, 1, 1])?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: init.constant(format!("{name}.weight"), &[dim], 1.0),
            beta: init.constant(format!("{name}.bias"), &[dim], 0.0),
            eps,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), self.eps)?)
    }
}

/// Multi-head scaled dot-product attention with an output projection.
///
/// Query, key and value projections are bias-free: a key bias cancels in the
/// softmax and the value bias folds into the output bias.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    /// Queries come from a `d_q` stream, keys and values from a `d_kv` stream;
    /// the inner width and output width are `d_q`.
    pub fn new(init: &mut Init, name: &str, d_q: usize, d_kv: usize, heads: usize) -> Self {
        Self {
            wq: init.uniform(format!("{name}.q.weight"), &[d_q, d_q], d_q),
            wk: init.uniform(format!("{name}.k.weight"), &[d_kv, d_q], d_kv),
            wv: init.uniform(format!("{name}.v.weight"), &[d_kv, d_q], d_kv),
            out: Linear::new(init, &format!("{name}.out"), d_q, d_q, true),
            heads,
            d_model: d_q,
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let dh = self.d_model / self.heads;
        Ok(x.reshape(&[s[0], s[1], self.heads, dh])?.permute(&[0, 2, 1, 3])?)
    }

    /// Returns the output `[B, Tq, d_q]` and attention weights `[B, H, Tq, Tk]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, q_in: Var<'t>, kv_in: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (b, tq) = (q_in.shape()[0], q_in.shape()[1]);
        let dh = self.d_model / self.heads;
        let q = self.split_heads(q_in.matmul(ctx.p(self.wq))?)?;
        let k = self.split_heads(kv_in.matmul(ctx.p(self.wk))?)?;
        let v = self.split_heads(kv_in.matmul(ctx.p(self.wv))?)?;
        let scores = q.matmul(k.transpose(2, 3)?)?.scale(1.0 / (dh as f64).sqrt())?;
        let attn = scores.softmax(3)?;
        let ctx_v = attn
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, self.d_model])?;
        Ok((self.out.forward(ctx, ctx_v)?, attn))
    }
}

/// Self-attention with a residual connection followed by layer norm.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, eps: f64) -> Self {
        Self {
            mha: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, dim, heads),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim, eps),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (a, attn) = self.mha.forward(ctx, x, x)?;
        Ok((self.norm.forward(ctx, x.add(a)?)?, attn))
    }
}

/// Three linear layers with ReLU between and a sigmoid on the single output.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub layers: [Linear; 3],
}

impl ScoreHead {
    pub fn new(init: &mut Init, name: &str, d_in: usize) -> Self {
        let h1 = (d_in / 2).max(1);
        let h2 = (d_in / 4).max(1);
        Self {
            layers: [
                Linear::new(init, &format!("{name}.fc1"), d_in, h1, true),
                Linear::new(init, &format!("{name}.fc2"), h1, h2, true),
                Linear::new(init, &format!("{name}.fc3"), h2, 1, true),
            ],
        }
    }

    /// `[B, T, d_in]` to scores `[B, T]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let h = self.layers[0].forward(ctx, x)?.relu()?;
        let h = self.layers[1].forward(ctx, h)?.relu()?;
        Ok(self.layers[2].forward(ctx, h)?.sigmoid()?.reshape(&[s[0], s[1]])?)
    }
}

/// Mean squared error over every element.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(dualpath_tensor::TensorError::Shape {
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        }
        .into());
    }
    Ok(pred.sub(target)?.square()?.mean()?)
}

/// `|x[.., t] - x[.., t-1]|` along the last axis with a zero first slice.
pub fn frame_difference_var<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let axis = shape.len() - 1;
    let t = shape[axis];
    let mut zshape = shape.clone();
    zshape[axis] = 1;
    let zeros = x.tape().constant(Tensor::zeros(&zshape));
    if t == 1 {
        return Ok(zeros);
    }
    let diff = x.narrow(axis, 1, t - 1)?.sub(x.narrow(axis, 0, t - 1)?)?.abs()?;
    Ok(x.tape().concat(&[zeros, diff], axis)?)
}
