use dualpath_tensor::Var;

use super::config::ModelConfig;
use super::layers::{frame_difference_var, ConvBlock, Linear};
use super::params::{Ctx, Init, ParamId};
use crate::error::{Error, Result};

/// Intermediate maps of one dynamics-encoder forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsTrace<'t> {
    pub delta: Var<'t>,
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
    pub gate: Var<'t>,
    pub f_ta: Var<'t>,
    pub f_va: Var<'t>,
    pub f_combined: Var<'t>,
    pub gamma: Var<'t>,
    pub feature_map: Var<'t>,
}

/// Spectrogram `[B, F, T]` to a `[B, T_f, d_d]` sequence.
///
/// The attention and gate branches end in a bias-free 1x1 convolution when
/// their output feeds a softmax over time, which is invariant to that bias.
#[derive(Debug, Clone)]
pub struct DynamicsEncoder {
    pub alpha: ConvBlock,
    pub beta: ConvBlock,
    pub gate: ConvBlock,
    pub pool: ConvBlock,
    pub gamma: ConvBlock,
    pub basis: ParamId,
    pub proj: Linear,
    pub n_mels: usize,
    pub k: usize,
    pub dyn_channels: usize,
    pub padding: usize,
}

impl DynamicsEncoder {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let ks = cfg.kernel_size;
        let (hid, c) = (cfg.conv_hidden, cfg.branch_channels);
        let block = |init: &mut Init, branch: &str, bias: bool| {
            ConvBlock::new(init, &format!("{name}.{branch}"), 1, hid, c, (ks, ks), bias)
        };
        let alpha = block(init, "alpha", false);
        let beta = block(init, "beta", false);
        let gate = block(init, "gate", true);
        let pool = block(init, "pool", true);
        let gamma = ConvBlock::new(
            init,
            &format!("{name}.gamma"),
            c,
            hid,
            cfg.basis_kernels,
            (ks, 1),
            true,
        );
        let basis = init.uniform(
            format!("{name}.basis"),
            &[cfg.basis_kernels * cfg.dyn_channels, 1, ks, ks],
            ks * ks,
        );
        let proj = Linear::new(init, &format!("{name}.proj"), cfg.dyn_channels * cfg.n_mels, cfg.d_d, true);
        Self {
            alpha,
            beta,
            gate,
            pool,
            gamma,
            basis,
            proj,
            n_mels: cfg.n_mels,
            k: cfg.basis_kernels,
            dyn_channels: cfg.dyn_channels,
            padding: ks / 2,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, spec: Var<'t>, t_f: usize) -> Result<(Var<'t>, DynamicsTrace<'t>)> {
        let shape = spec.shape();
        if shape.len() != 3 || shape[1] != self.n_mels {
            return Err(Error::Data(format!(
                "spectrogram batch must be [B, {}, T], got {shape:?}",
                self.n_mels
            )));
        }
        let (b, f, t) = (shape[0], shape[1], shape[2]);
        if t < t_f {
            return Err(Error::Data(format!("spectrogram has {t} frames, fewer than T_f = {t_f}")));
        }
        let x = spec.reshape(&[b, 1, f, t])?;
        let delta = frame_difference_var(x)?;
        let alpha = self.alpha.forward(ctx, x)?.softmax(3)?;
        let beta = self.beta.forward(ctx, delta)?.softmax(3)?;
        let gate = self.gate.forward(ctx, x)?.sigmoid()?;
        let pooled = self.pool.forward(ctx, x)?.mean_axis(3, false)?;
        let (f_ta, f_va, f_combined) = aggregate_dynamics(alpha, beta, gate, pooled)?;

        let c = f_combined.shape()[1];
        let gamma = self
            .gamma
            .forward(ctx, f_combined.reshape(&[b, c, f, 1])?)?
            .reshape(&[b, self.k, f])?
            .softmax(1)?;
        let feature_map = freq_dynamic_conv(x, gamma, ctx.p(self.basis), self.dyn_channels, self.padding)?;

        let seq = feature_map
            .reshape(&[b, self.dyn_channels * f, t])?
            .adaptive_avg_pool_time(t_f)?
            .transpose(1, 2)?;
        let out = self.proj.forward(ctx, seq)?;
        Ok((
            out,
            DynamicsTrace {
                delta,
                alpha,
                beta,
                gate,
                f_ta,
                f_va,
                f_combined,
                gamma,
                feature_map,
            },
        ))
    }
}

/// Gated temporal and velocity attention summed over time, plus the pooled
/// context. Maps are `[B, C, F, T]`, `pooled` is `[B, C, F]`.
pub fn aggregate_dynamics<'t>(
    alpha: Var<'t>,
    beta: Var<'t>,
    gate: Var<'t>,
    pooled: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let f_ta = alpha.mul(gate)?.sum_axis(3, false)?;
    let f_va = beta.mul(gate)?.sum_axis(3, false)?;
    let combined = f_ta.add(f_va)?.add(pooled)?;
    Ok((f_ta, f_va, combined))
}

/// `sum_k gamma_k(f) * (W_k conv x)`.
///
/// `x` is `[B, 1, F, T]`, `gamma` is `[B, K, F]`, `basis` stacks the K
/// kernels as `[K * C_out, 1, k, k]`. Returns `[B, C_out, F, T]`.
pub fn freq_dynamic_conv<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    basis: Var<'t>,
    c_out: usize,
    padding: usize,
) -> Result<Var<'t>> {
    let (b, f, t) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let k = gamma.shape()[1];
    let conv = x
        .conv2d(basis, (1, 1), (padding, padding))?
        .reshape(&[b, k, c_out, f, t])?;
    Ok(conv.mul(gamma.reshape(&[b, k, 1, f, 1])?)?.sum_axis(1, false)?)
}
