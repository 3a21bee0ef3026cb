//! The highlight-detection network: visual self-attention, the two audio
//! pathways, audio fusion, bidirectional cross-attention and the score head.

pub mod config;
pub mod dynamics;
pub mod layers;
pub mod params;

use std::path::Path;

use dualpath_tensor::{NormMode, Tape, Tensor, Var};

pub use config::{FusionOp, Modalities, ModelConfig, SaPlacement};
pub use dynamics::{aggregate_dynamics, freq_dynamic_conv, DynamicsEncoder, DynamicsTrace};
pub use layers::{frame_difference_var, mse_loss, ConvBlock, LayerNorm, Linear, MultiHeadAttention, ScoreHead, SelfAttention};
pub use params::{Ctx, Init, ParamId, ParamStore, StatsId};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Model inputs for a batch of videos sharing the same `t_f`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    /// `[B, T_f, d_v]`.
    pub visual: Option<Tensor>,
    /// `[B, T_f, d_s]`.
    pub semantic: Option<Tensor>,
    /// Log-mel spectrograms `[B, F, T]`.
    pub spectrogram: Option<Tensor>,
    pub t_f: usize,
}

impl Batch {
    /// Stacks equally shaped per-video tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
        if let Some(bad) = items.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::Data(format!(
                "batch items disagree in shape: {:?} vs {:?}",
                first.shape(),
                bad.shape()
            )));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::new(&shape, data)?)
    }
}

/// Combines the semantic and dynamics streams.
#[derive(Debug, Clone)]
pub enum AudioFusion {
    Semantic(SelfAttention),
    Dynamics(SelfAttention),
    Early {
        semantic: SelfAttention,
        dynamics: SelfAttention,
        proj: Option<Linear>,
    },
    Late {
        proj: Option<Linear>,
        sa: SelfAttention,
    },
}

impl AudioFusion {
    /// Elementwise product, or concatenation projected by `proj`.
    pub fn combine<'t>(ctx: &Ctx<'t>, proj: Option<&Linear>, zs: Var<'t>, zd: Var<'t>) -> Result<Var<'t>> {
        match proj {
            None => Ok(zs.mul(zd)?),
            Some(p) => p.forward(ctx, ctx.tape().concat(&[zs, zd], 2)?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    /// Visual queries over audio keys and values.
    pub audio_to_visual: MultiHeadAttention,
    /// Audio queries over visual keys and values.
    pub visual_to_audio: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct Arch {
    visual: Option<SelfAttention>,
    dynamics: Option<DynamicsEncoder>,
    fusion: Option<AudioFusion>,
    cross: Option<CrossAttention>,
    head: ScoreHead,
}

/// Named intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace<'t> {
    /// Contextualized visual stream `Z'_v`.
    pub visual: Option<Var<'t>>,
    /// Raw dynamics sequence `Z_a^d`.
    pub dynamics_raw: Option<Var<'t>>,
    pub dynamics: Option<DynamicsTrace<'t>>,
    /// Contextualized semantic and dynamics streams (early placement or single stream).
    pub semantic_ctx: Option<Var<'t>>,
    pub dynamics_ctx: Option<Var<'t>>,
    /// Fused audio representation `Z'_a`.
    pub audio: Option<Var<'t>>,
    pub s_v: Option<Var<'t>>,
    pub s_a: Option<Var<'t>>,
    /// Every attention weight tensor `[B, H, Tq, Tk]`, labelled.
    pub attention: Vec<(&'static str, Var<'t>)>,
    pub head_input: Option<Var<'t>>,
}

pub struct Forward<'t> {
    /// `[B, T_f]` in `(0, 1)`.
    pub scores: Var<'t>,
    pub trace: Trace<'t>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.init_seed);
        let c = &config;
        let m = c.modalities;
        let (heads, eps) = (c.attn_heads, c.ln_eps);
        let visual = m.visual.then(|| SelfAttention::new(&mut init, "visual_sa", c.d_v, heads, eps));
        let dynamics = m.dynamics.then(|| DynamicsEncoder::new(&mut init, "dynamics", c));
        let concat_proj = |init: &mut Init| {
            (c.fusion_op == FusionOp::Concat).then(|| Linear::new(init, "fusion.proj", c.d_s + c.d_d, c.d_a, true))
        };
        let fusion = match (m.semantic, m.dynamics, c.sa_placement) {
            (false, false, _) => None,
            (true, false, _) => Some(AudioFusion::Semantic(SelfAttention::new(&mut init, "semantic_sa", c.d_s, heads, eps))),
            (false, true, _) => Some(AudioFusion::Dynamics(SelfAttention::new(&mut init, "dynamics_sa", c.d_d, heads, eps))),
            (true, true, SaPlacement::Early) => Some(AudioFusion::Early {
                semantic: SelfAttention::new(&mut init, "semantic_sa", c.d_s, heads, eps),
                dynamics: SelfAttention::new(&mut init, "dynamics_sa", c.d_d, heads, eps),
                proj: concat_proj(&mut init),
            }),
            (true, true, SaPlacement::Late) => Some(AudioFusion::Late {
                proj: concat_proj(&mut init),
                sa: SelfAttention::new(&mut init, "audio_sa", c.d_a, heads, eps),
            }),
        };
        let cross = match (m.visual, c.audio_dim()) {
            (true, Some(d_a)) => Some(CrossAttention {
                audio_to_visual: MultiHeadAttention::new(&mut init, "cross.a2v", c.d_v, d_a, heads),
                visual_to_audio: MultiHeadAttention::new(&mut init, "cross.v2a", d_a, c.d_v, heads),
            }),
            _ => None,
        };
        let head = ScoreHead::new(&mut init, "head", c.head_input_dim());
        Ok(Self {
            params: init.finish(),
            arch: Arch {
                visual,
                dynamics,
                fusion,
                cross,
                head,
            },
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dynamics_encoder(&self) -> Option<&DynamicsEncoder> {
        self.arch.dynamics.as_ref()
    }

    pub fn fusion(&self) -> Option<&AudioFusion> {
        self.arch.fusion.as_ref()
    }

    pub fn cross_attention(&self) -> Option<&CrossAttention> {
        self.arch.cross.as_ref()
    }

    pub fn head(&self) -> &ScoreHead {
        &self.arch.head
    }

    /// Binds the current parameters onto `tape`.
    pub fn ctx<'t>(&self, tape: &'t Tape, mode: NormMode, trainable: bool) -> Ctx<'t> {
        self.ctx_with(tape, self.params.values(), mode, trainable)
    }

    /// Binds substitute parameter values, e.g. perturbed copies for finite differences.
    pub fn ctx_with<'t>(&self, tape: &'t Tape, values: &[Tensor], mode: NormMode, trainable: bool) -> Ctx<'t> {
        Ctx::new(
            tape,
            values,
            self.params.stats(),
            mode,
            trainable,
            self.config.bn_momentum,
            self.config.bn_eps,
        )
    }

    fn check_seq(&self, name: &str, t: Option<&Tensor>, dim: usize, t_f: usize) -> Result<usize> {
        let t = t.ok_or_else(|| Error::Data(format!("{name} input required by modalities {}", self.config.modalities)))?;
        let s = t.shape();
        if s.len() != 3 || s[1] != t_f || s[2] != dim {
            return Err(Error::Data(format!("{name} input must be [B, {t_f}, {dim}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// Batch size after checking every input the configured modalities need.
    pub fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let m = self.config.modalities;
        let mut sizes = Vec::new();
        if batch.t_f == 0 {
            return Err(Error::Data("t_f must be positive".into()));
        }
        if m.visual {
            sizes.push(self.check_seq("visual", batch.visual.as_ref(), self.config.d_v, batch.t_f)?);
        }
        if m.semantic {
            sizes.push(self.check_seq("semantic", batch.semantic.as_ref(), self.config.d_s, batch.t_f)?);
        }
        if m.dynamics {
            let s = batch
                .spectrogram
                .as_ref()
                .ok_or_else(|| Error::Data("spectrogram input required by the dynamics stream".into()))?;
            sizes.push(s.shape()[0]);
        }
        let b = sizes[0];
        if sizes.iter().any(|&s| s != b) {
            return Err(Error::Data(format!("inputs disagree on batch size: {sizes:?}")));
        }
        Ok(b)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, batch: &Batch) -> Result<Forward<'t>> {
        self.forward_impl(ctx, batch, None)
    }

    /// Like [`Model::forward`], reading the spectrogram from `spec` so
    /// gradients can flow back to it.
    pub fn forward_with_spectrogram<'t>(&self, ctx: &Ctx<'t>, batch: &Batch, spec: Var<'t>) -> Result<Forward<'t>> {
        self.forward_impl(ctx, batch, Some(spec))
    }

    fn forward_impl<'t>(&self, ctx: &Ctx<'t>, batch: &Batch, spec: Option<Var<'t>>) -> Result<Forward<'t>> {
        self.check_batch(batch)?;
        let a = &self.arch;
        let mut trace = Trace::default();

        let z_v = match &a.visual {
            Some(sa) => {
                let x = ctx.constant(batch.visual.clone().expect("checked"));
                let (z, attn) = sa.forward(ctx, x)?;
                trace.attention.push(("visual_sa", attn));
                trace.visual = Some(z);
                Some(z)
            }
            None => None,
        };

        let z_d = match &a.dynamics {
            Some(enc) => {
                let s = spec.unwrap_or_else(|| ctx.constant(batch.spectrogram.clone().expect("checked")));
                let (z, dt) = enc.forward(ctx, s, batch.t_f)?;
                trace.dynamics = Some(dt);
                trace.dynamics_raw = Some(z);
                Some(z)
            }
            None => None,
        };
        let z_s = self
            .config
            .modalities
            .semantic
            .then(|| ctx.constant(batch.semantic.clone().expect("checked")));

        let z_a = match &a.fusion {
            None => None,
            Some(AudioFusion::Semantic(sa)) => {
                let (z, attn) = sa.forward(ctx, z_s.expect("semantic"))?;
                trace.attention.push(("semantic_sa", attn));
                trace.semantic_ctx = Some(z);
                Some(z)
            }
            Some(AudioFusion::Dynamics(sa)) => {
                let (z, attn) = sa.forward(ctx, z_d.expect("dynamics"))?;
                trace.attention.push(("dynamics_sa", attn));
                trace.dynamics_ctx = Some(z);
                Some(z)
            }
            Some(AudioFusion::Early {
                semantic,
                dynamics,
                proj,
            }) => {
                let (zs, attn_s) = semantic.forward(ctx, z_s.expect("semantic"))?;
                let (zd, attn_d) = dynamics.forward(ctx, z_d.expect("dynamics"))?;
                trace.attention.push(("semantic_sa", attn_s));
                trace.attention.push(("dynamics_sa", attn_d));
                trace.semantic_ctx = Some(zs);
                trace.dynamics_ctx = Some(zd);
                Some(AudioFusion::combine(ctx, proj.as_ref(), zs, zd)?)
            }
            Some(AudioFusion::Late { proj, sa }) => {
                let fused = AudioFusion::combine(ctx, proj.as_ref(), z_s.expect("semantic"), z_d.expect("dynamics"))?;
                let (z, attn) = sa.forward(ctx, fused)?;
                trace.attention.push(("audio_sa", attn));
                Some(z)
            }
        };
        trace.audio = z_a;

        let head_in = match (z_v, z_a, &a.cross) {
            (Some(v), Some(au), Some(cross)) => {
                let (a2v, attn_av) = cross.audio_to_visual.forward(ctx, v, au)?;
                let (v2a, attn_va) = cross.visual_to_audio.forward(ctx, au, v)?;
                trace.attention.push(("cross_a2v", attn_av));
                trace.attention.push(("cross_v2a", attn_va));
                let s_v = v.add(a2v)?;
                let s_a = au.add(v2a)?;
                trace.s_v = Some(s_v);
                trace.s_a = Some(s_a);
                ctx.tape().concat(&[v, au, s_v, s_a], 2)?
            }
            (Some(v), None, _) => v,
            (None, Some(au), _) => au,
            _ => unreachable!("validated modalities"),
        };
        trace.head_input = Some(head_in);
        let scores = a.head.forward(ctx, head_in)?;
        Ok(Forward { scores, trace })
    }

    /// Eval-mode scores `[B, T_f]` without recording gradients.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = self.ctx(&tape, NormMode::Eval, false);
        let out = self.forward(&ctx, batch)?;
        Ok((*out.scores.value()).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({ "model": self.config }),
            tensors: self.params.to_named_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = ckpt
            .config
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Data("checkpoint header lacks a model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Data(format!("checkpoint model config: {e}"))))?;
        let mut model = Model::new(config)?;
        model.params.load_from(ckpt)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
