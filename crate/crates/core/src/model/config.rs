use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaPlacement {
    /// Self-attention on each audio stream, then combine.
    Early,
    /// Combine the audio streams, then one self-attention block.
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    Multiply,
    /// Concatenate and project linearly to `d_a`.
    Concat,
}

impl FromStr for SaPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "early" => Ok(SaPlacement::Early),
            "late" => Ok(SaPlacement::Late),
            _ => Err(Error::Config(format!("sa_placement must be early or late, got {s:?}"))),
        }
    }
}

impl FromStr for FusionOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multiply" | "mul" => Ok(FusionOp::Multiply),
            "concat" => Ok(FusionOp::Concat),
            _ => Err(Error::Config(format!("fusion_op must be multiply or concat, got {s:?}"))),
        }
    }
}

impl fmt::Display for SaPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaPlacement::Early => "early",
            SaPlacement::Late => "late",
        })
    }
}

impl fmt::Display for FusionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionOp::Multiply => "multiply",
            FusionOp::Concat => "concat",
        })
    }
}

/// Which input streams the model consumes, written like `V+As+Ad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modalities {
    pub visual: bool,
    pub semantic: bool,
    pub dynamics: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        visual: true,
        semantic: true,
        dynamics: true,
    };

    /// The seven nonempty subsets: singles, pairs, then all three.
    pub fn subsets() -> [Modalities; 7] {
        let m = |visual, semantic, dynamics| Modalities {
            visual,
            semantic,
            dynamics,
        };
        [
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }

    pub fn has_audio(&self) -> bool {
        self.semantic || self.dynamics
    }

    pub fn is_empty(&self) -> bool {
        !(self.visual || self.has_audio())
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.visual, "V"), (self.semantic, "As"), (self.dynamics, "Ad")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for Modalities {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities {
            visual: false,
            semantic: false,
            dynamics: false,
        };
        for part in s.split('+').map(str::trim) {
            let slot = match part.to_ascii_lowercase().as_str() {
                "v" => &mut m.visual,
                "as" | "a_s" => &mut m.semantic,
                "ad" | "a_d" => &mut m.dynamics,
                _ => return Err(Error::Config(format!("unknown modality {part:?} in {s:?}"))),
            };
            if std::mem::replace(slot, true) {
                return Err(Error::Config(format!("modality {part:?} repeated in {s:?}")));
            }
        }
        Ok(m)
    }
}

impl TryFrom<String> for Modalities {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modalities> for String {
    fn from(m: Modalities) -> String {
        m.to_string()
    }
}

/// Architecture hyperparameters. The segment count `T_f` comes from each input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_s: usize,
    pub d_d: usize,
    pub d_a: usize,
    /// Mel bins `F` of the input spectrogram.
    pub n_mels: usize,
    /// Number of basis kernels `K`.
    pub basis_kernels: usize,
    /// Channels after the first convolution of every conv block.
    pub conv_hidden: usize,
    /// Output channels `C'` of the attention, gate and pooling branches.
    pub branch_channels: usize,
    /// Output channels of each basis kernel.
    pub dyn_channels: usize,
    /// Odd square kernel size used by the 2-D conv blocks and basis kernels.
    pub kernel_size: usize,
    pub attn_heads: usize,
    pub sa_placement: SaPlacement,
    pub fusion_op: FusionOp,
    pub modalities: Modalities,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    /// Seed of the parameter initializer.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size configuration: 2048-d audio streams, 128 mels, four basis kernels.
    pub fn full(d_v: usize) -> Self {
        Self {
            d_v,
            d_s: 2048,
            d_d: 2048,
            d_a: 2048,
            n_mels: 128,
            basis_kernels: 4,
            conv_hidden: 32,
            branch_channels: 32,
            dyn_channels: 16,
            kernel_size: 3,
            attn_heads: 4,
            sa_placement: SaPlacement::Early,
            fusion_op: FusionOp::Multiply,
            modalities: Modalities::ALL,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }

    /// Desk-scale configuration used by the synthetic benchmark and gradient checks.
    pub fn toy() -> Self {
        Self {
            d_v: 8,
            d_s: 16,
            d_d: 16,
            d_a: 16,
            n_mels: 16,
            basis_kernels: 2,
            conv_hidden: 4,
            branch_channels: 4,
            dyn_channels: 4,
            ..Self::full(8)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modalities.is_empty() {
            return bad("modalities must be nonempty".into());
        }
        if self.basis_kernels == 0 {
            return bad("basis_kernels must be at least 1".into());
        }
        let dims = [
            ("d_v", self.d_v),
            ("d_s", self.d_s),
            ("d_d", self.d_d),
            ("d_a", self.d_a),
            ("n_mels", self.n_mels),
            ("conv_hidden", self.conv_hidden),
            ("branch_channels", self.branch_channels),
            ("dyn_channels", self.dyn_channels),
            ("attn_heads", self.attn_heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        let both_audio = self.modalities.semantic && self.modalities.dynamics;
        if both_audio && self.fusion_op == FusionOp::Multiply && !(self.d_s == self.d_d && self.d_d == self.d_a) {
            return bad(format!(
                "multiply fusion needs d_s == d_d == d_a, got {}, {}, {}",
                self.d_s, self.d_d, self.d_a
            ));
        }
        for (name, d) in self.attention_dims() {
            if d % self.attn_heads != 0 {
                return bad(format!("{name} = {d} is not divisible by attn_heads = {}", self.attn_heads));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) || !(self.ln_eps > 0.0) {
            return bad("bn_momentum must lie in (0, 1]; eps values must be positive".into());
        }
        Ok(())
    }

    /// Width of the audio representation that reaches cross-attention and the head.
    pub fn audio_dim(&self) -> Option<usize> {
        match (self.modalities.semantic, self.modalities.dynamics) {
            (true, true) => Some(self.d_a),
            (true, false) => Some(self.d_s),
            (false, true) => Some(self.d_d),
            (false, false) => None,
        }
    }

    /// Per-segment input width of the score head.
    pub fn head_input_dim(&self) -> usize {
        let v = if self.modalities.visual { self.d_v } else { 0 };
        let a = self.audio_dim().unwrap_or(0);
        if v > 0 && a > 0 {
            2 * (v + a)
        } else {
            v + a
        }
    }

    fn attention_dims(&self) -> Vec<(&'static str, usize)> {
        let m = self.modalities;
        let mut dims = Vec::new();
        if m.visual {
            dims.push(("d_v", self.d_v));
        }
        if m.semantic {
            dims.push(("d_s", self.d_s));
        }
        if m.dynamics {
            dims.push(("d_d", self.d_d));
        }
        if m.semantic && m.dynamics {
            dims.push(("d_a", self.d_a));
        }
        dims
    }
}
