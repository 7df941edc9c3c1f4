//! Conditioners: per-text-token functions of `(t_i, v)` that produce the
//! vision-aware vector fed to the delta projection.
//!
//! Each text token is processed independently against the whole visual
//! context. The MLP and convolution variants build the sequence `[t_i; v]`
//! (text token first) and read the result back at position 0; the attention
//! variant uses `t_i` as the query against keys and values taken from `v`.
//!
//! Every variant exposes a batched forward, a naive per-token reference
//! (`*_loop` / [`attn_oracle`]) and a backward pass.

mod attn;
mod conv;
mod mlp;

use std::fmt;
use std::str::FromStr;

pub use attn::{attn_oracle, cond_attn, cond_attn_backward, AttnCondParams};
pub use conv::{cond_conv, cond_conv_backward, cond_conv_loop, ConvCondParams};
pub use mlp::{cond_mlp, cond_mlp_backward, cond_mlp_loop, MlpCondParams};

use crate::error::{dim_err, Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Visual tokens `[V×C]` after the vision front-end, with a free-form tag
/// describing where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualContext {
    v: Tensor,
    source_tag: String,
}

impl VisualContext {
    pub fn new(v: Tensor, source_tag: impl Into<String>) -> Result<Self> {
        let (rows, _) = v.dims2()?;
        if rows == 0 {
            return dim_err("visual context needs at least one token");
        }
        Ok(VisualContext { v, source_tag: source_tag.into() })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.v.row_len()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Same tag, different tokens (used by perturbation checks).
    pub fn with_tokens(&self, v: Tensor) -> Result<Self> {
        VisualContext::new(v, self.source_tag.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CondKind {
    Mlp,
    Conv,
    #[default]
    Attn,
}

impl CondKind {
    pub const ALL: [CondKind; 3] = [CondKind::Mlp, CondKind::Conv, CondKind::Attn];

    pub fn as_str(self) -> &'static str {
        match self {
            CondKind::Mlp => "mlp",
            CondKind::Conv => "conv",
            CondKind::Attn => "attn",
        }
    }
}

impl fmt::Display for CondKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(CondKind::Mlp),
            "conv" => Ok(CondKind::Conv),
            "attn" => Ok(CondKind::Attn),
            _ => Err(Error::Config(format!("unknown conditioner kind {s:?}"))),
        }
    }
}

/// Hyperparameters needed to build any conditioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondShape {
    pub kind: CondKind,
    pub channels: usize,
    /// Fixed visual length; only the MLP variant depends on it.
    pub visual_tokens: usize,
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub kernel: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CondParams {
    Mlp(MlpCondParams),
    Conv(ConvCondParams),
    Attn(AttnCondParams),
}

impl CondParams {
    pub fn init(shape: &CondShape, rng: &mut Rng, std: f64) -> Result<Self> {
        Ok(match shape.kind {
            CondKind::Mlp => CondParams::Mlp(MlpCondParams::init(
                shape.channels,
                shape.visual_tokens,
                shape.token_expansion,
                shape.channel_expansion,
                rng,
                std,
            )?),
            CondKind::Conv => CondParams::Conv(ConvCondParams::init(shape.channels, shape.kernel, rng, std)?),
            CondKind::Attn => CondParams::Attn(AttnCondParams::init(shape.channels, shape.heads, rng, std)?),
        })
    }

    pub fn kind(&self) -> CondKind {
        match self {
            CondParams::Mlp(_) => CondKind::Mlp,
            CondParams::Conv(_) => CondKind::Conv,
            CondParams::Attn(_) => CondKind::Attn,
        }
    }

    /// Conditioning vectors `[T×C]` for text rows `t: [T×C]`.
    pub fn forward(&self, t: &Tensor, v: &VisualContext) -> Result<Tensor> {
        match self {
            CondParams::Mlp(p) => cond_mlp(t, v, p),
            CondParams::Conv(p) => cond_conv(t, v, p),
            CondParams::Attn(p) => cond_attn(t, v, p),
        }
    }

    /// Gradients `(∂t, ∂v, ∂params)` for upstream `dy: [T×C]`.
    pub fn backward(&self, t: &Tensor, v: &VisualContext, dy: &Tensor) -> Result<(Tensor, Tensor, CondParams)> {
        Ok(match self {
            CondParams::Mlp(p) => {
                let (dt, dv, g) = cond_mlp_backward(t, v, p, dy)?;
                (dt, dv, CondParams::Mlp(g))
            }
            CondParams::Conv(p) => {
                let (dt, dv, g) = cond_conv_backward(t, v, p, dy)?;
                (dt, dv, CondParams::Conv(g))
            }
            CondParams::Attn(p) => {
                let (dt, dv, g) = cond_attn_backward(t, v, p, dy)?;
                (dt, dv, CondParams::Attn(g))
            }
        })
    }
}

impl ParamSet for CondParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            CondParams::Mlp(p) => p.fields(),
            CondParams::Conv(p) => p.fields(),
            CondParams::Attn(p) => p.fields(),
        }
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            CondParams::Mlp(p) => p.fields_mut(),
            CondParams::Conv(p) => p.fields_mut(),
            CondParams::Attn(p) => p.fields_mut(),
        }
    }
}

fn check_text(t: &Tensor, v: &VisualContext) -> Result<(usize, usize)> {
    let (rows, c) = t.dims2()?;
    if c != v.channels() {
        return dim_err(format!("text width {c} but visual width {}", v.channels()));
    }
    Ok((rows, c))
}
