use super::config::{LayerPlan, ModelConfig, Paradigm};
use crate::attention::check_heads;
use crate::conditioning::{AttnCondParams, CondParams};
use crate::error::{config_err, Result};
use crate::io::TensorStore;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::viln::{DeltaProjection, LnParams};

/// Standard deviation of every initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

const FMI_STREAM: u64 = 1;
const CROSSATTN_STREAM: u64 = 2;
const CONNECTOR_STREAM: u64 = 3;

/// Two-layer GELU feed-forward, `[C×d_ff]` then `[d_ff×C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    fn init(channels: usize, d_ff: usize, rng: &mut Rng) -> Self {
        FfnParams {
            w1: rng.normal_tensor(&[channels, d_ff], INIT_STD),
            b1: Tensor::zeros(&[d_ff]),
            w2: rng.normal_tensor(&[d_ff, channels], INIT_STD),
            b2: Tensor::zeros(&[channels]),
        }
    }
}

impl ParamSet for FfnParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w1", &mut self.w1), ("b1", &mut self.b1), ("w2", &mut self.w2), ("b2", &mut self.b2)]
    }
}

/// Causal self-attention projections, bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl ParamSet for SelfAttnParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv), ("wo", &mut self.wo)]
    }
}

/// An inserted interaction layer: pre-norm cross-attention from text to
/// visual tokens, then a pre-norm FFN, each with a residual. The attention
/// output projection and the second FFN matrix start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub ln_attn: LnParams,
    pub attn: AttnCondParams,
    pub ln_ffn: LnParams,
    pub ffn: FfnParams,
}

impl CrossAttnParams {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        let mut attn = AttnCondParams::init(c, cfg.cond_heads, rng, INIT_STD)?;
        attn.wo = Tensor::zeros(&[c, c]);
        let mut ffn = FfnParams::init(c, cfg.d_ff, rng);
        ffn.w2 = Tensor::zeros(&[cfg.d_ff, c]);
        Ok(CrossAttnParams {
            ln_attn: LnParams::identity(c, cfg.eps, cfg.norm_mode),
            attn,
            ln_ffn: LnParams::identity(c, cfg.eps, cfg.norm_mode),
            ffn,
        })
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.ln_attn.save(store, &format!("{prefix}.ln_attn"))?;
        self.attn.save(store, &format!("{prefix}.attn"))?;
        self.ln_ffn.save(store, &format!("{prefix}.ln_ffn"))?;
        self.ffn.save(store, &format!("{prefix}.ffn"))
    }

    fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.ln_attn.load(store, &format!("{prefix}.ln_attn"))?;
        self.attn.load(store, &format!("{prefix}.attn"))?;
        self.ln_ffn.load(store, &format!("{prefix}.ln_ffn"))?;
        self.ffn.load(store, &format!("{prefix}.ffn"))
    }
}

/// Per-block parameters owned by one paradigm.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockExtra {
    None,
    Fmi { cond: CondParams, proj: DeltaProjection },
    CrossAttn(CrossAttnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LnParams,
    pub attn: SelfAttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub extra: BlockExtra,
}

impl BlockParams {
    pub fn channels(&self) -> usize {
        self.ln1.channels()
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.ln1.save(store, &format!("{prefix}.ln1"))?;
        self.attn.save(store, &format!("{prefix}.attn"))?;
        self.ln2.save(store, &format!("{prefix}.ln2"))?;
        self.ffn.save(store, &format!("{prefix}.ffn"))?;
        match &self.extra {
            BlockExtra::None => Ok(()),
            BlockExtra::Fmi { cond, proj } => {
                cond.save(store, &format!("{prefix}.cond.{}", cond.kind()))?;
                proj.save(store, &format!("{prefix}.delta_proj"))
            }
            BlockExtra::CrossAttn(x) => x.save(store, &format!("{prefix}.xattn")),
        }
    }

    fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.ln1.load(store, &format!("{prefix}.ln1"))?;
        self.attn.load(store, &format!("{prefix}.attn"))?;
        self.ln2.load(store, &format!("{prefix}.ln2"))?;
        self.ffn.load(store, &format!("{prefix}.ffn"))?;
        match &mut self.extra {
            BlockExtra::None => Ok(()),
            BlockExtra::Fmi { cond, proj } => {
                let kind = cond.kind();
                cond.load(store, &format!("{prefix}.cond.{kind}"))?;
                proj.load(store, &format!("{prefix}.delta_proj"))
            }
            BlockExtra::CrossAttn(x) => x.load(store, &format!("{prefix}.xattn")),
        }
    }
}

/// Linear map from encoder space into the model for the prefix paradigm.
#[derive(Debug, Clone, PartialEq)]
pub struct Connector {
    pub w: Tensor,
    pub b: Tensor,
}

impl ParamSet for Connector {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("W", &self.w), ("b", &self.b)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("W", &mut self.w), ("b", &mut self.b)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub plan: LayerPlan,
    pub blocks: Vec<BlockParams>,
    pub connector: Option<Connector>,
}

impl ModelWeights {
    /// Seeded initialization. The backbone draws from `Rng::new(seed)`
    /// alone, so every paradigm built from one seed shares it exactly;
    /// paradigm extras draw from derived streams.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.plan()?;
        let (c, d_ff) = (config.channels, config.d_ff);
        let mut rng = Rng::new(config.seed);
        let mut blocks: Vec<BlockParams> = (0..config.layers)
            .map(|_| BlockParams {
                ln1: LnParams::identity(c, config.eps, config.norm_mode),
                attn: SelfAttnParams {
                    wq: rng.normal_tensor(&[c, c], INIT_STD),
                    wk: rng.normal_tensor(&[c, c], INIT_STD),
                    wv: rng.normal_tensor(&[c, c], INIT_STD),
                    wo: rng.normal_tensor(&[c, c], INIT_STD),
                },
                ln2: LnParams::identity(c, config.eps, config.norm_mode),
                ffn: FfnParams::init(c, d_ff, &mut rng),
                extra: BlockExtra::None,
            })
            .collect();
        match config.paradigm {
            Paradigm::Fmi => {
                let mut extra_rng = rng.derive(FMI_STREAM);
                let shape = config.cond_shape();
                for &l in &plan.modulated {
                    blocks[l].extra = BlockExtra::Fmi {
                        cond: CondParams::init(&shape, &mut extra_rng, INIT_STD)?,
                        proj: DeltaProjection::zeros(c, c),
                    };
                }
            }
            Paradigm::CrossAttn => {
                let mut extra_rng = rng.derive(CROSSATTN_STREAM);
                for &l in &plan.modulated {
                    blocks[l].extra = BlockExtra::CrossAttn(CrossAttnParams::init(config, &mut extra_rng)?);
                }
            }
            Paradigm::InContext | Paradigm::Base => {}
        }
        let connector = (config.paradigm == Paradigm::InContext).then(|| {
            let mut extra_rng = Rng::new(config.seed).derive(CONNECTOR_STREAM);
            Connector { w: extra_rng.normal_tensor(&[c, c], INIT_STD), b: Tensor::zeros(&[c]) }
        });
        Ok(ModelWeights { config: config.clone(), plan, blocks, connector })
    }

    /// Moves the zero-initialized parts (delta projections, inserted output
    /// maps) to `N(0, std²)` draws so that vision has a visible effect.
    pub fn randomize(&mut self, rng: &mut Rng, std: f64) {
        for block in &mut self.blocks {
            match &mut block.extra {
                BlockExtra::None => {}
                BlockExtra::Fmi { proj, .. } => {
                    proj.w = rng.normal_tensor(proj.w.shape(), std);
                    proj.b = rng.normal_tensor(proj.b.shape(), std);
                }
                BlockExtra::CrossAttn(x) => {
                    x.attn.wo = rng.normal_tensor(x.attn.wo.shape(), std);
                    x.ffn.w2 = rng.normal_tensor(x.ffn.w2.shape(), std);
                }
            }
        }
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        check_heads(self.config.channels, self.config.heads)?;
        if self.blocks.len() != self.config.layers {
            return config_err(format!("{} blocks for {} layers", self.blocks.len(), self.config.layers));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let expected = self.plan.contains(l);
            let ok = match (&b.extra, self.config.paradigm) {
                (BlockExtra::None, _) => !expected,
                (BlockExtra::Fmi { .. }, Paradigm::Fmi) | (BlockExtra::CrossAttn(_), Paradigm::CrossAttn) => expected,
                _ => false,
            };
            if !ok {
                return config_err(format!("layer {l} extras do not match the {} plan", self.config.paradigm));
            }
        }
        Ok(())
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for (l, b) in self.blocks.iter().enumerate() {
            b.save(&mut store, &format!("layer{l}"))?;
        }
        if let Some(conn) = &self.connector {
            conn.save(&mut store, "connector")?;
        }
        Ok(store)
    }

    /// Rebuilds weights for `config` from a store holding exactly the
    /// tensors [`to_store`](Self::to_store) writes.
    pub fn from_store(config: &ModelConfig, store: &TensorStore) -> Result<Self> {
        let mut w = ModelWeights::init(config)?;
        for (l, b) in w.blocks.iter_mut().enumerate() {
            b.load(store, &format!("layer{l}"))?;
        }
        if let Some(conn) = &mut w.connector {
            conn.load(store, "connector")?;
        }
        let expected = w.to_store()?.len();
        if store.len() != expected {
            return config_err(format!("weight file holds {} tensors, config expects {expected}", store.len()));
        }
        Ok(w)
    }
}
