use super::config::{ModelConfig, Paradigm};
use super::weights::{BlockExtra, BlockParams, Connector, CrossAttnParams, FfnParams, ModelWeights, SelfAttnParams};
use crate::attention::multi_head;
use crate::conditioning::{cond_attn, VisualContext};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{gelu, matmul, sinusoidal, Tensor};
use crate::viln::{layer_norm, normalize, project_deltas, viln_affine, LnParams, ModulationDeltas};

/// Both views of the first modulated norm slot of one layer, from the same
/// forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationRecord {
    pub layer: usize,
    /// The norm output with the deltas zeroed.
    pub plain: Tensor,
    /// The ViLN output with the actual deltas.
    pub modulated: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub output: Tensor,
    /// Hidden states after each block, `L` entries.
    pub hidden: Vec<Tensor>,
    /// One record per modulated layer (fmi only).
    pub modulation: Vec<ModulationRecord>,
}

/// Adds the sinusoidal encoding of positions `0..S`.
pub fn add_positions(x: &Tensor) -> Result<Tensor> {
    let (s, c) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..s {
        for (o, p) in out.row_mut(i).iter_mut().zip(sinusoidal(i, c)) {
            *o += p;
        }
    }
    Ok(out)
}

pub fn self_attention(x: &Tensor, p: &SelfAttnParams, heads: usize) -> Result<Tensor> {
    let q = matmul(x, &p.wq)?;
    let k = matmul(x, &p.wk)?;
    let v = matmul(x, &p.wv)?;
    let (ctx, _) = multi_head(&q, &k, &v, heads, true)?;
    matmul(&ctx, &p.wo)
}

pub fn feed_forward(x: &Tensor, p: &FfnParams) -> Result<Tensor> {
    let hidden = gelu(&matmul(x, &p.w1)?.add_row(&p.b1)?);
    matmul(&hidden, &p.w2)?.add_row(&p.b2)
}

fn check_width(h: &Tensor, p: &BlockParams) -> Result<()> {
    let (_, c) = h.dims2()?;
    if c != p.channels() {
        return dim_err(format!("hidden width {c}, block width {}", p.channels()));
    }
    Ok(())
}

/// `H ← H + Att(LN1(H)); H ← H + FFN(LN2(H))` with a causal mask.
pub fn block_forward_base(h: &Tensor, p: &BlockParams, heads: usize) -> Result<Tensor> {
    check_width(h, p)?;
    let a = layer_norm(h, &p.ln1)?.output;
    let h1 = h.add(&self_attention(&a, &p.attn, heads)?)?;
    let f = layer_norm(&h1, &p.ln2)?.output;
    h1.add(&feed_forward(&f, &p.ffn)?)?.finite("block")
}

/// Deltas for one modulated block with the ablation switches applied.
pub fn block_deltas(h: &Tensor, v: &VisualContext, p: &BlockParams, cfg: &ModelConfig) -> Result<ModulationDeltas> {
    let BlockExtra::Fmi { cond, proj } = &p.extra else {
        return config_err("block has no conditioner");
    };
    let c = cond.forward(h, v)?;
    let mut d = project_deltas(&c, proj)?;
    let zero = Tensor::zeros(h.shape());
    if !cfg.use_delta_alpha {
        d.d_alpha1 = zero.clone();
        d.d_alpha2 = zero.clone();
    }
    if !cfg.use_delta_beta {
        d.d_beta1 = zero.clone();
        d.d_beta2 = zero;
    }
    Ok(d)
}

fn fmi_block(
    h: &Tensor,
    v: &VisualContext,
    p: &BlockParams,
    cfg: &ModelConfig,
    layer: usize,
    mut records: Option<&mut Vec<ModulationRecord>>,
) -> Result<Tensor> {
    check_width(h, p)?;
    let d = block_deltas(h, v, p, cfg)?;
    let mut modulated = |x: &Tensor, ln: &LnParams, da: &Tensor, db: &Tensor, record: bool| -> Result<Tensor> {
        let n = normalize(x, ln.eps, ln.mode)?;
        let out = viln_affine(&n.xhat, da, db, ln)?;
        if let (true, Some(r)) = (record, records.as_deref_mut()) {
            let z = Tensor::zeros(x.shape());
            r.push(ModulationRecord { layer, plain: viln_affine(&n.xhat, &z, &z, ln)?, modulated: out.clone() });
        }
        Ok(out)
    };
    let slot1 = if cfg.modulate_attn {
        modulated(h, &p.ln1, &d.d_alpha1, &d.d_beta1, true)?
    } else {
        layer_norm(h, &p.ln1)?.output
    };
    let h1 = h.add(&self_attention(&slot1, &p.attn, cfg.heads)?)?;
    let slot2 = if cfg.modulate_ffn {
        modulated(&h1, &p.ln2, &d.d_alpha2, &d.d_beta2, !cfg.modulate_attn)?
    } else {
        layer_norm(&h1, &p.ln2)?.output
    };
    h1.add(&feed_forward(&slot2, &p.ffn)?)?.finite("block")
}

/// A block with ViLN at the slots enabled in `cfg`; the conditioner reads
/// the block's incoming hidden states.
pub fn block_forward_fmi(h: &Tensor, v: &VisualContext, p: &BlockParams, cfg: &ModelConfig) -> Result<Tensor> {
    fmi_block(h, v, p, cfg, 0, None)
}

/// `H + CrossAttn(LN(H), v)` followed by `H + FFN(LN(H))`.
pub fn inserted_layer(h: &Tensor, v: &VisualContext, p: &CrossAttnParams) -> Result<Tensor> {
    let a = layer_norm(h, &p.ln_attn)?.output;
    let h1 = h.add(&cond_attn(&a, v, &p.attn)?)?;
    let f = layer_norm(&h1, &p.ln_ffn)?.output;
    h1.add(&feed_forward(&f, &p.ffn)?)?.finite("inserted layer")
}

pub fn connect(v: &VisualContext, c: &Connector) -> Result<Tensor> {
    matmul(v.tokens(), &c.w)?.add_row(&c.b)
}

fn check_text(t_emb: &Tensor, w: &ModelWeights) -> Result<()> {
    let (t, c) = t_emb.dims2()?;
    if t == 0 {
        return dim_err("no text tokens");
    }
    if c != w.config.channels {
        return dim_err(format!("text width {c}, model width {}", w.config.channels));
    }
    Ok(())
}

fn require(w: &ModelWeights, paradigm: Paradigm) -> Result<()> {
    w.check()?;
    if w.config.paradigm != paradigm {
        return config_err(format!("weights are for {}, not {paradigm}", w.config.paradigm));
    }
    Ok(())
}

fn need_visual(v: Option<&VisualContext>, paradigm: Paradigm) -> Result<&VisualContext> {
    v.ok_or_else(|| crate::Error::Config(format!("{paradigm} needs a visual context")))
}

/// Runs the model as configured, recording every block output. Extras are
/// ignored when `as_base` is set, giving the shared language stack.
fn run(w: &ModelWeights, t_emb: &Tensor, v: Option<&VisualContext>, as_base: bool, capture: bool) -> Result<ForwardTrace> {
    w.check()?;
    check_text(t_emb, w)?;
    let cfg = &w.config;
    let paradigm = if as_base { Paradigm::Base } else { cfg.paradigm };
    let mut h = match paradigm {
        Paradigm::InContext => match v {
            Some(v) => {
                let conn = w.connector.as_ref().ok_or_else(|| crate::Error::Config("missing connector".into()))?;
                add_positions(&Tensor::concat_rows(&[&connect(v, conn)?, t_emb])?)?
            }
            None => add_positions(t_emb)?,
        },
        _ => add_positions(t_emb)?,
    };
    let mut hidden = Vec::with_capacity(cfg.layers);
    let mut modulation = Vec::new();
    for (l, block) in w.blocks.iter().enumerate() {
        h = match (&block.extra, paradigm) {
            (BlockExtra::Fmi { .. }, Paradigm::Fmi) => {
                let v = need_visual(v, paradigm)?;
                fmi_block(&h, v, block, cfg, l, capture.then_some(&mut modulation))?
            }
            (BlockExtra::CrossAttn(x), Paradigm::CrossAttn) => {
                let v = need_visual(v, paradigm)?;
                block_forward_base(&inserted_layer(&h, v, x)?, block, cfg.heads)?
            }
            _ => block_forward_base(&h, block, cfg.heads)?,
        };
        if capture {
            hidden.push(h.clone());
        }
    }
    Ok(ForwardTrace { output: h, hidden, modulation })
}

/// The plain language stack shared by every paradigm built from one seed.
pub fn forward_base(t_emb: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    Ok(run(w, t_emb, None, true, false)?.output)
}

pub fn forward_fmi(t_emb: &Tensor, v: &VisualContext, w: &ModelWeights) -> Result<Tensor> {
    require(w, Paradigm::Fmi)?;
    Ok(run(w, t_emb, Some(v), false, false)?.output)
}

/// `[connector(v); t]` through the base blocks; `None` runs text only.
pub fn forward_incontext(t_emb: &Tensor, v: Option<&VisualContext>, w: &ModelWeights) -> Result<Tensor> {
    require(w, Paradigm::InContext)?;
    Ok(run(w, t_emb, v, false, false)?.output)
}

pub fn forward_crossattn(t_emb: &Tensor, v: &VisualContext, w: &ModelWeights) -> Result<Tensor> {
    require(w, Paradigm::CrossAttn)?;
    Ok(run(w, t_emb, Some(v), false, false)?.output)
}

/// Forward pass of whatever paradigm `w` was built for, keeping every
/// block output and, for fmi, the plain and modulated norm outputs.
pub fn forward_traced(t_emb: &Tensor, v: Option<&VisualContext>, w: &ModelWeights) -> Result<ForwardTrace> {
    run(w, t_emb, v, false, true)
}

/// [`forward_traced`] for the plain language stack of `w`.
pub fn forward_base_traced(t_emb: &Tensor, w: &ModelWeights) -> Result<ForwardTrace> {
    run(w, t_emb, None, true, true)
}
