//! Cross-attention conditioner: text rows are queries, visual tokens supply
//! keys and values. Bias-free projections, no mask.

use super::{check_text, VisualContext};
use crate::attention::{check_heads, multi_head, multi_head_backward};
use crate::error::{dim_err, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnCondParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttnCondParams {
    pub fn init(channels: usize, heads: usize, rng: &mut Rng, std: f64) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(AttnCondParams {
            wq: rng.normal_tensor(&[channels, channels], std),
            wk: rng.normal_tensor(&[channels, channels], std),
            wv: rng.normal_tensor(&[channels, channels], std),
            wo: rng.normal_tensor(&[channels, channels], std),
            heads,
        })
    }

    fn check(&self, t: &Tensor, v: &VisualContext) -> Result<(usize, usize)> {
        let (rows, c) = check_text(t, v)?;
        check_heads(c, self.heads)?;
        if self.wq.shape() != [c, c] {
            return dim_err(format!("attention conditioner does not match width {c}"));
        }
        Ok((rows, c))
    }
}

impl ParamSet for AttnCondParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv), ("wo", &mut self.wo)]
    }
}

/// Batched cross-attention conditioning of text rows `t: [T×C]`.
pub fn cond_attn(t: &Tensor, v: &VisualContext, p: &AttnCondParams) -> Result<Tensor> {
    p.check(t, v)?;
    let q = matmul(t, &p.wq)?;
    let k = matmul(v.tokens(), &p.wk)?;
    let val = matmul(v.tokens(), &p.wv)?;
    let (ctx, _) = multi_head(&q, &k, &val, p.heads, false)?;
    matmul(&ctx, &p.wo)
}

/// Reference path: explicit loops over queries, heads and keys.
pub fn attn_oracle(t: &Tensor, v: &VisualContext, p: &AttnCondParams) -> Result<Tensor> {
    let (rows, c) = p.check(t, v)?;
    let vis = v.tokens();
    let nv = v.len();
    let d = c / p.heads;
    let proj = |x: &[f64], w: &Tensor, col: usize| -> f64 { (0..c).map(|i| x[i] * w.at2(i, col)).sum() };
    let keys: Vec<Vec<f64>> = (0..nv).map(|m| (0..c).map(|j| proj(vis.row(m), &p.wk, j)).collect()).collect();
    let values: Vec<Vec<f64>> = (0..nv).map(|m| (0..c).map(|j| proj(vis.row(m), &p.wv, j)).collect()).collect();
    let mut out = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        let query: Vec<f64> = (0..c).map(|j| proj(t.row(i), &p.wq, j)).collect();
        let mut ctx = vec![0.0; c];
        for h in 0..p.heads {
            let lanes = h * d..(h + 1) * d;
            let logits: Vec<f64> = keys
                .iter()
                .map(|key| lanes.clone().map(|j| query[j] * key[j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for j in lanes {
                ctx[j] = weights.iter().zip(&values).map(|(w, val)| w / total * val[j]).sum();
            }
        }
        for j in 0..c {
            out.set2(i, j, proj(&ctx, &p.wo, j));
        }
    }
    out.finite("attn_oracle")
}

pub fn cond_attn_backward(
    t: &Tensor,
    v: &VisualContext,
    p: &AttnCondParams,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, AttnCondParams)> {
    p.check(t, v)?;
    let q = matmul(t, &p.wq)?;
    let k = matmul(v.tokens(), &p.wk)?;
    let val = matmul(v.tokens(), &p.wv)?;
    let (ctx, probs) = multi_head(&q, &k, &val, p.heads, false)?;
    if dy.shape() != ctx.shape() {
        return dim_err("upstream gradient shape mismatch in cond_attn_backward");
    }
    let mut g = p.zeros_like();
    g.wo = matmul_tn(&ctx, dy)?;
    let dctx = matmul_nt(dy, &p.wo)?;
    let (dq, dk, dval) = multi_head_backward(&q, &k, &val, &probs, &dctx)?;
    g.wq = matmul_tn(t, &dq)?;
    g.wk = matmul_tn(v.tokens(), &dk)?;
    g.wv = matmul_tn(v.tokens(), &dval)?;
    let dt = matmul_nt(&dq, &p.wq)?;
    let dv = matmul_nt(&dk, &p.wk)?.add(&matmul_nt(&dval, &p.wv)?)?;
    Ok((dt, dv, g))
}
