//! Mixer-style conditioner: a token-mixing MLP over the `L = V + 1` positions
//! of `[t_i; v]`, then a channel-mixing MLP, read at position 0. No residual
//! paths.
//!
//! Only position 0 of the output is used and the channel MLP acts on each
//! position separately, so the batched path computes the token-mixing
//! output row 0 alone. The visual half of the first token-mixing layer does
//! not depend on `t_i` and is computed once for all text tokens.

use super::{check_text, VisualContext};
use crate::error::{config_err, dim_err, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{gelu, gelu_grad, gelu_scalar, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCondParams {
    /// `[L × eL]`, rows indexed by sequence position.
    pub token_w1: Tensor,
    pub token_b1: Tensor,
    /// `[eL × L]`.
    pub token_w2: Tensor,
    pub token_b2: Tensor,
    /// `[C × eC]`.
    pub channel_w1: Tensor,
    pub channel_b1: Tensor,
    /// `[eC × C]`.
    pub channel_w2: Tensor,
    pub channel_b2: Tensor,
}

impl MlpCondParams {
    pub fn init(
        channels: usize,
        visual_tokens: usize,
        token_expansion: usize,
        channel_expansion: usize,
        rng: &mut Rng,
        std: f64,
    ) -> Result<Self> {
        if channels == 0 || visual_tokens == 0 || token_expansion == 0 || channel_expansion == 0 {
            return config_err("mlp conditioner dimensions must be positive");
        }
        let l = visual_tokens + 1;
        let (el, ec) = (l * token_expansion, channels * channel_expansion);
        Ok(MlpCondParams {
            token_w1: rng.normal_tensor(&[l, el], std),
            token_b1: Tensor::zeros(&[el]),
            token_w2: rng.normal_tensor(&[el, l], std),
            token_b2: Tensor::zeros(&[l]),
            channel_w1: rng.normal_tensor(&[channels, ec], std),
            channel_b1: Tensor::zeros(&[ec]),
            channel_w2: rng.normal_tensor(&[ec, channels], std),
            channel_b2: Tensor::zeros(&[channels]),
        })
    }

    /// The visual length this conditioner was built for.
    pub fn visual_tokens(&self) -> usize {
        self.token_w1.rows() - 1
    }

    pub fn channels(&self) -> usize {
        self.channel_w1.rows()
    }

    fn check(&self, t: &Tensor, v: &VisualContext) -> Result<(usize, usize)> {
        let (rows, c) = check_text(t, v)?;
        if v.len() != self.visual_tokens() {
            return config_err(format!(
                "mlp conditioner built for {} visual tokens, got {}",
                self.visual_tokens(),
                v.len()
            ));
        }
        if c != self.channels() {
            return dim_err(format!("mlp conditioner width {} but input width {c}", self.channels()));
        }
        Ok((rows, c))
    }
}

impl ParamSet for MlpCondParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("token_w1", &self.token_w1),
            ("token_b1", &self.token_b1),
            ("token_w2", &self.token_w2),
            ("token_b2", &self.token_b2),
            ("channel_w1", &self.channel_w1),
            ("channel_b1", &self.channel_b1),
            ("channel_w2", &self.channel_w2),
            ("channel_b2", &self.channel_b2),
        ]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("token_w1", &mut self.token_w1),
            ("token_b1", &mut self.token_b1),
            ("token_w2", &mut self.token_w2),
            ("token_b2", &mut self.token_b2),
            ("channel_w1", &mut self.channel_w1),
            ("channel_b1", &mut self.channel_b1),
            ("channel_w2", &mut self.channel_w2),
            ("channel_b2", &mut self.channel_b2),
        ]
    }
}

struct Cache {
    /// `[T·C × eL]` token-mixing pre-activations, row `i·C + c`.
    pre_tok: Tensor,
    h_tok: Tensor,
    /// `[T×C]` token-mixing output at position 0.
    z: Tensor,
    pre_ch: Tensor,
    a_ch: Tensor,
    y: Tensor,
}

fn forward_cached(t: &Tensor, v: &VisualContext, p: &MlpCondParams) -> Result<Cache> {
    let (rows, c) = p.check(t, v)?;
    let l = p.visual_tokens() + 1;
    let el = p.token_b1.len();
    let visual = matmul(&v.tokens().transpose()?, &p.token_w1.slice_rows(1, l))?;
    let text = matmul(&t.clone().reshape(&[rows * c, 1])?, &p.token_w1.slice_rows(0, 1))?;
    let mut pre_tok = text;
    for r in 0..rows * c {
        let ch = r % c;
        for ((x, vis), b) in pre_tok.row_mut(r).iter_mut().zip(visual.row(ch)).zip(p.token_b1.data()) {
            *x += vis + b;
        }
    }
    debug_assert_eq!(pre_tok.shape(), &[rows * c, el]);
    let h_tok = gelu(&pre_tok);
    let z = matmul(&h_tok, &p.token_w2.slice_cols(0, 1)?)?
        .map(|x| x + p.token_b2.data()[0])
        .reshape(&[rows, c])?;
    let pre_ch = matmul(&z, &p.channel_w1)?.add_row(&p.channel_b1)?;
    let a_ch = gelu(&pre_ch);
    let y = matmul(&a_ch, &p.channel_w2)?.add_row(&p.channel_b2)?;
    Ok(Cache { pre_tok, h_tok, z, pre_ch, a_ch, y: y.finite("cond_mlp")? })
}

/// Batched MLP conditioning of text rows `t: [T×C]`.
pub fn cond_mlp(t: &Tensor, v: &VisualContext, p: &MlpCondParams) -> Result<Tensor> {
    Ok(forward_cached(t, v, p)?.y)
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.at2(i, j)).sum::<f64>()).collect()
}

/// Reference path: builds `[t_i; v]` for every token, runs both MLPs over
/// the full sequence with scalar loops, and keeps position 0.
pub fn cond_mlp_loop(t: &Tensor, v: &VisualContext, p: &MlpCondParams) -> Result<Tensor> {
    let (rows, c) = p.check(t, v)?;
    let l = p.visual_tokens() + 1;
    let mut out = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        let seq: Vec<&[f64]> = std::iter::once(t.row(i)).chain((0..l - 1).map(|m| v.tokens().row(m))).collect();
        // token mixing: one length-L signal per channel
        let mut mixed = vec![vec![0.0; c]; l];
        for ch in 0..c {
            let signal: Vec<f64> = seq.iter().map(|row| row[ch]).collect();
            let hidden: Vec<f64> = dense(&signal, &p.token_w1, &p.token_b1).into_iter().map(gelu_scalar).collect();
            for (pos, val) in dense(&hidden, &p.token_w2, &p.token_b2).into_iter().enumerate() {
                mixed[pos][ch] = val;
            }
        }
        // channel mixing on every position
        let outputs: Vec<Vec<f64>> = mixed
            .iter()
            .map(|row| {
                let hidden: Vec<f64> = dense(row, &p.channel_w1, &p.channel_b1).into_iter().map(gelu_scalar).collect();
                dense(&hidden, &p.channel_w2, &p.channel_b2)
            })
            .collect();
        out.row_mut(i).copy_from_slice(&outputs[0]);
    }
    out.finite("cond_mlp_loop")
}

pub fn cond_mlp_backward(
    t: &Tensor,
    v: &VisualContext,
    p: &MlpCondParams,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, MlpCondParams)> {
    let cache = forward_cached(t, v, p)?;
    if dy.shape() != cache.y.shape() {
        return dim_err("upstream gradient shape mismatch in cond_mlp_backward");
    }
    let (rows, c) = t.dims2()?;
    let l = p.visual_tokens() + 1;
    let el = p.token_b1.len();
    let mut g = p.zeros_like();

    g.channel_w2 = matmul_tn(&cache.a_ch, dy)?;
    g.channel_b2 = dy.sum_rows();
    let da = matmul_nt(dy, &p.channel_w2)?;
    let dpre_ch = da.zip_map(&cache.pre_ch, |g, x| g * gelu_grad(x))?;
    g.channel_w1 = matmul_tn(&cache.z, &dpre_ch)?;
    g.channel_b1 = dpre_ch.sum_rows();
    let dz = matmul_nt(&dpre_ch, &p.channel_w1)?;

    let w2_col0: Vec<f64> = (0..el).map(|k| p.token_w2.at2(k, 0)).collect();
    let w1_text = p.token_w1.row(0).to_vec();
    let mut dpre = Tensor::zeros(&[rows * c, el]);
    let mut dt = Tensor::zeros(&[rows, c]);
    let mut dvis = Tensor::zeros(&[c, el]);
    let mut b2_0 = 0.0;
    for r in 0..rows * c {
        let dzr = dz.data()[r];
        b2_0 += dzr;
        let (i, ch) = (r / c, r % c);
        for k in 0..el {
            let grad_h = dzr * w2_col0[k];
            let d = grad_h * gelu_grad(cache.pre_tok.at2(r, k));
            dpre.set2(r, k, d);
            g.token_w2.data_mut()[k * l] += dzr * cache.h_tok.at2(r, k);
            g.token_b1.data_mut()[k] += d;
            g.token_w1.data_mut()[k] += t.data()[r] * d;
            dvis.data_mut()[ch * el + k] += d;
        }
        dt.set2(i, ch, dpre.row(r).iter().zip(&w1_text).map(|(a, b)| a * b).sum());
    }
    g.token_b2.data_mut()[0] = b2_0;
    let dw_vis = matmul(v.tokens(), &dvis)?;
    for m in 0..l - 1 {
        g.token_w1.row_mut(m + 1).copy_from_slice(dw_vis.row(m));
    }
    let dv = matmul_nt(&dvis, &p.token_w1.slice_rows(1, l))?.transpose()?;
    Ok((dt, dv, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, rows: usize, vis: usize, c: usize) -> (Tensor, VisualContext, MlpCondParams) {
        let mut rng = Rng::new(seed);
        let mut p = MlpCondParams::init(c, vis, 4, 4, &mut rng, 0.5).unwrap();
        for (_, b) in p.fields_mut().into_iter().filter(|(n, _)| n.contains("_b")) {
            *b = rng.normal_tensor(b.shape(), 0.5);
        }
        let t = rng.normal_tensor(&[rows, c], 1.0);
        let v = VisualContext::new(rng.normal_tensor(&[vis, c], 1.0), "image").unwrap();
        (t, v, p)
    }

    #[test]
    fn batched_matches_loop() {
        for seed in 0..5 {
            let (t, v, p) = setup(seed, 2, 3, 4);
            let d = cond_mlp(&t, &v, &p).unwrap().max_abs_diff(&cond_mlp_loop(&t, &v, &p).unwrap()).unwrap();
            assert!(d <= 1e-12, "{d}");
        }
    }

    #[test]
    fn zero_final_layers_give_zero() {
        let (t, v, mut p) = setup(3, 3, 4, 5);
        p.token_w2.data_mut().fill(0.0);
        p.token_b2.data_mut().fill(0.0);
        p.channel_w2.data_mut().fill(0.0);
        p.channel_b2.data_mut().fill(0.0);
        assert!(cond_mlp(&t, &v, &p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn visual_length_is_fixed() {
        let (t, _, p) = setup(4, 2, 3, 4);
        let wrong = VisualContext::new(Tensor::zeros(&[4, 4]), "image").unwrap();
        assert!(matches!(cond_mlp(&t, &wrong, &p), Err(crate::Error::Config(_))));
    }
}
