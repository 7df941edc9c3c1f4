//! Scaled dot-product attention over head-sliced projections, shared by the
//! transformer blocks and the attention conditioner.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_lastdim, Tensor};

/// Heads used when a config does not name them: 8 for widths of 64 and
/// above, otherwise 1.
pub fn default_heads(channels: usize) -> usize {
    if channels >= 64 {
        8
    } else {
        1
    }
}

pub fn check_heads(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return config_err(format!("{heads} heads do not divide {channels} channels"));
    }
    Ok(channels / heads)
}

/// Attention of already-projected `q: [Tq×C]` against `k, v: [Tk×C]`.
/// Head `h` owns channels `h·d..(h+1)·d`. With `causal`, query `i` only
/// sees keys `j ≤ i`. Returns the concatenated context and the per-head
/// attention weights.
pub fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Result<(Tensor, Vec<Tensor>)> {
    let (tq, c) = q.dims2()?;
    let (tk, ck) = k.dims2()?;
    if ck != c || v.shape() != k.shape() {
        return dim_err(format!("attention q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if causal && tq != tk {
        return dim_err("causal attention needs equal query and key lengths");
    }
    let d = check_heads(c, heads)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx = Tensor::zeros(&[tq, c]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * d, (h + 1) * d)?;
        let kh = k.slice_cols(h * d, (h + 1) * d)?;
        let vh = v.slice_cols(h * d, (h + 1) * d)?;
        let mut scores = matmul(&qh, &kh.transpose()?)?.scale(scale);
        if causal {
            for i in 0..tq {
                for j in i + 1..tk {
                    scores.set2(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let p = softmax_lastdim(&scores);
        ctx.set_cols(h * d, &matmul(&p, &vh)?)?;
        probs.push(p);
    }
    Ok((ctx.finite("attention")?, probs))
}

/// Gradients of [`multi_head`] with respect to `q`, `k`, `v`.
pub fn multi_head_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[Tensor],
    dctx: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (tq, c) = q.dims2()?;
    let tk = k.rows();
    let heads = probs.len();
    let d = check_heads(c, heads)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Tensor::zeros(&[tq, c]);
    let mut dk = Tensor::zeros(&[tk, c]);
    let mut dv = Tensor::zeros(&[tk, c]);
    for (h, p) in probs.iter().enumerate() {
        let qh = q.slice_cols(h * d, (h + 1) * d)?;
        let kh = k.slice_cols(h * d, (h + 1) * d)?;
        let vh = v.slice_cols(h * d, (h + 1) * d)?;
        let dch = dctx.slice_cols(h * d, (h + 1) * d)?;
        let dp = matmul_nt(&dch, &vh)?;
        dv.set_cols(h * d, &matmul_tn(p, &dch)?)?;
        let mut ds = Tensor::zeros(&[tq, tk]);
        for i in 0..tq {
            let dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..tk {
                ds.set2(i, j, p.at2(i, j) * (dp.at2(i, j) - dot) * scale);
            }
        }
        dq.set_cols(h * d, &matmul(&ds, &kh)?)?;
        dk.set_cols(h * d, &matmul_tn(&ds, &qh)?)?;
    }
    Ok((dq, dk, dv))
}
