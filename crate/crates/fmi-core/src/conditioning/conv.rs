//! ConvMixer-style conditioner: depthwise convolution over the positions of
//! `[t_i; v]`, SiLU, then a pointwise (per-position linear) convolution,
//! read at position 0.
//!
//! With zero "same" padding, output position 0 only sees `t_i` and the first
//! `K/2` visual tokens. The batched path exploits that: the visual share of
//! the depthwise response at position 0 is the same for every text token.

use super::{check_text, VisualContext};
use crate::error::{config_err, dim_err, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{depthwise_conv1d_at, matmul, matmul_nt, matmul_tn, swish_grad, swish_scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvCondParams {
    /// `[C × K]`, odd `K`.
    pub dw_kernel: Tensor,
    pub dw_bias: Tensor,
    /// `[C_in × C_out]`.
    pub pw_weight: Tensor,
    pub pw_bias: Tensor,
}

impl ConvCondParams {
    pub fn init(channels: usize, kernel: usize, rng: &mut Rng, std: f64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return config_err(format!("depthwise kernel width must be odd, got {kernel}"));
        }
        Ok(ConvCondParams {
            dw_kernel: rng.normal_tensor(&[channels, kernel], std),
            dw_bias: Tensor::zeros(&[channels]),
            pw_weight: rng.normal_tensor(&[channels, channels], std),
            pw_bias: Tensor::zeros(&[channels]),
        })
    }

    pub fn kernel(&self) -> usize {
        self.dw_kernel.shape()[1]
    }

    fn check(&self, t: &Tensor, v: &VisualContext) -> Result<(usize, usize)> {
        let (rows, c) = check_text(t, v)?;
        if self.kernel().is_multiple_of(2) {
            return config_err(format!("depthwise kernel width must be odd, got {}", self.kernel()));
        }
        if self.dw_kernel.rows() != c || self.pw_weight.shape() != [c, c] {
            return dim_err(format!("conv conditioner does not match width {c}"));
        }
        Ok((rows, c))
    }
}

impl ParamSet for ConvCondParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("dw_kernel", &self.dw_kernel),
            ("dw_bias", &self.dw_bias),
            ("pw_weight", &self.pw_weight),
            ("pw_bias", &self.pw_bias),
        ]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("dw_kernel", &mut self.dw_kernel),
            ("dw_bias", &mut self.dw_bias),
            ("pw_weight", &mut self.pw_weight),
            ("pw_bias", &mut self.pw_bias),
        ]
    }
}

/// Depthwise response at position 0, `[T×C]`, before the activation.
fn depthwise_at_text(t: &Tensor, v: &VisualContext, p: &ConvCondParams) -> Result<Tensor> {
    let (rows, c) = p.check(t, v)?;
    let centre = p.kernel() / 2;
    // the visual share: the same convolution on [0; v]
    let signal = Tensor::concat_rows(&[&Tensor::zeros(&[1, c]), v.tokens()])?.transpose()?;
    let visual = depthwise_conv1d_at(&signal, &p.dw_kernel, 0)?;
    let mut pre = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        for ch in 0..c {
            let w = p.dw_kernel.at2(ch, centre);
            pre.set2(i, ch, w * t.at2(i, ch) + visual.data()[ch] + p.dw_bias.data()[ch]);
        }
    }
    Ok(pre)
}

/// Batched convolution conditioning of text rows `t: [T×C]`.
pub fn cond_conv(t: &Tensor, v: &VisualContext, p: &ConvCondParams) -> Result<Tensor> {
    let act = depthwise_at_text(t, v, p)?.map(swish_scalar);
    matmul(&act, &p.pw_weight)?.add_row(&p.pw_bias)?.finite("cond_conv")
}

/// Reference path: full-length convolution of every `[t_i; v]` with scalar
/// loops, then position 0.
pub fn cond_conv_loop(t: &Tensor, v: &VisualContext, p: &ConvCondParams) -> Result<Tensor> {
    let (rows, c) = p.check(t, v)?;
    let k = p.kernel();
    let half = (k / 2) as isize;
    let l = v.len() + 1;
    let mut out = Tensor::zeros(&[rows, c]);
    for i in 0..rows {
        let at = |pos: usize, ch: usize| if pos == 0 { t.at2(i, ch) } else { v.tokens().at2(pos - 1, ch) };
        let mut act = vec![vec![0.0; c]; l];
        for (pos, row) in act.iter_mut().enumerate() {
            for (ch, a) in row.iter_mut().enumerate() {
                let mut acc = p.dw_bias.data()[ch];
                for j in 0..k {
                    let src = pos as isize + j as isize - half;
                    if src >= 0 && (src as usize) < l {
                        acc += p.dw_kernel.at2(ch, j) * at(src as usize, ch);
                    }
                }
                *a = swish_scalar(acc);
            }
        }
        let pointwise: Vec<Vec<f64>> = act
            .iter()
            .map(|row| {
                (0..c)
                    .map(|o| p.pw_bias.data()[o] + (0..c).map(|ci| row[ci] * p.pw_weight.at2(ci, o)).sum::<f64>())
                    .collect()
            })
            .collect();
        out.row_mut(i).copy_from_slice(&pointwise[0]);
    }
    out.finite("cond_conv_loop")
}

pub fn cond_conv_backward(
    t: &Tensor,
    v: &VisualContext,
    p: &ConvCondParams,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, ConvCondParams)> {
    let pre = depthwise_at_text(t, v, p)?;
    if dy.shape() != pre.shape() {
        return dim_err("upstream gradient shape mismatch in cond_conv_backward");
    }
    let (rows, c) = pre.dims2()?;
    let k = p.kernel();
    let centre = k / 2;
    let act = pre.map(swish_scalar);
    let mut g = p.zeros_like();
    g.pw_weight = matmul_tn(&act, dy)?;
    g.pw_bias = dy.sum_rows();
    let dact = matmul_nt(dy, &p.pw_weight)?;
    let dpre = dact.zip_map(&pre, |g, x| g * swish_grad(x))?;
    g.dw_bias = dpre.sum_rows();

    let mut dt = Tensor::zeros(&[rows, c]);
    let mut dv = Tensor::zeros(&[v.len(), c]);
    for ch in 0..c {
        let col_sum: f64 = (0..rows).map(|i| dpre.at2(i, ch)).sum();
        let w = p.dw_kernel.at2(ch, centre);
        let mut centre_grad = 0.0;
        for i in 0..rows {
            centre_grad += dpre.at2(i, ch) * t.at2(i, ch);
            dt.set2(i, ch, dpre.at2(i, ch) * w);
        }
        g.dw_kernel.set2(ch, centre, centre_grad);
        // taps right of centre see v[j - centre - 1]
        for j in centre + 1..k {
            let m = j - centre - 1;
            if m < v.len() {
                g.dw_kernel.set2(ch, j, col_sum * v.tokens().at2(m, ch));
                dv.set2(m, ch, col_sum * p.dw_kernel.at2(ch, j));
            }
        }
    }
    Ok((dt, dv, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, rows: usize, vis: usize, c: usize, k: usize) -> (Tensor, VisualContext, ConvCondParams) {
        let mut rng = Rng::new(seed);
        let mut p = ConvCondParams::init(c, k, &mut rng, 0.7).unwrap();
        p.dw_bias = rng.normal_tensor(&[c], 0.5);
        p.pw_bias = rng.normal_tensor(&[c], 0.5);
        let t = rng.normal_tensor(&[rows, c], 1.0);
        let v = VisualContext::new(rng.normal_tensor(&[vis, c], 1.0), "image").unwrap();
        (t, v, p)
    }

    #[test]
    fn batched_matches_loop() {
        for (seed, k, vis) in [(0, 3, 4), (1, 5, 2), (2, 7, 6), (3, 1, 3), (4, 9, 1)] {
            let (t, v, p) = setup(seed, 3, vis, 5, k);
            let d = cond_conv(&t, &v, &p).unwrap().max_abs_diff(&cond_conv_loop(&t, &v, &p).unwrap()).unwrap();
            assert!(d <= 1e-12, "k={k} vis={vis}: {d}");
        }
    }

    #[test]
    fn delta_kernel_and_identity_pointwise_give_silu() {
        let (t, v, mut p) = setup(5, 3, 4, 4, 3);
        p.dw_kernel = Tensor::from_fn(&[4, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        p.dw_bias = Tensor::zeros(&[4]);
        p.pw_weight = Tensor::eye(4);
        p.pw_bias = Tensor::zeros(&[4]);
        let out = cond_conv(&t, &v, &p).unwrap();
        assert!(out.max_abs_diff(&t.map(swish_scalar)).unwrap() <= 1e-15);
    }

    #[test]
    fn zero_pointwise_gives_zero() {
        let (t, v, mut p) = setup(6, 2, 3, 4, 3);
        p.pw_weight.data_mut().fill(0.0);
        p.pw_bias.data_mut().fill(0.0);
        assert!(cond_conv(&t, &v, &p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = Rng::new(0);
        assert!(ConvCondParams::init(4, 4, &mut rng, 0.1).is_err());
        let (t, v, mut p) = setup(7, 2, 3, 4, 3);
        p.dw_kernel = Tensor::zeros(&[4, 2]);
        assert!(matches!(cond_conv(&t, &v, &p), Err(crate::Error::Config(_))));
    }
}
