//! Layer normalization and its vision-modulated variant.
//!
//! `layer_norm` computes `α ⊙ x̂ + β` with `x̂ = (x − μ) / (σ + eps)` per row
//! (population statistics over channels). `viln_apply` replaces the affine
//! pair with `(α + Δα_i, β + Δβ_i)` per token. The deltas come from
//! [`project_deltas`], a Swish-gated linear map that starts at exactly zero,
//! so an untrained projection leaves the normalization untouched bit for bit.

use crate::error::{config_err, dim_err, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul, matmul_nt, matmul_tn, swish, swish_grad, Tensor};

/// Statistics mode. `Rms` drops the mean subtraction (μ ≔ 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Layer,
    Rms,
}

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub mode: NormMode,
}

impl LnParams {
    /// `eps = 0` is accepted so exact statistics can be checked; rows with
    /// zero spread then normalize to zero.
    pub fn new(alpha: Tensor, beta: Tensor, eps: f64, mode: NormMode) -> Result<Self> {
        if alpha.ndim() != 1 || alpha.shape() != beta.shape() {
            return dim_err(format!("alpha {:?} and beta {:?} must be equal-length vectors", alpha.shape(), beta.shape()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return config_err(format!("eps must be a finite non-negative number, got {eps}"));
        }
        Ok(LnParams { alpha, beta, eps, mode })
    }

    /// `α = 1`, `β = 0`.
    pub fn identity(channels: usize, eps: f64, mode: NormMode) -> Self {
        LnParams { alpha: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]), eps, mode }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }
}

/// Normalized rows plus the per-row statistics that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
    pub mode: NormMode,
}

pub fn normalize(x: &Tensor, eps: f64, mode: NormMode) -> Result<Normalized> {
    let (t, c) = x.dims2()?;
    if c == 0 {
        return dim_err("layer norm over zero channels");
    }
    let mut xhat = x.clone();
    let mut mean = Vec::with_capacity(t);
    let mut sigma = Vec::with_capacity(t);
    for i in 0..t {
        let row = xhat.row_mut(i);
        let mu = match mode {
            NormMode::Layer => row.iter().sum::<f64>() / c as f64,
            NormMode::Rms => 0.0,
        };
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let sd = var.sqrt();
        let denom = sd + eps;
        for v in row.iter_mut() {
            *v = if denom > 0.0 { (*v - mu) / denom } else { 0.0 };
        }
        mean.push(mu);
        sigma.push(sd);
    }
    Ok(Normalized { xhat: xhat.finite("normalize")?, mean, sigma, eps, mode })
}

fn affine(xhat: &Tensor, scale: impl Fn(usize, usize) -> f64, shift: impl Fn(usize, usize) -> f64) -> Tensor {
    let c = xhat.row_len();
    let mut out = xhat.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let (i, j) = (idx / c, idx % c);
        *v = scale(i, j) * *v + shift(i, j);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnOutput {
    pub output: Tensor,
    pub normalized: Normalized,
}

pub fn layer_norm(x: &Tensor, params: &LnParams) -> Result<LnOutput> {
    let (_, c) = x.dims2()?;
    if c != params.channels() {
        return dim_err(format!("input has {c} channels, norm has {}", params.channels()));
    }
    let normalized = normalize(x, params.eps, params.mode)?;
    let (a, b) = (params.alpha.data(), params.beta.data());
    let output = affine(&normalized.xhat, |_, j| a[j], |_, j| b[j]);
    Ok(LnOutput { output, normalized })
}

/// Affine step of ViLN on already-normalized rows.
pub fn viln_affine(xhat: &Tensor, d_alpha: &Tensor, d_beta: &Tensor, params: &LnParams) -> Result<Tensor> {
    let (_, c) = xhat.dims2()?;
    if d_alpha.shape() != xhat.shape() || d_beta.shape() != xhat.shape() {
        return dim_err(format!(
            "deltas {:?}/{:?} do not match input {:?}",
            d_alpha.shape(),
            d_beta.shape(),
            xhat.shape()
        ));
    }
    if c != params.channels() {
        return dim_err(format!("input has {c} channels, norm has {}", params.channels()));
    }
    let (a, b) = (params.alpha.data(), params.beta.data());
    let (da, db) = (d_alpha.data(), d_beta.data());
    affine(xhat, |i, j| a[j] + da[i * c + j], |i, j| b[j] + db[i * c + j]).finite("viln")
}

/// `(α + Δα) ⊙ x̂ + (β + Δβ)` per token.
pub fn viln_apply(x: &Tensor, d_alpha: &Tensor, d_beta: &Tensor, params: &LnParams) -> Result<Tensor> {
    let normalized = normalize(x, params.eps, params.mode)?;
    viln_affine(&normalized.xhat, d_alpha, d_beta, params)
}

/// Backward of [`normalize`]: maps `∂L/∂x̂` to `∂L/∂x`.
pub fn normalize_backward(n: &Normalized, dxhat: &Tensor) -> Result<Tensor> {
    let (t, c) = n.xhat.dims2()?;
    if dxhat.shape() != n.xhat.shape() {
        return dim_err("gradient shape does not match normalized rows");
    }
    let cf = c as f64;
    let mut dx = Tensor::zeros(&[t, c]);
    for i in 0..t {
        let g = dxhat.row(i);
        let xh = n.xhat.row(i);
        let sd = n.sigma[i];
        let denom = sd + n.eps;
        if denom == 0.0 {
            continue;
        }
        let gbar = match n.mode {
            NormMode::Layer => g.iter().sum::<f64>() / cf,
            NormMode::Rms => 0.0,
        };
        let gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        // The σ-path term vanishes with σ (x̂ → 0 faster than 1/σ grows).
        let sigma_term = if sd > 0.0 { gx / (cf * sd) } else { 0.0 };
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = (g[j] - gbar) / denom - sigma_term * xh[j];
        }
    }
    dx.finite("normalize_backward")
}

/// The four per-token delta tensors, each `[T×C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationDeltas {
    pub d_alpha1: Tensor,
    pub d_beta1: Tensor,
    pub d_alpha2: Tensor,
    pub d_beta2: Tensor,
}

impl ModulationDeltas {
    pub fn zeros(tokens: usize, channels: usize) -> Self {
        let z = Tensor::zeros(&[tokens, channels]);
        ModulationDeltas { d_alpha1: z.clone(), d_beta1: z.clone(), d_alpha2: z.clone(), d_beta2: z }
    }

    pub fn is_zero(&self) -> bool {
        [&self.d_alpha1, &self.d_beta1, &self.d_alpha2, &self.d_beta2]
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Linear map from a conditioning vector to the four delta chunks,
/// laid out `[Δα¹, Δβ¹, Δα², Δβ²]` along the output axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaProjection {
    pub w: Tensor,
    pub b: Tensor,
}

impl DeltaProjection {
    /// All-zero weights and bias: the state every projection starts in.
    pub fn zeros(cond_dim: usize, channels: usize) -> Self {
        DeltaProjection { w: Tensor::zeros(&[cond_dim, 4 * channels]), b: Tensor::zeros(&[4 * channels]) }
    }

    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let (_, out) = w.dims2()?;
        if out % 4 != 0 || b.shape() != [out] {
            return config_err(format!(
                "delta projection {:?} with bias {:?} cannot split into four equal chunks",
                w.shape(),
                b.shape()
            ));
        }
        Ok(DeltaProjection { w, b })
    }

    pub fn cond_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[1] / 4
    }

    pub fn is_zero(&self) -> bool {
        self.w.data().iter().chain(self.b.data()).all(|&v| v == 0.0)
    }
}

/// `Swish(cond)·W + b`, split into the four delta tensors.
pub fn project_deltas(cond: &Tensor, proj: &DeltaProjection) -> Result<ModulationDeltas> {
    let (_, cdim) = cond.dims2()?;
    let (wdim, out) = proj.w.dims2()?;
    if cdim != wdim {
        return dim_err(format!("conditioning width {cdim} but projection expects {wdim}"));
    }
    if out % 4 != 0 || proj.b.len() != out {
        return config_err("delta projection does not split into four equal chunks");
    }
    let raw = matmul(&swish(cond), &proj.w)?.add_row(&proj.b)?;
    split_chunks(&raw)
}

fn split_chunks(raw: &Tensor) -> Result<ModulationDeltas> {
    let c = raw.row_len() / 4;
    Ok(ModulationDeltas {
        d_alpha1: raw.slice_cols(0, c)?,
        d_beta1: raw.slice_cols(c, 2 * c)?,
        d_alpha2: raw.slice_cols(2 * c, 3 * c)?,
        d_beta2: raw.slice_cols(3 * c, 4 * c)?,
    })
}

/// Gradients of [`project_deltas`] given the gradient of each delta chunk.
#[derive(Debug, Clone)]
pub struct ProjectionGrads {
    pub cond: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn project_deltas_backward(
    cond: &Tensor,
    proj: &DeltaProjection,
    grads: &ModulationDeltas,
) -> Result<ProjectionGrads> {
    let (t, _) = cond.dims2()?;
    let c = proj.channels();
    let mut draw = Tensor::zeros(&[t, 4 * c]);
    for (k, g) in [&grads.d_alpha1, &grads.d_beta1, &grads.d_alpha2, &grads.d_beta2].into_iter().enumerate() {
        draw.set_cols(k * c, g)?;
    }
    let gated = swish(cond);
    let w = matmul_tn(&gated, &draw)?;
    let b = draw.sum_rows();
    let dgated = matmul_nt(&draw, &proj.w)?;
    let dcond = dgated.zip_map(cond, |g, x| g * swish_grad(x))?;
    Ok(ProjectionGrads { cond: dcond, w, b })
}

impl ParamSet for LnParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("alpha", &self.alpha), ("beta", &self.beta)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("alpha", &mut self.alpha), ("beta", &mut self.beta)]
    }
}

impl ParamSet for DeltaProjection {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("W", &self.w), ("b", &self.b)]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("W", &mut self.w), ("b", &mut self.b)]
    }
}
