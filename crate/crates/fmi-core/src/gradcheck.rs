//! Central finite-difference verification of the hand-written backward
//! passes.
//!
//! A [`Differentiable`] problem owns its leaf tensors, produces one output
//! tensor, and maps an upstream gradient `G` to the gradient of
//! `Σ G ⊙ output` with respect to every leaf. [`check_gradients`] perturbs
//! each leaf element by `±h` and compares.

use crate::conditioning::{CondParams, CondShape, VisualContext};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::viln::{
    normalize, normalize_backward, project_deltas, project_deltas_backward, viln_affine, DeltaProjection, LnParams,
    ModulationDeltas, NormMode,
};

/// Denominator floor for relative errors, so that gradients which are
/// exactly or nearly zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub trait Differentiable: Clone {
    fn leaves(&self) -> Vec<(String, &Tensor)>;
    fn leaves_mut(&mut self) -> Vec<&mut Tensor>;
    fn output(&self) -> Result<Tensor>;
    /// Gradients of `Σ upstream ⊙ output`, one per leaf, in `leaves` order.
    fn gradients(&self, upstream: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
pub struct LeafError {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub leaves: Vec<LeafError>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&LeafError> {
        self.leaves.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn leaf(&self, name: &str) -> Option<&LeafError> {
        self.leaves.iter().find(|l| l.name == name)
    }
}

fn weighted_sum(upstream: &Tensor, out: &Tensor) -> Result<f64> {
    if upstream.shape() != out.shape() {
        return Err(Error::Dimension(format!("upstream {:?} for output {:?}", upstream.shape(), out.shape())));
    }
    Ok(upstream.data().iter().zip(out.data()).map(|(g, y)| g * y).sum())
}

/// Compares analytic gradients with central differences of step `h`.
pub fn check_gradients<P: Differentiable>(problem: &P, upstream: &Tensor, h: f64) -> Result<GradReport> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let analytic = problem.gradients(upstream)?;
    let names: Vec<String> = problem.leaves().iter().map(|(n, _)| n.clone()).collect();
    if analytic.len() != names.len() {
        return Err(Error::Dimension("gradient count differs from leaf count".into()));
    }
    let mut leaves = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for (li, (name, grad)) in names.into_iter().zip(&analytic).enumerate() {
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient for {name}")));
        }
        let size = problem.leaves()[li].1.len();
        if grad.len() != size {
            return Err(Error::Dimension(format!("gradient for {name} has {} values, leaf has {size}", grad.len())));
        }
        let mut worst: f64 = 0.0;
        for e in 0..size {
            let mut plus = problem.clone();
            plus.leaves_mut()[li].data_mut()[e] += h;
            let mut minus = problem.clone();
            minus.leaves_mut()[li].data_mut()[e] -= h;
            let numeric = (weighted_sum(upstream, &plus.output()?)? - weighted_sum(upstream, &minus.output()?)?) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite numeric gradient for {name}[{e}]")));
            }
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        overall = overall.max(worst);
        let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        leaves.push(LeafError { name, max_rel_err: worst, analytic_norm: norm });
    }
    Ok(GradReport { max_rel_err: overall, leaves })
}

/// `viln_apply` with the deltas as free leaves.
#[derive(Debug, Clone)]
pub struct VilnApplyProblem {
    pub x: Tensor,
    pub d_alpha: Tensor,
    pub d_beta: Tensor,
    pub ln: LnParams,
}

impl Differentiable for VilnApplyProblem {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("x".into(), &self.x),
            ("alpha".into(), &self.ln.alpha),
            ("beta".into(), &self.ln.beta),
            ("d_alpha".into(), &self.d_alpha),
            ("d_beta".into(), &self.d_beta),
        ]
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x, &mut self.ln.alpha, &mut self.ln.beta, &mut self.d_alpha, &mut self.d_beta]
    }

    fn output(&self) -> Result<Tensor> {
        let n = normalize(&self.x, self.ln.eps, self.ln.mode)?;
        viln_affine(&n.xhat, &self.d_alpha, &self.d_beta, &self.ln)
    }

    fn gradients(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let n = normalize(&self.x, self.ln.eps, self.ln.mode)?;
        let (da, db, dxhat) = affine_backward(&n.xhat, &self.d_alpha, &self.ln, g)?;
        let dx = normalize_backward(&n, &dxhat)?;
        Ok(vec![dx, da.sum_rows(), db.sum_rows(), da, db])
    }
}

/// Returns per-token `(∂scale, ∂shift, ∂x̂)` of `(α + Δα) ⊙ x̂ + (β + Δβ)`.
fn affine_backward(xhat: &Tensor, d_alpha: &Tensor, ln: &LnParams, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dscale = g.mul(xhat)?;
    let dshift = g.clone();
    let scale = d_alpha.add_row(&ln.alpha)?;
    let dxhat = g.mul(&scale)?;
    Ok((dscale, dshift, dxhat))
}

/// The composed pipeline `project_deltas → viln_apply` at both norm slots:
/// the output stacks slot 1 (`Δα¹, Δβ¹` with `ln1`) over slot 2.
#[derive(Debug, Clone)]
pub struct VilnPipelineProblem {
    pub x: Tensor,
    pub cond: Tensor,
    pub ln1: LnParams,
    pub ln2: LnParams,
    pub proj: DeltaProjection,
}

impl VilnPipelineProblem {
    pub fn random(rng: &mut Rng, tokens: usize, channels: usize, cond_dim: usize, eps: f64) -> Self {
        let ln = |rng: &mut Rng| LnParams {
            alpha: rng.normal_tensor(&[channels], 1.0),
            beta: rng.normal_tensor(&[channels], 1.0),
            eps,
            mode: NormMode::Layer,
        };
        VilnPipelineProblem {
            x: rng.normal_tensor(&[tokens, channels], 1.0),
            cond: rng.normal_tensor(&[tokens, cond_dim], 1.0),
            ln1: ln(rng),
            ln2: ln(rng),
            proj: DeltaProjection { w: rng.normal_tensor(&[cond_dim, 4 * channels], 0.5), b: rng.normal_tensor(&[4 * channels], 0.5) },
        }
    }

    fn deltas(&self) -> Result<ModulationDeltas> {
        project_deltas(&self.cond, &self.proj)
    }
}

impl Differentiable for VilnPipelineProblem {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("x".into(), &self.x),
            ("cond".into(), &self.cond),
            ("ln1.alpha".into(), &self.ln1.alpha),
            ("ln1.beta".into(), &self.ln1.beta),
            ("ln2.alpha".into(), &self.ln2.alpha),
            ("ln2.beta".into(), &self.ln2.beta),
            ("delta_proj.W".into(), &self.proj.w),
            ("delta_proj.b".into(), &self.proj.b),
        ]
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.x,
            &mut self.cond,
            &mut self.ln1.alpha,
            &mut self.ln1.beta,
            &mut self.ln2.alpha,
            &mut self.ln2.beta,
            &mut self.proj.w,
            &mut self.proj.b,
        ]
    }

    fn output(&self) -> Result<Tensor> {
        let d = self.deltas()?;
        let n1 = normalize(&self.x, self.ln1.eps, self.ln1.mode)?;
        let n2 = normalize(&self.x, self.ln2.eps, self.ln2.mode)?;
        let out1 = viln_affine(&n1.xhat, &d.d_alpha1, &d.d_beta1, &self.ln1)?;
        let out2 = viln_affine(&n2.xhat, &d.d_alpha2, &d.d_beta2, &self.ln2)?;
        Tensor::concat_rows(&[&out1, &out2])
    }

    fn gradients(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let t = self.x.rows();
        let (g1, g2) = (g.slice_rows(0, t), g.slice_rows(t, 2 * t));
        let d = self.deltas()?;
        let n1 = normalize(&self.x, self.ln1.eps, self.ln1.mode)?;
        let n2 = normalize(&self.x, self.ln2.eps, self.ln2.mode)?;
        let (da1, db1, dxh1) = affine_backward(&n1.xhat, &d.d_alpha1, &self.ln1, &g1)?;
        let (da2, db2, dxh2) = affine_backward(&n2.xhat, &d.d_alpha2, &self.ln2, &g2)?;
        let dx = normalize_backward(&n1, &dxh1)?.add(&normalize_backward(&n2, &dxh2)?)?;
        let pg = project_deltas_backward(
            &self.cond,
            &self.proj,
            &ModulationDeltas { d_alpha1: da1.clone(), d_beta1: db1.clone(), d_alpha2: da2.clone(), d_beta2: db2.clone() },
        )?;
        Ok(vec![dx, pg.cond, da1.sum_rows(), db1.sum_rows(), da2.sum_rows(), db2.sum_rows(), pg.w, pg.b])
    }
}

/// Verifies the ViLN gradients at `point`: `viln_apply` on its own (deltas
/// as leaves) and the full `project_deltas → viln_apply` pipeline. Returns
/// the larger of the two maximum relative errors.
pub fn gradcheck_viln(point: &VilnPipelineProblem, upstream: &Tensor, h: f64) -> Result<f64> {
    let pipeline = check_gradients(point, upstream, h)?;
    let t = point.x.rows();
    let d = point.deltas()?;
    let direct = VilnApplyProblem { x: point.x.clone(), d_alpha: d.d_alpha1, d_beta: d.d_beta1, ln: point.ln1.clone() };
    let apply = check_gradients(&direct, &upstream.slice_rows(0, t), h)?;
    Ok(pipeline.max_rel_err.max(apply.max_rel_err))
}

/// A conditioner with its inputs as leaves.
#[derive(Debug, Clone)]
pub struct ConditionerProblem {
    pub t: Tensor,
    pub v: Tensor,
    pub params: CondParams,
}

impl ConditionerProblem {
    pub fn random(rng: &mut Rng, shape: &CondShape, tokens: usize) -> Result<Self> {
        let mut params = CondParams::init(shape, rng, 0.5)?;
        // biases start at zero; move them off it
        for (name, p) in params.fields_mut() {
            if name.contains("_b") {
                *p = rng.normal_tensor(p.shape(), 0.5);
            }
        }
        Ok(ConditionerProblem {
            t: rng.normal_tensor(&[tokens, shape.channels], 1.0),
            v: rng.normal_tensor(&[shape.visual_tokens, shape.channels], 1.0),
            params,
        })
    }

    fn context(&self) -> Result<VisualContext> {
        VisualContext::new(self.v.clone(), "gradcheck")
    }
}

impl Differentiable for ConditionerProblem {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("t".to_string(), &self.t), ("v".to_string(), &self.v)];
        out.extend(self.params.fields().into_iter().map(|(n, t)| (n.to_string(), t)));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.t, &mut self.v];
        out.extend(self.params.fields_mut().into_iter().map(|(_, t)| t));
        out
    }

    fn output(&self) -> Result<Tensor> {
        self.params.forward(&self.t, &self.context()?)
    }

    fn gradients(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let (dt, dv, dp) = self.params.backward(&self.t, &self.context()?, g)?;
        let mut out = vec![dt, dv];
        out.extend(dp.fields().into_iter().map(|(_, t)| t.clone()));
        Ok(out)
    }
}

/// One modulated norm slot end to end: the conditioner reads the same rows
/// `x` that the norm normalizes, so `x` receives gradient from both paths.
#[derive(Debug, Clone)]
pub struct ModulatedSlotProblem {
    pub x: Tensor,
    pub v: Tensor,
    pub cond: CondParams,
    pub proj: DeltaProjection,
    pub ln: LnParams,
}

impl ModulatedSlotProblem {
    pub fn random(rng: &mut Rng, shape: &CondShape, tokens: usize) -> Result<Self> {
        let base = ConditionerProblem::random(rng, shape, tokens)?;
        let c = shape.channels;
        Ok(ModulatedSlotProblem {
            x: base.t,
            v: base.v,
            cond: base.params,
            proj: DeltaProjection { w: rng.normal_tensor(&[c, 4 * c], 0.5), b: rng.normal_tensor(&[4 * c], 0.5) },
            ln: LnParams {
                alpha: rng.normal_tensor(&[c], 1.0),
                beta: rng.normal_tensor(&[c], 1.0),
                eps: crate::viln::DEFAULT_EPS,
                mode: NormMode::Layer,
            },
        })
    }
}

impl Differentiable for ModulatedSlotProblem {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("x".to_string(), &self.x), ("v".to_string(), &self.v)];
        out.extend(self.cond.fields().into_iter().map(|(n, t)| (format!("cond.{n}"), t)));
        out.push(("delta_proj.W".into(), &self.proj.w));
        out.push(("delta_proj.b".into(), &self.proj.b));
        out.push(("ln.alpha".into(), &self.ln.alpha));
        out.push(("ln.beta".into(), &self.ln.beta));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.x, &mut self.v];
        out.extend(self.cond.fields_mut().into_iter().map(|(_, t)| t));
        out.push(&mut self.proj.w);
        out.push(&mut self.proj.b);
        out.push(&mut self.ln.alpha);
        out.push(&mut self.ln.beta);
        out
    }

    fn output(&self) -> Result<Tensor> {
        let v = VisualContext::new(self.v.clone(), "gradcheck")?;
        let c = self.cond.forward(&self.x, &v)?;
        let d = project_deltas(&c, &self.proj)?;
        let n = normalize(&self.x, self.ln.eps, self.ln.mode)?;
        viln_affine(&n.xhat, &d.d_alpha1, &d.d_beta1, &self.ln)
    }

    fn gradients(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let v = VisualContext::new(self.v.clone(), "gradcheck")?;
        let c = self.cond.forward(&self.x, &v)?;
        let d = project_deltas(&c, &self.proj)?;
        let n = normalize(&self.x, self.ln.eps, self.ln.mode)?;
        let (da, db, dxhat) = affine_backward(&n.xhat, &d.d_alpha1, &self.ln, g)?;
        let zeros = Tensor::zeros(da.shape());
        let pg = project_deltas_backward(
            &c,
            &self.proj,
            &ModulationDeltas { d_alpha1: da.clone(), d_beta1: db.clone(), d_alpha2: zeros.clone(), d_beta2: zeros },
        )?;
        let (dx_cond, dv, dparams) = self.cond.backward(&self.x, &v, &pg.cond)?;
        let dx = normalize_backward(&n, &dxhat)?.add(&dx_cond)?;
        let mut out = vec![dx, dv];
        out.extend(dparams.fields().into_iter().map(|(_, t)| t.clone()));
        out.extend([pg.w, pg.b, da.sum_rows(), db.sum_rows()]);
        Ok(out)
    }
}
