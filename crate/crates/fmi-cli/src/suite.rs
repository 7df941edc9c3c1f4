//! Checks run by `gradcheck` and `selftest`.

use fmi_core::conditioning::{
    attn_oracle, cond_attn, cond_conv, cond_conv_loop, cond_mlp, cond_mlp_loop, AttnCondParams, CondKind, CondShape,
    ConvCondParams, MlpCondParams, VisualContext,
};
use fmi_core::cost::{self, CostConfig};
use fmi_core::diagnostics;
use fmi_core::gradcheck::{check_gradients, gradcheck_viln, ConditionerProblem, VilnPipelineProblem};
use fmi_core::io::sig12;
use fmi_core::model::{forward_base, forward_traced, select_layers, Location, ModelConfig, ModelWeights, Paradigm};
use fmi_core::tensor::count_macs;
use fmi_core::viln::{layer_norm, normalize, LnParams, NormMode};
use fmi_core::vision::{pool_adaptive_2x2, sample_frames, tile_image, untile, ImageGrid, PatchEncoder};
use fmi_core::{Result, Rng, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Frame counts of the video sweep.
pub const VIDEO_FRAMES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

fn grad_shape(kind: CondKind) -> CondShape {
    CondShape { kind, channels: 4, visual_tokens: 3, token_expansion: 2, channel_expansion: 2, kernel: 3, heads: 2 }
}

/// Worst relative error of each component over `points` random points:
/// `viln` (delta projection into both norm slots) and each conditioner.
pub fn gradcheck_components(seed: u64, points: usize, h: f64) -> Result<Vec<(String, f64)>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    let mut rng = root.derive(1);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = VilnPipelineProblem::random(&mut rng, 3, 4, 5, 1e-5);
        let g = rng.normal_tensor(&[6, 4], 1.0);
        worst = worst.max(gradcheck_viln(&p, &g, h)?);
    }
    out.push(("viln".to_string(), worst));
    for (i, kind) in CondKind::ALL.into_iter().enumerate() {
        let mut rng = root.derive(2 + i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let p = ConditionerProblem::random(&mut rng, &grad_shape(kind), 3)?;
            let g = rng.normal_tensor(&[3, 4], 1.0);
            worst = worst.max(check_gradients(&p, &g, h)?.max_rel_err);
        }
        out.push((format!("cond_{kind}"), worst));
    }
    Ok(out)
}

/// Which side of `bound` a passing value lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound: Bound::AtMost, pass: value <= limit }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound: Bound::AtLeast, pass: value >= limit }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    /// `(file name, contents)` pairs.
    pub artifacts: Vec<(String, String)>,
}

pub const SELFTEST_HEADER: &str = "check,value,bound,limit,pass";

pub fn checks_csv(checks: &[Check]) -> String {
    let mut s = format!("{SELFTEST_HEADER}\n");
    for c in checks {
        let bound = match c.bound {
            Bound::AtMost => "le",
            Bound::AtLeast => "ge",
        };
        s.push_str(&format!("{},{},{bound},{},{}\n", c.name, sig12(c.value), sig12(c.limit), c.pass));
    }
    s
}

fn equivalence_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let t = rng.normal_tensor(&[16, 64], 1.0);
    let v = VisualContext::new(rng.normal_tensor(&[16, 64], 1.0), "selftest")?;
    for kind in CondKind::ALL {
        let cfg = ModelConfig { cond_kind: kind, seed: rng.next_u64(), ..ModelConfig::small(6, 64) };
        let w = ModelWeights::init(&cfg)?;
        let diff = forward_traced(&t, Some(&v), &w)?.output.max_abs_diff(&forward_base(&t, &w)?)?;
        out.push(Check::at_most(format!("equivalence_fmi_{kind}"), diff, 0.0));
    }
    let cfg = ModelConfig { seed: rng.next_u64(), ..ModelConfig::small(6, 64) }.with_paradigm(Paradigm::CrossAttn);
    let w = ModelWeights::init(&cfg)?;
    let diff = forward_traced(&t, Some(&v), &w)?.output.max_abs_diff(&forward_base(&t, &w)?)?;
    out.push(Check::at_most("equivalence_crossattn", diff, 0.0));
    Ok(())
}

fn layer_norm_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let x = rng.normal_tensor(&[1000, 32], 2.0);
    let n = normalize(&x, 0.0, NormMode::Layer)?;
    let (mut mean_err, mut std_err): (f64, f64) = (0.0, 0.0);
    for i in 0..n.xhat.rows() {
        let row = n.xhat.row(i);
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / row.len() as f64;
        mean_err = mean_err.max(m.abs());
        std_err = std_err.max((var.sqrt() - 1.0).abs());
    }
    out.push(Check::at_most("ln_mean", mean_err, 1e-10));
    out.push(Check::at_most("ln_std", std_err, 1e-8));
    let ln = LnParams::new(rng.normal_tensor(&[32], 1.0), rng.normal_tensor(&[32], 1.0), 0.0, NormMode::Layer)?;
    let scaled = layer_norm(&x.scale(3.7), &ln)?.output;
    out.push(Check::at_most("ln_scale_invariance", scaled.max_abs_diff(&layer_norm(&x, &ln)?.output)?, 1e-10));
    Ok(())
}

fn oracle_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let mut attn: f64 = 0.0;
    for case in 0..20 {
        let heads = [1, 2, 4][case % 3];
        let c = heads * rng.int_range(1, 5);
        let (t, nv) = (rng.int_range(1, 5), rng.int_range(1, 9));
        let p = AttnCondParams::init(c, heads, rng, 0.5)?;
        let x = rng.normal_tensor(&[t, c], 1.0);
        let v = VisualContext::new(rng.normal_tensor(&[nv, c], 1.0), "selftest")?;
        attn = attn.max(cond_attn(&x, &v, &p)?.max_abs_diff(&attn_oracle(&x, &v, &p)?)?);
    }
    out.push(Check::at_most("attn_oracle", attn, 1e-10));
    let (mut mlp, mut conv): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let c = rng.int_range(1, 9);
        let (t, nv) = (rng.int_range(1, 6), rng.int_range(1, 7));
        let x = rng.normal_tensor(&[t, c], 1.0);
        let v = VisualContext::new(rng.normal_tensor(&[nv, c], 1.0), "selftest")?;
        let pm = MlpCondParams::init(c, nv, 2, 3, rng, 0.5)?;
        mlp = mlp.max(cond_mlp(&x, &v, &pm)?.max_abs_diff(&cond_mlp_loop(&x, &v, &pm)?)?);
        let pc = ConvCondParams::init(c, 2 * rng.int_range(0, 3) + 1, rng, 0.5)?;
        conv = conv.max(cond_conv(&x, &v, &pc)?.max_abs_diff(&cond_conv_loop(&x, &v, &pc)?)?);
    }
    out.push(Check::at_most("mlp_loop", mlp, 1e-12));
    out.push(Check::at_most("conv_loop", conv, 1e-12));
    Ok(())
}

fn selection_check(out: &mut Vec<Check>) -> Result<()> {
    let cases: [(usize, f64, Location, Vec<usize>); 3] = [
        (32, 0.25, Location::Uniform, (0..8).map(|j| 4 * j).collect()),
        (8, 1.0, Location::Middle, (0..8).collect()),
        (8, 0.25, Location::Deep, vec![6, 7]),
    ];
    let mut wrong = 0;
    for (l, f, loc, want) in cases {
        if select_layers(l, f, loc)?.modulated != want {
            wrong += 1;
        }
    }
    out.push(Check::at_most("select_layers_mismatches", wrong as f64, 0.0));
    Ok(())
}

fn op_walk_check(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let mut worst: f64 = 0.0;
    for paradigm in Paradigm::ALL {
        for (layers, channels, t, v) in [(2, 8, 3, 4), (3, 16, 5, 6), (4, 12, 2, 9)] {
            let cfg = ModelConfig {
                paradigm,
                heads: 2,
                cond_heads: 2,
                frequency: 0.5,
                visual_tokens: v,
                seed: rng.next_u64(),
                ..ModelConfig::small(layers, channels)
            };
            let w = ModelWeights::init(&cfg)?;
            let text = rng.normal_tensor(&[t, channels], 1.0);
            let vis = VisualContext::new(rng.normal_tensor(&[v, channels], 1.0), "selftest")?;
            let input = (paradigm != Paradigm::Base).then_some(&vis);
            let (res, macs) = count_macs(|| forward_traced(&text, input, &w));
            res?;
            let analytic = cost::cost_paradigm(&CostConfig::from_model(&cfg, t, v, 8))?.total_flops as f64;
            let counted = 2.0 * macs as f64;
            worst = worst.max((analytic - counted).abs() / counted);
        }
    }
    out.push(Check::at_most("op_walk_rel_err", worst, 0.01));
    Ok(())
}

fn cost_checks(out: &mut Vec<Check>) -> Result<String> {
    for p in cost::presets() {
        if let Some(target) = p.target_ratio {
            let r = cost::reduction_ratio(&p.config)?;
            out.push(Check::at_most(format!("ratio_dev_{}", p.name), (r / target - 1.0).abs(), 0.3));
        }
    }
    let video = cost::preset("video-qwen2-7b")?.config;
    let mut reports = Vec::new();
    for p in [Paradigm::Fmi, Paradigm::CrossAttn, Paradigm::InContext] {
        reports.extend(cost::sweep_frames(&video.with_paradigm(p), &VIDEO_FRAMES)?);
    }
    let last = *VIDEO_FRAMES.last().unwrap_or(&1);
    let at = |p: Paradigm, k: usize| reports.iter().find(|r| r.paradigm == p && r.frames == k);
    if let (Some(f), Some(i)) = (at(Paradigm::Fmi, last), at(Paradigm::InContext, last)) {
        out.push(Check::at_least("video_flops_saving_pct", cost::saving_percent(f.total_flops, i.total_flops), 85.0));
        out.push(Check::at_least("video_memory_saving_pct", cost::saving_percent(f.memory_bytes(), i.memory_bytes()), 50.0));
    }
    let fmi_kv: Vec<u64> = reports.iter().filter(|r| r.paradigm == Paradigm::Fmi).map(|r| r.kv_cache_bytes).collect();
    let spread = fmi_kv.iter().max().unwrap_or(&0) - fmi_kv.iter().min().unwrap_or(&0);
    out.push(Check::at_most("video_fmi_kv_spread_bytes", spread as f64, 0.0));
    Ok(cost::to_csv(&reports))
}

fn diagnostic_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<(String, String)> {
    let cfg = ModelConfig { seed: rng.next_u64(), ..ModelConfig::small(4, 32) };
    let t = rng.normal_tensor(&[8, 32], 1.0);
    let v = VisualContext::new(rng.normal_tensor(&[16, 32], 1.0), "selftest")?;
    let fresh = ModelWeights::init(&cfg)?;
    let zero = diagnostics::modulation_influence(&fresh, &t, &v)?;
    out.push(Check::at_most("influence_zero_init", zero.per_token.data().iter().fold(0.0, |m, d| f64::max(m, *d)), 0.0));

    let base = ModelWeights::init(&cfg.clone().with_paradigm(Paradigm::Base))?;
    let same = diagnostics::feature_drift(&base, &base, &t, None)?;
    out.push(Check::at_most("drift_base_vs_base", same.per_token.data().iter().fold(0.0, |m, d| f64::max(m, *d)), 0.0));

    let mut models = Vec::new();
    for p in [Paradigm::Fmi, Paradigm::CrossAttn, Paradigm::InContext] {
        let mut w = ModelWeights::init(&cfg.clone().with_paradigm(p))?;
        w.randomize(&mut Rng::new(cfg.seed).derive(7), 0.02);
        models.push(w);
    }
    let influence = diagnostics::modulation_influence(&models[0], &t, &v)?;
    let mut agg: f64 = 0.0;
    for (i, s) in influence.per_layer.iter().enumerate() {
        let row = influence.per_token.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        agg = agg.max((mean - s.mean).abs()).max((min - s.min).abs()).max((max - s.max).abs());
    }
    out.push(Check::at_most("influence_aggregates", agg, 0.0));
    out.push(Check::at_least(
        "influence_randomized_max",
        influence.per_layer.iter().map(|s| s.max).fold(0.0, f64::max),
        f64::MIN_POSITIVE,
    ));
    let mut drifts = Vec::new();
    for w in &models {
        let vis = (w.config.paradigm != Paradigm::Base).then_some(&v);
        drifts.push((w.config.paradigm.as_str(), diagnostics::feature_drift(w, &base, &t, vis)?));
    }
    let named: Vec<(&str, &diagnostics::DiagnosticTrace)> = drifts.iter().map(|(n, d)| (*n, d)).collect();
    Ok((diagnostics::influence_csv(&influence), diagnostics::drift_csv(&named)))
}

fn vision_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let img = ImageGrid::noise(20, 28, 3, rng)?;
    let tiles = tile_image(&img, 8)?;
    let back = untile(&tiles, 3, 4)?;
    let mut diff: f64 = 0.0;
    for y in 0..20 {
        for x in 0..28 {
            for c in 0..3 {
                diff = diff.max((back.get(y, x, c) - img.get(y, x, c)).abs());
            }
        }
    }
    out.push(Check::at_most("tiling_roundtrip", diff, 0.0));
    let grid = Tensor::new(vec![4, 4, 1], (1..=16).map(f64::from).collect())?;
    let want = [3.5, 5.5, 11.5, 13.5];
    let pooled = pool_adaptive_2x2(&grid)?;
    let pool_err = pooled.data().iter().zip(want).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
    out.push(Check::at_most("pool_4x4", pool_err, 0.0));
    let frames = sample_frames(100, 4)?;
    out.push(Check::at_most("sample_frames_mismatch", (frames != [0, 33, 66, 99]) as u8 as f64, 0.0));
    let enc = PatchEncoder::new(14, 3, 8, 0);
    let n = enc.encode_image(&ImageGrid::gradient(336, 336, 3)?, 336)?.len();
    out.push(Check::at_most("tokens_336_patch14_dev", (n as f64 - 576.0).abs(), 0.0));
    Ok(())
}

/// Runs every check from one seed. The artifacts depend only on `seed`.
pub fn selftest(seed: u64) -> Result<SelftestReport> {
    let root = Rng::new(seed);
    let mut checks = Vec::new();
    equivalence_checks(&mut root.derive(1), &mut checks)?;
    layer_norm_checks(&mut root.derive(2), &mut checks)?;
    for (name, err) in gradcheck_components(seed, 3, 1e-6)? {
        checks.push(Check::at_most(format!("gradcheck_{name}"), err, GRAD_TOLERANCE));
    }
    oracle_checks(&mut root.derive(3), &mut checks)?;
    selection_check(&mut checks)?;
    op_walk_check(&mut root.derive(4), &mut checks)?;
    let cost_csv = cost_checks(&mut checks)?;
    let (influence_csv, drift_csv) = diagnostic_checks(&mut root.derive(5), &mut checks)?;
    vision_checks(&mut root.derive(6), &mut checks)?;
    let artifacts = vec![
        ("selftest.csv".to_string(), checks_csv(&checks)),
        ("cost.csv".to_string(), cost_csv),
        ("influence.csv".to_string(), influence_csv),
        ("drift.csv".to_string(), drift_csv),
    ];
    Ok(SelftestReport { checks, artifacts })
}
