//! Closed-form prefill FLOPs and memory for the three injection paradigms.
//!
//! One multiply-accumulate counts as 2 FLOPs. Softmax, activations, norms
//! and elementwise adds are ignored, and vision-encoder cost is excluded
//! because it is the same for every paradigm. Every term mirrors a matrix
//! product the executable model performs, so small configs can be checked
//! against a MAC count of an actual forward pass.

use crate::conditioning::CondKind;
use crate::error::{config_err, Error, Result};
use crate::io::sig12;
use crate::model::{selected_count, ModelConfig, Paradigm};

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub text_tokens: usize,
    /// Visual tokens per image, or per pooled frame when `frames > 1`.
    pub visual_tokens: usize,
    pub frames: usize,
    pub paradigm: Paradigm,
    pub cond_kind: CondKind,
    pub frequency: f64,
    pub bytes_per_elem: usize,
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub kernel: usize,
}

impl CostConfig {
    /// The cost view of an executable model run on `text_tokens` text and
    /// `visual_tokens` visual tokens (one image).
    pub fn from_model(cfg: &ModelConfig, text_tokens: usize, visual_tokens: usize, bytes_per_elem: usize) -> Self {
        CostConfig {
            layers: cfg.layers,
            channels: cfg.channels,
            heads: cfg.heads,
            d_ff: cfg.d_ff,
            text_tokens,
            visual_tokens,
            frames: 1,
            paradigm: cfg.paradigm,
            cond_kind: cfg.cond_kind,
            frequency: cfg.frequency,
            bytes_per_elem,
            token_expansion: cfg.token_expansion,
            channel_expansion: cfg.channel_expansion,
            kernel: cfg.kernel,
        }
    }

    pub fn with_paradigm(&self, paradigm: Paradigm) -> Self {
        CostConfig { paradigm, ..self.clone() }
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        CostConfig { frames, ..self.clone() }
    }

    pub fn total_visual(&self) -> usize {
        self.frames * self.visual_tokens
    }

    /// Sequence length seen by the backbone blocks.
    pub fn seq_len(&self) -> usize {
        match self.paradigm {
            Paradigm::InContext => self.total_visual() + self.text_tokens,
            _ => self.text_tokens,
        }
    }

    /// Layers carrying conditioners or inserted layers.
    pub fn selected_layers(&self) -> Result<usize> {
        if self.paradigm.uses_plan() {
            selected_count(self.layers, self.frequency)
        } else {
            Ok(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.channels,
            self.heads,
            self.d_ff,
            self.text_tokens,
            self.visual_tokens,
            self.frames,
            self.bytes_per_elem,
        ];
        if counts.contains(&0) {
            return config_err("cost config counts must all be at least 1");
        }
        if !(self.frequency > 0.0 && self.frequency <= 1.0) {
            return config_err(format!("frequency must lie in (0, 1], got {}", self.frequency));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return config_err(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        self.selected_layers()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    /// Score and mixing products of the backbone self-attention.
    pub self_attention: u64,
    pub ffn: u64,
    /// Q, K, V and output projections of the backbone.
    pub projections: u64,
    /// Conditioners plus delta projections.
    pub conditioner: u64,
    pub connector: u64,
    pub inserted_crossattn: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.self_attention + self.ffn + self.projections + self.conditioner + self.connector + self.inserted_crossattn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub paradigm: Paradigm,
    pub frames: usize,
    pub text_tokens: usize,
    pub visual_tokens: usize,
    pub seq_len: usize,
    pub breakdown: Breakdown,
    pub total_flops: u64,
    pub kv_cache_bytes: u64,
    pub peak_activation_bytes: u64,
    pub weight_bytes: u64,
}

impl CostReport {
    pub fn memory_bytes(&self) -> u64 {
        self.kv_cache_bytes + self.weight_bytes + self.peak_activation_bytes
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Prefill FLOPs of one block at sequence length `S`:
/// `8·S·C² + 4·S²·C + 4·S·C·d_ff`.
pub fn flops_block(seq_len: usize, channels: usize, d_ff: usize) -> u64 {
    let (s, c, f) = (u(seq_len), u(channels), u(d_ff));
    8 * s * c * c + 4 * s * s * c + 4 * s * c * f
}

/// Hyperparameters that only some conditioner kinds use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondSizes {
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub kernel: usize,
}

impl Default for CondSizes {
    fn default() -> Self {
        CondSizes { token_expansion: 4, channel_expansion: 4, kernel: 3 }
    }
}

/// FLOPs of the conditioner alone for `T` text and `V` visual tokens.
///
/// * attn: `4·T·C² + 4·V·C² + 4·T·V·C` (Q and output maps, K and V maps,
///   scores and mixing)
/// * mlp: `2·(C·V·eL + 2·T·C·eL + 2·T·C·eC)` with `eL = e_t·(V+1)`,
///   `eC = e_c·C`; the visual half of the first token layer is shared by
///   all text tokens and only output position 0 is formed
/// * conv: `2·C·K + 2·T·C²`; position 0 sees only the first `K/2` visual
///   tokens, so the cost does not grow with `V`
pub fn flops_conditioner(kind: CondKind, t: usize, v: usize, c: usize, sizes: CondSizes) -> Result<u64> {
    if v == 0 {
        return Err(Error::Config("conditioner cost needs at least one visual token".into()));
    }
    let (t, v, c) = (u(t), u(v), u(c));
    Ok(match kind {
        CondKind::Attn => 4 * t * c * c + 4 * v * c * c + 4 * t * v * c,
        CondKind::Mlp => {
            let el = u(sizes.token_expansion) * (v + 1);
            let ec = u(sizes.channel_expansion) * c;
            2 * (c * v * el + 2 * t * c * el + 2 * t * c * ec)
        }
        CondKind::Conv => 2 * c * u(sizes.kernel) + 2 * t * c * c,
    })
}

/// Delta projection `[C × 4C]` applied to `T` conditioning vectors.
pub fn flops_delta_projection(t: usize, c: usize) -> u64 {
    8 * u(t) * u(c) * u(c)
}

/// Per-modulated-layer cost: conditioner plus delta projection.
pub fn flops_cond(kind: CondKind, t: usize, v: usize, c: usize, sizes: CondSizes) -> Result<u64> {
    Ok(flops_conditioner(kind, t, v, c, sizes)? + flops_delta_projection(t, c))
}

/// One inserted layer: cross-attention from `T` queries to `V` visual
/// tokens, then an FFN on the text rows.
pub fn flops_inserted(t: usize, v: usize, c: usize, d_ff: usize) -> u64 {
    let (t, v, c, f) = (u(t), u(v), u(c), u(d_ff));
    4 * t * c * c + 4 * v * c * c + 4 * t * v * c + 4 * t * c * f
}

fn sizes(cfg: &CostConfig) -> CondSizes {
    CondSizes { token_expansion: cfg.token_expansion, channel_expansion: cfg.channel_expansion, kernel: cfg.kernel }
}

/// Parameter count of one conditioner plus its delta projection.
fn cond_params(cfg: &CostConfig) -> u64 {
    let (c, v) = (u(cfg.channels), u(cfg.total_visual()));
    let body = match cfg.cond_kind {
        CondKind::Attn => 4 * c * c,
        CondKind::Mlp => {
            let l = v + 1;
            let el = u(cfg.token_expansion) * l;
            let ec = u(cfg.channel_expansion) * c;
            2 * l * el + el + l + 2 * c * ec + ec + c
        }
        CondKind::Conv => c * u(cfg.kernel) + c + c * c + c,
    };
    body + 4 * c * c + 4 * c
}

fn weight_params(cfg: &CostConfig, selected: u64) -> u64 {
    let (c, f) = (u(cfg.channels), u(cfg.d_ff));
    let ffn = 2 * c * f + f + c;
    let block = 4 * c * c + ffn + 4 * c;
    let extra = match cfg.paradigm {
        Paradigm::Fmi => selected * cond_params(cfg),
        Paradigm::CrossAttn => selected * (4 * c * c + ffn + 4 * c),
        Paradigm::InContext => c * c + c,
        Paradigm::Base => 0,
    };
    u(cfg.layers) * block + extra
}

/// Element count of the largest single intermediate tensor.
fn peak_activation_elems(cfg: &CostConfig) -> u64 {
    let (s, c, f, h) = (u(cfg.seq_len()), u(cfg.channels), u(cfg.d_ff), u(cfg.heads));
    let (t, v) = (u(cfg.text_tokens), u(cfg.total_visual()));
    let mut peak = (h * s * s).max(s * f).max(s * c);
    match cfg.paradigm {
        Paradigm::Fmi => {
            peak = peak.max(v * c);
            peak = peak.max(match cfg.cond_kind {
                CondKind::Attn => h * t * v,
                CondKind::Mlp => t * c * u(cfg.token_expansion) * (v + 1),
                CondKind::Conv => t * c,
            });
            peak = peak.max(4 * t * c);
        }
        Paradigm::CrossAttn => peak = peak.max(v * c).max(h * t * v),
        Paradigm::InContext | Paradigm::Base => {}
    }
    peak
}

pub fn cost_paradigm(cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    let (l, c, f) = (u(cfg.layers), cfg.channels, cfg.d_ff);
    let s = cfg.seq_len();
    let (t, v) = (cfg.text_tokens, cfg.total_visual());
    let selected = u(cfg.selected_layers()?);
    let (su, cu, fu) = (u(s), u(c), u(f));
    let mut b = Breakdown {
        self_attention: l * 4 * su * su * cu,
        ffn: l * 4 * su * cu * fu,
        projections: l * 8 * su * cu * cu,
        ..Breakdown::default()
    };
    debug_assert_eq!(b.total(), l * flops_block(s, c, f));
    match cfg.paradigm {
        Paradigm::Fmi => b.conditioner = selected * flops_cond(cfg.cond_kind, t, v, c, sizes(cfg))?,
        Paradigm::CrossAttn => b.inserted_crossattn = selected * flops_inserted(t, v, c, f),
        Paradigm::InContext => b.connector = 2 * u(v) * cu * cu,
        Paradigm::Base => {}
    }
    let bytes = u(cfg.bytes_per_elem);
    Ok(CostReport {
        paradigm: cfg.paradigm,
        frames: cfg.frames,
        text_tokens: t,
        visual_tokens: v,
        seq_len: s,
        breakdown: b,
        total_flops: b.total(),
        kv_cache_bytes: 2 * l * su * cu * bytes,
        peak_activation_bytes: peak_activation_elems(cfg) * bytes,
        weight_bytes: weight_params(cfg, selected) * bytes,
    })
}

/// KV cache plus weights plus the largest single intermediate, in bytes.
pub fn memory_estimate(cfg: &CostConfig) -> Result<u64> {
    Ok(cost_paradigm(cfg)?.memory_bytes())
}

/// Per-token backbone FLOPs of one decode step after a prefill of the
/// paradigm's sequence length.
pub fn decode_flops_per_token(cfg: &CostConfig) -> Result<u64> {
    cfg.validate()?;
    let (s, c, f) = (u(cfg.seq_len() + 1), u(cfg.channels), u(cfg.d_ff));
    Ok(u(cfg.layers) * (8 * c * c + 4 * s * c + 4 * c * f))
}

/// Reports for each frame count, `cfg.visual_tokens` tokens per frame.
pub fn sweep_frames(cfg: &CostConfig, frame_counts: &[usize]) -> Result<Vec<CostReport>> {
    if frame_counts.is_empty() {
        return config_err("frame sweep needs at least one frame count");
    }
    if frame_counts.windows(2).any(|w| w[0] >= w[1]) {
        return config_err("frame counts must be strictly ascending");
    }
    frame_counts.iter().map(|&k| cost_paradigm(&cfg.with_frames(k))).collect()
}

/// Named architecture and token-count assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: CostConfig,
    /// Target fmi-vs-prefix FLOPs reduction, when one exists.
    pub target_ratio: Option<f64>,
}

fn arch(layers: usize, channels: usize, heads: usize, d_ff: usize, text: usize, visual: usize) -> CostConfig {
    CostConfig {
        layers,
        channels,
        heads,
        d_ff,
        text_tokens: text,
        visual_tokens: visual,
        frames: 1,
        paradigm: Paradigm::Fmi,
        cond_kind: CondKind::Attn,
        frequency: 0.25,
        bytes_per_elem: 2,
        token_expansion: 4,
        channel_expansion: 4,
        kernel: 3,
    }
}

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "llava-v1.5-7b",
            description: "Vicuna-7B backbone, one 336px CLIP image (576 tokens), 16 text tokens",
            config: arch(32, 4096, 32, 11008, 16, 576),
            target_ratio: Some(14.0),
        },
        Preset {
            name: "llava-v1.6-7b-hd",
            description: "Vicuna-7B backbone, 2x2 tiles plus a global view (5 x 576 tokens), 16 text tokens",
            config: arch(32, 4096, 32, 11008, 16, 5 * 576),
            target_ratio: Some(19.4),
        },
        Preset {
            name: "llava-ov-7b",
            description: "Qwen2-7B backbone, 2x2 SigLIP tiles plus a global view (5 x 729 tokens), 128 text tokens",
            config: arch(28, 3584, 28, 18944, 128, 5 * 729),
            target_ratio: Some(16.8),
        },
        Preset {
            name: "video-qwen2-7b",
            description: "Qwen2-7B backbone, 27x27 SigLIP grid pooled to 14x14 = 196 tokens per frame, 128 text tokens",
            config: arch(28, 3584, 28, 18944, 128, 196),
            target_ratio: None,
        },
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown cost preset {name:?}")))
}

/// FLOPs of the prefix paradigm divided by FLOPs of fmi for `cfg`.
pub fn reduction_ratio(cfg: &CostConfig) -> Result<f64> {
    let prefix = cost_paradigm(&cfg.with_paradigm(Paradigm::InContext))?.total_flops;
    let fmi = cost_paradigm(&cfg.with_paradigm(Paradigm::Fmi))?.total_flops;
    Ok(prefix as f64 / fmi as f64)
}

pub const CSV_HEADER: &str = "paradigm,frames,text_tokens,visual_tokens,seq_len,self_attention,ffn,projections,\
conditioner,connector,inserted_crossattn,total_flops,kv_cache_bytes,peak_activation_bytes,weight_bytes,memory_bytes";

pub fn csv_row(r: &CostReport) -> String {
    let b = &r.breakdown;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.paradigm,
        r.frames,
        r.text_tokens,
        r.visual_tokens,
        r.seq_len,
        b.self_attention,
        b.ffn,
        b.projections,
        b.conditioner,
        b.connector,
        b.inserted_crossattn,
        r.total_flops,
        r.kv_cache_bytes,
        r.peak_activation_bytes,
        r.weight_bytes,
        r.memory_bytes()
    )
}

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`to_csv`] back into reports.
pub fn from_csv(text: &str) -> Result<Vec<CostReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("cost CSV header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 16 {
                return Err(Error::Parse(format!("cost CSV row has {} fields", f.len())));
            }
            let n = |i: usize| f[i].parse::<u64>().map_err(|_| Error::Parse(format!("bad number {:?}", f[i])));
            let breakdown = Breakdown {
                self_attention: n(5)?,
                ffn: n(6)?,
                projections: n(7)?,
                conditioner: n(8)?,
                connector: n(9)?,
                inserted_crossattn: n(10)?,
            };
            let r = CostReport {
                paradigm: f[0].parse()?,
                frames: n(1)? as usize,
                text_tokens: n(2)? as usize,
                visual_tokens: n(3)? as usize,
                seq_len: n(4)? as usize,
                breakdown,
                total_flops: n(11)?,
                kv_cache_bytes: n(12)?,
                peak_activation_bytes: n(13)?,
                weight_bytes: n(14)?,
            };
            if r.total_flops != breakdown.total() || r.memory_bytes() != n(15)? {
                return Err(Error::Parse("cost CSV row totals do not add up".into()));
            }
            Ok(r)
        })
        .collect()
}

/// Relative saving `1 − a/b` in percent.
pub fn saving_percent(a: u64, b: u64) -> f64 {
    100.0 * (1.0 - a as f64 / b as f64)
}

/// Summary line used by the CLI.
pub fn describe_ratio(name: &str, ratio: f64) -> String {
    format!("{name}: prefix/fmi FLOPs ratio {}", sig12(ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(paradigm: Paradigm) -> CostConfig {
        CostConfig { paradigm, ..arch(4, 16, 2, 32, 3, 5) }
    }

    #[test]
    fn block_formula() {
        assert_eq!(flops_block(1, 1, 1), 16);
        assert!(flops_block(20, 8, 16) > 2 * flops_block(10, 8, 16));
    }

    #[test]
    fn attn_cond_is_linear_in_each_length() {
        let s = CondSizes::default();
        let f = |t, v| flops_conditioner(CondKind::Attn, t, v, 8, s).unwrap();
        assert_eq!(f(2, 3) - f(1, 3), f(3, 3) - f(2, 3));
        assert_eq!(f(2, 5) - f(2, 4), f(2, 4) - f(2, 3));
        for k in CondKind::ALL {
            assert!(matches!(flops_conditioner(k, 2, 0, 8, s), Err(Error::Config(_))));
        }
    }

    #[test]
    fn growth_with_visual_tokens() {
        let at = |p: Paradigm, v: usize| cost_paradigm(&CostConfig { visual_tokens: v, ..tiny(p) }).unwrap().total_flops;
        let (a, b, c) = (at(Paradigm::InContext, 100), at(Paradigm::InContext, 200), at(Paradigm::InContext, 300));
        assert!(c - b > b - a);
        let (a, b, c) = (at(Paradigm::Fmi, 100), at(Paradigm::Fmi, 200), at(Paradigm::Fmi, 300));
        assert_eq!(c - b, b - a);
    }

    #[test]
    fn byte_width_scales_memory_linearly() {
        let cfg = presets()[0].config.with_paradigm(Paradigm::InContext);
        let one = cost_paradigm(&cfg).unwrap();
        let two = cost_paradigm(&CostConfig { bytes_per_elem: 4, ..cfg }).unwrap();
        assert_eq!(two.kv_cache_bytes, 2 * one.kv_cache_bytes);
        assert_eq!(two.peak_activation_bytes, 2 * one.peak_activation_bytes);
        assert_eq!(two.weight_bytes, 2 * one.weight_bytes);
    }

    #[test]
    fn weights_dominate_single_small_image() {
        let cfg = CostConfig { visual_tokens: 64, ..presets()[0].config.clone() };
        for p in Paradigm::ALL {
            let r = cost_paradigm(&cfg.with_paradigm(p)).unwrap();
            assert!(r.weight_bytes > r.kv_cache_bytes + r.peak_activation_bytes, "{p}");
        }
    }

    #[test]
    fn sweep_rules() {
        let cfg = preset("video-qwen2-7b").unwrap().config;
        assert!(sweep_frames(&cfg, &[]).is_err());
        assert!(sweep_frames(&cfg, &[4, 2]).is_err());
        let ks = [1, 2, 4, 8, 16, 32, 64, 128];
        let fmi = sweep_frames(&cfg, &ks).unwrap();
        assert!(fmi.windows(2).all(|w| w[0].kv_cache_bytes == w[1].kv_cache_bytes));
        let pre = sweep_frames(&cfg.with_paradigm(Paradigm::InContext), &ks).unwrap();
        let kv0 = pre[0].kv_cache_bytes;
        let per_frame = 2 * 28 * 196 * 3584 * 2;
        for (r, &k) in pre.iter().zip(&ks) {
            assert_eq!(r.kv_cache_bytes - kv0, (k as u64 - 1) * per_frame);
        }
        for p in Paradigm::ALL {
            let s = sweep_frames(&cfg.with_paradigm(p), &ks).unwrap();
            assert!(s.windows(2).all(|w| w[0].total_flops <= w[1].total_flops && w[0].memory_bytes() <= w[1].memory_bytes()));
        }
    }

    #[test]
    fn csv_round_trip() {
        let cfg = preset("video-qwen2-7b").unwrap().config;
        let mut reports = Vec::new();
        for p in Paradigm::ALL {
            reports.extend(sweep_frames(&cfg.with_paradigm(p), &[1, 8, 128]).unwrap());
        }
        let text = to_csv(&reports);
        assert_eq!(from_csv(&text).unwrap(), reports);
        assert_eq!(to_csv(&from_csv(&text).unwrap()), text);
    }

    #[test]
    fn unknown_preset() {
        assert!(preset("gpt").is_err());
    }

    proptest! {
        #[test]
        fn breakdown_adds_up(t in 1usize..64, v in 1usize..512, k in 1usize..8, p in 0usize..4, kind in 0usize..3) {
            let cfg = CostConfig {
                text_tokens: t,
                visual_tokens: v,
                frames: k,
                paradigm: Paradigm::ALL[p],
                cond_kind: CondKind::ALL[kind],
                ..tiny(Paradigm::Fmi)
            };
            let r = cost_paradigm(&cfg).unwrap();
            prop_assert_eq!(r.total_flops, r.breakdown.total());
        }

        #[test]
        fn paradigm_ordering(t in 1usize..64, v in 1usize..256, k in 1usize..8, c_mult in 1usize..8, ff_extra in 1usize..64, freq in 0.05f64..=1.0) {
            prop_assume!(k * v >= t);
            let c = 8 * c_mult;
            let cfg = CostConfig {
                text_tokens: t,
                visual_tokens: v,
                frames: k,
                channels: c,
                heads: 8,
                d_ff: 2 * c + ff_extra,
                layers: 12,
                frequency: freq,
                ..tiny(Paradigm::Fmi)
            };
            prop_assume!(cfg.selected_layers().is_ok());
            let total = |p| cost_paradigm(&cfg.with_paradigm(p)).unwrap().total_flops;
            prop_assert!(total(Paradigm::Fmi) < total(Paradigm::CrossAttn));
            prop_assert!(total(Paradigm::CrossAttn) < total(Paradigm::InContext));
        }
    }
}
