use std::fmt;
use std::str::FromStr;

use crate::attention::{check_heads, default_heads};
use crate::conditioning::{CondKind, CondShape};
use crate::error::{config_err, Error, Result};
use crate::io::{format_key_values, parse_key_values};
use crate::viln::{NormMode, DEFAULT_EPS};

/// How vision reaches the language stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Paradigm {
    /// ViLN on the selected layers; the sequence stays text-only.
    #[default]
    Fmi,
    /// Projected visual tokens prepended as a prefix.
    InContext,
    /// Cross-attention layers inserted before the selected blocks.
    CrossAttn,
    /// The language stack alone.
    Base,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Fmi, Paradigm::InContext, Paradigm::CrossAttn, Paradigm::Base];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Fmi => "fmi",
            Paradigm::InContext => "incontext",
            Paradigm::CrossAttn => "crossattn",
            Paradigm::Base => "base",
        }
    }

    /// Whether the paradigm places per-layer extras according to a plan.
    pub fn uses_plan(self) -> bool {
        matches!(self, Paradigm::Fmi | Paradigm::CrossAttn)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm {s:?}")))
    }
}

/// Where the modulated layers sit in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Location {
    Shallow,
    Middle,
    Deep,
    #[default]
    Uniform,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::Shallow, Location::Middle, Location::Deep, Location::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Shallow => "shallow",
            Location::Middle => "middle",
            Location::Deep => "deep",
            Location::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Location::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown location {s:?}")))
    }
}

pub fn norm_mode_str(mode: NormMode) -> &'static str {
    match mode {
        NormMode::Layer => "ln",
        NormMode::Rms => "rms",
    }
}

pub fn parse_norm_mode(s: &str) -> Result<NormMode> {
    match s {
        "ln" => Ok(NormMode::Layer),
        "rms" => Ok(NormMode::Rms),
        _ => config_err(format!("unknown norm mode {s:?}")),
    }
}

/// Sorted indices of the layers that carry paradigm extras.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub modulated: Vec<usize>,
}

impl LayerPlan {
    pub fn contains(&self, layer: usize) -> bool {
        self.modulated.binary_search(&layer).is_ok()
    }

    pub fn len(&self) -> usize {
        self.modulated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modulated.is_empty()
    }
}

/// Number of selected layers: `round(frequency · layers)`.
pub fn selected_count(layers: usize, frequency: f64) -> Result<usize> {
    if !(frequency > 0.0 && frequency <= 1.0) {
        return config_err(format!("frequency must lie in (0, 1], got {frequency}"));
    }
    let k = (frequency * layers as f64).round() as usize;
    if k == 0 {
        return config_err(format!("frequency {frequency} selects no layer out of {layers}"));
    }
    Ok(k)
}

pub fn select_layers(layers: usize, frequency: f64, location: Location) -> Result<LayerPlan> {
    let k = selected_count(layers, frequency)?;
    let modulated: Vec<usize> = match location {
        Location::Shallow => (0..k).collect(),
        Location::Deep => (layers - k..layers).collect(),
        Location::Middle => {
            let start = (layers - k) / 2;
            (start..start + k).collect()
        }
        Location::Uniform if layers.is_multiple_of(k) => (0..k).map(|j| j * (layers / k)).collect(),
        Location::Uniform => (0..k).map(|j| ((j * layers) as f64 / k as f64).round() as usize).collect(),
    };
    Ok(LayerPlan { modulated })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub paradigm: Paradigm,
    pub cond_kind: CondKind,
    pub frequency: f64,
    pub location: Location,
    pub modulate_attn: bool,
    pub modulate_ffn: bool,
    pub use_delta_alpha: bool,
    pub use_delta_beta: bool,
    pub norm_mode: NormMode,
    pub eps: f64,
    pub seed: u64,
    /// Visual length the MLP conditioner is built for.
    pub visual_tokens: usize,
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub kernel: usize,
    /// Heads of the attention conditioner and inserted cross-attention.
    pub cond_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small(6, 64)
    }
}

const KEYS: [&str; 20] = [
    "layers",
    "channels",
    "heads",
    "d_ff",
    "paradigm",
    "cond_kind",
    "frequency",
    "location",
    "modulate_attn",
    "modulate_ffn",
    "use_delta_alpha",
    "use_delta_beta",
    "norm_mode",
    "eps",
    "seed",
    "visual_tokens",
    "token_expansion",
    "channel_expansion",
    "kernel",
    "cond_heads",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => config_err(format!("{key}: expected true or false, got {value:?}")),
    }
}

impl ModelConfig {
    /// An fmi config of the given depth and width with every other field at
    /// its default.
    pub fn small(layers: usize, channels: usize) -> Self {
        let heads = default_heads(channels);
        ModelConfig {
            layers,
            channels,
            heads,
            d_ff: 4 * channels,
            paradigm: Paradigm::Fmi,
            cond_kind: CondKind::Attn,
            frequency: 0.25,
            location: Location::Uniform,
            modulate_attn: true,
            modulate_ffn: true,
            use_delta_alpha: true,
            use_delta_beta: true,
            norm_mode: NormMode::Layer,
            eps: DEFAULT_EPS,
            seed: 0,
            visual_tokens: 16,
            token_expansion: 4,
            channel_expansion: 4,
            kernel: 3,
            cond_heads: heads,
        }
    }

    pub fn with_paradigm(mut self, paradigm: Paradigm) -> Self {
        self.paradigm = paradigm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.d_ff == 0 {
            return config_err("layers, channels and d_ff must be positive");
        }
        check_heads(self.channels, self.heads)?;
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return config_err(format!("eps must be a finite non-negative number, got {}", self.eps));
        }
        if !(self.frequency > 0.0 && self.frequency <= 1.0) {
            return config_err(format!("frequency must lie in (0, 1], got {}", self.frequency));
        }
        if self.paradigm.uses_plan() {
            selected_count(self.layers, self.frequency)?;
            check_heads(self.channels, self.cond_heads)?;
        }
        if self.paradigm == Paradigm::Fmi {
            if !self.modulate_attn && !self.modulate_ffn {
                return config_err("fmi needs at least one of modulate_attn and modulate_ffn");
            }
            match self.cond_kind {
                CondKind::Mlp if self.visual_tokens == 0 || self.token_expansion == 0 || self.channel_expansion == 0 => {
                    return config_err("mlp conditioner needs positive visual_tokens and expansions");
                }
                CondKind::Conv if self.kernel.is_multiple_of(2) => {
                    return config_err(format!("depthwise kernel width must be odd, got {}", self.kernel));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Layers carrying paradigm extras; empty for `incontext` and `base`.
    pub fn plan(&self) -> Result<LayerPlan> {
        if self.paradigm.uses_plan() {
            select_layers(self.layers, self.frequency, self.location)
        } else {
            Ok(LayerPlan { modulated: Vec::new() })
        }
    }

    pub fn cond_shape(&self) -> CondShape {
        CondShape {
            kind: self.cond_kind,
            channels: self.channels,
            visual_tokens: self.visual_tokens,
            token_expansion: self.token_expansion,
            channel_expansion: self.channel_expansion,
            kernel: self.kernel,
            heads: self.cond_heads,
        }
    }

    /// Parses a `key=value` descriptor. Missing keys keep the defaults of
    /// [`ModelConfig::small`] for the given `layers`/`channels`; unknown
    /// keys are rejected.
    pub fn from_descriptor(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return config_err(format!("unknown config key {k:?}"));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let layers = get("layers").map(|v| parse_num("layers", v)).transpose()?.unwrap_or(6);
        let channels = get("channels").map(|v| parse_num("channels", v)).transpose()?.unwrap_or(64);
        let mut cfg = ModelConfig::small(layers, channels);
        for (key, value) in &pairs {
            let v = value.as_str();
            match key.as_str() {
                "layers" | "channels" => {}
                "heads" => {
                    cfg.heads = parse_num(key, v)?;
                    if get("cond_heads").is_none() {
                        cfg.cond_heads = cfg.heads;
                    }
                }
                "d_ff" => cfg.d_ff = parse_num(key, v)?,
                "paradigm" => cfg.paradigm = v.parse()?,
                "cond_kind" => cfg.cond_kind = v.parse()?,
                "frequency" => cfg.frequency = parse_num(key, v)?,
                "location" => cfg.location = v.parse()?,
                "modulate_attn" => cfg.modulate_attn = parse_bool(key, v)?,
                "modulate_ffn" => cfg.modulate_ffn = parse_bool(key, v)?,
                "use_delta_alpha" => cfg.use_delta_alpha = parse_bool(key, v)?,
                "use_delta_beta" => cfg.use_delta_beta = parse_bool(key, v)?,
                "norm_mode" => cfg.norm_mode = parse_norm_mode(v)?,
                "eps" => cfg.eps = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "visual_tokens" => cfg.visual_tokens = parse_num(key, v)?,
                "token_expansion" => cfg.token_expansion = parse_num(key, v)?,
                "channel_expansion" => cfg.channel_expansion = parse_num(key, v)?,
                "kernel" => cfg.kernel = parse_num(key, v)?,
                "cond_heads" => cfg.cond_heads = parse_num(key, v)?,
                _ => unreachable!("keys checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.layers.to_string(),
            self.channels.to_string(),
            self.heads.to_string(),
            self.d_ff.to_string(),
            self.paradigm.to_string(),
            self.cond_kind.to_string(),
            format!("{:?}", self.frequency),
            self.location.to_string(),
            self.modulate_attn.to_string(),
            self.modulate_ffn.to_string(),
            self.use_delta_alpha.to_string(),
            self.use_delta_beta.to_string(),
            norm_mode_str(self.norm_mode).to_string(),
            format!("{:?}", self.eps),
            self.seed.to_string(),
            self.visual_tokens.to_string(),
            self.token_expansion.to_string(),
            self.channel_expansion.to_string(),
            self.kernel.to_string(),
            self.cond_heads.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Every field as `key=value` lines; parses back to an equal config.
    pub fn to_descriptor(&self) -> String {
        format_key_values(&self.to_pairs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_layers(32, 0.25, Location::Uniform).unwrap().modulated, vec![0, 4, 8, 12, 16, 20, 24, 28]);
        for loc in Location::ALL {
            assert_eq!(select_layers(8, 1.0, loc).unwrap().modulated, (0..8).collect::<Vec<_>>());
        }
        assert_eq!(select_layers(8, 0.25, Location::Deep).unwrap().modulated, vec![6, 7]);
        assert_eq!(select_layers(8, 0.25, Location::Shallow).unwrap().modulated, vec![0, 1]);
        assert_eq!(select_layers(8, 0.25, Location::Middle).unwrap().modulated, vec![3, 4]);
        assert_eq!(select_layers(10, 0.3, Location::Uniform).unwrap().modulated, vec![0, 3, 7]);
    }

    #[test]
    fn empty_selection_is_an_error() {
        assert!(matches!(select_layers(4, 0.1, Location::Uniform), Err(Error::Config(_))));
        assert!(select_layers(4, 0.0, Location::Uniform).is_err());
        assert!(select_layers(4, 1.5, Location::Uniform).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let mut cfg = ModelConfig::small(4, 32);
        cfg.paradigm = Paradigm::CrossAttn;
        cfg.cond_kind = CondKind::Conv;
        cfg.frequency = 0.5;
        cfg.location = Location::Deep;
        cfg.norm_mode = NormMode::Rms;
        cfg.eps = 1e-6;
        cfg.seed = 99;
        let back = ModelConfig::from_descriptor(&cfg.to_descriptor()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn descriptor_rejections() {
        assert!(matches!(ModelConfig::from_descriptor("layers=4\nwidth=3\n"), Err(Error::Config(_))));
        assert!(ModelConfig::from_descriptor("modulate_attn=false\nmodulate_ffn=false\n").is_err());
        assert!(ModelConfig::from_descriptor("channels=30\nheads=4\n").is_err());
        assert!(ModelConfig::from_descriptor("layers=2\nfrequency=0.1\n").is_err());
        assert!(ModelConfig::from_descriptor("layers=2\nfrequency=0.1\nparadigm=incontext\n").is_ok());
        assert!(ModelConfig::from_descriptor("cond_kind=conv\nkernel=4\n").is_err());
        assert!(ModelConfig::from_descriptor("eps=-1\n").is_err());
    }

    proptest! {
        #[test]
        fn plan_has_rounded_size_and_increases(layers in 1usize..64, f in 0.01f64..=1.0, loc in 0usize..4) {
            let k = (f * layers as f64).round() as usize;
            match select_layers(layers, f, Location::ALL[loc]) {
                Ok(plan) => {
                    prop_assert_eq!(plan.len(), k);
                    prop_assert!(plan.modulated.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(*plan.modulated.last().unwrap() < layers);
                }
                Err(_) => prop_assert_eq!(k, 0),
            }
        }
    }
}
