//! Representation probes: how far ViLN moves a norm output, how far a
//! multimodal stack drifts from the plain language stack, and how the
//! former splits across user-labelled token classes.

use crate::conditioning::VisualContext;
use crate::error::{config_err, dim_err, Result};
use crate::io::sig12;
use crate::model::{forward_base_traced, forward_traced, ModelWeights, Paradigm};
use crate::tensor::Tensor;

/// `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`. Two zero vectors are at
/// distance 0; a zero and a non-zero vector at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("cosine distance of lengths {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    // one square root of the product keeps (x, x) at exactly 0
    Ok(match (sa == 0.0, sb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot / (sa * sb).sqrt()).clamp(0.0, 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl LayerStats {
    pub fn of(layer: usize, row: &[f64]) -> Self {
        let n = row.len() as f64;
        LayerStats {
            layer,
            mean: row.iter().sum::<f64>() / n,
            min: row.iter().copied().fold(f64::INFINITY, f64::min),
            max: row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticTrace {
    pub per_layer: Vec<LayerStats>,
    /// `[layers × T]` cosine distances.
    pub per_token: Tensor,
    pub token_labels: Option<Vec<String>>,
}

impl DiagnosticTrace {
    /// Builds the trace from matched hidden-state pairs, one per layer; each
    /// pair is compared row by row.
    pub fn from_pairs(layers: &[usize], pairs: &[(&Tensor, &Tensor)]) -> Result<Self> {
        if layers.len() != pairs.len() || pairs.is_empty() {
            return dim_err(format!("{} layer indices for {} tensor pairs", layers.len(), pairs.len()));
        }
        let tokens = pairs[0].0.dims2()?.0;
        let mut per_token = Tensor::zeros(&[pairs.len(), tokens]);
        for (r, (a, b)) in pairs.iter().enumerate() {
            if a.shape() != b.shape() || a.rows() != tokens {
                return dim_err(format!("cannot compare {:?} with {:?}", a.shape(), b.shape()));
            }
            for i in 0..tokens {
                per_token.set2(r, i, cosine_distance(a.row(i), b.row(i))?);
            }
        }
        let per_layer = layers.iter().enumerate().map(|(r, &l)| LayerStats::of(l, per_token.row(r))).collect();
        Ok(DiagnosticTrace { per_layer, per_token, token_labels: None })
    }

    pub fn tokens(&self) -> usize {
        self.per_token.row_len()
    }

    pub fn global_mean(&self) -> f64 {
        self.per_token.sum() / self.per_token.len() as f64
    }

    /// CSV rows `layer,token,distance,layer_mean,layer_min,layer_max`, each
    /// prefixed by `prefix` when given.
    pub fn csv_rows(&self, prefix: Option<&str>) -> Vec<String> {
        let mut out = Vec::new();
        for (r, s) in self.per_layer.iter().enumerate() {
            for (i, d) in self.per_token.row(r).iter().enumerate() {
                let lead = prefix.map(|p| format!("{p},")).unwrap_or_default();
                out.push(format!(
                    "{lead}{},{i},{},{},{},{}",
                    s.layer,
                    sig12(*d),
                    sig12(s.mean),
                    sig12(s.min),
                    sig12(s.max)
                ));
            }
        }
        out
    }
}

pub const INFLUENCE_HEADER: &str = "layer,token,distance,layer_mean,layer_min,layer_max";
pub const DRIFT_HEADER: &str = "model,layer,token,distance,layer_mean,layer_min,layer_max";

pub fn influence_csv(trace: &DiagnosticTrace) -> String {
    let mut out = format!("{INFLUENCE_HEADER}\n");
    for row in trace.csv_rows(None) {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// One block per named trace, in the given order.
pub fn drift_csv(traces: &[(&str, &DiagnosticTrace)]) -> String {
    let mut out = format!("{DRIFT_HEADER}\n");
    for (name, trace) in traces {
        for row in trace.csv_rows(Some(name)) {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Per modulated layer and token: distance between the norm output with
/// zeroed deltas and the ViLN output, both from one forward pass.
pub fn modulation_influence(w: &ModelWeights, t_emb: &Tensor, v: &VisualContext) -> Result<DiagnosticTrace> {
    if w.config.paradigm != Paradigm::Fmi {
        return config_err(format!("modulation influence needs an fmi model, got {}", w.config.paradigm));
    }
    let trace = forward_traced(t_emb, Some(v), w)?;
    let layers: Vec<usize> = trace.modulation.iter().map(|r| r.layer).collect();
    let pairs: Vec<(&Tensor, &Tensor)> = trace.modulation.iter().map(|r| (&r.plain, &r.modulated)).collect();
    DiagnosticTrace::from_pairs(&layers, &pairs)
}

/// Per layer: distance between `model_a`'s hidden states given text and
/// vision and the plain language stack of `model_b` given text alone. For
/// a prefix model only the trailing text rows are compared.
pub fn feature_drift(
    model_a: &ModelWeights,
    model_b: &ModelWeights,
    t_emb: &Tensor,
    v: Option<&VisualContext>,
) -> Result<DiagnosticTrace> {
    let (a, b) = (&model_a.config, &model_b.config);
    if a.layers != b.layers || a.channels != b.channels {
        return config_err(format!(
            "drift needs equal depth and width, got {}x{} and {}x{}",
            a.layers, a.channels, b.layers, b.channels
        ));
    }
    let ta = forward_traced(t_emb, v, model_a)?;
    let tb = forward_base_traced(t_emb, model_b)?;
    let t = t_emb.rows();
    let text_rows: Vec<Tensor> = ta.hidden.iter().map(|h| h.slice_rows(h.rows() - t, h.rows())).collect();
    let layers: Vec<usize> = (0..a.layers).collect();
    let pairs: Vec<(&Tensor, &Tensor)> = text_rows.iter().zip(&tb.hidden).collect();
    DiagnosticTrace::from_pairs(&layers, &pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfluence {
    pub label: String,
    pub mean: f64,
    /// Number of (layer, token) cells averaged.
    pub count: usize,
}

/// Averages distances over all layers for each token label. Classes are
/// listed in order of first appearance.
pub fn token_class_influence(trace: &DiagnosticTrace, labels: &[String]) -> Result<Vec<ClassInfluence>> {
    if labels.is_empty() {
        return dim_err("token labels are empty");
    }
    if labels.len() != trace.tokens() {
        return dim_err(format!("{} labels for {} tokens", labels.len(), trace.tokens()));
    }
    let mut classes: Vec<ClassInfluence> = Vec::new();
    for r in 0..trace.per_token.rows() {
        for (i, label) in labels.iter().enumerate() {
            let d = trace.per_token.at2(r, i);
            match classes.iter_mut().find(|c| &c.label == label) {
                Some(c) => {
                    c.mean += d;
                    c.count += 1;
                }
                None => classes.push(ClassInfluence { label: label.clone(), mean: d, count: 1 }),
            }
        }
    }
    for c in &mut classes {
        c.mean /= c.count as f64;
    }
    Ok(classes)
}
