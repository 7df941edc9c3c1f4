use fmi_core::conditioning::{CondKind, VisualContext};
use fmi_core::cost::{cost_paradigm, CostConfig};
use fmi_core::model::{forward_traced, ModelConfig, ModelWeights, Paradigm};
use fmi_core::tensor::count_macs;
use fmi_core::Rng;

fn measured(cfg: &ModelConfig, t: usize, v: usize) -> u64 {
    let w = ModelWeights::init(cfg).unwrap();
    let mut rng = Rng::new(cfg.seed);
    let text = rng.normal_tensor(&[t, cfg.channels], 1.0);
    let vis = VisualContext::new(rng.normal_tensor(&[v, cfg.channels], 1.0), "image").unwrap();
    let input = (cfg.paradigm != Paradigm::Base).then_some(&vis);
    let (out, macs) = count_macs(|| forward_traced(&text, input, &w));
    out.unwrap();
    2 * macs
}

#[test]
fn analytic_flops_match_counted_macs() {
    let shapes = [(2usize, 8usize, 16usize, 3usize, 4usize), (3, 16, 40, 5, 7), (4, 12, 24, 2, 9)];
    for (layers, channels, d_ff, t, v) in shapes {
        for paradigm in Paradigm::ALL {
            for kind in CondKind::ALL {
                let mut cfg = ModelConfig::small(layers, channels);
                cfg.d_ff = d_ff;
                cfg.heads = 2;
                cfg.cond_heads = 2;
                cfg.frequency = 0.5;
                cfg.paradigm = paradigm;
                cfg.cond_kind = kind;
                cfg.visual_tokens = v;
                cfg.token_expansion = 2;
                cfg.channel_expansion = 3;
                let counted = measured(&cfg, t, v);
                let analytic = cost_paradigm(&CostConfig::from_model(&cfg, t, v, 8)).unwrap().total_flops;
                let rel = (counted as f64 - analytic as f64).abs() / counted as f64;
                assert!(rel <= 0.01, "{paradigm}/{kind} L={layers} C={channels}: counted {counted}, analytic {analytic}");
            }
        }
    }
}
