//! `fmi` command-line driver: synthetic forward passes, equivalence and
//! gradient checks, cost sweeps, diagnostics and a deterministic self-test.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fmi_core::conditioning::VisualContext;
use fmi_core::cost::{self, CostConfig, CostReport};
use fmi_core::diagnostics::{self, DiagnosticTrace};
use fmi_core::io::{format_key_values, parse_key_values, sig12, TensorStore};
use fmi_core::model::{forward_base, forward_traced, Location, ModelConfig, ModelWeights, Paradigm};
use fmi_core::vision::{ImageGrid, PatchEncoder};
use fmi_core::{Rng, Tensor};

pub mod suite;

/// Stream tags for the synthetic inputs, independent of the weight streams.
const TEXT_STREAM: u64 = 101;
const VISUAL_STREAM: u64 = 102;
const RANDOMIZE_STREAM: u64 = 103;

#[derive(Debug, Parser)]
#[command(name = "fmi", version, about = "Visual modulation of language-model norms: forward passes, checks, costs, diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one paradigm on synthetic inputs and dump every block output.
    Forward(ForwardArgs),
    /// Compare a freshly initialized model against its language stack.
    Equivalence(ModelArgs),
    /// Finite-difference check of the ViLN and conditioner backward passes.
    Gradcheck(GradArgs),
    /// Closed-form FLOPs and memory, written to cost.csv.
    Cost(CostArgs),
    /// Modulation influence and feature drift, written to CSV.
    Diagnose(DiagnoseArgs),
    /// Full property suite with deterministic CSV artifacts.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Model descriptor (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight manifest; the companion .bin file sits next to it.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    paradigm: Option<Paradigm>,
    #[arg(long)]
    frequency: Option<f64>,
    #[arg(long)]
    location: Option<Location>,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Text tokens of the synthetic input.
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    /// Encode this image manifest with the patch stub instead of drawing
    /// Gaussian visual tokens.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 14)]
    patch: usize,
    /// Tile side for --image; the whole image is one tile by default.
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct ForwardArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Redraw the zero-initialized extras with this standard deviation.
    #[arg(long, default_value_t = 0.0)]
    randomize: f64,
}

#[derive(Debug, Clone, Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random points per component.
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

#[derive(Debug, Clone, Args)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Named architecture; ignored when --config is given.
    #[arg(long, default_value = "video-qwen2-7b")]
    preset: String,
    /// Comma-separated, strictly ascending frame counts.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Text tokens when costing a --config model.
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    bytes: usize,
}

#[derive(Debug, Clone, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    randomize: f64,
    /// Comma-separated class label per text token.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Why a run failed.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or an unusable config; exit status 2.
    Usage(String),
    /// Anything else; exit status 1.
    Run(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    pub fn reason(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Run(m) => m,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status. Normal output goes to `out`, the one-line failure reason to
/// `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let _ = writeln!(err, "{}", line.trim());
            return 2;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "fmi: {}", f.reason());
            f.code()
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Forward(a) => forward(&a, out),
        Command::Equivalence(a) => equivalence(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Cost(a) => cost_cmd(&a, out),
        Command::Diagnose(a) => diagnose(&a, out),
        Command::Selftest(a) => selftest(&a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(run_err)
}

/// Default model: six layers of width 64.
fn load_config(c: &Common) -> CliResult<ModelConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage_err(format!("{}: {e}", path.display())))?;
            ModelConfig::from_descriptor(&text).map_err(usage_err)?
        }
        None => ModelConfig::small(6, 64),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(p) = c.paradigm {
        cfg.paradigm = p;
    }
    if let Some(f) = c.frequency {
        cfg.frequency = f;
    }
    if let Some(l) = c.location {
        cfg.location = l;
    }
    cfg.validate().map_err(usage_err)?;
    Ok(cfg)
}

fn load_weights(c: &Common, cfg: &ModelConfig) -> CliResult<ModelWeights> {
    match &c.weights {
        Some(path) => {
            let store = TensorStore::read(path).map_err(run_err)?;
            ModelWeights::from_store(cfg, &store).map_err(run_err)
        }
        None => ModelWeights::init(cfg).map_err(run_err),
    }
}

fn randomize(w: &mut ModelWeights, std: f64) -> CliResult<()> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(usage_err(format!("--randomize must be a finite non-negative number, got {std}")));
    }
    if std > 0.0 {
        let mut rng = Rng::new(w.config.seed).derive(RANDOMIZE_STREAM);
        w.randomize(&mut rng, std);
    }
    Ok(())
}

struct Inputs {
    text: Tensor,
    visual: VisualContext,
}

fn inputs(a: &ModelArgs, cfg: &ModelConfig) -> CliResult<Inputs> {
    if a.tokens == 0 {
        return Err(usage_err("--tokens must be at least 1"));
    }
    let root = Rng::new(cfg.seed);
    let text = root.derive(TEXT_STREAM).normal_tensor(&[a.tokens, cfg.channels], 1.0);
    let visual = match &a.image {
        Some(path) => {
            let img = ImageGrid::read(path).map_err(run_err)?;
            let enc = PatchEncoder::new(a.patch, img.channels, cfg.channels, cfg.seed);
            let tile = a.tile.unwrap_or(img.height.max(img.width));
            enc.encode_image(&img, tile).map_err(run_err)?
        }
        None => {
            let v = root.derive(VISUAL_STREAM).normal_tensor(&[cfg.visual_tokens, cfg.channels], 1.0);
            VisualContext::new(v, "synthetic").map_err(run_err)?
        }
    };
    Ok(Inputs { text, visual })
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| run_err(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| run_err(format!("{}: {e}", path.display())))
}

/// Writes `run.meta`: the command, seed and every config field. No clocks
/// or host details, so identical invocations give identical files.
fn write_meta(dir: &Path, command: &str, cfg: Option<&ModelConfig>, extra: &[(&str, String)]) -> CliResult<()> {
    let mut pairs = vec![
        ("tool".to_string(), "fmi".to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("command".to_string(), command.to_string()),
    ];
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    if let Some(cfg) = cfg {
        pairs.extend(cfg.to_pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    }
    write_text(&dir.join("run.meta"), &format_key_values(&pairs))
}

/// Reads a `run.meta` file back into pairs.
pub fn read_meta(path: &Path) -> fmi_core::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|source| fmi_core::Error::Io { path: path.display().to_string(), source })?;
    parse_key_values(&text)
}

fn forward(a: &ForwardArgs, out: &mut dyn Write) -> CliResult<()> {
    let c = &a.model.common;
    let cfg = load_config(c)?;
    let mut w = load_weights(c, &cfg)?;
    randomize(&mut w, a.randomize)?;
    let inp = inputs(&a.model, &cfg)?;
    let visual = (cfg.paradigm != Paradigm::Base).then_some(&inp.visual);
    let trace = forward_traced(&inp.text, visual, &w).map_err(run_err)?;
    let mut store = TensorStore::new();
    store.insert("input.text", inp.text.clone()).map_err(run_err)?;
    for (l, h) in trace.hidden.iter().enumerate() {
        store.insert(format!("hidden.{l}"), h.clone()).map_err(run_err)?;
    }
    for r in &trace.modulation {
        store.insert(format!("modulation.{}.plain", r.layer), r.plain.clone()).map_err(run_err)?;
        store.insert(format!("modulation.{}.modulated", r.layer), r.modulated.clone()).map_err(run_err)?;
    }
    prepare_out(&c.out)?;
    let manifest = c.out.join("hidden.manifest");
    store.write(&manifest).map_err(run_err)?;
    write_meta(
        &c.out,
        "forward",
        Some(&cfg),
        &[
            ("tokens", a.model.tokens.to_string()),
            ("visual_tokens", inp.visual.len().to_string()),
            ("visual_source", inp.visual.source_tag().to_string()),
            ("randomize", a.randomize.to_string()),
        ],
    )?;
    say(out, format!("{}: {} tensors written to {}", cfg.paradigm, store.len(), manifest.display()))
}

/// Largest difference between the configured paradigm and its language
/// stack on the same text. The prefix paradigm is compared without a
/// visual prefix.
fn equivalence_diff(w: &ModelWeights, inp: &Inputs) -> fmi_core::Result<f64> {
    let base = forward_base(&inp.text, w)?;
    let visual = match w.config.paradigm {
        Paradigm::Fmi | Paradigm::CrossAttn => Some(&inp.visual),
        Paradigm::InContext | Paradigm::Base => None,
    };
    forward_traced(&inp.text, visual, w)?.output.max_abs_diff(&base)
}

fn equivalence(a: &ModelArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let w = load_weights(&a.common, &cfg)?;
    let inp = inputs(a, &cfg)?;
    let diff = equivalence_diff(&w, &inp).map_err(run_err)?;
    say(out, format!("{} vs base: max abs diff {diff}", cfg.paradigm))?;
    if diff != 0.0 {
        return Err(Failure::Run(format!("outputs differ from the language stack by {diff}")));
    }
    Ok(())
}

fn gradcheck(a: &GradArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.points == 0 {
        return Err(usage_err("--points must be at least 1"));
    }
    let results = suite::gradcheck_components(a.seed, a.points, a.step).map_err(|e| match e {
        fmi_core::Error::Config(_) => usage_err(e),
        _ => run_err(e),
    })?;
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        say(out, format!("{name}: max rel err {}", sig12(*err)))?;
        worst = worst.max(*err);
    }
    say(out, format!("max rel err {}", sig12(worst)))?;
    if worst > suite::GRAD_TOLERANCE {
        return Err(Failure::Run(format!("gradient mismatch {worst} exceeds {}", suite::GRAD_TOLERANCE)));
    }
    Ok(())
}

fn cost_base(a: &CostArgs) -> CliResult<(String, CostConfig)> {
    let c = &a.common;
    let (name, mut cfg) = if c.config.is_some() {
        let m = load_config(c)?;
        let cc = CostConfig::from_model(&m, a.tokens, m.visual_tokens, a.bytes);
        ("config".to_string(), cc)
    } else {
        let p = cost::preset(&a.preset).map_err(usage_err)?;
        (p.name.to_string(), p.config)
    };
    if let Some(f) = c.frequency {
        cfg.frequency = f;
    }
    cfg.bytes_per_elem = a.bytes;
    cfg.validate().map_err(usage_err)?;
    Ok((name, cfg))
}

/// Sweeps every requested paradigm over the frame list, paradigm-major.
fn cost_reports(cfg: &CostConfig, paradigms: &[Paradigm], frames: &[usize]) -> fmi_core::Result<Vec<CostReport>> {
    let mut all = Vec::new();
    for &p in paradigms {
        all.extend(cost::sweep_frames(&cfg.with_paradigm(p), frames)?);
    }
    Ok(all)
}

fn cost_cmd(a: &CostArgs, out: &mut dyn Write) -> CliResult<()> {
    let (name, cfg) = cost_base(a)?;
    let frames = a.frames.clone().unwrap_or_else(|| vec![1]);
    let paradigms: Vec<Paradigm> = match a.common.paradigm {
        Some(p) => vec![p],
        None => vec![Paradigm::Fmi, Paradigm::CrossAttn, Paradigm::InContext],
    };
    let reports = cost_reports(&cfg, &paradigms, &frames).map_err(usage_err)?;
    prepare_out(&a.common.out)?;
    write_text(&a.common.out.join("cost.csv"), &cost::to_csv(&reports))?;
    let frame_list = frames.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    write_meta(
        &a.common.out,
        "cost",
        None,
        &[("source", name.clone()), ("frames", frame_list), ("bytes_per_elem", a.bytes.to_string())],
    )?;
    say(out, format!("{name}: {} rows written to {}", reports.len(), a.common.out.join("cost.csv").display()))?;
    if paradigms.contains(&Paradigm::Fmi) && paradigms.contains(&Paradigm::InContext) {
        let k = *frames.last().unwrap_or(&1);
        let at = |p: Paradigm| reports.iter().find(|r| r.paradigm == p && r.frames == k);
        if let (Some(f), Some(i)) = (at(Paradigm::Fmi), at(Paradigm::InContext)) {
            say(
                out,
                format!(
                    "frames={k}: fmi saves {}% FLOPs and {}% memory vs incontext",
                    sig12(cost::saving_percent(f.total_flops, i.total_flops)),
                    sig12(cost::saving_percent(f.memory_bytes(), i.memory_bytes()))
                ),
            )?;
        }
    }
    Ok(())
}

fn class_csv(classes: &[diagnostics::ClassInfluence]) -> String {
    let mut s = String::from("label,count,mean\n");
    for c in classes {
        s.push_str(&format!("{},{},{}\n", c.label, c.count, sig12(c.mean)));
    }
    s
}

fn diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> CliResult<()> {
    let c = &a.model.common;
    let cfg = load_config(c)?;
    let inp = inputs(&a.model, &cfg)?;
    if let Some(labels) = &a.labels {
        if labels.len() != a.model.tokens {
            return Err(usage_err(format!("{} labels for {} text tokens", labels.len(), a.model.tokens)));
        }
    }
    // With loaded weights only that model is probed; otherwise every
    // paradigm is built from the same seed and compared.
    let models: Vec<ModelWeights> = if c.weights.is_some() {
        let mut w = load_weights(c, &cfg)?;
        randomize(&mut w, a.randomize)?;
        vec![w]
    } else {
        let mut ms = Vec::new();
        for p in [Paradigm::Fmi, Paradigm::CrossAttn, Paradigm::InContext] {
            let pc = cfg.clone().with_paradigm(p);
            if pc.validate().is_err() {
                continue;
            }
            let mut w = ModelWeights::init(&pc).map_err(run_err)?;
            randomize(&mut w, a.randomize)?;
            ms.push(w);
        }
        ms
    };
    let base = ModelWeights::init(&cfg.clone().with_paradigm(Paradigm::Base)).map_err(run_err)?;
    prepare_out(&c.out)?;

    let mut drifts: Vec<(String, DiagnosticTrace)> = Vec::new();
    let mut influence: Option<DiagnosticTrace> = None;
    for w in &models {
        let p = w.config.paradigm;
        let visual = (p != Paradigm::Base).then_some(&inp.visual);
        let d = diagnostics::feature_drift(w, &base, &inp.text, visual).map_err(run_err)?;
        say(out, format!("drift {p}: global mean {}", sig12(d.global_mean())))?;
        drifts.push((p.as_str().to_string(), d));
        if p == Paradigm::Fmi && influence.is_none() {
            influence = Some(diagnostics::modulation_influence(w, &inp.text, &inp.visual).map_err(run_err)?);
        }
    }
    let named: Vec<(&str, &DiagnosticTrace)> = drifts.iter().map(|(n, d)| (n.as_str(), d)).collect();
    write_text(&c.out.join("drift.csv"), &diagnostics::drift_csv(&named))?;
    if let Some(mut trace) = influence {
        write_text(&c.out.join("influence.csv"), &diagnostics::influence_csv(&trace))?;
        say(out, format!("influence: global mean {}", sig12(trace.global_mean())))?;
        if let Some(labels) = &a.labels {
            trace.token_labels = Some(labels.clone());
            let classes = diagnostics::token_class_influence(&trace, labels).map_err(run_err)?;
            write_text(&c.out.join("classes.csv"), &class_csv(&classes))?;
            for cl in &classes {
                say(out, format!("class {}: {} tokens, mean {}", cl.label, cl.count, sig12(cl.mean)))?;
            }
        }
    } else if a.labels.is_some() {
        return Err(usage_err("--labels needs an fmi model"));
    }
    write_meta(
        &c.out,
        "diagnose",
        Some(&cfg),
        &[
            ("tokens", a.model.tokens.to_string()),
            ("visual_source", inp.visual.source_tag().to_string()),
            ("randomize", a.randomize.to_string()),
        ],
    )
}

fn selftest(a: &SelftestArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = suite::selftest(a.seed).map_err(run_err)?;
    prepare_out(&a.out)?;
    for (file, text) in &report.artifacts {
        write_text(&a.out.join(file), text)?;
    }
    write_meta(&a.out, "selftest", None, &[("seed", a.seed.to_string())])?;
    for c in &report.checks {
        say(out, format!("{} {}: {} (limit {})", if c.pass { "ok  " } else { "FAIL" }, c.name, sig12(c.value), sig12(c.limit)))?;
    }
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    say(out, format!("{} checks, {failed} failed", report.checks.len()))?;
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
