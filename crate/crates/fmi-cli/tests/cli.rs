use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fmi_core::cost::from_csv;
use fmi_core::io::TensorStore;
use fmi_core::model::{ModelConfig, ModelWeights, Paradigm};
use fmi_core::Rng;

fn fmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmi")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// `(first column, layer, token, distance)` rows of a diagnostics CSV.
fn distance_rows(text: &str, with_model: bool) -> Vec<(String, usize, usize, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let o = usize::from(with_model);
            let name = if with_model { f[0].to_string() } else { String::new() };
            (name, f[o].parse().unwrap(), f[o + 1].parse().unwrap(), f[o + 2].parse().unwrap())
        })
        .collect()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = fmi(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    fs::write(&cfg, "layers=4\nchannels=32\nwobble=3\n").unwrap();
    let o = fmi(&["equivalence", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wobble"), "{}", stderr(&o));
    fs::write(&cfg, "layers=4\nchannels=30\nheads=4\n").unwrap();
    assert_eq!(fmi(&["equivalence", "--config", path(&cfg)]).status.code(), Some(2));
    assert_eq!(fmi(&["cost", "--frames", "8,4"]).status.code(), Some(2));
    assert_eq!(fmi(&["forward", "--frequency", "0"]).status.code(), Some(2));
}

#[test]
fn equivalence_prints_zero() {
    for paradigm in ["fmi", "crossattn", "incontext"] {
        let o = fmi(&["equivalence", "--seed", "12345", "--paradigm", paradigm]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("max abs diff 0\n"), "{}", stdout(&o));
    }
}

#[test]
fn gradcheck_within_tolerance() {
    let o = fmi(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let value: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(last.starts_with("max rel err") && value <= 1e-4, "{last}");
}

#[test]
fn video_cost_csv_shows_saving() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmi(&["cost", "--preset", "video-qwen2-7b", "--frames", "1,8,32,128", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports = from_csv(&fs::read_to_string(dir.path().join("cost.csv")).unwrap()).unwrap();
    let at = |p: Paradigm| reports.iter().find(|r| r.paradigm == p && r.frames == 128).unwrap();
    let saving = 1.0 - at(Paradigm::Fmi).total_flops as f64 / at(Paradigm::InContext).total_flops as f64;
    assert!(saving >= 0.85, "{saving}");
    assert_eq!(reports.len(), 12);
}

#[test]
fn cost_csv_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (args, file) in [
        (vec!["cost", "--preset", "llava-v1.5-7b"], "cost_llava-v1.5-7b.csv"),
        (vec!["cost", "--frames", "1,16,128"], "cost_video_sweep.csv"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut full = args.clone();
        full.extend(["--out", path(dir.path())]);
        assert!(fmi(&full).status.success());
        let got = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
        assert_eq!(got, fs::read_to_string(golden.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn cost_paradigm_filter() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmi(&["cost", "--paradigm", "crossattn", "--frames", "2,4", "--out", path(dir.path())]);
    assert!(o.status.success());
    let reports = from_csv(&fs::read_to_string(dir.path().join("cost.csv")).unwrap()).unwrap();
    assert!(reports.iter().all(|r| r.paradigm == Paradigm::CrossAttn));
    assert_eq!(reports.iter().map(|r| r.frames).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn forward_runs_loaded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { cond_kind: fmi_core::conditioning::CondKind::Conv, seed: 9, ..ModelConfig::small(3, 16) };
    fs::write(dir.path().join("model.cfg"), cfg.to_descriptor()).unwrap();
    let mut w = ModelWeights::init(&cfg).unwrap();
    w.randomize(&mut Rng::new(77), 0.1);
    w.to_store().unwrap().write(&dir.path().join("weights.manifest")).unwrap();

    let run = |weights: bool, out: &str| {
        let cfg_path = dir.path().join("model.cfg");
        let weights_path = dir.path().join("weights.manifest");
        let out_path = dir.path().join(out);
        let mut args = vec!["forward", "--config", path(&cfg_path), "--tokens", "5", "--out", path(&out_path)];
        if weights {
            args.extend(["--weights", path(&weights_path)]);
        }
        let o = fmi(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        TensorStore::read(&out_path.join("hidden.manifest")).unwrap()
    };
    let loaded = run(true, "loaded");
    let fresh = run(false, "fresh");
    assert_eq!(loaded.get("input.text"), fresh.get("input.text"));
    let last = |s: &TensorStore| s.get("hidden.2").unwrap().clone();
    assert!(last(&loaded).max_abs_diff(&last(&fresh)).unwrap() > 0.0);
    assert!(loaded.get("modulation.0.plain").is_some());
    let meta = fmi_cli::read_meta(&dir.path().join("loaded/run.meta")).unwrap();
    assert!(meta.contains(&("config.cond_kind".to_string(), "conv".to_string())));
    assert!(!meta.iter().any(|(k, _)| k.contains("time") || k.contains("date")));
}

#[test]
fn diagnostics_recompute_from_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let common = ["--seed", "3", "--tokens", "5"];
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(common);
        let o = fmi(&full);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&["forward", "--paradigm", "fmi", "--randomize", "0.05", "--out", &out("fmi")]);
    run(&["forward", "--paradigm", "base", "--out", &out("base")]);
    run(&["diagnose", "--randomize", "0.05", "--labels", "n,v,n,d,n", "--out", &out("diag")]);

    let fmi_dump = TensorStore::read(&dir.path().join("fmi/hidden.manifest")).unwrap();
    let base_dump = TensorStore::read(&dir.path().join("base/hidden.manifest")).unwrap();
    let drift = fs::read_to_string(dir.path().join("diag/drift.csv")).unwrap();
    let rows: Vec<_> = distance_rows(&drift, true).into_iter().filter(|r| r.0 == "fmi").collect();
    assert_eq!(rows.len(), 6 * 5);
    for (_, layer, token, d) in rows {
        let a = fmi_dump.get(&format!("hidden.{layer}")).unwrap();
        let b = base_dump.get(&format!("hidden.{layer}")).unwrap();
        let want = cosine(a.row(token), b.row(token));
        assert!((want - d).abs() <= 1e-11 * want.abs().max(1e-3), "layer {layer} token {token}: {want} vs {d}");
    }

    let influence = fs::read_to_string(dir.path().join("diag/influence.csv")).unwrap();
    let rows = distance_rows(&influence, false);
    assert!(!rows.is_empty());
    for (_, layer, token, d) in rows {
        let plain = fmi_dump.get(&format!("modulation.{layer}.plain")).unwrap();
        let modulated = fmi_dump.get(&format!("modulation.{layer}.modulated")).unwrap();
        let want = cosine(plain.row(token), modulated.row(token));
        assert!((want - d).abs() <= 1e-11 * want.abs().max(1e-3), "layer {layer} token {token}: {want} vs {d}");
    }
    let classes = fs::read_to_string(dir.path().join("diag/classes.csv")).unwrap();
    assert_eq!(classes.lines().count(), 4);
}

#[test]
fn diagnose_rejects_wrong_label_count() {
    let o = fmi(&["diagnose", "--tokens", "3", "--labels", "a,b"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = fmi(&["selftest", "--seed", seed, "--out", path(dir.path())]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    for f in ["selftest.csv", "cost.csv", "influence.csv", "drift.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "drift.csv"), read(&c, "drift.csv"));
}

#[test]
fn library_entry_point_reports_through_writers() {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = fmi_cli::run_with(["fmi", "equivalence", "--tokens", "0"], &mut out, &mut err);
    assert_eq!(code, 2);
    assert_eq!(String::from_utf8(err).unwrap().lines().count(), 1);
    let code = fmi_cli::run_with(["fmi", "--help"], &mut out, &mut Vec::new());
    assert_eq!(code, 0);
}
