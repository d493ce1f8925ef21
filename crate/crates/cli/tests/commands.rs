use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::rc::Rc;

use relcap::autodiff::CustomOp;
use relcap::data::load_scenes;
use relcap::model::{EpochLog, EvalReport, Prediction, SweepRow};
use relcap::Result;

const TINY: &str = "\
seed = 3
val_percent = 50
[model]
hidden = 12
k = 3
[train]
epochs = 5
lr = 3e-3
[data]
scenes = 8
min_objects = 3
max_objects = 5
";

fn relcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relcap"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = relcap(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "gen-data", "--out", "a"]);
    ok(d, &["--config", "tiny.toml", "gen-data", "--out", "b"]);
    for f in ["scenes.jsonl", "captions.jsonl"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    let scenes = load_scenes::<f64>(&d.join("a/scenes.jsonl"), None).unwrap();
    assert_eq!(scenes.len(), 8);

    let again = relcap(d, &["--config", "tiny.toml", "gen-data", "--out", "a"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(d, &["--config", "tiny.toml", "--seed", "4", "gen-data", "--out", "a", "--force"]);
    assert_ne!(read(d.join("a/scenes.jsonl")), read(d.join("b/scenes.jsonl")));
}

#[test]
fn invalid_configuration_fails_with_a_message() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nepochs = 0\n").unwrap();
    std::fs::write(d.join("typo.toml"), "[model]\nhiden = 3\n").unwrap();
    for cfg in ["bad.toml", "typo.toml", "missing.toml"] {
        let out = relcap(d, &["--config", cfg, "gen-data", "--out", "x"]);
        assert!(!out.status.success(), "{cfg}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{cfg}");
        assert!(!d.join("x").exists());
    }
    let out = relcap(d, &["--ablate", "decoder", "gradcheck"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_caption_round_trip() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "gen-data", "--out", "data"]);
    let log = ok(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "ck.json"]);
    let epochs: Vec<EpochLog> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 5);
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    assert!(epochs[4].loss < epochs[0].loss, "{epochs:?}");

    // identical rerun, then resume from a shorter run
    ok(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "ck2.json"]);
    assert_eq!(read(d.join("ck.json")), read(d.join("ck2.json")));

    let refuse = relcap(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "ck.json"]);
    assert!(!refuse.status.success());

    let report = ok(d, &["--config", "tiny.toml", "eval", "--checkpoint", "ck.json", "--data", "data", "--k", "0.25", "--k", "0.5", "--k", "0.75"]);
    let parsed: EvalReport = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed.reports.iter().map(|r| r.k).collect::<Vec<_>>(), [0.25, 0.5, 0.75]);
    assert_eq!(parsed.reports[0].cider, parsed.reports[2].cider);
    let rerun = ok(d, &["--config", "tiny.toml", "eval", "--checkpoint", "ck.json", "--data", "data", "--k", "0.25", "--k", "0.5", "--k", "0.75"]);
    assert_eq!(report, rerun);

    let scenes = load_scenes::<f64>(&d.join("data/scenes.jsonl"), None).unwrap();
    let id = scenes[0].scene_id.clone();
    let lines = ok(d, &["caption", "--checkpoint", "ck.json", "--scene", "data/scenes.jsonl", "--scene-id", &id]);
    let preds: Vec<Prediction> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), scenes[0].len());
    let one = ok(d, &["caption", "--checkpoint", "ck.json", "--scene", "data/scenes.jsonl", "--scene-id", &id, "--object", "1"]);
    assert_eq!(one.lines().count(), 1);
    let bad = relcap(d, &["caption", "--checkpoint", "ck.json", "--scene", "data/scenes.jsonl", "--scene-id", &id, "--object", "77"]);
    assert!(!bad.status.success());
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("77") && msg.contains("valid ids"), "{msg}");
    let ambiguous = relcap(d, &["caption", "--checkpoint", "ck.json", "--scene", "data/scenes.jsonl"]);
    assert!(!ambiguous.status.success());
}

#[test]
fn resumed_training_continues_with_the_same_losses() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("short.toml"), TINY.replace("epochs = 5", "epochs = 2")).unwrap();
    ok(d, &["--config", "tiny.toml", "gen-data", "--out", "data"]);
    let full = ok(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "full.json"]);
    ok(d, &["--config", "short.toml", "train", "--data", "data", "--out", "part.json"]);
    let rest = ok(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "part.json", "--resume", "part.json"]);
    let full: Vec<&str> = full.lines().collect();
    assert_eq!(rest.lines().collect::<Vec<_>>(), full[2..]);
    assert_eq!(read(d.join("full.json")), read(d.join("part.json")));
}

#[test]
fn ablations_train() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("one.toml"), TINY.replace("epochs = 5", "epochs = 1")).unwrap();
    ok(d, &["--config", "one.toml", "gen-data", "--out", "data"]);
    for a in ["edges", "slgc", "otag"] {
        let out = format!("{a}.json");
        let log = ok(d, &["--config", "one.toml", "--ablate", a, "train", "--data", "data", "--out", &out]);
        assert_eq!(log.lines().count(), 1, "{a}");
    }
}

#[test]
fn sweep_reports_five_rows() {
    let dir = workspace();
    let d = dir.path();
    let text = ok(d, &["--config", "tiny.toml", "madgap-sweep"]);
    let rows: Vec<SweepRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[4].otag);
    let shallow = ok(d, &["--config", "tiny.toml", "--layers", "2", "madgap-sweep"]);
    assert_eq!(shallow.lines().count(), 3);
}

struct Square {
    broken: bool,
}

impl CustomOp<f64> for Square {
    fn name(&self) -> &str {
        if self.broken { "square-broken" } else { "square" }
    }

    fn forward(&self, inputs: &[(&[usize], &[f64])]) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, x) = inputs[0];
        Ok((shape.to_vec(), x.iter().map(|v| v * v).collect()))
    }

    fn backward(&self, inputs: &[(&[usize], &[f64])], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let scale = if self.broken { 2.5 } else { 2.0 };
        vec![inputs[0].1.iter().zip(grad_out).map(|(x, g)| scale * x * g).collect()]
    }
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let dir = workspace();
    let text = ok(dir.path(), &["gradcheck"]);
    assert!(text.lines().count() >= 18);
    assert!(text.lines().all(|l| l.starts_with("PASS") && l.contains("max_rel_error")), "{text}");

    let mut buf = Vec::new();
    let checks = relcap_cli::gradcheck(0, &[Rc::new(Square { broken: false })], &mut buf).unwrap();
    assert!(checks.iter().any(|c| c.component == "custom:square" && c.passed));

    let mut buf = Vec::new();
    let err = relcap_cli::gradcheck(0, &[Rc::new(Square { broken: true })], &mut buf).unwrap_err();
    assert!(err.to_string().contains("square-broken"), "{err}");
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("custom:square-broken")), "{text}");
}
