use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ramp-transfer");

const SMALL: &str = r#"{"seed": 3, "synth": {"n_sections": 3, "weeks": 1},
    "transfer": {"steps": 2, "folds": 2, "n_estimators": 8, "max_depth": 3},
    "targets": ["After_up_mean_speed", "After_down_flow"]}"#;

fn run(args: &[&str], cfg: Option<&Path>, out: &Path) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).arg("--out").arg(out);
    if let Some(p) = cfg {
        c.arg("--config").arg(p);
    }
    c.output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_exits_1() {
    let o = Command::new(BIN).args(["pipeline", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("grid-search"));
}

#[test]
fn missing_site_map_exits_1_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["ingest"], None, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("site_map.json"), "{err}");
}

#[test]
fn missing_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth"], Some(&tmp.path().join("absent.json")), tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_config_value_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN).args(["synth", "--theta", "1.5", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(&run(&["synth"], Some(&cfg), tmp.path()));
    let o = Command::new(BIN)
        .args(["ingest", "--seed", "11", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(json(&tmp.path().join("coverage.json"))["seed"], 11);
}

#[test]
fn stages_compose_to_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&run(&["synth"], Some(&cfg), &a));
    ok(&run(&["synth"], Some(&cfg), &b));
    for stage in ["ingest", "correct", "pair", "ridge", "train", "predict", "evaluate", "report"] {
        ok(&run(&[stage], Some(&cfg), &a));
    }
    ok(&run(&["pipeline"], Some(&cfg), &b));
    for f in ["samples.csv", "profiles.csv", "features.csv", "selection.json", "predictions.csv", "evaluation.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let eval = json(&a.join("evaluation.json"));
    assert_eq!(eval["seed"], 3);
    assert!(a.join("report").read_dir().unwrap().next().is_some());
}
