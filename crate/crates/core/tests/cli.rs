use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn dzol(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_dzol"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    let code = out.status.code().unwrap();
    let cmd = args[0];
    let report = fs::read_to_string(dir.join(format!("{cmd}_report.json")))
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap_or(Value::Null);
    (code, report)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const BESSEL3: &str = r#"
[coefficients]
mu = "1/x"
sigma = "1"
ell = 0.0
r = "inf"
x0 = 1.0

[functional]
f = "exp(-x)"

[sim]
n_paths = 200
horizon = 5.0
base_step = 1e-2
truncation = [0.01, 20.0]
seed = 3

[zero_one]
ladder = [5.0, 10.0]
n_paths = 200

[output]
dump_paths = 3
"#;

#[test]
fn check_passes_and_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write(tmp.path(), "good.toml", BESSEL3);
    let (code, report) = dzol(tmp.path(), &["check", "--config", &good]);
    assert_eq!(code, 0);
    assert_eq!(report["outcome"]["command"], "check");
    assert_eq!(report["exit_code"], 0);

    let bad = BESSEL3.replace("sigma = \"1\"", "sigma = \"x - 1\"");
    let bad = write(tmp.path(), "bad.toml", &bad);
    let (code, _) = dzol(tmp.path(), &["check", "--config", &bad]);
    assert_eq!(code, 1);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = write(tmp.path(), "broken.toml", &BESSEL3.replace("1/x", "1/(x"));
    let (code, _) = dzol(tmp.path(), &["classify", "--config", &broken]);
    assert_eq!(code, 2);
    let missing = tmp.path().join("missing.toml");
    let (code, _) = dzol(tmp.path(), &["check", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    let unknown = write(tmp.path(), "unknown.toml", &format!("{BESSEL3}\n[extra]\nx = 1\n"));
    let (code, _) = dzol(tmp.path(), &["check", "--config", &unknown]);
    assert_eq!(code, 2);
}

#[test]
fn classify_reports_both_boundaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", BESSEL3);
    let (code, report) = dzol(tmp.path(), &["classify", "--config", &cfg]);
    assert_eq!(code, 0);
    let text = report.to_string();
    assert!(text.contains("CONVERGES_AS") || text.contains("DIVERGES_AS") || text.contains("VACUOUS"));
}

#[test]
fn verify_dumps_paths_and_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "v.toml", BESSEL3);
    let (code, report) = dzol(tmp.path(), &["verify", "--config", &cfg, "--seed", "11", "--paths", "150", "--workers", "2"]);
    assert!([0, 4, 5].contains(&code), "exit {code}");
    assert_eq!(report["config"]["sim"]["seed"], 11);
    assert_eq!(report["config"]["sim"]["n_paths"], 150);
    let dump = fs::read_to_string(tmp.path().join("paths.jsonl")).unwrap();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in lines {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["seed"], 11);
    }
}
