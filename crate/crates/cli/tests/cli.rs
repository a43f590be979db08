use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cbmforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbmforge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cbmforge")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen(name: &str, dir: &Path) -> PathBuf {
    let stdout = ok(&cbmforge(&["gen-fixture", "--name", name, "--out", "fx"], dir));
    dir.join(stdout.trim())
}

#[test]
fn run_then_report_from_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen("metashift", tmp.path());
    let stdout = ok(&cbmforge(&["run", "--config", cfg.to_str().unwrap(), "--run", "run"], tmp.path()));
    assert!(stdout.contains("pool-filter"));
    ok(&cbmforge(&["report", "--run", "run", "--out", "again.md"], tmp.path()));
    let a = std::fs::read_to_string(tmp.path().join("again.md")).unwrap();
    let b = std::fs::read_to_string(tmp.path().join("run/report/report.md")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cbmforge(&["validate-config", "--config", "nope.toml"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));

    let cfg = gen("opener", tmp.path());
    let text = std::fs::read_to_string(&cfg).unwrap();
    let bad = cfg.with_file_name("bad.toml");
    std::fs::write(&bad, text.replace("tau = 0.2", "tau = 1.5").replace("{attribute}", "it")).unwrap();
    let out = cbmforge(&["validate-config", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("detect.tau"), "{stderr}");
    assert!(stderr.contains("annotate.template"), "{stderr}");
    let replay = cbmforge(
        &["run", "--config", cfg.to_str().unwrap(), "--run", "run", "--replay-only"],
        tmp.path(),
    );
    assert_eq!(replay.status.code(), Some(3));

    let usage = cbmforge(&["run"], tmp.path());
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn per_stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen("metashift", tmp.path());
    let fx = cfg.parent().unwrap();
    let c = cfg.to_str().unwrap();
    let train = fx.join("train.jsonl");
    let test = fx.join("test.jsonl");
    let (train, test) = (train.to_str().unwrap(), test.to_str().unwrap());

    ok(&cbmforge(&["pool-collect", "--config", c, "--manifest", train, "--out", "pool.tsv"], tmp.path()));
    let out = ok(&cbmforge(
        &[
            "detect-spurious", "--config", c, "--manifest", train, "--tau", "0.2", "--out", "report.json",
            "--pool", "pool.tsv", "--pool-out", "final.tsv",
        ],
        tmp.path(),
    ));
    assert!(out.contains("selected 16 spurious keywords"), "{out}");
    assert!(out.contains("24 concepts retained"), "{out}");

    ok(&cbmforge(
        &["annotate", "--config", c, "--manifest", train, "--pool", "final.tsv", "--out", "ann.csv"],
        tmp.path(),
    ));
    assert!(tmp.path().join("ann.abstain").exists());
    ok(&cbmforge(
        &["train-concept", "--config", c, "--manifest", train, "--ann", "ann.csv", "--out", "g.bin"],
        tmp.path(),
    ));
    ok(&cbmforge(
        &["train-classifier", "--config", c, "--manifest", train, "--concept-model", "g.bin", "--out", "f.bin"],
        tmp.path(),
    ));
    ok(&cbmforge(
        &["audit-leakage", "--config", c, "--manifest", test, "--concept-model", "g.bin", "--out", "leak.json"],
        tmp.path(),
    ));
    ok(&cbmforge(
        &[
            "evaluate", "--model", "f.bin", "--concept-model", "g.bin", "--manifest", test, "--train-manifest", train,
            "--out", "metrics.json",
        ],
        tmp.path(),
    ));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["per_group"].as_array().unwrap().len(), 4);

    // Everything above came from backends once; a replay-only rerun is served from the cache.
    ok(&cbmforge(
        &["annotate", "--config", c, "--replay-only", "--manifest", train, "--pool", "final.tsv", "--out", "ann2.csv"],
        tmp.path(),
    ));
    assert_eq!(
        std::fs::read(tmp.path().join("ann.csv")).unwrap(),
        std::fs::read(tmp.path().join("ann2.csv")).unwrap()
    );
}
