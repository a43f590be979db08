use std::io::Write as _;
use std::path::{Path, PathBuf};

use cbmforge::fixtures::fixture_by_name;
use cbmforge::pipeline::{
    regenerate_report, run_pipeline, validate_config, RunManifest, RunOptions, Stage, REPORT_PATH,
};
use cbmforge::Error;

fn write_fixture(name: &str, dir: &Path) -> PathBuf {
    fixture_by_name(name, 0).unwrap().write(&dir.join("fixture")).unwrap()
}

fn run(cfg: &Path, run_dir: &Path, opts: &RunOptions) -> cbmforge::Result<RunManifest> {
    run_pipeline(cfg, run_dir, opts)
}

fn total_calls(m: &RunManifest) -> u64 {
    m.stages.iter().map(|r| r.backend_calls).sum()
}

#[test]
fn rerun_is_a_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("metashift", tmp.path());
    let dir = tmp.path().join("run");
    let first = run(&cfg, &dir, &RunOptions::default()).unwrap();
    assert_eq!(first.stages.len(), Stage::ALL.len());
    let second = run(&cfg, &dir, &RunOptions::default()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn fresh_runs_and_replay_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("metashift", tmp.path());
    let a = run(&cfg, &tmp.path().join("a"), &RunOptions::default()).unwrap();
    let b = run(&cfg, &tmp.path().join("b"), &RunOptions::default()).unwrap();
    assert_eq!(a.artifact_digests(), b.artifact_digests());
    assert_eq!(a.cache_digest, b.cache_digest);
    assert!(!a.artifact_digests().is_empty());

    // Offline replay from the recorded cache alone.
    let c_dir = tmp.path().join("c");
    std::fs::create_dir_all(&c_dir).unwrap();
    std::fs::copy(tmp.path().join("a/cache.jsonl"), c_dir.join("cache.jsonl")).unwrap();
    let opts = RunOptions {
        replay_only: true,
        ..Default::default()
    };
    let c = run(&cfg, &c_dir, &opts).unwrap();
    assert_eq!(c.artifact_digests(), a.artifact_digests());
    assert_eq!(total_calls(&c), 0);
}

#[test]
fn replay_only_without_cache_halts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("metashift", tmp.path());
    let opts = RunOptions {
        replay_only: true,
        ..Default::default()
    };
    let err = run(&cfg, &tmp.path().join("run"), &opts).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "pool-collect"), "{err}");
}

#[test]
fn resume_after_kill_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("opener", tmp.path());
    let reference = run(&cfg, &tmp.path().join("reference"), &RunOptions::default()).unwrap();

    let dir = tmp.path().join("killed");
    let opts = RunOptions {
        call_budget: Some(1000),
        ..Default::default()
    };
    let err = run(&cfg, &dir, &opts).unwrap_err();
    assert!(matches!(err, Error::Interrupted(_)), "{err}");
    let partial = RunManifest::load(&dir).unwrap();
    assert_eq!(partial.stages.last().map(|r| r.stage), Some(Stage::PoolFilter));

    // A crash mid-write leaves a torn final cache line.
    let mut f = std::fs::OpenOptions::new().append(true).open(dir.join("cache.jsonl")).unwrap();
    f.write_all(b"{\"key\":\"torn").unwrap();
    drop(f);

    let resumed = run(&cfg, &dir, &RunOptions::default()).unwrap();
    assert_eq!(resumed.artifact_digests(), reference.artifact_digests());
    assert_eq!(resumed.cache_digest, reference.cache_digest);
    let annotate = resumed.record(Stage::Annotate).unwrap();
    assert!(annotate.cache_hits > 0, "resumed annotation should replay cached answers");
}

#[test]
fn changing_a_late_setting_reruns_only_later_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_fixture("metashift", tmp.path());
    let dir = tmp.path().join("run");
    let first = run(&cfg_path, &dir, &RunOptions::default()).unwrap();

    let mut cfg = validate_config(&cfg_path, true).unwrap();
    cfg.training.classifier.epochs += 5;
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let second = run(&cfg_path, &dir, &RunOptions::default()).unwrap();
    // The config digest is part of every key, so everything reruns, but all
    // backend answers come from the cache and early artifacts are unchanged.
    assert_eq!(total_calls(&second), 0);
    for stage in [Stage::PoolCollect, Stage::Describe, Stage::DetectSpurious, Stage::PoolFilter, Stage::Annotate] {
        assert_eq!(first.record(stage).unwrap().outputs, second.record(stage).unwrap().outputs, "{stage}");
    }
}

#[test]
fn report_regenerates_from_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("opener", tmp.path());
    let dir = tmp.path().join("run");
    run(&cfg, &dir, &RunOptions::default()).unwrap();
    // Remove the inputs and backends' behavior: only the run directory remains.
    std::fs::remove_dir_all(tmp.path().join("fixture")).unwrap();
    let out = tmp.path().join("again.md");
    regenerate_report(&dir, &out).unwrap();
    let original = std::fs::read_to_string(dir.join(REPORT_PATH)).unwrap();
    assert_eq!(std::fs::read_to_string(out).unwrap(), original);
    for section in ["Spurious correlation detection", "Refinement", "Leakage audit", "Attribute consensus"] {
        assert!(original.contains(section), "{section}");
    }
    assert!(!original.contains("## Refinement\n\n_skipped_"));
}

#[test]
fn stop_after_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture("metashift", tmp.path());
    let dir = tmp.path().join("run");
    let opts = RunOptions {
        until: Some(Stage::Describe),
        ..Default::default()
    };
    let m = run(&cfg, &dir, &opts).unwrap();
    assert_eq!(m.stages.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![Stage::PoolCollect, Stage::Describe]);
    let full = run(&cfg, &dir, &RunOptions::default()).unwrap();
    assert_eq!(full.stages[..2], m.stages[..]);
}
