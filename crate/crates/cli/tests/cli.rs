use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scorelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorelab"))
        .current_dir(dir)
        .args(args)
        .env("SCORELAB_THREADS", "2")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

fn first_stdout_json(out: &Output) -> Value {
    let s = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(s.lines().next().unwrap()).unwrap()
}

fn small_manifest(dir: &Path) -> std::path::PathBuf {
    let m = serde_json::json!({
        "seeds": [5],
        "dataset": {"num_classes": 2, "resolution": 12, "channels": 1, "samples_per_class": 10, "seed": 1},
        "eval_images": 4,
        "kl_grid_points": 3,
        "bench": {"images": 1, "iterations": [1, 2], "repetitions": 3},
        "attacks": [
            {"tag": "pgd", "method": "pgd", "n": 2},
            {"tag": "score-pgd", "method": "score-pgd", "n": 2},
            {"tag": "u-score-pgd", "method": "u-score-pgd", "n": 2}
        ]
    });
    let p = dir.join("small.json");
    std::fs::write(&p, m.to_string()).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--classes", "8", "--res", "16", "--seed", "3407", "--per-class", "10"];
    let a = scorelab(dir.path(), &args);
    assert!(a.status.success(), "{a:?}");
    let cfg = first_stdout_json(&a);
    assert_eq!(cfg["command"], "gen-data");
    assert_eq!(cfg["manifest"]["dataset"]["seed"], 3407);
    let first = std::fs::read(dir.path().join("results/artifacts/train.data")).unwrap();
    let b = scorelab(dir.path(), &args);
    assert!(b.status.success());
    assert_eq!(std::fs::read(dir.path().join("results/artifacts/train.data")).unwrap(), first);

    // The printed manifest replays the same run.
    std::fs::write(dir.path().join("replay.json"), cfg["manifest"].to_string()).unwrap();
    std::fs::remove_dir_all(dir.path().join("results")).unwrap();
    let c = scorelab(dir.path(), &["gen-data", "--manifest", "replay.json"]);
    assert!(c.status.success());
    assert_eq!(std::fs::read(dir.path().join("results/artifacts/train.data")).unwrap(), first);
}

#[test]
fn usage_errors_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorelab(dir.path(), &["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = scorelab(dir.path(), &["attack", "--tag", "no-such-attack"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert!(e["message"].as_str().unwrap().contains("no-such-attack"));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorelab(dir.path(), &["attack", "--tag", "pgd"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "missing-artifact");
    let out = scorelab(dir.path(), &["--manifest", "absent.json", "report"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn lock_file_blocks_concurrent_writers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("results")).unwrap();
    std::fs::write(dir.path().join("results/.scorelab.lock"), "").unwrap();
    let out = scorelab(dir.path(), &["gen-data", "--per-class", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "locked");
}

#[test]
fn full_pipeline_on_a_small_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_manifest(d);
    let m = m.to_str().unwrap();
    assert!(scorelab(d, &["--manifest", m, "gen-data"]).status.success());
    for (kind, arch) in [
        ("classifier", "conv-small"),
        ("classifier", "mlp"),
        ("time-classifier", "conv-small"),
        ("denoiser", "conv-small"),
    ] {
        let out = scorelab(d, &["--manifest", m, "train", kind, "--arch", arch, "--epochs", "1"]);
        assert!(out.status.success(), "{kind}: {out:?}");
    }

    let out = scorelab(d, &["--manifest", m, "attack", "--tag", "score-pgd"]);
    assert!(out.status.success(), "{out:?}");
    let trace = std::fs::read_to_string(d.join("results/attacks/score-pgd/loss_trace.csv")).unwrap();
    assert!(trace.starts_with("iter,L_s,L_c,L_t,wall_ms\n"));

    let out = scorelab(d, &["--manifest", m, "purify", "--input", "results/attacks/score-pgd/x_adv.stns"]);
    assert!(out.status.success(), "{out:?}");
    assert!(d.join("results/purified/x_adv-0.pgm").exists());

    let out = scorelab(d, &["--manifest", m, "eval"]);
    assert!(out.status.success(), "{out:?}");
    let csvs: Vec<_> = std::fs::read_dir(d.join("results"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 4);
    for e in &csvs {
        let text = std::fs::read_to_string(e.path()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "attack,victim,protected,gamma,norm,asr,psnr,ssim,featdist,wall_s,seed"
        );
    }
    assert!(!d.join("results/.scorelab.lock").exists());

    let report = scorelab(d, &["--manifest", m, "report"]);
    assert!(report.status.success());
    assert!(String::from_utf8(report.stdout).unwrap().contains("## iqa.csv"));

    // A different schedule no longer matches the trained diffusion models.
    let mut foreign: Value = serde_json::from_str(&std::fs::read_to_string(m).unwrap()).unwrap();
    foreign["schedule"] = serde_json::json!({"kind": "cosine", "steps": 200, "beta_start": 0.0, "beta_end": 0.999});
    std::fs::write(d.join("foreign.json"), foreign.to_string()).unwrap();
    let out = scorelab(
        d,
        &["--manifest", "foreign.json", "purify", "--input", "results/attacks/score-pgd/x_adv.stns"],
    );
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}
