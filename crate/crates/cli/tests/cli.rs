use std::path::Path;
use std::process::{Command, Output};

fn vgse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgse"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("VGSE_CACHE_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vgse(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_by_stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--manifest", "m.jsonl", "--patches", "p.vgsf", "--images", "i.vgsf"], d);
    assert!(d.join("m.classes.jsonl").exists());
    ok(&["neighbors", "--features", "p.vgsf", "--manifest", "m.jsonl", "--k", "10", "--out", "knn.bin"], d);
    let train = ok(
        &[
            "train-pc", "--features", "p.vgsf", "--knn", "knn.bin", "--manifest", "m.jsonl", "--dv", "12", "--lr", "1e-2",
            "--epochs", "3", "--seed", "0", "--out", "heads.vgsp", "--log", "log.json",
        ],
        d,
    );
    assert!(train.contains("final loss"));
    ok(&["embed", "--heads", "heads.vgsp", "--features", "p.vgsf", "--manifest", "m.jsonl", "--out", "phi_seen.vgsf"], d);
    ok(
        &[
            "relate", "--mode", "smo", "--seen", "phi_seen.vgsf", "--manifest", "m.jsonl", "--alpha", "-1", "--eta", "5",
            "--neighbors", "5", "--out", "phi_full.vgsf", "--weights", "r.jsonl",
        ],
        d,
    );
    let weights = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    assert_eq!(weights.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(weights.lines().next().unwrap()).unwrap();
    assert!(first.get("unseen_class").is_some() && first.get("r").is_some() && first.get("residual").is_some());
    let eval = ok(
        &["eval-zsl", "--image-features", "i.vgsf", "--manifest", "m.jsonl", "--table", "phi_full.vgsf", "--epochs", "5", "--seed", "0", "--report", "report.json"],
        d,
    );
    assert!(eval.starts_with("T1 "));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["t1", "u", "s", "h", "per_class"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let summary = ok(&["report", "report.json"], d);
    assert!(summary.starts_with("T1 "));
}

#[test]
fn run_and_report_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "seed = 0\noutput_dir = \"out\"\n[synthetic]\ntrain_per_class = 10\n[train]\nclusters = 12\nlearning_rate = 0.01\nepochs = 3\n[eval]\nepochs = 5\n",
    )
    .unwrap();
    ok(&["run", "--config", "run.toml", "--set", "relation.mode=wavg"], d);
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["relation"]["mode"], "wavg");
    let md = ok(&["report", "out/run.json"], d);
    assert!(md.contains("## Metrics") && md.contains("| eval-zsl |"));
    // Second run is served from the cache.
    ok(&["run", "--config", "run.toml", "--set", "relation.mode=wavg"], d);
    let again: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/run.json")).unwrap()).unwrap();
    assert!(again["stages"].as_array().unwrap().iter().all(|s| s["skipped"] == true));
    assert_eq!(again["metrics"], record["metrics"]);

    let table = ok(&["sweep", "--config", "run.toml", "--axis", "dv", "--values", "6,12"], d);
    assert_eq!(table.lines().count(), 4);
    assert!(d.join("out/sweep-dv.csv").exists());
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(vgse(&["neighbors", "--features", "absent.vgsf", "--out", "k.bin"], d).status.code(), Some(1));
    assert_eq!(vgse(&["neighbors", "--bogus"], d).status.code(), Some(1));
    assert_eq!(vgse(&["sweep", "--config", "x.toml", "--axis", "colour", "--values", "1"], d).status.code(), Some(1));
    std::fs::write(d.join("bad.toml"), "seed = \"zero\"").unwrap();
    let out = vgse(&["run", "--config", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn solver_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--manifest", "m.jsonl", "--patches", "p.vgsf", "--images", "i.vgsf"], d);
    ok(&["neighbors", "--features", "p.vgsf", "--manifest", "m.jsonl", "--k", "5", "--out", "knn.bin"], d);
    ok(&["train-pc", "--features", "p.vgsf", "--knn", "knn.bin", "--manifest", "m.jsonl", "--dv", "6", "--epochs", "1", "--out", "h.vgsp"], d);
    ok(&["embed", "--heads", "h.vgsp", "--features", "p.vgsf", "--manifest", "m.jsonl", "--out", "s.vgsf"], d);
    let out = vgse(&["relate", "--seen", "s.vgsf", "--manifest", "m.jsonl", "--max-iter", "1", "--out", "f.vgsf"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = vgse(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["patchify", "neighbors", "train-pc", "embed", "relate", "eval-zsl", "run", "sweep", "report"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}
