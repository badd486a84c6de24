mod common;

use std::path::Path;

use common::synthetic_train_config;
use vgse::pipeline::{replay, run_pipeline_with_cache, sweep_with_cache, DataConfig, PatchifyConfig, RunConfig, RunRecord, SweepAxis};
use vgse::synthetic::SyntheticConfig;
use vgse::Error;

fn synthetic_config(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        synthetic: Some(SyntheticConfig::default()),
        train: synthetic_train_config(0),
        ..Default::default()
    }
}

fn stage_names(r: &RunRecord) -> Vec<&str> {
    r.stages.iter().map(|s| s.name.as_str()).collect()
}

#[test]
fn rerun_skips_every_stage_with_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&dir.path().join("out"));
    let cache = dir.path().join("cache");
    let first = run_pipeline_with_cache(&cfg, &cache).unwrap();
    assert_eq!(stage_names(&first), ["synthesize", "neighbors", "train-pc", "embed", "relate", "eval-zsl"]);
    assert_eq!(first.skipped_stages(), 0);
    for m in [first.metrics.t1, first.metrics.u, first.metrics.s, first.metrics.h] {
        assert!(m.is_finite() && (0.0..=100.0).contains(&m));
    }
    assert!(cfg.output_dir.join("report.json").exists());
    assert!(cfg.output_dir.join("phi_full.vgsf").exists());
    assert_eq!(RunRecord::load(&cfg.output_dir.join("run.json")).unwrap(), first);

    let second = run_pipeline_with_cache(&cfg, &cache).unwrap();
    assert_eq!(second.skipped_stages(), second.stages.len());
    assert_eq!(second.metrics, first.metrics);
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.outputs, b.outputs);
    }
}

#[test]
fn same_seed_in_separate_caches_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline_with_cache(&synthetic_config(&a.path().join("out")), &a.path().join("cache")).unwrap();
    let rb = run_pipeline_with_cache(&synthetic_config(&b.path().join("out")), &b.path().join("cache")).unwrap();
    assert_eq!(rb.skipped_stages(), 0);
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join("out").join(f)).unwrap();
    assert_eq!(read(&a, "phi_full.vgsf"), read(&b, "phi_full.vgsf"));
    assert_eq!(read(&a, "report.json"), read(&b, "report.json"));
    assert_eq!(ra.metrics, rb.metrics);
}

#[test]
fn replaying_a_record_reproduces_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&dir.path().join("out"));
    let first = run_pipeline_with_cache(&cfg, &dir.path().join("cache")).unwrap();
    // A fresh cache so every stage really runs again.
    std::env::set_var(vgse::pipeline::CACHE_ENV, dir.path().join("other-cache"));
    let again = replay(&RunRecord::load(&cfg.output_dir.join("run.json")).unwrap()).unwrap();
    std::env::remove_var(vgse::pipeline::CACHE_ENV);
    assert_eq!(again.skipped_stages(), 0);
    assert_eq!(again.metrics, first.metrics);
}

#[test]
fn dv_sweep_gives_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&dir.path().join("out"));
    let values: Vec<String> = ["4", "8", "12"].map(String::from).to_vec();
    let table = sweep_with_cache(&cfg, SweepAxis::Dv, &values, &dir.path().join("cache")).unwrap();
    assert_eq!(table.rows.len(), 3);
    // The synthetic data and neighbours are shared by every value.
    assert_eq!(table.rows[0].skipped_stages, 0);
    assert!(table.rows[1..].iter().all(|r| r.skipped_stages == 2));
    let csv = std::fs::read_to_string(cfg.output_dir.join("sweep-dv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("value,t1,u,s,h"));
    let md = std::fs::read_to_string(cfg.output_dir.join("sweep-dv.md")).unwrap();
    assert_eq!(md.lines().count(), 5);
}

#[test]
fn mode_sweep_reuses_training_and_oracle_leads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&dir.path().join("out"));
    let values: Vec<String> = ["wavg", "smo", "oracle"].map(String::from).to_vec();
    let table = sweep_with_cache(&cfg, SweepAxis::Mode, &values, &dir.path().join("cache")).unwrap();
    let [wavg, smo, oracle] = &table.rows[..] else { panic!("three rows expected") };
    // smo reuses synthesize, neighbors, train-pc and embed.
    assert_eq!(smo.skipped_stages, 4);
    // oracle reuses everything before embed and has no relate stage.
    assert_eq!((oracle.skipped_stages, oracle.total_stages), (3, 5));
    assert!(oracle.t1 >= smo.t1, "oracle {} < smo {}", oracle.t1, smo.t1);
    eprintln!("T1: wavg {:.1}, smo {:.1}, oracle {:.1}", wavg.t1, smo.t1, oracle.t1);
}

#[test]
fn knowledge_swap_only_changes_the_relation_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let synth = vgse::synthetic::generate(&SyntheticConfig::default()).unwrap();
    let manifest = data_dir.join("m.jsonl");
    synth.write(&manifest, &data_dir.join("p.vgsf"), &data_dir.join("i.vgsf")).unwrap();
    // Replacement vectors: the same vectors with the sign flipped.
    let lines: Vec<String> = synth
        .manifest
        .classes()
        .iter()
        .map(|c| serde_json::json!({ "class": c.name, "w2v": c.word_embedding.iter().map(|v| -v).collect::<Vec<_>>() }).to_string())
        .collect();
    let vectors = data_dir.join("flipped.jsonl");
    std::fs::write(&vectors, lines.join("\n")).unwrap();
    let cfg = RunConfig {
        output_dir: dir.path().join("out"),
        data: Some(DataConfig {
            manifest,
            patch_features: data_dir.join("p.vgsf"),
            image_features: data_dir.join("i.vgsf"),
            class_vectors: None,
        }),
        train: synthetic_train_config(0),
        ..Default::default()
    };
    let values = vec!["w2v".to_string(), vectors.display().to_string()];
    let table = sweep_with_cache(&cfg, SweepAxis::Knowledge, &values, &dir.path().join("cache")).unwrap();
    // Negating every word vector leaves the relation weights unchanged.
    assert_eq!(table.rows[1].skipped_stages, 4);
    assert_eq!(table.rows[0].t1, table.rows[1].t1);
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let synth = vgse::synthetic::generate(&SyntheticConfig::default()).unwrap();
    let manifest = data_dir.join("m.jsonl");
    synth.write(&manifest, &data_dir.join("p.vgsf"), &data_dir.join("i.vgsf")).unwrap();
    std::fs::write(data_dir.join("p.vgsf"), b"VGSF\x01garbage").unwrap();
    let cfg = RunConfig {
        output_dir: dir.path().join("out"),
        data: Some(DataConfig {
            manifest,
            patch_features: data_dir.join("p.vgsf"),
            image_features: data_dir.join("i.vgsf"),
            class_vectors: None,
        }),
        ..Default::default()
    };
    let err = run_pipeline_with_cache(&cfg, &dir.path().join("cache")).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "neighbors"),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.is_user_error());
    assert!(err.to_string().contains("neighbors"), "{err}");
}

#[test]
fn missing_inputs_fail_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output_dir: dir.path().join("out"),
        data: Some(DataConfig {
            manifest: dir.path().join("absent.jsonl"),
            patch_features: dir.path().join("p.vgsf"),
            image_features: dir.path().join("i.vgsf"),
            class_vectors: None,
        }),
        ..Default::default()
    };
    let err = run_pipeline_with_cache(&cfg, &dir.path().join("cache")).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!dir.path().join("cache").exists());
}

#[test]
fn optional_patchify_stage_writes_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    for id in 0..2u8 {
        let img = image::RgbImage::from_fn(48, 40, |x, y| image::Rgb([(x * 5) as u8, (y * 6) as u8, 40 * id]));
        img.save(images.join(format!("{id}.png"))).unwrap();
    }
    let cfg = RunConfig {
        patchify: Some(PatchifyConfig { images_dir: images, n_segments: 4, compactness: 1.0 }),
        ..synthetic_config(&dir.path().join("out"))
    };
    let record = run_pipeline_with_cache(&cfg, &dir.path().join("cache")).unwrap();
    let patchify = record.stages.iter().find(|s| s.name == "patchify").unwrap();
    let boxes = std::fs::read_to_string(&patchify.outputs[0].path).unwrap();
    assert_eq!(boxes.lines().count(), 8);
}
