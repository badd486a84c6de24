use vgse::features::{load_features, read_features, save_features};
use vgse::synthetic::{generate, SyntheticConfig};

#[test]
fn save_of_load_is_byte_identical() {
    let data = generate(&SyntheticConfig { train_per_class: 2, test_seen_per_class: 1, test_unseen_per_class: 1, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (m, p, i) = (dir.path().join("m.jsonl"), dir.path().join("p.vgsf"), dir.path().join("i.vgsf"));
    data.write(&m, &p, &i).unwrap();
    let manifest = vgse::manifest::load_manifest(&m).unwrap();
    let loaded = load_features(&p, &manifest).unwrap();
    let again = dir.path().join("again.vgsf");
    save_features(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    // Loading preserves row order.
    assert_eq!(read_features(&again).unwrap().row_ids(), loaded.row_ids());
}

#[test]
fn rows_of_unknown_images_are_rejected() {
    let data = generate(&SyntheticConfig { train_per_class: 2, test_seen_per_class: 1, test_unseen_per_class: 1, ..Default::default() }).unwrap();
    let small = generate(&SyntheticConfig { train_per_class: 1, test_seen_per_class: 1, test_unseen_per_class: 1, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.vgsf");
    save_features(&p, &data.patch_features).unwrap();
    let err = load_features(&p, &small.manifest).unwrap_err();
    assert!(err.to_string().contains("image"), "{err}");
}
