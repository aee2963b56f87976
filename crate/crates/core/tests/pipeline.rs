use std::path::Path;

use modseg_core::config::ExperimentConfig;
use modseg_core::data::{gen_synthetic, DatasetManifest, Split, SyntheticSpec};
use modseg_core::pipeline::{self, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, REPORT_FILE, STAMP_FILE};
use modseg_core::training::read_log;
use modseg_core::Error;

fn setup(root: &Path, extra: &str) -> ExperimentConfig {
    let spec = SyntheticSpec { n_ct: 3, n_mr: 3, test_per_modality: 1, dims: [16; 3], ..Default::default() };
    gen_synthetic(&spec, 2, &root.join("data")).unwrap();
    let toml = format!(
        r#"seed = 4
manifest = "data/manifest.jsonl"
embeddings = "data/emb.mmemb"
output_dir = "{}"
[backbone]
base_channels = 4
depth = 2
patch_size = 16
[head]
hidden = 16
[train]
epochs = 2
warmup_epochs = 1
[text]
encoder = "hash:16"
{extra}"#,
        root.join("run").display()
    );
    std::fs::write(root.join("exp.toml"), toml).unwrap();
    let cfg = ExperimentConfig::load(&root.join("exp.toml"), &[]).unwrap();
    pipeline::precompute_embeddings(&cfg, cfg.embeddings.as_ref().unwrap()).unwrap();
    cfg
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = pipeline::run_train(&cfg, false).unwrap();
    for f in [CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, STAMP_FILE] {
        assert!(out.run_dir.join(f).is_file(), "missing {f}");
    }
    assert_eq!(out.history.len(), 2);
    // Two training scans per modality and batch 2: one CT+MR iteration per epoch.
    assert_eq!(read_log(&out.run_dir.join(LOG_FILE)).unwrap().len(), 2 * 2);

    let eval = |mistaken| {
        pipeline::run_evaluate(
            &out.checkpoint,
            &cfg.manifest,
            cfg.embeddings.as_deref(),
            &cfg.preprocess,
            &cfg.eval,
            Split::Test,
            mistaken,
        )
        .unwrap()
    };
    let report = eval(false);
    report.verify().unwrap();
    assert_eq!(report.volumes.len(), 2);
    assert_eq!(report.classes.len(), 3);
    assert!(!report.mistaken_prompts);
    assert!(eval(true).mistaken_prompts);

    let err = pipeline::run_evaluate(&out.checkpoint, &cfg.manifest, None, &cfg.preprocess, &cfg.eval, Split::Test, false)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn resume_finishes_and_rejects_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    pipeline::run_train(&cfg, false).unwrap();
    // Resuming a finished run is a no-op that keeps the log intact.
    let again = pipeline::run_train(&cfg, true).unwrap();
    assert_eq!(again.history.len(), 2);
    assert_eq!(read_log(&again.run_dir.join(LOG_FILE)).unwrap().len(), 4);

    let mut longer = cfg.clone();
    longer.train.epochs = 3;
    assert!(matches!(pipeline::run_train(&longer, true), Err(Error::Compatibility(_))));
}

#[test]
fn ablation_matrix_writes_one_run_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let mut cfg = cfg;
    cfg.train.epochs = 1;
    cfg.train.warmup_epochs = 0;
    let report = pipeline::run_ablation(&cfg).unwrap();
    assert_eq!(report.rows.len(), 6);
    for row in &report.rows {
        let run = cfg.output_dir.join(&row.cell);
        assert!(run.join(CHECKPOINT_FILE).is_file());
        assert!(run.join(REPORT_FILE).is_file());
    }
    assert!(cfg.output_dir.join("ablation.json").is_file());
    let table = report.render_table();
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn manifest_lists_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let m = DatasetManifest::load(&cfg.manifest).unwrap();
    assert_eq!(m.entries.len(), 6);
    m.validate(true).unwrap();
    assert_eq!(DatasetManifest::from_jsonl(&m.to_jsonl(), m.base_dir.clone()).unwrap().entries, m.entries);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[train]\nepochz = 3\n").unwrap();
    assert!(matches!(ExperimentConfig::load(&path, &[]), Err(Error::Config(_))));
}
