use dynkc::artifacts::{self, FinetuneTask, Workspace};
use dynkc::config::RunConfig;
use dynkc::kg::KnowledgeGraph;
use dynkc::numerics::Tensor;
use dynkc::pipeline::{pretrain_stage, train_table, Dataset};
use dynkc::synth::gen_synth;
use dynkc::transe::{self, EmbeddingTable};
use dynkc::Error;

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        d_w: 16,
        d_k: 8,
        d_a: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 32,
        transe_epochs: 20,
        pretrain_steps: 10,
        finetune_steps: 10,
        synth_sentences: 120,
        ..RunConfig::default()
    }
}

fn workspace(cfg: &RunConfig) -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let data = dir.path().join("data");
    gen_synth(&cfg.synth_config(), cfg.seed).unwrap().write(&data).unwrap();
    artifacts::build_kg(&ws, &data.join("triples.tsv"), &data.join("corpus.jsonl")).unwrap();
    artifacts::train_transe_stage(&ws, cfg).unwrap();
    (dir, ws)
}

#[test]
fn pretraining_loss_trends_down() {
    let cfg = RunConfig {
        pretrain_steps: 60,
        ..tiny(1)
    };
    let world = gen_synth(&cfg.synth_config(), 1).unwrap();
    let ds = Dataset::from_world(&world).unwrap();
    let table = train_table(&ds.kg, &cfg).unwrap();
    let t = pretrain_stage(&ds, &table, &cfg, |_| {}).unwrap();
    let avg = |r: std::ops::Range<usize>| t.logs[r.clone()].iter().map(|l| l.total).sum::<f64>() / r.len() as f64;
    let windows: Vec<f64> = (0..5).map(|i| avg(i * 10..i * 10 + 10)).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{windows:?}");
    }
    assert!(windows[4] < windows[0]);
}

#[test]
fn stages_refuse_mismatched_inputs() {
    let cfg = tiny(2);
    let (_dir, ws) = workspace(&cfg);
    artifacts::pretrain_files(&ws, &cfg, |_| {}).unwrap();

    // A different architecture no longer matches the checkpoint.
    let other = RunConfig { k: 1, ..cfg.clone() };
    let err = artifacts::load_model(&ws, &ws.model_dir(), &other).err().unwrap();
    assert!(matches!(err, Error::ManifestMismatch { ref field, .. } if field == "model config"), "{err}");

    // A pre-trained checkpoint is not a fine-tuned one.
    let err = artifacts::load_finetuned(&ws, &ws.model_dir(), &cfg, FinetuneTask::Relation).err().unwrap();
    assert!(matches!(err, Error::ManifestMismatch { ref field, .. } if field == "kind"), "{err}");

    // Retraining TransE with another seed invalidates the model.
    artifacts::train_transe_stage(&ws, &RunConfig { seed: 9, ..cfg.clone() }).unwrap();
    let err = artifacts::load_model(&ws, &ws.model_dir(), &cfg).err().unwrap();
    assert!(matches!(err, Error::ManifestMismatch { ref field, .. } if field == "transe"), "{err}");

    // Editing the prepared graph is caught by its manifest.
    let triples = ws.kg_dir().join("triples.tsv");
    let mut text = std::fs::read_to_string(&triples).unwrap();
    text.push_str("extra\tlocated_in\tnowhere\n");
    std::fs::write(&triples, text).unwrap();
    let err = artifacts::load_dataset(&ws).err().unwrap();
    assert!(matches!(err, Error::ManifestMismatch { ref field, .. } if field == "kg"), "{err}");
}

#[test]
fn finetuned_checkpoint_reloads_with_its_head() {
    let cfg = tiny(3);
    let (_dir, ws) = workspace(&cfg);
    artifacts::pretrain_files(&ws, &cfg, |_| {}).unwrap();
    let report = artifacts::finetune_files(&ws, &ws.model_dir(), &cfg, FinetuneTask::Typing).unwrap();
    assert_eq!(report.task, "typing");
    let loaded = artifacts::load_finetuned(&ws, &ws.finetune_dir(FinetuneTask::Typing), &cfg, FinetuneTask::Typing).unwrap();
    assert!(loaded.trained.store.id("typing_head.w").is_some());
}

#[test]
fn khop_ablation_has_one_row_per_radius() {
    let cfg = tiny(4);
    let (_dir, ws) = workspace(&cfg);
    let rep = artifacts::ablate_khop(&ws, &cfg, &[1, 2]).unwrap();
    assert_eq!(rep.rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(rep.schema_version, 1);
}

#[test]
fn transe_checkpoint_round_trip_and_errors() {
    let mut kg = KnowledgeGraph::new();
    kg.add_triple("a", "r", "b").unwrap();
    let table = EmbeddingTable::new(
        Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    transe::save(&table, &kg, 1, dir.path()).unwrap();
    let (back, _) = transe::load(dir.path(), &kg, 2).unwrap();
    assert_eq!(back, table);
    assert!(matches!(transe::load(dir.path(), &kg, 3), Err(Error::Checkpoint { .. })));
    kg.add_entity("c").unwrap();
    let err = transe::load(dir.path(), &kg, 2).unwrap_err();
    assert!(err.to_string().contains("`c`"), "{err}");
}
