//! On-disk pipeline stages. Each stage reads the artifacts of earlier ones
//! from a workspace directory, checks their manifests against the current
//! inputs and writes its own artifacts plus a JSON report.
//!
//! Layout under the workspace root:
//!
//! ```text
//! kg/          triples.tsv, corpus.jsonl, gold files, vocab.txt, manifest.json
//! transe/      embedding checkpoint
//! model/       pre-trained model checkpoint, pretrain_log.jsonl
//! finetune-typing/, finetune-relation/   fine-tuned checkpoints
//! reports/     one JSON report per command
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kg::{load_triples, KnowledgeGraph};
use crate::model::{load_store, save_store, CHECKPOINT_KIND};
use crate::numerics::checkpoint::{Manifest, TENSORS_FILE};
use crate::numerics::ParamStore;
use crate::pipeline::{
    build_vocab, knowledge_for, pretrain_stage, relation_stage, score_selection, selection_summary, typing_stage, write_json,
    Dataset, RelationRun, SelectionSummary, Split, Trained, TypingRun, REPORT_SCHEMA_VERSION,
};
use crate::pretrain::StepLog;
use crate::rng::{hash_bytes, hash_str, substream};
use crate::sgnn::{AttentionVariant, RankReport};
use crate::synth::{CORPUS_FILE, RELATION_FILE, SELECTION_FILE, TRIPLES_FILE};
use crate::tasks::{eval_selection, RelationHead, SelectionMetrics, TypingHead};
use crate::text::{read_jsonl, to_jsonl, tokenize, CorpusRecord, Gazetteer};
use crate::transe::{self, mean_tail_rank, train_transe, EmbeddingTable};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const KG_MANIFEST_FILE: &str = "manifest.json";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneTask {
    Typing,
    Relation,
}

impl FinetuneTask {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Typing => "typing",
            Self::Relation => "relation",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn kg_dir(&self) -> PathBuf {
        self.root.join("kg")
    }

    pub fn transe_dir(&self) -> PathBuf {
        self.root.join("transe")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn finetune_dir(&self, task: FinetuneTask) -> PathBuf {
        self.root.join(format!("finetune-{}", task.as_str()))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn write_report<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.report_path(name);
        write_json(&p, value)?;
        Ok(p)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mismatch(field: &str, expected: &str, found: &str) -> Error {
    Error::ManifestMismatch {
        field: field.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Content hashes of the prepared graph and corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgManifest {
    pub schema_version: u32,
    pub kg_hash: String,
    pub vocab_hash: String,
    pub corpus_hash: String,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub sentences: usize,
    pub selection_annotations: usize,
    pub relation_annotations: usize,
}

/// Validates and canonicalises a triple file and corpus into the
/// workspace. Gold files next to the corpus are copied when present.
pub fn build_kg(ws: &Workspace, kg_path: &Path, corpus_path: &Path) -> Result<KgManifest> {
    let (kg, _) = load_triples(kg_path)?;
    let records: Vec<CorpusRecord> = read_jsonl(corpus_path)?;
    let vocab = build_vocab(&kg, &records);
    let src = corpus_path.parent().unwrap_or(Path::new("."));
    let gold = |name: &str| -> Result<Option<Vec<u8>>> {
        let p = src.join(name);
        if p.exists() {
            read_bytes(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let (selection, relation) = (gold(SELECTION_FILE)?, gold(RELATION_FILE)?);

    let dir = ws.kg_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let corpus_text = to_jsonl(&records)?;
    write_text(&dir.join(TRIPLES_FILE), &kg.to_tsv())?;
    write_text(&dir.join(CORPUS_FILE), &corpus_text)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    for (name, body) in [(SELECTION_FILE, &selection), (RELATION_FILE, &relation)] {
        let p = dir.join(name);
        match body {
            Some(b) => fs::write(&p, b).map_err(|e| Error::io(&p, e))?,
            None if p.exists() => fs::remove_file(&p).map_err(|e| Error::io(&p, e))?,
            None => {}
        }
    }
    // Annotating checks every mention against the graph and the vocabulary.
    let ds = Dataset::load(&dir.join(TRIPLES_FILE), &dir.join(CORPUS_FILE), Some(&dir.join(VOCAB_FILE)))?;
    let manifest = KgManifest {
        schema_version: REPORT_SCHEMA_VERSION,
        kg_hash: kg.content_hash(),
        vocab_hash: vocab.hash(),
        corpus_hash: hash_str(&corpus_text),
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        triples: kg.num_triples(),
        sentences: ds.records.len(),
        selection_annotations: ds.selection.len(),
        relation_annotations: ds.relations.len(),
    };
    write_json(&dir.join(KG_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the prepared dataset and checks it against its manifest.
pub fn load_dataset(ws: &Workspace) -> Result<(Dataset, KgManifest)> {
    let dir = ws.kg_dir();
    let mpath = dir.join(KG_MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Checkpoint {
            path: mpath,
            msg: "no prepared graph; run build-kg first".into(),
        });
    }
    let manifest: KgManifest = serde_json::from_slice(&read_bytes(&mpath)?)?;
    let ds = Dataset::load(&dir.join(TRIPLES_FILE), &dir.join(CORPUS_FILE), Some(&dir.join(VOCAB_FILE)))?;
    let checks = [
        ("kg", &manifest.kg_hash, ds.kg.content_hash()),
        ("vocab", &manifest.vocab_hash, ds.vocab.hash()),
        ("corpus", &manifest.corpus_hash, hash_str(&to_jsonl(&ds.records)?)),
    ];
    for (field, want, got) in checks {
        if *want != got {
            return Err(mismatch(field, want, &got));
        }
    }
    Ok((ds, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransEStageReport {
    pub schema_version: u32,
    pub dim: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub mean_tail_rank: f64,
    /// `(N + 1) / 2`, the expected rank of a random guess.
    pub random_rank: f64,
    pub improvement: f64,
}

pub fn train_transe_stage(ws: &Workspace, cfg: &RunConfig) -> Result<TransEStageReport> {
    let (ds, _) = load_dataset(ws)?;
    let tcfg = cfg.transe_config();
    let (table, rep) = train_transe(&ds.kg, &tcfg)?;
    transe::save(&table, &ds.kg, cfg.seed, &ws.transe_dir())?;
    let rank = mean_tail_rank(&table, ds.kg.triples())?;
    let random = (ds.kg.num_entities() as f64 + 1.0) / 2.0;
    Ok(TransEStageReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dim: tcfg.dim,
        epochs: tcfg.epochs,
        final_loss: rep.epoch_losses.last().copied().unwrap_or(0.0),
        mean_tail_rank: rank,
        random_rank: random,
        improvement: 1.0 - rank / random,
    })
}

/// The TransE table for `kg` and the hash of its tensor file.
pub fn load_table(ws: &Workspace, kg: &KnowledgeGraph, cfg: &RunConfig) -> Result<(EmbeddingTable, String)> {
    let dir = ws.transe_dir();
    let (table, manifest) = transe::load(&dir, kg, cfg.d_k)?;
    manifest.require_hash("kg", &kg.content_hash())?;
    Ok((table, hash_bytes(&read_bytes(&dir.join(TENSORS_FILE))?)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainStageReport {
    pub schema_version: u32,
    pub mode: String,
    pub k: usize,
    pub steps: usize,
    pub sentences: usize,
    pub first_total: f64,
    pub last_total: f64,
    pub model_config_hash: String,
    pub dea_candidates: String,
}

fn model_manifest(ds: &Dataset, cfg: &RunConfig, transe_hash: &str, kind: &str) -> Manifest {
    Manifest::new(kind, cfg.seed, cfg.model_config(ds.vocab.len()).hash())
        .with_hash("kg", ds.kg.content_hash())
        .with_hash("vocab", ds.vocab.hash())
        .with_hash("transe", transe_hash)
        .with_meta("mode", cfg.mode.as_str().into())
        .with_meta("K", cfg.k.into())
        .with_meta(
            "dea_candidates",
            format!("truth plus {} sampled negatives", cfg.dea_negatives).into(),
        )
}

pub fn pretrain_files(ws: &Workspace, cfg: &RunConfig, mut on_step: impl FnMut(&StepLog)) -> Result<PretrainStageReport> {
    let (ds, _) = load_dataset(ws)?;
    let (table, transe_hash) = load_table(ws, &ds.kg, cfg)?;
    let t = pretrain_stage(&ds, &table, cfg, |l| on_step(l))?;
    let dir = ws.model_dir();
    let manifest = model_manifest(&ds, cfg, &transe_hash, CHECKPOINT_KIND);
    save_store(&dir, &manifest, &t.store)?;
    write_text(&dir.join(PRETRAIN_LOG_FILE), &to_jsonl(&t.logs)?)?;
    Ok(PretrainStageReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: cfg.mode.as_str().to_string(),
        k: cfg.k,
        steps: t.logs.len(),
        sentences: ds.texts(Split::Train).len(),
        first_total: t.logs.first().map_or(0.0, |l| l.total),
        last_total: t.logs.last().map_or(0.0, |l| l.total),
        model_config_hash: cfg.model_config(ds.vocab.len()).hash(),
        dea_candidates: manifest.meta["dea_candidates"].as_str().unwrap_or_default().to_string(),
    })
}

fn check_manifest(m: &Manifest, ds: &Dataset, cfg: &RunConfig, transe_hash: &str) -> Result<()> {
    let want = cfg.model_config(ds.vocab.len()).hash();
    if m.config_hash != want {
        return Err(mismatch("model config", &want, &m.config_hash));
    }
    m.require_hash("kg", &ds.kg.content_hash())?;
    m.require_hash("vocab", &ds.vocab.hash())?;
    m.require_hash("transe", transe_hash)
}

/// A model restored from `checkpoint` (a pre-trained or fine-tuned
/// directory) after checking it against the workspace and `cfg`.
pub struct Loaded {
    pub ds: Dataset,
    pub trained: Trained,
    pub manifest: Manifest,
    pub transe_hash: String,
}

fn load_with(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig, kind: &str, heads: impl FnOnce(&Dataset, &mut ParamStore) -> Result<()>) -> Result<Loaded> {
    let (ds, _) = load_dataset(ws)?;
    let (table, transe_hash) = load_table(ws, &ds.kg, cfg)?;
    let manifest = crate::numerics::checkpoint::load_manifest(checkpoint)?;
    manifest.require_kind(kind)?;
    check_manifest(&manifest, &ds, cfg, &transe_hash)?;
    let knowledge = knowledge_for(&ds, &table, cfg)?;
    let (model, mut store) = crate::pipeline::init_model(&ds, cfg)?;
    heads(&ds, &mut store)?;
    load_store(checkpoint, &mut store)?;
    Ok(Loaded {
        ds,
        trained: Trained {
            model,
            store,
            knowledge,
            logs: Vec::new(),
        },
        manifest,
        transe_hash,
    })
}

pub fn load_model(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig) -> Result<Loaded> {
    load_with(ws, checkpoint, cfg, CHECKPOINT_KIND, |_, _| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FinetuneMetrics {
    Typing(TypingRun),
    Relation(RelationRun),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub schema_version: u32,
    pub task: String,
    pub labels: Vec<String>,
    pub metrics: FinetuneMetrics,
}

pub fn finetune_files(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig, task: FinetuneTask) -> Result<FinetuneReport> {
    let loaded = load_model(ws, checkpoint, cfg)?;
    let ds = &loaded.ds;
    let kind = format!("finetune-{}", task.as_str());
    let (labels, metrics, store) = match task {
        FinetuneTask::Typing => {
            let (run, t, head) = typing_stage(loaded.trained, ds, cfg)?;
            (head.labels, FinetuneMetrics::Typing(run), t.store)
        }
        FinetuneTask::Relation => {
            let (run, t, head) = relation_stage(loaded.trained, ds, cfg)?;
            (head.labels, FinetuneMetrics::Relation(run), t.store)
        }
    };
    let manifest = model_manifest(ds, cfg, &loaded.transe_hash, &kind).with_meta("labels", labels.clone().into());
    save_store(&ws.finetune_dir(task), &manifest, &store)?;
    Ok(FinetuneReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: task.as_str().to_string(),
        labels,
        metrics,
    })
}

/// Restores a fine-tuned checkpoint together with its head.
pub fn load_finetuned(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig, task: FinetuneTask) -> Result<Loaded> {
    let kind = format!("finetune-{}", task.as_str());
    load_with(ws, checkpoint, cfg, &kind, |ds, store| {
        match task {
            FinetuneTask::Typing => {
                let (labels, _) = ds.typing_examples(Split::Train)?;
                TypingHead::new(store, cfg.d_w, labels, &mut substream(cfg.seed, "head-init/typing"))?;
            }
            FinetuneTask::Relation => {
                let labels = ds.relation_labels();
                RelationHead::new(store, cfg.d_w, labels, &mut substream(cfg.seed, "head-init/relation"))?;
            }
        }
        Ok(())
    })
}

/// Ranks the 1-hop triples of `mention` (an entity name) inside `sentence`.
pub fn rank_triples_files(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig, sentence: &str, mention: &str) -> Result<RankReport> {
    let loaded = load_model(ws, checkpoint, cfg)?;
    let (ds, t) = (&loaded.ds, &loaded.trained);
    let e = ds.kg.require_entity(mention)?;
    let at = tokenize(sentence, &ds.vocab, &Gazetteer::from_kg(&ds.kg));
    if !at.mentions.iter().any(|m| m.entity == e) {
        return Err(Error::invalid(
            "rank_triples",
            format!("`{mention}` is not mentioned in the sentence"),
        ));
    }
    let s = t.model.sentence_vector(&t.store, &at)?;
    let ranking = t
        .model
        .sgnn
        .rank_triples(&t.store, &t.knowledge.table, t.knowledge.context(e)?, &s)?;
    Ok(RankReport::new(&ds.kg, sentence, e, &ranking))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionReport {
    Fixed {
        schema_version: u32,
        variant: String,
        split: String,
        metrics: SelectionMetrics,
    },
    Sweep {
        schema_version: u32,
        #[serde(flatten)]
        summary: SelectionSummary,
    },
}

/// Fixed-threshold metrics on the test split, or a dev-split sweep whose
/// best threshold is then applied to the test split.
pub fn eval_selection_files(
    ws: &Workspace,
    checkpoint: &Path,
    cfg: &RunConfig,
    threshold: Option<f64>,
    sweep: bool,
) -> Result<SelectionReport> {
    let loaded = load_model(ws, checkpoint, cfg)?;
    let (ds, t) = (&loaded.ds, &loaded.trained);
    if ds.selection.is_empty() {
        return Err(Error::invalid("eval_selection", "workspace has no selection annotations"));
    }
    if sweep {
        return Ok(SelectionReport::Sweep {
            schema_version: REPORT_SCHEMA_VERSION,
            summary: selection_summary(t, ds, cfg.attention)?,
        });
    }
    let threshold = threshold.unwrap_or(cfg.threshold);
    let scored = score_selection(t, ds, Split::Test, cfg.attention)?;
    Ok(SelectionReport::Fixed {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: cfg.attention.as_str().to_string(),
        split: "test".into(),
        metrics: eval_selection(&scored, &ds.selection_gold(Split::Test), threshold)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KhopRow {
    pub k: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub pretrain_last_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KhopAblation {
    pub schema_version: u32,
    pub rows: Vec<KhopRow>,
}

/// Pre-trains and fine-tunes relation classification once per radius.
pub fn ablate_khop(ws: &Workspace, cfg: &RunConfig, ks: &[usize]) -> Result<KhopAblation> {
    let (ds, _) = load_dataset(ws)?;
    let (table, _) = load_table(ws, &ds.kg, cfg)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let c = cfg.with_override("K", &k.to_string())?;
        let t = pretrain_stage(&ds, &table, &c, |_| {})?;
        let last = t.logs.last().map_or(0.0, |l| l.total);
        let (run, _, _) = relation_stage(t, &ds, &c)?;
        rows.push(KhopRow {
            k,
            dev_accuracy: run.dev.accuracy,
            test_accuracy: run.test.accuracy,
            pretrain_last_total: last,
        });
    }
    Ok(KhopAblation {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub variant: String,
    pub dev_best_threshold: f64,
    pub dev_best_f1: f64,
    pub test_f1_at_dev_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionAblation {
    pub schema_version: u32,
    pub rows: Vec<AttentionRow>,
}

/// Scores triple selection with each attention variant over one
/// pre-trained model.
pub fn ablate_attention(ws: &Workspace, checkpoint: &Path, cfg: &RunConfig) -> Result<AttentionAblation> {
    let loaded = load_model(ws, checkpoint, cfg)?;
    let rows = [AttentionVariant::Semantic, AttentionVariant::MeanPool]
        .into_iter()
        .map(|v| {
            let s = selection_summary(&loaded.trained, &loaded.ds, v)?;
            Ok(AttentionRow {
                variant: s.variant,
                dev_best_threshold: s.dev.best_threshold,
                dev_best_f1: s.dev.best_f1,
                test_f1_at_dev_threshold: s.test_f1_at_dev_threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionAblation {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
    })
}
