//! In-memory stage functions shared by the command-line tool and the
//! end-to-end tests.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::model::{Knowledge, Model};
use crate::numerics::ParamStore;
use crate::pretrain::{pretrain, StepLog};
use crate::rng::substream;
use crate::sgnn::AttentionVariant;
use crate::synth::{split_of, typing_labels, RelationGold, SyntheticWorld, CORPUS_FILE, RELATION_FILE, SELECTION_FILE, TRIPLES_FILE};
use crate::tasks::{
    default_grid, evaluate_relation, evaluate_typing, finetune_relation, finetune_typing, sweep_threshold, RelationExample,
    RelationHead, RelationMetrics, ScoredMention, SelectionGold, SweepResult, TypingExample, TypingHead, TypingMetrics,
};
use crate::text::{read_jsonl, split_words, AnnotatedText, CorpusRecord, Span, Vocabulary};
use crate::transe::{train_transe, EmbeddingTable};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
    All,
}

impl Split {
    pub fn contains(self, sentence_id: usize) -> bool {
        match self {
            Split::All => true,
            Split::Train => split_of(sentence_id) == "train",
            Split::Dev => split_of(sentence_id) == "dev",
            Split::Test => split_of(sentence_id) == "test",
        }
    }
}

/// Words of the corpus (first-seen order) followed by entity names.
pub fn build_vocab(kg: &KnowledgeGraph, records: &[CorpusRecord]) -> Vocabulary {
    let words: Vec<String> = records
        .iter()
        .flat_map(|r| split_words(&r.text))
        .chain(kg.entity_names().iter().flat_map(|n| split_words(&n.replace('_', " "))))
        .collect();
    Vocabulary::build(words.iter().map(String::as_str))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub records: Vec<CorpusRecord>,
    pub texts: Vec<AnnotatedText>,
    pub selection: Vec<SelectionGold>,
    pub relations: Vec<RelationGold>,
}

impl Dataset {
    pub fn new(
        kg: KnowledgeGraph,
        vocab: Vocabulary,
        records: Vec<CorpusRecord>,
        selection: Vec<SelectionGold>,
        relations: Vec<RelationGold>,
    ) -> Result<Self> {
        let texts = records
            .iter()
            .map(|r| r.annotate(&vocab, &kg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kg,
            vocab,
            records,
            texts,
            selection,
            relations,
        })
    }

    pub fn from_world(world: &SyntheticWorld) -> Result<Self> {
        let vocab = build_vocab(&world.kg, &world.corpus);
        Self::new(
            world.kg.clone(),
            vocab,
            world.corpus.clone(),
            world.selection.clone(),
            world.relations.clone(),
        )
    }

    /// Reads the files written by the generator; gold files are optional.
    pub fn load(kg_path: &Path, corpus_path: &Path, vocab: Option<&Path>) -> Result<Self> {
        let (kg, _) = crate::kg::load_triples(kg_path)?;
        let records: Vec<CorpusRecord> = read_jsonl(corpus_path)?;
        let vocab = match vocab {
            Some(p) => Vocabulary::load(p)?,
            None => build_vocab(&kg, &records),
        };
        let dir = corpus_path.parent().unwrap_or(Path::new("."));
        let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
        let selection = optional(SELECTION_FILE).map(|p| read_jsonl(&p)).transpose()?.unwrap_or_default();
        let relations = optional(RELATION_FILE).map(|p| read_jsonl(&p)).transpose()?.unwrap_or_default();
        Self::new(kg, vocab, records, selection, relations)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(TRIPLES_FILE), &dir.join(CORPUS_FILE), None)
    }

    pub fn texts(&self, split: Split) -> Vec<AnnotatedText> {
        self.texts
            .iter()
            .enumerate()
            .filter(|(i, _)| split.contains(*i))
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Every mention of a typed entity becomes one example.
    pub fn typing_examples(&self, split: Split) -> Result<(Vec<String>, Vec<TypingExample>)> {
        let (labels, per) = typing_labels(&self.kg);
        let mut out = Vec::new();
        for (i, at) in self.texts.iter().enumerate() {
            if !split.contains(i) {
                continue;
            }
            for m in &at.mentions {
                if let Some(ls) = per.get(&m.entity) {
                    out.push(TypingExample::new(at, m.span, ls.clone(), &self.vocab)?);
                }
            }
        }
        Ok((labels, out))
    }

    pub fn relation_labels(&self) -> Vec<String> {
        self.relations
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn relation_examples(&self, split: Split, labels: &[String]) -> Result<Vec<RelationExample>> {
        self.relations
            .iter()
            .filter(|r| split.contains(r.sentence_id))
            .map(|r| {
                let at = self
                    .texts
                    .get(r.sentence_id)
                    .ok_or_else(|| Error::invalid("relation_gold", format!("no sentence {}", r.sentence_id)))?;
                let label = labels
                    .iter()
                    .position(|l| *l == r.label)
                    .ok_or_else(|| Error::invalid("relation_gold", format!("unknown label {}", r.label)))?;
                RelationExample::new(
                    at,
                    Span::new(r.head.start, r.head.end),
                    Span::new(r.tail.start, r.tail.end),
                    label,
                    &self.vocab,
                )
            })
            .collect()
    }

    pub fn selection_gold(&self, split: Split) -> Vec<SelectionGold> {
        self.selection
            .iter()
            .filter(|g| split.contains(g.sentence_id))
            .cloned()
            .collect()
    }

    pub fn all_entities(&self) -> Vec<EntityId> {
        (0..self.kg.num_entities() as u32).map(EntityId).collect()
    }
}

pub fn train_table(kg: &KnowledgeGraph, cfg: &RunConfig) -> Result<EmbeddingTable> {
    Ok(train_transe(kg, &cfg.transe_config())?.0)
}

/// Knowledge with contexts prepared for every entity.
pub fn knowledge_for(ds: &Dataset, table: &EmbeddingTable, cfg: &RunConfig) -> Result<Knowledge> {
    let opts = cfg.model_config(ds.vocab.len()).context_options(cfg.seed);
    let mut k = Knowledge::new(ds.kg.clone(), table.clone(), opts)?;
    k.prepare(ds.all_entities())?;
    Ok(k)
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub knowledge: Knowledge,
    pub logs: Vec<StepLog>,
}

pub fn init_model(ds: &Dataset, cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model_config(ds.vocab.len()), cfg.seed)?;
    Ok((model, store))
}

/// Pre-trains a fresh model on the training split.
pub fn pretrain_stage(
    ds: &Dataset,
    table: &EmbeddingTable,
    cfg: &RunConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<Trained> {
    let knowledge = knowledge_for(ds, table, cfg)?;
    let (model, mut store) = init_model(ds, cfg)?;
    let texts = ds.texts(Split::Train);
    let logs = pretrain(
        &model,
        &mut store,
        &knowledge,
        &texts,
        &ds.vocab,
        &cfg.pretrain_config(),
        cfg.seed,
        on_step,
    )?;
    Ok(Trained {
        model,
        store,
        knowledge,
        logs,
    })
}

/// Scores every annotated `(sentence, mention)` pair in `split`.
pub fn score_selection(
    t: &Trained,
    ds: &Dataset,
    split: Split,
    variant: AttentionVariant,
) -> Result<Vec<ScoredMention>> {
    let mut stack = t.model.sgnn.clone();
    stack.config.attention = variant;
    let gold = ds.selection_gold(split);
    let mut sentence_vecs: HashMap<usize, Vec<f64>> = HashMap::new();
    for g in &gold {
        if let std::collections::hash_map::Entry::Vacant(e) = sentence_vecs.entry(g.sentence_id) {
            let at = &ds.texts[g.sentence_id];
            e.insert(t.model.sentence_vector(&t.store, at)?);
        }
    }
    gold.par_iter()
        .map(|g| {
            let e = ds.kg.require_entity(&g.mention_entity)?;
            let ctx = t.knowledge.context(e)?;
            let ranking = stack.rank_triples(&t.store, &t.knowledge.table, ctx, &sentence_vecs[&g.sentence_id])?;
            Ok(ScoredMention {
                sentence_id: g.sentence_id,
                mention_entity: g.mention_entity.clone(),
                scores: ranking.scores,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionSummary {
    pub variant: String,
    pub dev: SweepResult,
    /// F1 on the test split at the dev-selected threshold.
    pub test_f1_at_dev_threshold: f64,
}

pub fn selection_summary(t: &Trained, ds: &Dataset, variant: AttentionVariant) -> Result<SelectionSummary> {
    let dev = score_selection(t, ds, Split::Dev, variant)?;
    let sweep = sweep_threshold(&dev, &ds.selection_gold(Split::Dev), &default_grid())?;
    let test = score_selection(t, ds, Split::Test, variant)?;
    let m = crate::tasks::eval_selection(&test, &ds.selection_gold(Split::Test), sweep.best_threshold)?;
    Ok(SelectionSummary {
        variant: variant.as_str().to_string(),
        dev: sweep,
        test_f1_at_dev_threshold: m.f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationRun {
    pub k: usize,
    pub train_loss_last: f64,
    pub dev: RelationMetrics,
    pub test: RelationMetrics,
}

/// Fine-tunes a relation head on top of `t` (consumed) and evaluates it.
pub fn relation_stage(mut t: Trained, ds: &Dataset, cfg: &RunConfig) -> Result<(RelationRun, Trained, RelationHead)> {
    let labels = ds.relation_labels();
    let train = ds.relation_examples(Split::Train, &labels)?;
    let mut rng = substream(cfg.seed, "head-init/relation");
    let head = RelationHead::new(&mut t.store, cfg.d_w, labels.clone(), &mut rng)?;
    let losses = finetune_relation(
        &t.model,
        &head,
        &mut t.store,
        &t.knowledge,
        &train,
        &ds.vocab,
        &cfg.finetune_config(),
        cfg.seed,
        |_, _| {},
    )?;
    let dev = evaluate_relation(&t.model, &head, &t.store, &t.knowledge, &ds.relation_examples(Split::Dev, &labels)?, &ds.vocab)?;
    let test = evaluate_relation(&t.model, &head, &t.store, &t.knowledge, &ds.relation_examples(Split::Test, &labels)?, &ds.vocab)?;
    let run = RelationRun {
        k: cfg.k,
        train_loss_last: losses.last().copied().unwrap_or(0.0),
        dev,
        test,
    };
    Ok((run, t, head))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TypingRun {
    pub train_loss_last: f64,
    pub dev: TypingMetrics,
    pub test: TypingMetrics,
}

pub fn typing_stage(mut t: Trained, ds: &Dataset, cfg: &RunConfig) -> Result<(TypingRun, Trained, TypingHead)> {
    let (labels, train) = ds.typing_examples(Split::Train)?;
    let mut rng = substream(cfg.seed, "head-init/typing");
    let head = TypingHead::new(&mut t.store, cfg.d_w, labels, &mut rng)?;
    let losses = finetune_typing(
        &t.model,
        &head,
        &mut t.store,
        &t.knowledge,
        &train,
        &ds.vocab,
        &cfg.finetune_config(),
        cfg.seed,
        |_, _| {},
    )?;
    let dev = evaluate_typing(&t.model, &head, &t.store, &t.knowledge, &ds.typing_examples(Split::Dev)?.1, &ds.vocab)?;
    let test = evaluate_typing(&t.model, &head, &t.store, &t.knowledge, &ds.typing_examples(Split::Test)?.1, &ds.vocab)?;
    let run = TypingRun {
        train_loss_last: losses.last().copied().unwrap_or(0.0),
        dev,
        test,
    };
    Ok((run, t, head))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
