//! Fine-tuning heads for entity typing and relation classification, and
//! the triple-selection metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::TripleId;
use crate::model::{Knowledge, Model};
use crate::nn::Linear;
use crate::numerics::{Adam, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::rng::substream;
use crate::sgnn::TripleScore;
use crate::text::{insert_markers, AnnotatedText, MarkerTask, Span, Vocabulary};

#[derive(Clone, Debug)]
pub struct TypingExample {
    /// Text with `[ENT]` already inserted.
    pub text: AnnotatedText,
    pub marker: usize,
    pub labels: BTreeSet<usize>,
}

impl TypingExample {
    pub fn new(at: &AnnotatedText, target: Span, labels: BTreeSet<usize>, vocab: &Vocabulary) -> Result<Self> {
        let text = insert_markers(at, vocab, MarkerTask::EntityTyping { target })?;
        let marker = text
            .position_of(vocab.specials().ent)
            .ok_or_else(|| Error::Marker("[ENT] missing".into()))?;
        Ok(Self { text, marker, labels })
    }
}

#[derive(Clone, Debug)]
pub struct RelationExample {
    /// Text with `[HD]` and `[TL]` already inserted.
    pub text: AnnotatedText,
    pub head_marker: usize,
    pub tail_marker: usize,
    pub label: usize,
}

impl RelationExample {
    pub fn new(at: &AnnotatedText, head: Span, tail: Span, label: usize, vocab: &Vocabulary) -> Result<Self> {
        let text = insert_markers(at, vocab, MarkerTask::RelationClassification { head, tail })?;
        let sp = vocab.specials();
        let find = |t, name: &str| {
            text.position_of(t)
                .ok_or_else(|| Error::Marker(format!("{name} missing")))
        };
        Ok(Self {
            head_marker: find(sp.hd, "[HD]")?,
            tail_marker: find(sp.tl, "[TL]")?,
            text,
            label,
        })
    }
}

fn check_marker(at: &AnnotatedText, pos: usize, want: crate::text::TokenId, name: &str) -> Result<()> {
    if at.tokens.get(pos) == Some(&want) {
        Ok(())
    } else {
        Err(Error::Marker(format!("{name} not found at position {pos}")))
    }
}

#[derive(Clone, Debug)]
pub struct TypingHead {
    pub linear: Linear,
    pub labels: Vec<String>,
}

impl TypingHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_w: usize, labels: Vec<String>, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "typing_head", d_w, labels.len(), true, rng)?,
            labels,
        })
    }

    /// Logits `[1, L]` from the fused `[ENT]` vector.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        model: &Model,
        knowledge: &Knowledge,
        ex: &TypingExample,
        vocab: &Vocabulary,
    ) -> Result<Var> {
        check_marker(&ex.text, ex.marker, vocab.specials().ent, "[ENT]")?;
        let out = model.forward_all(tape, store, knowledge, &ex.text)?;
        let v = tape.select_row(out.tokens, ex.marker)?;
        self.linear.forward(tape, store, v)
    }

    pub fn probabilities(
        &self,
        store: &ParamStore,
        model: &Model,
        knowledge: &Knowledge,
        ex: &TypingExample,
        vocab: &Vocabulary,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, model, knowledge, ex, vocab)?;
        let p = tape.sigmoid(l)?;
        Ok(tape.value(p).data().to_vec())
    }

    fn loss(&self, tape: &mut Tape, store: &ParamStore, model: &Model, knowledge: &Knowledge, ex: &TypingExample, vocab: &Vocabulary) -> Result<Var> {
        let l = self.logits(tape, store, model, knowledge, ex, vocab)?;
        let mut target = Tensor::zeros(1, self.labels.len());
        for &y in &ex.labels {
            target.set(0, y, 1.0);
        }
        tape.bce_with_logits(l, target)
    }
}

#[derive(Clone, Debug)]
pub struct RelationHead {
    pub linear: Linear,
    pub labels: Vec<String>,
}

impl RelationHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_w: usize, labels: Vec<String>, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "relation_head", 2 * d_w, labels.len(), true, rng)?,
            labels,
        })
    }

    /// The head input `concat([HD], [TL])`, `[1, 2·d_w]`.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        model: &Model,
        knowledge: &Knowledge,
        ex: &RelationExample,
        vocab: &Vocabulary,
    ) -> Result<Var> {
        let sp = vocab.specials();
        check_marker(&ex.text, ex.head_marker, sp.hd, "[HD]")?;
        check_marker(&ex.text, ex.tail_marker, sp.tl, "[TL]")?;
        let out = model.forward_all(tape, store, knowledge, &ex.text)?;
        let h = tape.select_row(out.tokens, ex.head_marker)?;
        let t = tape.select_row(out.tokens, ex.tail_marker)?;
        tape.concat_cols(&[h, t])
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        model: &Model,
        knowledge: &Knowledge,
        ex: &RelationExample,
        vocab: &Vocabulary,
    ) -> Result<Var> {
        let f = self.features(tape, store, model, knowledge, ex, vocab)?;
        self.linear.forward(tape, store, f)
    }

    pub fn probabilities(
        &self,
        store: &ParamStore,
        model: &Model,
        knowledge: &Knowledge,
        ex: &RelationExample,
        vocab: &Vocabulary,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, model, knowledge, ex, vocab)?;
        let p = tape.softmax(l)?;
        Ok(tape.value(p).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 300,
            batch_size: 16,
            clip_norm: 1.0,
            warmup_steps: 10,
        }
    }
}

fn train_loop<E: Sync>(
    store: &mut ParamStore,
    examples: &[E],
    cfg: &FinetuneConfig,
    seed: u64,
    name: &str,
    loss: impl Fn(&mut Tape, &ParamStore, &E) -> Result<Var> + Sync,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("finetune", "no training examples"));
    }
    let mut adam = Adam::new(cfg.lr).with_warmup(cfg.warmup_steps);
    let mut rng = substream(seed, &format!("finetune/{name}"));
    let mut order: Vec<usize> = Vec::new();
    let bs = cfg.batch_size.clamp(1, examples.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..examples.len()).collect();
            rand::seq::SliceRandom::shuffle(fresh.as_mut_slice(), &mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let shared: &ParamStore = store;
        let results: Vec<Result<(f64, ParamGrads)>> = idx
            .par_iter()
            .map(|&i| {
                let mut tape = Tape::new();
                let l = loss(&mut tape, shared, &examples[i])?;
                let v = tape.value(l).item();
                let scaled = tape.scale(l, 1.0 / bs as f64)?;
                Ok((v, tape.backward(scaled)?.into_params()))
            })
            .collect();
        let mut grads = ParamGrads::empty(store.len());
        let mut total = 0.0;
        for r in results {
            let (v, g) = r?;
            total += v;
            grads.accumulate(&g);
        }
        if cfg.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.clip_norm);
        }
        adam.step(store, &grads);
        let mean = total / bs as f64;
        on_step(step, mean);
        losses.push(mean);
    }
    Ok(losses)
}

#[allow(clippy::too_many_arguments)]
pub fn finetune_typing(
    model: &Model,
    head: &TypingHead,
    store: &mut ParamStore,
    knowledge: &Knowledge,
    examples: &[TypingExample],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
    on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    train_loop(
        store,
        examples,
        cfg,
        seed,
        "typing",
        |tape, s, ex| head.loss(tape, s, model, knowledge, ex, vocab),
        on_step,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn finetune_relation(
    model: &Model,
    head: &RelationHead,
    store: &mut ParamStore,
    knowledge: &Knowledge,
    examples: &[RelationExample],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
    on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    train_loop(
        store,
        examples,
        cfg,
        seed,
        "relation",
        |tape, s, ex| {
            let l = head.logits(tape, s, model, knowledge, ex, vocab)?;
            tape.cross_entropy(l, &[ex.label])
        },
        on_step,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypingMetrics {
    pub examples: usize,
    /// Fraction of examples whose predicted label set equals the gold set.
    pub exact_match: f64,
    pub micro_f1: f64,
}

/// Predicted labels are those with probability above 0.5.
pub fn evaluate_typing(
    model: &Model,
    head: &TypingHead,
    store: &ParamStore,
    knowledge: &Knowledge,
    examples: &[TypingExample],
    vocab: &Vocabulary,
) -> Result<TypingMetrics> {
    let preds: Vec<Vec<f64>> = examples
        .par_iter()
        .map(|ex| head.probabilities(store, model, knowledge, ex, vocab))
        .collect::<Result<_>>()?;
    let (mut exact, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, ex) in preds.iter().zip(examples) {
        let predicted: BTreeSet<usize> = p.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
        exact += usize::from(predicted == ex.labels);
        tp += predicted.intersection(&ex.labels).count();
        fp += predicted.difference(&ex.labels).count();
        fn_ += ex.labels.difference(&predicted).count();
    }
    Ok(TypingMetrics {
        examples: examples.len(),
        exact_match: exact as f64 / examples.len().max(1) as f64,
        micro_f1: prf(tp, fp, fn_).2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub examples: usize,
    pub accuracy: f64,
}

pub fn evaluate_relation(
    model: &Model,
    head: &RelationHead,
    store: &ParamStore,
    knowledge: &Knowledge,
    examples: &[RelationExample],
    vocab: &Vocabulary,
) -> Result<RelationMetrics> {
    let correct: Vec<bool> = examples
        .par_iter()
        .map(|ex| {
            let p = head.probabilities(store, model, knowledge, ex, vocab)?;
            let best = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            Ok(best == Some(ex.label))
        })
        .collect::<Result<_>>()?;
    Ok(RelationMetrics {
        examples: examples.len(),
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / examples.len().max(1) as f64,
    })
}

/// One line of `selection_gold.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGold {
    pub sentence_id: usize,
    pub mention_entity: String,
    pub relevant_triples: Vec<u32>,
}

/// Triple scores for one `(sentence, mention)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredMention {
    pub sentence_id: usize,
    pub mention_entity: String,
    pub scores: Vec<TripleScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

type Key = (usize, String);

/// Per annotated pair: summed weight per triple and the gold set.
fn align(scored: &[ScoredMention], gold: &[SelectionGold]) -> Result<Vec<(BTreeMap<TripleId, f64>, BTreeSet<TripleId>)>> {
    let by_key: HashMap<Key, &ScoredMention> = scored
        .iter()
        .map(|s| ((s.sentence_id, s.mention_entity.clone()), s))
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        let key = (g.sentence_id, g.mention_entity.clone());
        let Some(s) = by_key.get(&key) else {
            missing.push(format!("sentence {} mention {}: not scored", g.sentence_id, g.mention_entity));
            continue;
        };
        let mut weights: BTreeMap<TripleId, f64> = BTreeMap::new();
        for sc in &s.scores {
            *weights.entry(sc.triple).or_insert(0.0) += sc.weight;
        }
        let gold_set: BTreeSet<TripleId> = g.relevant_triples.iter().map(|&t| TripleId(t)).collect();
        for t in &gold_set {
            if !weights.contains_key(t) {
                missing.push(format!("sentence {} mention {}: triple {}", g.sentence_id, g.mention_entity, t.0));
            }
        }
        out.push((weights, gold_set));
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::GoldMismatch(missing))
    }
}

fn metrics_at(aligned: &[(BTreeMap<TripleId, f64>, BTreeSet<TripleId>)], threshold: f64) -> SelectionMetrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (weights, gold) in aligned {
        for (t, &w) in weights {
            match (w >= threshold, gold.contains(t)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    SelectionMetrics {
        threshold,
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

/// Micro-averaged P/R/F1 over every annotated pair; a triple is predicted
/// relevant when its weight is at least `threshold`.
pub fn eval_selection(scored: &[ScoredMention], gold: &[SelectionGold], threshold: f64) -> Result<SelectionMetrics> {
    Ok(metrics_at(&align(scored, gold)?, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best_f1: f64,
    pub curve: Vec<SelectionMetrics>,
}

/// Best-F1 threshold over `grid`; ties go to the smallest threshold.
pub fn sweep_threshold(scored: &[ScoredMention], gold: &[SelectionGold], grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep_threshold", "empty grid"));
    }
    let aligned = align(scored, gold)?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let curve: Vec<SelectionMetrics> = sorted.iter().map(|&t| metrics_at(&aligned, t)).collect();
    let mut best = curve[0];
    for m in &curve[1..] {
        if m.f1 > best.f1 {
            best = *m;
        }
    }
    Ok(SweepResult {
        best_threshold: best.threshold,
        best_f1: best.f1,
        curve,
    })
}

/// `0.00, 0.01, …, 1.00`
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Direction, EntityId, RelationId};

    fn sm(sid: usize, w: &[(u32, f64)]) -> ScoredMention {
        ScoredMention {
            sentence_id: sid,
            mention_entity: "m".into(),
            scores: w
                .iter()
                .map(|&(t, weight)| TripleScore {
                    triple: TripleId(t),
                    neighbor: EntityId(0),
                    relation: RelationId(0),
                    direction: Direction::Outgoing,
                    weight,
                })
                .collect(),
        }
    }

    fn gold(sid: usize, t: &[u32]) -> SelectionGold {
        SelectionGold {
            sentence_id: sid,
            mention_entity: "m".into(),
            relevant_triples: t.to_vec(),
        }
    }

    #[test]
    fn hand_confusion() {
        let s = [sm(0, &[(0, 0.4), (1, 0.4), (2, 0.1), (3, 0.1)])];
        let g = [gold(0, &[0, 2])];
        let m = eval_selection(&s, &g, 0.3).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(eval_selection(&s, &g, 0.0).unwrap().recall, 1.0);
    }

    #[test]
    fn missing_gold_triple_is_an_error() {
        let s = [sm(0, &[(0, 1.0)])];
        let err = eval_selection(&s, &[gold(0, &[0, 9])], 0.5).unwrap_err();
        assert!(matches!(err, Error::GoldMismatch(ref v) if v.len() == 1 && v[0].contains('9')));
    }

    #[test]
    fn sweep_finds_separator_and_prefers_small_ties() {
        let s = [sm(0, &[(0, 0.7), (1, 0.2), (2, 0.1)])];
        let g = [gold(0, &[0])];
        let r = sweep_threshold(&s, &g, &[0.0, 0.5, 0.6, 0.7, 0.8]).unwrap();
        assert_eq!(r.best_threshold, 0.5);
        assert_eq!(r.best_f1, 1.0);
        assert_eq!(sweep_threshold(&s, &g, &[0.9]).unwrap().best_threshold, 0.9);
    }
}
