//! Masked-token, entity-alignment and next-sentence objectives, batch
//! corruption and the pre-training loop.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::model::{Knowledge, Model};
use crate::nn::Linear;
use crate::numerics::{Adam, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::rng::substream;
use crate::text::{AnnotatedText, TokenId, Vocabulary, RESERVED};
use crate::transe::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// MLM + NSP + dEA
    BertStyle,
    /// MLM + dEA
    #[default]
    RobertaStyle,
}

impl PretrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bert_style" | "bert" => Ok(Self::BertStyle),
            "roberta_style" | "roberta" => Ok(Self::RobertaStyle),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BertStyle => "bert_style",
            Self::RobertaStyle => "roberta_style",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mlm_rate: f64,
    /// Of the selected positions: fraction replaced by `[MASK]`, then by a
    /// random token; the rest keep their token.
    pub mlm_mask_frac: f64,
    pub mlm_random_frac: f64,
    pub dea_mask_rate: f64,
    pub dea_replace_rate: f64,
    pub dea_negatives: usize,
    /// Withhold the alignment of a mention whose tokens were MLM-selected.
    pub drop_masked_mentions: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mlm_rate: 0.15,
            mlm_mask_frac: 0.8,
            mlm_random_frac: 0.1,
            dea_mask_rate: 0.15,
            dea_replace_rate: 0.05,
            dea_negatives: 15,
            drop_masked_mentions: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentState {
    Kept,
    /// Hidden by the alignment-denoising corruption.
    Masked,
    /// Injected with a random entity instead of the true one.
    Replaced(EntityId),
    /// Hidden because MLM selected one of the mention's tokens.
    MlmDropped,
}

#[derive(Clone, Debug)]
pub struct MaskedExample {
    pub input: AnnotatedText,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<TokenId>,
    /// One per mention of `input`.
    pub alignments: Vec<AlignmentState>,
    /// Per mention, candidate entities; the true entity is first.
    pub candidates: Vec<Vec<EntityId>>,
    /// 1 when the second half follows the first.
    pub nsp_label: Option<usize>,
}

impl MaskedExample {
    /// `(anchor token, injected entity)` for every visible alignment.
    pub fn injections(&self) -> Vec<(usize, EntityId)> {
        self.input
            .mentions
            .iter()
            .zip(&self.alignments)
            .filter_map(|(m, a)| match a {
                AlignmentState::Kept => Some((m.span.start, m.entity)),
                AlignmentState::Replaced(r) => Some((m.span.start, *r)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub examples: Vec<MaskedExample>,
}

impl PretrainBatch {
    pub fn num_alignments(&self) -> usize {
        self.examples.iter().map(|e| e.alignments.len()).sum()
    }

    /// Fraction of alignments hidden by the denoising corruption alone.
    pub fn dea_mask_rate(&self) -> f64 {
        let n = self.num_alignments();
        let masked = self
            .examples
            .iter()
            .flat_map(|e| &e.alignments)
            .filter(|a| matches!(a, AlignmentState::Masked))
            .count();
        if n == 0 {
            0.0
        } else {
            masked as f64 / n as f64
        }
    }

    pub fn mlm_rate(&self, vocab: &Vocabulary) -> f64 {
        let eligible: usize = self
            .examples
            .iter()
            .map(|e| mlm_eligible(&e.input, vocab).len())
            .sum();
        let chosen: usize = self.examples.iter().map(|e| e.mlm_positions.len()).sum();
        chosen as f64 / eligible.max(1) as f64
    }
}

fn mlm_eligible(at: &AnnotatedText, vocab: &Vocabulary) -> Vec<usize> {
    let sp = vocab.specials();
    (0..at.len())
        .filter(|&i| at.attention_mask[i] && !sp.is_special(at.tokens[i]))
        .collect()
}

/// Corrupts one sentence for pre-training.
pub fn mask_example<R: Rng + ?Sized>(
    at: &AnnotatedText,
    vocab: &Vocabulary,
    num_entities: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample> {
    let sp = vocab.specials();
    let eligible = mlm_eligible(at, vocab);
    let mut input = at.clone();
    let mut mlm_positions = Vec::new();
    let mut mlm_targets = Vec::new();
    if !eligible.is_empty() {
        let count = ((cfg.mlm_rate * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
        let mut picked: Vec<usize> = sample(rng, eligible.len(), count).into_iter().map(|i| eligible[i]).collect();
        picked.sort_unstable();
        let first_word = RESERVED.len();
        for p in picked {
            mlm_positions.push(p);
            mlm_targets.push(at.tokens[p]);
            let u: f64 = rng.gen();
            if u < cfg.mlm_mask_frac {
                input.tokens[p] = sp.mask;
            } else if u < cfg.mlm_mask_frac + cfg.mlm_random_frac && vocab.len() > first_word {
                input.tokens[p] = TokenId(rng.gen_range(first_word..vocab.len()) as u32);
            }
        }
    }
    let mut alignments = Vec::with_capacity(at.mentions.len());
    let mut candidates = Vec::with_capacity(at.mentions.len());
    for m in &at.mentions {
        let hit = mlm_positions.iter().any(|&p| p >= m.span.start && p < m.span.end);
        let u: f64 = rng.gen();
        let state = if u < cfg.dea_mask_rate {
            AlignmentState::Masked
        } else if u < cfg.dea_mask_rate + cfg.dea_replace_rate && num_entities > 1 {
            let mut r = rng.gen_range(0..num_entities - 1);
            if r >= m.entity.index() {
                r += 1;
            }
            AlignmentState::Replaced(EntityId(r as u32))
        } else {
            AlignmentState::Kept
        };
        let state = if hit && cfg.drop_masked_mentions && state != AlignmentState::Masked {
            AlignmentState::MlmDropped
        } else {
            state
        };
        alignments.push(state);
        let others = num_entities.saturating_sub(1);
        let mut cands = vec![m.entity];
        cands.extend(sample(rng, others, cfg.dea_negatives.min(others)).into_iter().map(|i| {
            let i = if i >= m.entity.index() { i + 1 } else { i };
            EntityId(i as u32)
        }));
        candidates.push(cands);
    }
    Ok(MaskedExample {
        input,
        mlm_positions,
        mlm_targets,
        alignments,
        candidates,
        nsp_label: None,
    })
}

/// Half the pairs are consecutive sentences (label 1), half a random other
/// sentence (label 0).
pub fn nsp_pairs<R: Rng + ?Sized>(
    texts: &[&AnnotatedText],
    all: &[AnnotatedText],
    positions: &[usize],
    sep: TokenId,
    rng: &mut R,
) -> Result<Vec<(AnnotatedText, usize)>> {
    texts
        .iter()
        .zip(positions)
        .map(|(a, &i)| {
            let next = i + 1 < all.len() && rng.gen_bool(0.5);
            let (b, label) = if next {
                (&all[i + 1], 1)
            } else {
                let mut j = rng.gen_range(0..all.len());
                if all.len() > 2 {
                    while j == i + 1 {
                        j = rng.gen_range(0..all.len());
                    }
                }
                (&all[j], usize::from(j == i + 1))
            };
            Ok((AnnotatedText::pair(a, b, sep)?, label))
        })
        .collect()
}

/// Mean cross-entropy over the vocabulary at `positions`.
pub fn mlm_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Linear,
    tokens: Var,
    positions: &[usize],
    targets: &[TokenId],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::invalid("mlm_loss", "no masked positions"));
    }
    let rows = tape.select_rows(tokens, Rc::from(positions))?;
    let logits = head.forward(tape, store, rows)?;
    let t: Vec<usize> = targets.iter().map(|t| t.index()).collect();
    tape.cross_entropy(logits, &t)
}

/// Mean cross-entropy of each row of `projected` against its candidate
/// set, logits being dot products with the candidates' TransE vectors.
pub fn dea_loss(
    tape: &mut Tape,
    projected: Var,
    table: &EmbeddingTable,
    candidates: &[Vec<EntityId>],
    truths: &[EntityId],
) -> Result<Var> {
    let (a, d) = tape.shape(projected);
    if a == 0 || candidates.len() != a || truths.len() != a {
        return Err(Error::invalid(
            "dea_loss",
            format!("{a} rows, {} candidate sets, {} truths", candidates.len(), truths.len()),
        ));
    }
    let c = candidates[0].len();
    let mut targets = Vec::with_capacity(a);
    let mut cand_t = Vec::with_capacity(a * d * c);
    for (cands, truth) in candidates.iter().zip(truths) {
        if cands.len() != c {
            return Err(Error::invalid("dea_loss", "candidate sets differ in size"));
        }
        let pos = cands
            .iter()
            .position(|e| e == truth)
            .ok_or_else(|| Error::invalid("dea_loss", format!("candidate set lacks true entity #{}", truth.0)))?;
        targets.push(pos);
        for e in cands {
            cand_t.extend_from_slice(table.entity(*e)?);
        }
    }
    let mut rows = Vec::with_capacity(a);
    for i in 0..a {
        let p = tape.select_row(projected, i)?;
        let ct = Tensor::matrix(c, d, cand_t[i * c * d..(i + 1) * c * d].to_vec())?.transpose()?;
        let ct = tape.constant(ct)?;
        rows.push(tape.matmul(p, ct)?);
    }
    let logits = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    tape.cross_entropy(logits, &targets)
}

pub fn nsp_loss(tape: &mut Tape, store: &ParamStore, head: &Linear, cls: Var, label: usize) -> Result<Var> {
    let logits = head.forward(tape, store, cls)?;
    tape.cross_entropy(logits, &[label])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub mlm: Option<f64>,
    pub dea: Option<f64>,
    pub nsp: Option<f64>,
}

fn need(part: Option<f64>, name: &str) -> Result<f64> {
    part.ok_or_else(|| Error::invalid("total_loss", format!("missing {name} part")))
}

/// Unweighted sum of the parts required by `mode`.
pub fn total_loss(parts: &LossParts, mode: PretrainMode) -> Result<f64> {
    let base = need(parts.mlm, "mlm")? + need(parts.dea, "dea")?;
    Ok(match mode {
        PretrainMode::RobertaStyle => base,
        PretrainMode::BertStyle => base + need(parts.nsp, "nsp")?,
    })
}

/// Per-example loss variables.
pub struct ExampleLosses {
    pub mlm: Option<Var>,
    pub dea: Option<Var>,
    pub nsp: Option<Var>,
}

pub fn example_losses(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    knowledge: &Knowledge,
    ex: &MaskedExample,
) -> Result<ExampleLosses> {
    let out = model.forward(tape, store, knowledge, &ex.input, &ex.injections())?;
    let mlm = if ex.mlm_positions.is_empty() {
        None
    } else {
        Some(mlm_loss(tape, store, &model.mlm_head, out.tokens, &ex.mlm_positions, &ex.mlm_targets)?)
    };
    let dea = if ex.input.mentions.is_empty() {
        None
    } else {
        let anchors: Rc<[usize]> = ex.input.mentions.iter().map(|m| m.span.start).collect();
        let rows = tape.select_rows(out.tokens, anchors)?;
        let projected = model.dea_proj.forward(tape, store, rows)?;
        let truths: Vec<EntityId> = ex.input.mentions.iter().map(|m| m.entity).collect();
        Some(dea_loss(tape, projected, &knowledge.table, &ex.candidates, &truths)?)
    };
    let nsp = match ex.nsp_label {
        Some(label) => {
            let cls = tape.select_row(out.tokens, 0)?;
            Some(nsp_loss(tape, store, &model.nsp_head, cls, label)?)
        }
        None => None,
    };
    Ok(ExampleLosses { mlm, dea, nsp })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub masking: MaskingConfig,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::RobertaStyle,
            masking: MaskingConfig::default(),
            lr: 1e-3,
            warmup_steps: 10,
            steps: 300,
            batch_size: 16,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L_mlm")]
    pub l_mlm: f64,
    #[serde(rename = "L_dea")]
    pub l_dea: f64,
    #[serde(rename = "L_nsp", skip_serializing_if = "Option::is_none")]
    pub l_nsp: Option<f64>,
    pub total: f64,
}

/// Builds the corrupted batch for `step` from the sentences at `positions`.
pub fn build_batch(
    texts: &[AnnotatedText],
    positions: &[usize],
    vocab: &Vocabulary,
    num_entities: usize,
    cfg: &PretrainConfig,
    seed: u64,
    step: usize,
) -> Result<PretrainBatch> {
    let mut rng = substream(seed, &format!("masking/{step}"));
    let chosen: Vec<&AnnotatedText> = positions.iter().map(|&i| &texts[i]).collect();
    let examples = match cfg.mode {
        PretrainMode::RobertaStyle => chosen
            .iter()
            .map(|at| mask_example(at, vocab, num_entities, &cfg.masking, &mut rng))
            .collect::<Result<Vec<_>>>()?,
        PretrainMode::BertStyle => {
            let pairs = nsp_pairs(&chosen, texts, positions, vocab.specials().sep, &mut rng)?;
            pairs
                .into_iter()
                .map(|(at, label)| {
                    let mut ex = mask_example(&at, vocab, num_entities, &cfg.masking, &mut rng)?;
                    ex.nsp_label = Some(label);
                    Ok(ex)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(PretrainBatch { examples })
}

/// Mean losses over the batch and their gradient.
pub fn batch_gradient(
    model: &Model,
    store: &ParamStore,
    knowledge: &Knowledge,
    batch: &PretrainBatch,
    mode: PretrainMode,
) -> Result<(LossParts, f64, ParamGrads)> {
    let n_mlm = batch.examples.iter().filter(|e| !e.mlm_positions.is_empty()).count();
    let n_dea = batch.examples.iter().filter(|e| !e.input.mentions.is_empty()).count();
    let n_nsp = batch.examples.iter().filter(|e| e.nsp_label.is_some()).count();
    if n_mlm == 0 {
        return Err(Error::invalid("pretrain", "batch has no masked tokens"));
    }
    if n_dea == 0 {
        return Err(Error::invalid("pretrain", "batch has no entity alignments"));
    }
    let results: Vec<Result<([f64; 3], ParamGrads)>> = batch
        .examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let l = example_losses(&mut tape, store, model, knowledge, ex)?;
            let mut terms = Vec::new();
            let mut vals = [0.0; 3];
            for (k, (part, n)) in [(l.mlm, n_mlm), (l.dea, n_dea), (l.nsp, n_nsp)].into_iter().enumerate() {
                if let Some(v) = part {
                    vals[k] = tape.value(v).item();
                    terms.push(tape.scale(v, 1.0 / n as f64)?);
                }
            }
            let mut obj = terms[0];
            for &t in &terms[1..] {
                obj = tape.add(obj, t)?;
            }
            Ok((vals, tape.backward(obj)?.into_params()))
        })
        .collect();
    let mut grads = ParamGrads::empty(store.len());
    let mut sums = [0.0; 3];
    for r in results {
        let (vals, g) = r?;
        for k in 0..3 {
            sums[k] += vals[k];
        }
        grads.accumulate(&g);
    }
    let parts = LossParts {
        mlm: Some(sums[0] / n_mlm as f64),
        dea: Some(sums[1] / n_dea as f64),
        nsp: (n_nsp > 0).then(|| sums[2] / n_nsp as f64),
    };
    let total = total_loss(&parts, mode)?;
    Ok((parts, total, grads))
}

/// Runs `cfg.steps` optimizer steps over `texts`, calling `on_step` after
/// each.
pub fn pretrain(
    model: &Model,
    store: &mut ParamStore,
    knowledge: &Knowledge,
    texts: &[AnnotatedText],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if texts.is_empty() {
        return Err(Error::invalid("pretrain", "empty corpus"));
    }
    let mut adam = Adam::new(cfg.lr).with_warmup(cfg.warmup_steps);
    let mut order_rng = substream(seed, "sampling");
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.clamp(1, texts.len());
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..texts.len()).collect();
            rand::seq::SliceRandom::shuffle(fresh.as_mut_slice(), &mut order_rng);
            order.extend(fresh);
        }
        let positions: Vec<usize> = order.drain(..bs).collect();
        let batch = build_batch(texts, &positions, vocab, knowledge.kg.num_entities(), cfg, seed, step)?;
        let (parts, total, mut grads) = batch_gradient(model, store, knowledge, &batch, cfg.mode)?;
        if cfg.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.clip_norm);
        }
        adam.step(store, &grads);
        let log = StepLog {
            step,
            l_mlm: parts.mlm.unwrap_or(0.0),
            l_dea: parts.dea.unwrap_or(0.0),
            l_nsp: parts.nsp,
            total,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_modes() {
        let p = LossParts {
            mlm: Some(0.5),
            dea: Some(0.25),
            nsp: None,
        };
        assert_eq!(total_loss(&p, PretrainMode::RobertaStyle).unwrap(), 0.75);
        assert!(total_loss(&p, PretrainMode::BertStyle).is_err());
        let z = LossParts {
            mlm: Some(0.0),
            dea: Some(0.0),
            nsp: Some(0.0),
        };
        assert_eq!(total_loss(&z, PretrainMode::BertStyle).unwrap(), 0.0);
        let b = LossParts { nsp: Some(0.3), ..p };
        assert_eq!(
            total_loss(&b, PretrainMode::BertStyle).unwrap(),
            total_loss(&p, PretrainMode::RobertaStyle).unwrap() + 0.3
        );
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dea_hand_values() {
        let t = table();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row(vec![1.0, 0.0])).unwrap();
        let e = |i| EntityId(i);
        let l = dea_loss(&mut tape, p, &t, &[vec![e(0)]], &[e(0)]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = dea_loss(&mut tape, p, &t, &[vec![e(0), e(1), e(2)]], &[e(0)]).unwrap();
        let want = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        let z = tape.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
        let l = dea_loss(&mut tape, z, &t, &[vec![e(0), e(1), e(2)]], &[e(1)]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(dea_loss(&mut tape, p, &t, &[vec![e(1), e(2)]], &[e(0)]).is_err());
    }
}
