//! TransE entity/relation embeddings: trained once, then frozen as the static
//! inputs of the graph encoder.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::numerics::checkpoint::{self, Manifest};
use crate::numerics::{ParamId, ParamStore, Sgd, Tape, Tensor, Var};
use crate::rng::{hash_str, substream};

pub const CHECKPOINT_KIND: &str = "transe";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entities: Tensor,
    relations: Tensor,
}

impl EmbeddingTable {
    pub fn new(entities: Tensor, relations: Tensor) -> Result<Self> {
        let dim = entities.cols();
        if relations.cols() != dim {
            return Err(Error::ShapeMismatch {
                op: "embedding_table",
                left: entities.shape().to_vec(),
                right: relations.shape().to_vec(),
            });
        }
        Ok(Self {
            dim,
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn entity(&self, e: EntityId) -> Result<&[f64]> {
        if e.index() >= self.entities.rows() {
            return Err(Error::MissingEmbedding {
                kind: "entity",
                name: format!("#{}", e.0),
            });
        }
        Ok(self.entities.row_slice(e.index()))
    }

    pub fn relation(&self, r: RelationId) -> Result<&[f64]> {
        if r.index() >= self.relations.rows() {
            return Err(Error::MissingEmbedding {
                kind: "relation",
                name: format!("#{}", r.0),
            });
        }
        Ok(self.relations.row_slice(r.index()))
    }

    pub fn entity_matrix(&self) -> &Tensor {
        &self.entities
    }

    pub fn relation_matrix(&self) -> &Tensor {
        &self.relations
    }

    /// Copy with one entity vector replaced; used for ablation checks.
    pub fn with_entity(&self, e: EntityId, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "with_entity",
                left: vec![self.dim],
                right: vec![v.len()],
            });
        }
        let mut out = self.clone();
        let d = self.dim;
        out.entities.data_mut()[e.index() * d..(e.index() + 1) * d].copy_from_slice(v);
        Ok(out)
    }

    pub fn distance(&self, t: &Triple) -> Result<f64> {
        transe_distance(
            self.entity(t.head)?,
            self.relation(t.relation)?,
            self.entity(t.tail)?,
        )
    }
}

/// `‖h + r − t‖₂`
pub fn transe_distance(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(Error::ShapeMismatch {
            op: "transe_distance",
            left: vec![h.len(), r.len()],
            right: vec![t.len()],
        });
    }
    Ok(h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| {
            let d = h + r - t;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub neg_per_pos: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            margin: 1.0,
            lr: 0.01,
            epochs: 200,
            neg_per_pos: 1,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TransEReport {
    pub epoch_losses: Vec<f64>,
    pub skipped_negatives: usize,
}

/// A positive triple and one corruption of it.
#[derive(Clone, Copy, Debug)]
pub struct TrainingPair {
    pub positive: Triple,
    pub negative: Triple,
}

/// Mean over pairs of `max(0, margin + d(pos) − d(neg))`, recorded on `tape`.
pub fn hinge_loss(
    tape: &mut Tape,
    entities: Var,
    relations: Var,
    pairs: &[TrainingPair],
    margin: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("hinge_loss", "no training pairs"));
    }
    let idx = |f: &dyn Fn(&TrainingPair) -> usize| -> Rc<[usize]> { pairs.iter().map(f).collect() };
    let distance = |tape: &mut Tape, h: Rc<[usize]>, r: Rc<[usize]>, t: Rc<[usize]>| -> Result<Var> {
        let hv = tape.select_rows(entities, h)?;
        let rv = tape.select_rows(relations, r)?;
        let tv = tape.select_rows(entities, t)?;
        let s = tape.add(hv, rv)?;
        let diff = tape.sub(s, tv)?;
        tape.row_norms(diff)
    };
    let pos = distance(
        tape,
        idx(&|p| p.positive.head.index()),
        idx(&|p| p.positive.relation.index()),
        idx(&|p| p.positive.tail.index()),
    )?;
    let neg = distance(
        tape,
        idx(&|p| p.negative.head.index()),
        idx(&|p| p.negative.relation.index()),
        idx(&|p| p.negative.tail.index()),
    )?;
    let gap = tape.sub(pos, neg)?;
    let margin = tape.constant(Tensor::filled(pairs.len(), 1, margin))?;
    let shifted = tape.add(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Replaces head or tail (fair coin) with a uniform entity, rejecting
/// corruptions that are themselves true triples.
pub fn corrupt<R: Rng + ?Sized>(kg: &KnowledgeGraph, t: &Triple, rng: &mut R) -> Option<Triple> {
    let n = kg.num_entities() as u32;
    if n < 2 {
        return None;
    }
    for _ in 0..100 {
        let e = EntityId(rng.gen_range(0..n));
        let cand = if rng.gen_bool(0.5) {
            Triple { head: e, ..*t }
        } else {
            Triple { tail: e, ..*t }
        };
        if cand != *t && !kg.contains(&cand) {
            return Some(cand);
        }
    }
    None
}

fn renormalize_rows(t: &mut Tensor) {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Seeded initial table: uniform in `±6/√dim`, every row scaled to unit norm.
pub fn init_table(kg: &KnowledgeGraph, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = substream(seed, "transe-init");
    let bound = 6.0 / (dim as f64).sqrt();
    let mut entities = Tensor::uniform(kg.num_entities(), dim, bound, &mut rng);
    let mut relations = Tensor::uniform(kg.num_relations(), dim, bound, &mut rng);
    normalize_rows(&mut entities);
    normalize_rows(&mut relations);
    EmbeddingTable {
        dim,
        entities,
        relations,
    }
}

pub fn train_transe(kg: &KnowledgeGraph, cfg: &TransEConfig) -> Result<(EmbeddingTable, TransEReport)> {
    if cfg.dim == 0 {
        return Err(Error::Config("transe dim must be positive".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("transe epochs must be positive".into()));
    }
    if cfg.margin <= 0.0 {
        return Err(Error::Config("transe margin must be positive".into()));
    }
    if kg.num_triples() == 0 {
        return Err(Error::Config("cannot train TransE on an empty graph".into()));
    }
    let init = init_table(kg, cfg.dim, cfg.seed);
    let mut store = ParamStore::new();
    let ent_id: ParamId = store.add("entities", init.entities)?;
    let rel_id: ParamId = store.add("relations", init.relations)?;
    let sgd = Sgd { lr: cfg.lr };
    let mut rng = substream(cfg.seed, "transe-sampling");
    let mut order: Vec<usize> = (0..kg.num_triples()).collect();
    let mut report = TransEReport::default();
    let batch = cfg.batch_size.max(1);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let mut pairs = Vec::with_capacity(chunk.len() * cfg.neg_per_pos);
            for &i in chunk {
                let pos = kg.triples()[i];
                for _ in 0..cfg.neg_per_pos.max(1) {
                    match corrupt(kg, &pos, &mut rng) {
                        Some(negative) => pairs.push(TrainingPair {
                            positive: pos,
                            negative,
                        }),
                        None => report.skipped_negatives += 1,
                    }
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let e = tape.param(&store, ent_id)?;
            let r = tape.param(&store, rel_id)?;
            let loss = hinge_loss(&mut tape, e, r, &pairs, cfg.margin)?;
            total += tape.value(loss).item() * pairs.len() as f64;
            count += pairs.len();
            let grads = tape.backward(loss)?;
            sgd.step(&mut store, grads.params());
        }
        renormalize_rows(store.get_mut(ent_id));
        report
            .epoch_losses
            .push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    let table = EmbeddingTable::new(store.get(ent_id).clone(), store.get(rel_id).clone())?;
    Ok((table, report))
}

/// Mean over `triples` of the 1-based rank of the true tail among all
/// entities by `d(h + r, e)`; ties resolved in the tail's favour.
pub fn mean_tail_rank(table: &EmbeddingTable, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("mean_tail_rank", "no triples"));
    }
    let mut total = 0usize;
    for t in triples {
        let h = table.entity(t.head)?;
        let r = table.relation(t.relation)?;
        let truth = transe_distance(h, r, table.entity(t.tail)?)?;
        let mut rank = 1;
        for e in 0..table.num_entities() {
            let d = transe_distance(h, r, table.entities.row_slice(e))?;
            if d < truth {
                rank += 1;
            }
        }
        total += rank;
    }
    Ok(total as f64 / triples.len() as f64)
}

fn vocab_hash(kg: &KnowledgeGraph) -> String {
    let mut s = kg.entity_names().join("\n");
    s.push('\u{1}');
    s.push_str(&kg.relation_names().join("\n"));
    hash_str(&s)
}

pub fn save(table: &EmbeddingTable, kg: &KnowledgeGraph, seed: u64, dir: &Path) -> Result<()> {
    if table.num_entities() != kg.num_entities() || table.num_relations() != kg.num_relations() {
        return Err(Error::invalid("transe::save", "table does not match graph vocabulary"));
    }
    let mut entries = Vec::with_capacity(kg.num_entities() + kg.num_relations());
    for (i, name) in kg.entity_names().iter().enumerate() {
        entries.push((format!("entity/{name}"), Tensor::row(table.entities.row_vec(i))));
    }
    for (i, name) in kg.relation_names().iter().enumerate() {
        entries.push((format!("relation/{name}"), Tensor::row(table.relations.row_vec(i))));
    }
    let manifest = Manifest::new(CHECKPOINT_KIND, seed, hash_str(&format!("dim={}", table.dim)))
        .with_hash("vocab", vocab_hash(kg))
        .with_hash("kg", kg.content_hash())
        .with_meta("dim", table.dim.into());
    checkpoint::save(dir, &manifest, &entries)
}

/// Loads a table for `kg`. Every entity and relation of `kg` must be present
/// with dimension `expected_dim`.
pub fn load(dir: &Path, kg: &KnowledgeGraph, expected_dim: usize) -> Result<(EmbeddingTable, Manifest)> {
    let (manifest, entries) = checkpoint::load(dir)?;
    manifest.require_kind(CHECKPOINT_KIND)?;
    let map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    let fetch = |kind: &'static str, name: &str| -> Result<Vec<f64>> {
        let t = map.get(&format!("{kind}/{name}")).ok_or_else(|| Error::MissingEmbedding {
            kind,
            name: name.to_string(),
        })?;
        if t.len() != expected_dim {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: format!(
                    "{kind} `{name}` has dim {}, config expects {expected_dim}",
                    t.len()
                ),
            });
        }
        Ok(t.data().to_vec())
    };
    let mut ent = Vec::with_capacity(kg.num_entities() * expected_dim);
    for name in kg.entity_names() {
        ent.extend(fetch("entity", name)?);
    }
    let mut rel = Vec::with_capacity(kg.num_relations() * expected_dim);
    for name in kg.relation_names() {
        rel.extend(fetch("relation", name)?);
    }
    let table = EmbeddingTable::new(
        Tensor::matrix(kg.num_entities(), expected_dim, ent)?,
        Tensor::matrix(kg.num_relations(), expected_dim, rel)?,
    )?;
    Ok((table, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn distance_examples() {
        let h = [0.5, -1.0, 2.0];
        let r = [1.0, 1.0, -1.0];
        let t: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a + b).collect();
        assert_eq!(transe_distance(&h, &r, &t).unwrap(), 0.0);
        assert_eq!(transe_distance(&[0.0; 3], &[0.0; 3], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!(transe_distance(&[0.0; 2], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut kg = KnowledgeGraph::new();
        kg.add_triple("a", "r", "b").unwrap();
        let cfg = TransEConfig {
            dim: 0,
            ..Default::default()
        };
        assert!(train_transe(&kg, &cfg).is_err());
        let cfg = TransEConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_transe(&kg, &cfg).is_err());
    }

    #[test]
    fn two_entity_graph_reaches_zero_loss() {
        let mut kg = KnowledgeGraph::new();
        kg.add_triple("a", "r", "b").unwrap();
        let cfg = TransEConfig {
            dim: 8,
            epochs: 400,
            lr: 0.05,
            batch_size: 1,
            seed: 5,
            ..Default::default()
        };
        let (table, report) = train_transe(&kg, &cfg).unwrap();
        assert_eq!(*report.epoch_losses.last().unwrap(), 0.0);
        let pos = table.distance(&kg.triples()[0]).unwrap();
        for neg in [
            Triple { head: EntityId(1), ..kg.triples()[0] },
            Triple { tail: EntityId(0), ..kg.triples()[0] },
        ] {
            assert!(cfg.margin + pos - table.distance(&neg).unwrap() <= 0.0);
        }
    }

    #[test]
    fn entity_norms_bounded_after_training() {
        let mut kg = KnowledgeGraph::new();
        for i in 0..6 {
            kg.add_triple(&format!("e{i}"), "r", &format!("e{}", (i + 1) % 6)).unwrap();
        }
        let cfg = TransEConfig {
            dim: 4,
            epochs: 5,
            lr: 0.5,
            ..Default::default()
        };
        let (table, _) = train_transe(&kg, &cfg).unwrap();
        for i in 0..6 {
            let n: f64 = table.entity(EntityId(i)).unwrap().iter().map(|v| v * v).sum();
            assert!(n.sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn hinge_gradient_checks() {
        let mut kg = KnowledgeGraph::new();
        kg.add_triple("a", "r", "b").unwrap();
        kg.add_triple("b", "s", "c").unwrap();
        kg.add_triple("c", "r", "d").unwrap();
        let table = init_table(&kg, 5, 11);
        let mut store = ParamStore::new();
        let e = store.add("e", table.entities.map(|v| v * 0.3)).unwrap();
        let r = store.add("r", table.relations.clone()).unwrap();
        let mut rng = substream(2, "t");
        let pairs: Vec<TrainingPair> = kg
            .triples()
            .iter()
            .map(|t| TrainingPair {
                positive: *t,
                negative: corrupt(&kg, t, &mut rng).unwrap(),
            })
            .collect();
        let report = grad_check(&store, 1e-5, 1e-4, |s, tape| {
            let ev = tape.param(s, e)?;
            let rv = tape.param(s, r)?;
            hinge_loss(tape, ev, rv, &pairs, 2.0)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
