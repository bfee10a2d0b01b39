//! Text-conditioned graph attention over a mention's raw knowledge context.
//!
//! Static TransE vectors feed every layer; the attention query is a
//! projection of the sentence's `[CLS]` vector, so the same sub-graph is
//! summarised differently for different sentences.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, Neighbor, RawContext, RelationId, TripleId};
use crate::nn::Linear;
use crate::numerics::tape::softmax_slice;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::transe::EmbeddingTable;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    Semantic,
    /// Uniform weights over neighbors.
    MeanPool,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Semantic => "semantic",
            AttentionVariant::MeanPool => "mean_pool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "mean_pool" | "mean-pool" => Ok(Self::MeanPool),
            _ => Err(Error::Config(format!("unknown attention variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SGnnConfig {
    pub d_k: usize,
    pub d_w: usize,
    pub d_a: usize,
    pub layers: usize,
    pub attention: AttentionVariant,
    /// Divide logits by √d_a.
    pub scaled_logits: bool,
    /// Add the center's own static vector to its final embedding.
    pub center_residual: bool,
}

impl SGnnConfig {
    pub fn new(d_k: usize, d_w: usize, layers: usize) -> Self {
        Self {
            d_k,
            d_w,
            d_a: d_k,
            layers,
            attention: AttentionVariant::Semantic,
            scaled_logits: false,
            center_residual: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SGnnLayer {
    /// `[2·d_k → d_k]`, no bias.
    pub w: Linear,
    /// `[d_w → d_a]`
    pub query: Linear,
    /// `[d_k → d_a]`
    pub key: Linear,
}

#[derive(Clone, Debug)]
pub struct SGnnStack {
    pub config: SGnnConfig,
    pub layers: Vec<SGnnLayer>,
}

fn check_len(op: &'static str, v: &[f64], want: usize) -> Result<()> {
    if v.len() == want {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: vec![1, v.len()],
            right: vec![1, want],
        })
    }
}

impl SGnnLayer {
    /// `W·[n ± r ; n_prev]` with `+` for incoming edges.
    pub fn neighbor_message(
        &self,
        store: &ParamStore,
        n_static: &[f64],
        r_static: &[f64],
        n_prev: &[f64],
        direction: Direction,
    ) -> Result<Vec<f64>> {
        let d = self.w.out_dim;
        check_len("neighbor_message", n_static, d)?;
        check_len("neighbor_message", r_static, d)?;
        check_len("neighbor_message", n_prev, d)?;
        let sign = direction.sign();
        let mut x: Vec<f64> = n_static.iter().zip(r_static).map(|(n, r)| n + sign * r).collect();
        x.extend_from_slice(n_prev);
        self.w.apply(store, &x)
    }

    /// `tanh(Ŵ·s + b̂)`
    pub fn query(&self, store: &ParamStore, s: &[f64]) -> Result<Vec<f64>> {
        check_len("query", s, self.query.in_dim)?;
        Ok(self.query.apply(store, s)?.into_iter().map(f64::tanh).collect())
    }

    /// `W̃·(±r) + b̃`
    pub fn key(&self, store: &ParamStore, r_static: &[f64], direction: Direction) -> Result<Vec<f64>> {
        check_len("key", r_static, self.key.in_dim)?;
        let sign = direction.sign();
        let r: Vec<f64> = r_static.iter().map(|v| sign * v).collect();
        self.key.apply(store, &r)
    }
}

/// Softmax-weighted sum of `messages` with logits `kᵀq`. Returns the
/// weights and the aggregate.
pub fn attend(messages: &[Vec<f64>], keys: &[Vec<f64>], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = attention_logits(keys, q, false)?;
    if messages.len() != keys.len() {
        return Err(Error::invalid(
            "attend",
            format!("{} messages but {} keys", messages.len(), keys.len()),
        ));
    }
    let mut weights = vec![0.0; logits.len()];
    softmax_slice(&logits, None, &mut weights);
    Ok((weights.clone(), weighted_sum(messages, &weights)?))
}

fn weighted_sum(messages: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let d = messages[0].len();
    let mut out = vec![0.0; d];
    for (m, w) in messages.iter().zip(weights) {
        check_len("attend", m, d)?;
        for (o, v) in out.iter_mut().zip(m) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn attention_logits(keys: &[Vec<f64>], q: &[f64], scaled: bool) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::invalid("attend", "no neighbors to attend over"));
    }
    let scale = if scaled { 1.0 / (q.len() as f64).sqrt() } else { 1.0 };
    keys.iter()
        .map(|k| {
            check_len("attend", k, q.len())?;
            Ok(scale * k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

/// One edge of the batched message-passing graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeRef {
    pub context: usize,
    /// Entity whose representation this edge updates.
    pub target: EntityId,
    pub neighbor: Neighbor,
}

pub struct SGnnOutput {
    /// `[C, d_k]`, one row per context.
    pub centers: Var,
    /// Per layer, `[E, 1]` attention weights aligned with `edges`.
    pub layer_weights: Vec<Var>,
    pub edges: Vec<EdgeRef>,
    pub isolated: Vec<bool>,
}

/// Weight given to one of the center's 1-hop triples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TripleScore {
    pub triple: TripleId,
    pub neighbor: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scores: Vec<TripleScore>,
    /// Set when the center has no incident context triples.
    pub warning: Option<String>,
}

impl SGnnStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: SGnnConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("graph encoder needs at least one layer".into()));
        }
        if config.d_k == 0 || config.d_w == 0 || config.d_a == 0 {
            return Err(Error::Config("graph encoder dims must be positive".into()));
        }
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(SGnnLayer {
                    w: Linear::new(store, &format!("{p}.msg"), 2 * config.d_k, config.d_k, false, rng)?,
                    query: Linear::new(store, &format!("{p}.query"), config.d_w, config.d_a, true, rng)?,
                    key: Linear::new(store, &format!("{p}.key"), config.d_k, config.d_a, true, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    /// Encodes every context. `s` is `[S, d_w]`; context `c` is conditioned
    /// on row `sentence_of[c]`.
    pub fn dk_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        table: &EmbeddingTable,
        contexts: &[&RawContext],
        s: Var,
        sentence_of: &[usize],
    ) -> Result<SGnnOutput> {
        let d = self.config.d_k;
        if table.dim() != d {
            return Err(Error::ShapeMismatch {
                op: "dk_encode",
                left: vec![table.dim()],
                right: vec![d],
            });
        }
        if sentence_of.len() != contexts.len() {
            return Err(Error::invalid("dk_encode", "sentence_of length differs from contexts"));
        }
        let (num_s, dw) = tape.shape(s);
        if dw != self.config.d_w {
            return Err(Error::ShapeMismatch {
                op: "dk_encode",
                left: vec![num_s, dw],
                right: vec![num_s, self.config.d_w],
            });
        }
        if let Some(&bad) = sentence_of.iter().find(|&&i| i >= num_s) {
            return Err(Error::invalid("dk_encode", format!("sentence row {bad} out of range")));
        }

        // Flatten all contexts into one graph with context-local copies of
        // every entity.
        let mut e0 = Vec::new();
        let mut center_rows = Vec::with_capacity(contexts.len());
        let mut edges = Vec::new();
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        let mut static_in = Vec::new();
        let mut signed_r = Vec::new();
        let mut edge_sentence = Vec::new();
        let mut offset = 0;
        for (c, ctx) in contexts.iter().enumerate() {
            let ents = ctx.entities();
            let local = |e: EntityId| ents.binary_search(&e).ok();
            for &e in &ents {
                e0.extend_from_slice(table.entity(e)?);
            }
            center_rows.push(offset + local(ctx.center).ok_or_else(|| Error::invalid("dk_encode", "center missing from context"))?);
            for (li, &e) in ents.iter().enumerate() {
                for nb in ctx.neighbors(e) {
                    let src = local(nb.entity)
                        .ok_or_else(|| Error::invalid("dk_encode", "neighbor outside context"))?;
                    let n = table.entity(nb.entity)?;
                    let r = table.relation(nb.relation)?;
                    let sign = nb.direction.sign();
                    static_in.extend(n.iter().zip(r).map(|(a, b)| a + sign * b));
                    signed_r.extend(r.iter().map(|b| sign * b));
                    targets.push(offset + li);
                    sources.push(offset + src);
                    edge_sentence.push(sentence_of[c]);
                    edges.push(EdgeRef {
                        context: c,
                        target: e,
                        neighbor: *nb,
                    });
                }
            }
            offset += ents.len();
        }
        let total = offset;
        let e0_t = Tensor::matrix(total, d, e0)?;
        let isolated: Vec<bool> = contexts.iter().map(|c| c.is_isolated()).collect();
        let centers_idx: Rc<[usize]> = center_rows.clone().into();
        let mut h = tape.constant(e0_t.clone())?;
        let mut layer_weights = Vec::with_capacity(self.layers.len());

        if !edges.is_empty() {
            let ne = edges.len();
            let mut has_edge = vec![false; total];
            let mut degree = vec![0usize; total];
            for &t in &targets {
                has_edge[t] = true;
                degree[t] += 1;
            }
            let has_edge: Rc<[bool]> = has_edge.into();
            let targets: Rc<[usize]> = targets.into();
            let sources: Rc<[usize]> = sources.into();
            let edge_sentence: Rc<[usize]> = edge_sentence.into();
            let a = tape.constant(Tensor::matrix(ne, d, static_in)?)?;
            let rs = tape.constant(Tensor::matrix(ne, d, signed_r)?)?;
            let ones = tape.constant(Tensor::filled(self.config.d_a, 1, 1.0))?;
            let uniform = Tensor::column(targets.iter().map(|&t| 1.0 / degree[t] as f64).collect());
            for layer in &self.layers {
                let prev = tape.select_rows(h, sources.clone())?;
                let x = tape.concat_cols(&[a, prev])?;
                let msg = layer.w.forward(tape, store, x)?;
                let weights = match self.config.attention {
                    AttentionVariant::MeanPool => tape.constant(uniform.clone())?,
                    AttentionVariant::Semantic => {
                        let keys = layer.key.forward(tape, store, rs)?;
                        let q = layer.query.forward(tape, store, s)?;
                        let q = tape.tanh(q)?;
                        let qe = tape.select_rows(q, edge_sentence.clone())?;
                        let kq = tape.mul(keys, qe)?;
                        let mut logits = tape.matmul(kq, ones)?;
                        if self.config.scaled_logits {
                            logits = tape.scale(logits, 1.0 / (self.config.d_a as f64).sqrt())?;
                        }
                        tape.segment_softmax(logits, targets.clone(), total)?
                    }
                };
                let weighted = tape.mul_col(msg, weights)?;
                let agg = tape.segment_sum(weighted, targets.clone(), total)?;
                h = tape.blend_rows(agg, h, has_edge.clone())?;
                layer_weights.push(weights);
            }
        }

        let mut centers = tape.select_rows(h, centers_idx.clone())?;
        if self.config.center_residual {
            let mut res = Tensor::zeros(contexts.len(), d);
            for (c, &row) in center_rows.iter().enumerate() {
                if !isolated[c] {
                    for j in 0..d {
                        res.set(c, j, e0_t.get(row, j));
                    }
                }
            }
            let res = tape.constant(res)?;
            centers = tape.add(centers, res)?;
        }
        Ok(SGnnOutput {
            centers,
            layer_weights,
            edges,
            isolated,
        })
    }

    /// Convenience wrapper for a single sentence vector.
    pub fn encode_one(
        &self,
        store: &ParamStore,
        table: &EmbeddingTable,
        ctx: &RawContext,
        s: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::row(s.to_vec()))?;
        let out = self.dk_encode(&mut tape, store, table, &[ctx], sv, &[0])?;
        Ok(tape.value(out.centers).row_vec(0))
    }

    /// First-layer attention weights over the center's 1-hop triples,
    /// sorted by weight (descending) then triple id.
    pub fn rank_triples(
        &self,
        store: &ParamStore,
        table: &EmbeddingTable,
        ctx: &RawContext,
        s: &[f64],
    ) -> Result<Ranking> {
        let nbs = ctx.center_neighbors();
        if nbs.is_empty() {
            return Ok(Ranking {
                scores: Vec::new(),
                warning: Some("center entity has no incident context triples".into()),
            });
        }
        let weights = match self.config.attention {
            AttentionVariant::MeanPool => vec![1.0 / nbs.len() as f64; nbs.len()],
            AttentionVariant::Semantic => {
                let layer = &self.layers[0];
                let q = layer.query(store, s)?;
                let keys = nbs
                    .iter()
                    .map(|nb| layer.key(store, table.relation(nb.relation)?, nb.direction))
                    .collect::<Result<Vec<_>>>()?;
                let logits = attention_logits(&keys, &q, self.config.scaled_logits)?;
                let mut w = vec![0.0; logits.len()];
                softmax_slice(&logits, None, &mut w);
                w
            }
        };
        let mut scores: Vec<TripleScore> = nbs
            .iter()
            .zip(weights)
            .map(|(nb, weight)| TripleScore {
                triple: nb.triple,
                neighbor: nb.entity,
                relation: nb.relation,
                direction: nb.direction,
                weight,
            })
            .collect();
        scores.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then(a.triple.cmp(&b.triple))
                .then(a.direction.cmp(&b.direction))
        });
        Ok(Ranking { scores, warning: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub importance_pct: f64,
    pub neighbor: String,
    pub relation: String,
    pub direction: String,
    pub triple: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub schema_version: u32,
    pub sentence: String,
    pub mention: String,
    pub rows: Vec<RankRow>,
    pub warning: Option<String>,
}

impl RankReport {
    pub fn new(kg: &KnowledgeGraph, sentence: &str, mention: EntityId, ranking: &Ranking) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            sentence: sentence.to_string(),
            mention: kg.entity_name(mention).to_string(),
            rows: ranking
                .scores
                .iter()
                .map(|s| RankRow {
                    importance_pct: 100.0 * s.weight,
                    neighbor: kg.entity_name(s.neighbor).to_string(),
                    relation: kg.relation_name(s.relation).to_string(),
                    direction: s.direction.as_str().to_string(),
                    triple: s.triple.0,
                })
                .collect(),
            warning: ranking.warning.clone(),
        }
    }

    pub fn total_pct(&self) -> f64 {
        self.rows.iter().map(|r| r.importance_pct).sum()
    }

    /// Aligned columns: importance, neighbor, relation, direction.
    pub fn to_table(&self) -> String {
        let nw = self.rows.iter().map(|r| r.neighbor.len()).max().unwrap_or(0).max("neighbor".len());
        let rw = self.rows.iter().map(|r| r.relation.len()).max().unwrap_or(0).max("relation".len());
        let mut out = String::new();
        let _ = writeln!(out, "{}: {}", self.mention, self.sentence);
        let _ = writeln!(out, "{:>10}  {:<nw$}  {:<rw$}  direction", "importance", "neighbor", "relation");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>9.1}%  {:<nw$}  {:<rw$}  {}",
                r.importance_pct, r.neighbor, r.relation, r.direction
            );
        }
        if let Some(w) = &self.warning {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
