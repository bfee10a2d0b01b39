//! The full encoder: text encoder, graph encoder and fusion stack sharing
//! one parameter store, plus the knowledge it reads from.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::kg::{raw_context_with, ContextOptions, EntityId, KnowledgeGraph, RawContext};
use crate::nn::Linear;
use crate::numerics::checkpoint::{self, Manifest};
use crate::numerics::{ParamStore, Tape, Var};
use crate::rng::{hash_str, substream};
use crate::sgnn::{SGnnConfig, SGnnOutput, SGnnStack};
use crate::text::{AnnotatedText, TextEncoder, TextEncoderConfig, TextOutput};
use crate::transe::EmbeddingTable;

pub const CHECKPOINT_KIND: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub sgnn: SGnnConfig,
    pub fusion: FusionConfig,
    /// Hop radius of the raw context.
    pub k: usize,
    pub max_neighbors_per_hop: Option<usize>,
}

impl ModelConfig {
    pub fn hash(&self) -> String {
        hash_str(&serde_json::to_string(self).expect("config serialises"))
    }

    pub fn context_options(&self, seed: u64) -> ContextOptions {
        ContextOptions {
            k: self.k,
            max_neighbors_per_hop: self.max_neighbors_per_hop,
            seed,
        }
    }
}

/// The graph, its frozen TransE table and memoised raw contexts.
pub struct Knowledge {
    pub kg: KnowledgeGraph,
    pub table: EmbeddingTable,
    pub options: ContextOptions,
    contexts: HashMap<EntityId, RawContext>,
}

impl Knowledge {
    pub fn new(kg: KnowledgeGraph, table: EmbeddingTable, options: ContextOptions) -> Result<Self> {
        if table.num_entities() != kg.num_entities() || table.num_relations() != kg.num_relations() {
            return Err(Error::invalid("knowledge", "embedding table does not cover the graph"));
        }
        Ok(Self {
            kg,
            table,
            options,
            contexts: HashMap::new(),
        })
    }

    /// Precomputes contexts for `entities`.
    pub fn prepare(&mut self, entities: impl IntoIterator<Item = EntityId>) -> Result<()> {
        for e in entities {
            if !self.contexts.contains_key(&e) {
                let ctx = raw_context_with(&self.kg, e, &self.options)?;
                self.contexts.insert(e, ctx);
            }
        }
        Ok(())
    }

    /// Precomputes contexts for every mention in `texts`.
    pub fn prepare_texts<'a>(&mut self, texts: impl IntoIterator<Item = &'a AnnotatedText>) -> Result<()> {
        let ents: Vec<EntityId> = texts
            .into_iter()
            .flat_map(|t| t.mentions.iter().map(|m| m.entity))
            .collect();
        self.prepare(ents)
    }

    pub fn context(&self, e: EntityId) -> Result<&RawContext> {
        self.contexts
            .get(&e)
            .ok_or_else(|| Error::invalid("knowledge", format!("context for entity #{} not prepared", e.0)))
    }

    /// Fresh copy with a different hop radius; contexts are recomputed.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        let mut options = self.options;
        options.k = k;
        let mut out = Self::new(self.kg.clone(), self.table.clone(), options)?;
        out.prepare(self.contexts.keys().copied().collect::<Vec<_>>())?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub sgnn: SGnnStack,
    pub fusion: Fusion,
    /// Vocabulary projection for masked tokens.
    pub mlm_head: Linear,
    /// Token → entity-space projection for alignment prediction.
    pub dea_proj: Linear,
    pub nsp_head: Linear,
}

pub struct ModelOutput {
    pub text: TextOutput,
    /// Fused token states `[N, d_w]`.
    pub tokens: Var,
    pub entities: Option<Var>,
    pub graph: Option<SGnnOutput>,
}

impl Model {
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if config.sgnn.d_w != config.text.d_w || config.fusion.d_w != config.text.d_w {
            return Err(Error::Config("d_w differs between text, graph and fusion encoders".into()));
        }
        if config.fusion.d_k != config.sgnn.d_k {
            return Err(Error::Config("d_k differs between graph and fusion encoders".into()));
        }
        let mut rng = substream(seed, "init");
        let text = TextEncoder::new(store, "text", config.text.clone(), &mut rng)?;
        let sgnn = SGnnStack::new(store, "sgnn", config.sgnn.clone(), &mut rng)?;
        let fusion = Fusion::new(store, "fusion", config.fusion.clone(), &mut rng)?;
        let d_w = config.text.d_w;
        let mlm_head = Linear::new(store, "mlm_head", d_w, config.text.vocab_size, true, &mut rng)?;
        let dea_proj = Linear::new(store, "dea_proj", d_w, config.sgnn.d_k, true, &mut rng)?;
        let nsp_head = Linear::new(store, "nsp_head", d_w, 2, true, &mut rng)?;
        Ok(Self {
            config,
            text,
            sgnn,
            fusion,
            mlm_head,
            dea_proj,
            nsp_head,
        })
    }

    /// Encodes `at`, injecting entity `e` at token `j` for each `(j, e)` in
    /// `injections`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        knowledge: &Knowledge,
        at: &AnnotatedText,
        injections: &[(usize, EntityId)],
    ) -> Result<ModelOutput> {
        let text = self.text.forward(tape, store, at)?;
        let (entities, graph, anchors) = if injections.is_empty() {
            (None, None, Vec::new())
        } else {
            let contexts = injections
                .iter()
                .map(|&(_, e)| knowledge.context(e))
                .collect::<Result<Vec<_>>>()?;
            let graph = self.sgnn.dk_encode(
                tape,
                store,
                &knowledge.table,
                &contexts,
                text.cls,
                &vec![0; contexts.len()],
            )?;
            let anchors: Vec<usize> = injections.iter().map(|&(j, _)| j).collect();
            (Some(graph.centers), Some(graph), anchors)
        };
        let fused = self
            .fusion
            .fuse(tape, store, text.tokens, entities, &anchors, &at.attention_mask)?;
        Ok(ModelOutput {
            text,
            tokens: fused.tokens,
            entities: fused.entities,
            graph,
        })
    }

    /// Every mention injected at its first token.
    pub fn forward_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        knowledge: &Knowledge,
        at: &AnnotatedText,
    ) -> Result<ModelOutput> {
        let inj: Vec<(usize, EntityId)> = at.mentions.iter().map(|m| (m.span.start, m.entity)).collect();
        self.forward(tape, store, knowledge, at, &inj)
    }

    /// The text encoder's `[CLS]` vector for `at`.
    pub fn sentence_vector(&self, store: &ParamStore, at: &AnnotatedText) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.text.forward(&mut tape, store, at)?;
        Ok(tape.value(out.cls).row_vec(0))
    }
}

pub fn save_store(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<()> {
    checkpoint::save(dir, manifest, &checkpoint::store_entries(store))
}

/// Loads tensors into a store whose parameters were already declared.
pub fn load_store(dir: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let (manifest, entries) = checkpoint::load(dir)?;
    checkpoint::restore_store(store, entries, dir)?;
    Ok(manifest)
}
