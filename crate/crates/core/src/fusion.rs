//! Knowledge fusion encoder: a stack of aggregators that mix token states
//! with the contextual entity embeddings anchored at mention tokens.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_w: usize,
    pub d_k: usize,
    /// Width of the shared hidden state `h`.
    pub d_h: usize,
    pub token_heads: usize,
    pub entity_heads: usize,
    pub aggregators: usize,
}

impl FusionConfig {
    pub fn new(d_w: usize, d_k: usize) -> Self {
        Self {
            d_w,
            d_k,
            d_h: d_w,
            token_heads: 4,
            entity_heads: 1,
            aggregators: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub token_attn: MultiHeadAttention,
    pub token_ln: LayerNorm,
    pub entity_attn: MultiHeadAttention,
    pub entity_ln: LayerNorm,
    /// `W_t` with the shared bias `b`.
    pub w_t: Linear,
    /// `W_e`, no bias.
    pub w_e: Linear,
    pub token_out: Linear,
    pub token_out_ln: LayerNorm,
    pub entity_out: Linear,
    pub entity_out_ln: LayerNorm,
}

impl Aggregator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            token_attn: MultiHeadAttention::new(store, &n("tok_attn"), cfg.d_w, cfg.token_heads, rng)?,
            token_ln: LayerNorm::new(store, &n("tok_ln"), cfg.d_w)?,
            entity_attn: MultiHeadAttention::new(store, &n("ent_attn"), cfg.d_k, cfg.entity_heads, rng)?,
            entity_ln: LayerNorm::new(store, &n("ent_ln"), cfg.d_k)?,
            w_t: Linear::new(store, &n("w_t"), cfg.d_w, cfg.d_h, true, rng)?,
            w_e: Linear::new(store, &n("w_e"), cfg.d_k, cfg.d_h, false, rng)?,
            token_out: Linear::new(store, &n("tok_out"), cfg.d_h, cfg.d_w, true, rng)?,
            token_out_ln: LayerNorm::new(store, &n("tok_out_ln"), cfg.d_w)?,
            entity_out: Linear::new(store, &n("ent_out"), cfg.d_h, cfg.d_k, true, rng)?,
            entity_out_ln: LayerNorm::new(store, &n("ent_out_ln"), cfg.d_k)?,
        })
    }

    /// `anchors[k]` is the token row receiving entity `k`; `gather[j]` is the
    /// entity index for token `j`, or `M` for tokens without an entity.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        entities: Option<Var>,
        anchors: &Rc<[usize]>,
        gather: &Rc<[usize]>,
        key_mask: Option<Rc<[bool]>>,
    ) -> Result<(Var, Option<Var>)> {
        let a = self.token_attn.forward(tape, store, tokens, key_mask)?.out;
        let a = tape.add(a, tokens)?;
        let w_tilde = self.token_ln.forward(tape, store, a)?;
        let mut h = self.w_t.forward(tape, store, w_tilde)?;
        let e_tilde = match entities {
            Some(e) => {
                let b = self.entity_attn.forward(tape, store, e, None)?.out;
                let b = tape.add(b, e)?;
                let e_tilde = self.entity_ln.forward(tape, store, b)?;
                let injected = self.w_e.forward(tape, store, e_tilde)?;
                let zero = tape.constant(Tensor::zeros(1, self.w_e.out_dim))?;
                let padded = tape.concat_rows(&[injected, zero])?;
                let per_token = tape.select_rows(padded, gather.clone())?;
                h = tape.add(h, per_token)?;
                Some(e_tilde)
            }
            None => None,
        };
        let h = tape.gelu(h)?;
        let w = self.token_out.forward(tape, store, h)?;
        let w = tape.add(w, w_tilde)?;
        let w = self.token_out_ln.forward(tape, store, w)?;
        let e = match e_tilde {
            Some(e_tilde) => {
                let ha = tape.select_rows(h, anchors.clone())?;
                let e = self.entity_out.forward(tape, store, ha)?;
                let e = tape.add(e, e_tilde)?;
                Some(self.entity_out_ln.forward(tape, store, e)?)
            }
            None => None,
        };
        Ok((w, e))
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub aggregators: Vec<Aggregator>,
}

pub struct FusionOutput {
    /// `[N, d_w]`
    pub tokens: Var,
    /// `[M, d_k]`, `None` when there are no entities.
    pub entities: Option<Var>,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: FusionConfig, rng: &mut R) -> Result<Self> {
        if config.aggregators == 0 {
            return Err(Error::Config("fusion needs at least one aggregator".into()));
        }
        let aggregators = (0..config.aggregators)
            .map(|p| Aggregator::new(store, &format!("{name}.agg{p}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, aggregators })
    }

    /// `tokens` is `[N, d_w]`; `entities` is `[M, d_k]` with entity `k`
    /// anchored at token `anchors[k]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        entities: Option<Var>,
        anchors: &[usize],
        mask: &[bool],
    ) -> Result<FusionOutput> {
        let (n, _) = tape.shape(tokens);
        let m = match entities {
            Some(e) => tape.shape(e).0,
            None => 0,
        };
        if anchors.len() != m {
            return Err(Error::invalid(
                "fuse",
                format!("{} anchors for {m} entities", anchors.len()),
            ));
        }
        if mask.len() != n {
            return Err(Error::invalid("fuse", "mask length differs from tokens"));
        }
        let mut gather = vec![m; n];
        for (k, &j) in anchors.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid("fuse", format!("anchor {j} out of range for {n} tokens")));
            }
            if gather[j] != m {
                return Err(Error::invalid("fuse", format!("token {j} anchors two entities")));
            }
            gather[j] = k;
        }
        let entities = if m == 0 { None } else { entities };
        let anchors: Rc<[usize]> = anchors.into();
        let gather: Rc<[usize]> = gather.into();
        let key_mask: Option<Rc<[bool]>> = if mask.iter().all(|&b| b) {
            None
        } else {
            Some(Rc::from(mask))
        };
        let (mut w, mut e) = (tokens, entities);
        for agg in &self.aggregators {
            (w, e) = agg.forward(tape, store, w, e, &anchors, &gather, key_mask.clone())?;
        }
        Ok(FusionOutput { tokens: w, entities: e })
    }
}
