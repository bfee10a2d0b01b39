use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotated::AnnotatedText;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_w: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_w: 128,
            layers: 4,
            heads: 4,
            ffn_hidden: 512,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_w == 0 || self.layers == 0 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("text encoder dims must be positive".into()));
        }
        if self.heads == 0 || !self.d_w.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_w {} not divisible by {} heads",
                self.d_w, self.heads
            )));
        }
        Ok(())
    }
}

/// Post-LN Transformer block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
        })
    }

    /// Returns the block output and the per-head attention matrices.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<Rc<[bool]>>,
    ) -> Result<(Var, Vec<Var>)> {
        let a = self.attn.forward(tape, store, x, key_mask)?;
        let h = tape.add(a.out, x)?;
        let h = self.ln1.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, h)?;
        let o = tape.add(f, h)?;
        Ok((self.ln2.forward(tape, store, o)?, a.probs))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

pub struct TextOutput {
    /// `[N, d_w]`
    pub tokens: Var,
    /// Row 0 of `tokens`, the `[CLS]` summary `s`.
    pub cls: Var,
    /// `attention[layer][head]` is `[N, N]`.
    pub attention: Vec<Vec<Var>>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_w;
        let token_emb = store.add_uniform(format!("{name}.tok"), config.vocab_size, d, d, rng)?;
        let pos_emb = store.add_uniform(format!("{name}.pos"), config.max_seq_len, d, d, rng)?;
        let emb_ln = LayerNorm::new(store, &format!("{name}.emb_ln"), d)?;
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(store, &format!("{name}.layer{l}"), d, config.heads, config.ffn_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            emb_ln,
            layers,
        })
    }

    /// Token plus position embeddings, layer-normalised.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, at: &AnnotatedText) -> Result<Var> {
        let n = at.len();
        if n == 0 {
            return Err(Error::invalid("t_encode", "empty token sequence"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if let Some(bad) = at.tokens.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::invalid("t_encode", format!("token id {} outside vocabulary", bad.0)));
        }
        let tok = tape.param(store, self.token_emb)?;
        let pos = tape.param(store, self.pos_emb)?;
        let ids: Rc<[usize]> = at.tokens.iter().map(|t| t.index()).collect();
        let positions: Rc<[usize]> = (0..n).collect();
        let te = tape.select_rows(tok, ids)?;
        let pe = tape.select_rows(pos, positions)?;
        let x = tape.add(te, pe)?;
        self.emb_ln.forward(tape, store, x)
    }

    /// Runs the encoder layers over embedded input `x`.
    pub fn encode_embedded(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &[bool]) -> Result<TextOutput> {
        let key_mask: Option<Rc<[bool]>> = if mask.iter().all(|&m| m) {
            None
        } else {
            Some(Rc::from(mask))
        };
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, probs) = layer.forward(tape, store, h, key_mask.clone())?;
            h = out;
            attention.push(probs);
        }
        let cls = tape.select_row(h, 0)?;
        Ok(TextOutput {
            tokens: h,
            cls,
            attention,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, at: &AnnotatedText) -> Result<TextOutput> {
        let x = self.embed(tape, store, at)?;
        self.encode_embedded(tape, store, x, &at.attention_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_sampled;
    use crate::rng::substream;
    use crate::text::{TokenId, Vocabulary};

    fn small(store: &mut ParamStore, vocab: usize, d: usize, layers: usize) -> TextEncoder {
        let mut cfg = TextEncoderConfig::new(vocab);
        cfg.d_w = d;
        cfg.layers = layers;
        cfg.heads = 2;
        cfg.ffn_hidden = 2 * d;
        cfg.max_seq_len = 12;
        TextEncoder::new(store, "enc", cfg, &mut substream(3, "init")).unwrap()
    }

    fn sentence(vocab: &Vocabulary) -> AnnotatedText {
        let toks = ["a", "b", "c", "b"].iter().map(|w| vocab.id(w).unwrap());
        let mut ids = vec![vocab.specials().cls];
        ids.extend(toks);
        AnnotatedText::new(ids, vec![]).unwrap()
    }

    #[test]
    fn output_shape_and_cls() {
        let vocab = Vocabulary::build(["a", "b", "c"]);
        let mut store = ParamStore::new();
        let enc = small(&mut store, vocab.len(), 8, 2);
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &store, &sentence(&vocab)).unwrap();
        assert_eq!(tape.shape(out.tokens), (5, 8));
        assert_eq!(tape.value(out.cls).data(), tape.value(out.tokens).row_slice(0));
        assert_eq!(out.attention.len(), 2);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let vocab = Vocabulary::build(["a", "b", "c"]);
        let mut store = ParamStore::new();
        let enc = small(&mut store, vocab.len(), 8, 2);
        let at = sentence(&vocab);
        let padded = at.pad_to(9, vocab.specials().pad);
        let mut t1 = Tape::new();
        let o1 = enc.forward(&mut t1, &store, &at).unwrap();
        let mut t2 = Tape::new();
        let o2 = enc.forward(&mut t2, &store, &padded).unwrap();
        for i in 0..at.len() {
            for (x, y) in t1.value(o1.tokens).row_slice(i).iter().zip(t2.value(o2.tokens).row_slice(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let vocab = Vocabulary::build(["a"]);
        let mut store = ParamStore::new();
        let enc = small(&mut store, vocab.len(), 4, 1);
        let at = AnnotatedText::new(vec![TokenId(1); 13], vec![]).unwrap();
        let res = enc.forward(&mut Tape::new(), &store, &at);
        assert!(matches!(res, Err(Error::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn encoder_gradients() {
        let vocab = Vocabulary::build(["a", "b", "c"]);
        let mut store = ParamStore::new();
        let enc = small(&mut store, vocab.len(), 16, 2);
        let at = sentence(&vocab).pad_to(6, vocab.specials().pad);
        let report = grad_check_sampled(&store, 1e-5, 1e-4, Some(12), 5, |s, tape| {
            let out = enc.forward(tape, s, &at)?;
            let sq = tape.mul(out.tokens, out.tokens)?;
            let w = tape.constant(crate::numerics::Tensor::uniform(6, 16, 1.0, &mut substream(4, "w")))?;
            let z = tape.mul(sq, w)?;
            tape.sum(z)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
