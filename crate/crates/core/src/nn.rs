//! Parameterised building blocks shared by the text, graph and fusion
//! encoders. Each block owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound onto a [`Tape`] per forward pass.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{name}.b"), 1, out_dim, in_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = self.b.map(|b| tape.param(store, b)).transpose()?;
        tape.linear(x, w, b)
    }

    /// Off-tape `x·W + b` for a single row.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: vec![1, x.len()],
                right: store.get(self.w).shape().to_vec(),
            });
        }
        let w = store.get(self.w);
        let mut out = match self.b {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![0.0; self.out_dim],
        };
        for (i, &xi) in x.iter().enumerate() {
            for (o, wij) in out.iter_mut().zip(w.row_slice(i)) {
                *o += xi * wij;
            }
        }
        Ok(out)
    }
}

/// Affine layer normalisation; scale starts at 1 and shift at 0.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `[N, N]` probability matrix per head.
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// Scaled dot-product self-attention; `key_mask[j] == false` hides
    /// position `j` from every query.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<Rc<[bool]>>,
    ) -> Result<AttentionOutput> {
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.softmax_masked(scores, key_mask.clone())?;
            heads.push(tape.matmul(p, vh)?);
            probs.push(p);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = self.output.forward(tape, store, joined)?;
        Ok(AttentionOutput { out, probs })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::substream;

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = substream(1, "t");
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(5, 8, 1.0, &mut rng)).unwrap();
        let mask: Rc<[bool]> = Rc::from(vec![true, true, false, true, false]);
        let out = mha.forward(&mut tape, &store, x, Some(mask)).unwrap();
        for p in out.probs {
            let t = tape.value(p);
            for i in 0..5 {
                let row = t.row_slice(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = substream(1, "t");
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn block_gradients() {
        let mut rng = substream(9, "t");
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let ff = FeedForward::new(&mut store, "ff", 4, 6, &mut rng).unwrap();
        let x = Tensor::uniform(3, 4, 1.0, &mut rng);
        let report = grad_check(&store, 1e-5, 1e-4, |s, tape| {
            let xv = tape.constant(x.clone())?;
            let a = mha.forward(tape, s, xv, None)?.out;
            let a = tape.add(a, xv)?;
            let a = ln.forward(tape, s, a)?;
            let f = ff.forward(tape, s, a)?;
            let sq = tape.mul(f, f)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
