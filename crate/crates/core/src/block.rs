//! Pre-norm transformer block shared by the visual encoder and the decoder.

use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Masking {
    Bidirectional,
    Causal,
}

/// `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.w"), &[inputs, outputs], Init::Normal(std), seed)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.b"), &[outputs], Init::Zeros, seed)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, bind[b]),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.g"), &[dim], Init::Ones, seed)?,
            beta: store.add(&format!("{name}.b"), &[dim], Init::Zeros, seed)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.layernorm(x, bind[self.gamma], bind[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub prefix: String,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("width {dim} is not divisible into {heads} heads")));
        }
        let hidden = dim * mlp_ratio;
        Ok(Self {
            prefix: prefix.to_owned(),
            heads,
            ln1: LayerNorm::register(store, &format!("{prefix}.ln1"), dim, seed)?,
            wq: Linear::register(store, &format!("{prefix}.attn.q"), dim, dim, true, std, seed)?,
            wk: Linear::register(store, &format!("{prefix}.attn.k"), dim, dim, true, std, seed)?,
            wv: Linear::register(store, &format!("{prefix}.attn.v"), dim, dim, true, std, seed)?,
            wo: Linear::register(store, &format!("{prefix}.attn.o"), dim, dim, true, std, seed)?,
            ln2: LayerNorm::register(store, &format!("{prefix}.ln2"), dim, seed)?,
            fc1: Linear::register(store, &format!("{prefix}.mlp.fc1"), dim, hidden, true, std, seed)?,
            fc2: Linear::register(store, &format!("{prefix}.mlp.fc2"), hidden, dim, true, std, seed)?,
        })
    }

    /// Every parameter of the block, in registration order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gamma, self.ln1.beta];
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            ids.extend(l.params());
        }
        ids.extend([self.ln2.gamma, self.ln2.beta]);
        ids.extend(self.fc1.params());
        ids.extend(self.fc2.params());
        ids
    }

    fn attention<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, h: Var, masking: Masking) -> Result<Var> {
        let q = self.wq.forward(tape, bind, h)?;
        let k = self.wk.forward(tape, bind, h)?;
        let v = self.wv.forward(tape, bind, h)?;
        let dim = tape.value(q).cols();
        let dh = dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = match masking {
                Masking::Bidirectional => tape.softmax_rows(scores)?,
                Masking::Causal => tape.causal_softmax_rows(scores)?,
            };
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.wo.forward(tape, bind, merged)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, masking: Masking) -> Result<Var> {
        let h = self.ln1.forward(tape, bind, x)?;
        let a = self.attention(tape, bind, h, masking)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, bind, x)?;
        let h = self.fc1.forward(tape, bind, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, bind, h)?;
        tape.add(x, h)
    }
}
