//! Visual and textual embedding tables.
//!
//! A visual embedding is the probability-weighted sum of visual-word rows,
//! i.e. the expected row when a word is drawn from the token's distribution.
//! With a one-hot token it degenerates to an ordinary table look-up, which is
//! exactly how textual tokens are embedded.

use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{tokens_to_tensor, ProbabilisticToken};

#[derive(Clone, Debug)]
pub struct VisualEmbeddingTable {
    /// `K × d′`
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl VisualEmbeddingTable {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, vocab: usize, dim: usize, std: f64, seed: u64) -> Result<Self> {
        let table = store.add("vt.table", &[vocab, dim], Init::Normal(std), seed)?;
        Ok(Self { table, vocab, dim })
    }

    /// `n × K` probabilities to `n × d′` embeddings.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, probs: Var) -> Result<Var> {
        let (n, k) = tape.value(probs).require_matrix("visual_embed")?;
        if k != self.vocab {
            return Err(Error::shape("visual_embed", &[n, k], &[self.vocab, self.dim]));
        }
        tape.matmul(probs, bind[self.table])
    }
}

/// Reserved ids of the textual vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub image: usize,
}

#[derive(Clone, Debug)]
pub struct TextualEmbeddingTable {
    /// `V_text × d′`
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    pub special: SpecialIds,
}

impl TextualEmbeddingTable {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        dim: usize,
        special: SpecialIds,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let max = special.pad.max(special.bos).max(special.eos).max(special.image);
        if max >= vocab {
            return Err(Error::IndexOutOfRange {
                op: "textual table",
                index: max,
                extent: vocab,
            });
        }
        let table = store.add("llm.tok", &[vocab, dim], Init::Normal(std), seed)?;
        Ok(Self {
            table,
            vocab,
            dim,
            special,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, ids: &[usize]) -> Result<Var> {
        tape.embedding_rows(bind[self.table], ids)
    }
}

/// Evaluates visual embeddings outside of any training graph.
pub fn visual_embed<T: Scalar>(
    store: &ParamStore<T>,
    table: &VisualEmbeddingTable,
    tokens: &[ProbabilisticToken<T>],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, |_| false);
    let probs = tape.constant(tokens_to_tensor(tokens)?);
    let v = table.forward(&mut tape, &bind, probs)?;
    Ok(tape.value(v).clone())
}

pub fn text_embed<T: Scalar>(store: &ParamStore<T>, table: &TextualEmbeddingTable, ids: &[usize]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, |_| false);
    let v = table.forward(&mut tape, &bind, ids)?;
    Ok(tape.value(v).clone())
}
