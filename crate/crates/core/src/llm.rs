//! Small decoder-only transformer over assembled embedding sequences.

use crate::assemble::AssembledInput;
use crate::block::{Block, LayerNorm, Masking};
use crate::embedding::{SpecialIds, TextualEmbeddingTable};
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LlmConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq: usize,
    pub init_std: f64,
}

/// All parameters live under the `llm.` prefix, including the textual table.
#[derive(Clone, Debug)]
pub struct ToyLlm {
    pub cfg: LlmConfig,
    pub tokens: TextualEmbeddingTable,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// `d′ × V_text`, not tied to the token table.
    pub head: ParamId,
}

impl ToyLlm {
    pub const PREFIX: &'static str = "llm.";

    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: LlmConfig,
        special: SpecialIds,
        seed: u64,
    ) -> Result<Self> {
        let std = cfg.init_std;
        let tokens = TextualEmbeddingTable::register(store, cfg.vocab, cfg.width, special, std, seed)?;
        let pos = store.add("llm.pos", &[cfg.max_seq, cfg.width], Init::Normal(std), seed)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::register(store, &format!("llm.blocks.{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, std, seed))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::register(store, "llm.ln_f", cfg.width, seed)?;
        let head = store.add("llm.head", &[cfg.width, cfg.vocab], Init::Normal(std), seed)?;
        Ok(Self {
            cfg,
            tokens,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    /// Next-token logits, `L × V_text`. Row `p` depends only on rows `≤ p`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, input: &AssembledInput) -> Result<Var> {
        let (l, d) = tape.value(input.embeddings).require_matrix("llm")?;
        if l > self.cfg.max_seq {
            return Err(Error::Sequence(format!(
                "sequence of {l} exceeds capacity {}",
                self.cfg.max_seq
            )));
        }
        if d != self.cfg.width {
            return Err(Error::shape("llm", &[l, d], &[l, self.cfg.width]));
        }
        let pos = tape.slice_rows(bind[self.pos], 0, l)?;
        let mut x = tape.add(input.embeddings, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, bind, x, Masking::Causal)?;
        }
        let x = self.ln_f.forward(tape, bind, x)?;
        tape.matmul(x, bind[self.head])
    }
}
