//! Toy vision transformer: patch projection, learned positions and a stack of
//! bidirectional pre-norm blocks. Every patch output is kept (no class token).

use crate::block::{Block, Linear, Masking};
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::patch::PatchGrid;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    /// Capacity of the positional table.
    pub n_max: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_w * self.patch_h
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl VisualEncoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        let std = cfg.init_std;
        let patch_proj = Linear::register(store, "encoder.patch", cfg.patch_len(), cfg.width, true, std, seed)?;
        let pos = store.add("encoder.pos", &[cfg.n_max, cfg.width], Init::Normal(std), seed)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::register(store, &format!("encoder.blocks.{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, std, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            patch_proj,
            pos,
            blocks,
        })
    }

    /// Maps `n × (C·w·h)` patches to `n × d` representations.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, patches: Var) -> Result<Var> {
        let (n, len) = tape.value(patches).require_matrix("encode")?;
        if len != self.cfg.patch_len() {
            return Err(Error::shape("encode", &[n, len], &[n, self.cfg.patch_len()]));
        }
        if n > self.cfg.n_max {
            return Err(Error::Sequence(format!(
                "{n} patches exceed positional capacity {}",
                self.cfg.n_max
            )));
        }
        let x = self.patch_proj.forward(tape, bind, patches)?;
        let pos = tape.slice_rows(bind[self.pos], 0, n)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, bind, x, Masking::Bidirectional)?;
        }
        Ok(x)
    }

    pub fn last_block(&self) -> &Block {
        self.blocks.last().expect("at least one block")
    }

    /// Name prefix shared by every parameter of the final block.
    pub fn last_block_prefix(&self) -> String {
        format!("{}.", self.last_block().prefix)
    }

    /// Redraws only the final block's parameters from their initial
    /// distributions, using streams keyed by `seed`.
    pub fn reinit_last_block<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for id in self.last_block().params() {
            store.reinit(id, seed);
        }
    }
}

/// Evaluates the encoder on a patch grid outside of any training graph.
pub fn encode<T: Scalar>(store: &ParamStore<T>, enc: &VisualEncoder, grid: &PatchGrid) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, |_| false);
    let patches = tape.constant(grid.to_tensor());
    let out = enc.forward(&mut tape, &bind, patches)?;
    Ok(tape.value(out).clone())
}
