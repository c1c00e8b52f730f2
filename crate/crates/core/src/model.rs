//! The full pipeline: patches → encoder → bridge → assembled sequence → LLM.

use std::fmt;
use std::str::FromStr;

use crate::assemble::{assemble, AssembledInput, MultimodalSample};
use crate::connector::ConnectorMlp;
use crate::embedding::VisualEmbeddingTable;
use crate::encoder::{EncoderConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::llm::{LlmConfig, ToyLlm};
use crate::params::{Binding, ParamStore};
use crate::patch::{patch_count, patchify, ImageTensor};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::TextVocab;
use crate::tokenizer::{tokens_from_tensor, ProbabilisticToken, TokenizerHead};

/// Which map turns encoder outputs into LLM input embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgeKind {
    /// Probabilistic tokens plus the visual embedding table.
    Ovis,
    /// Two-layer GELU MLP with hidden width `K`.
    Connector,
}

impl FromStr for BridgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ovis" => Ok(Self::Ovis),
            "connector" => Ok(Self::Connector),
            other => Err(Error::Config(format!("unknown architecture `{other}` (expected ovis|connector)"))),
        }
    }
}

impl fmt::Display for BridgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ovis => "ovis",
            Self::Connector => "connector",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bridge: BridgeKind,
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub patch: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub visual_vocab: usize,
    pub llm_width: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub text_vocab: usize,
    pub max_seq: usize,
    pub mlp_ratio: usize,
    pub connector_bias: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bridge: BridgeKind::Ovis,
            image_width: 32,
            image_height: 32,
            channels: 3,
            patch: 8,
            enc_width: 64,
            enc_layers: 2,
            enc_heads: 4,
            visual_vocab: 512,
            llm_width: 64,
            llm_layers: 4,
            llm_heads: 4,
            text_vocab: TextVocab::SIZE,
            max_seq: 128,
            mlp_ratio: 4,
            connector_bias: true,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        patch_count(self.image_width, self.image_height, self.patch, self.patch)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            patch_w: self.patch,
            patch_h: self.patch,
            n_max: self.num_patches(),
            width: self.enc_width,
            layers: self.enc_layers,
            heads: self.enc_heads,
            mlp_ratio: self.mlp_ratio,
            init_std: self.init_std,
        }
    }

    pub fn llm(&self) -> LlmConfig {
        LlmConfig {
            vocab: self.text_vocab,
            width: self.llm_width,
            layers: self.llm_layers,
            heads: self.llm_heads,
            mlp_ratio: self.mlp_ratio,
            max_seq: self.max_seq,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug)]
pub enum VisualBridge {
    Ovis {
        head: TokenizerHead,
        table: VisualEmbeddingTable,
    },
    Connector(ConnectorMlp),
}

impl VisualBridge {
    pub fn is_param(name: &str) -> bool {
        name.starts_with("vt.") || name.starts_with("connector.")
    }

    /// Returns the `n × d′` embeddings and, for the Ovis bridge, the
    /// `n × K` probabilistic tokens they were built from.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, reps: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Self::Ovis { head, table } => {
                let probs = head.forward(tape, bind, reps)?;
                Ok((table.forward(tape, bind, probs)?, Some(probs)))
            }
            Self::Connector(mlp) => Ok((mlp.forward(tape, bind, reps)?, None)),
        }
    }
}

/// Handles produced by one forward pass of a sample.
pub struct Forward {
    pub logits: Var,
    pub input: AssembledInput,
    pub tokens: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct OvisModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: VisualEncoder,
    pub bridge: VisualBridge,
    pub llm: ToyLlm,
    pub vocab: TextVocab,
}

impl<T: Scalar> OvisModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let vocab = TextVocab::standard();
        if cfg.llm_width == 0 || cfg.enc_width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let encoder = VisualEncoder::register(&mut store, cfg.encoder(), seed)?;
        let bridge = match cfg.bridge {
            BridgeKind::Ovis => VisualBridge::Ovis {
                head: TokenizerHead::register(&mut store, cfg.visual_vocab, cfg.enc_width, cfg.init_std, seed)?,
                table: VisualEmbeddingTable::register(&mut store, cfg.visual_vocab, cfg.llm_width, cfg.init_std, seed)?,
            },
            BridgeKind::Connector => VisualBridge::Connector(ConnectorMlp::register(
                &mut store,
                cfg.enc_width,
                cfg.visual_vocab,
                cfg.llm_width,
                cfg.connector_bias,
                cfg.init_std,
                seed,
            )?),
        };
        let llm = ToyLlm::register(&mut store, cfg.llm(), vocab.special(), seed)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            bridge,
            llm,
            vocab,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> OvisModel<U> {
        OvisModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            bridge: self.bridge.clone(),
            llm: self.llm.clone(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn bridge_param_count(&self) -> usize {
        self.store.count_where(VisualBridge::is_param)
    }

    pub fn reinit_last_block(&mut self, seed: u64) {
        self.encoder.reinit_last_block(&mut self.store, seed);
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.channels != self.cfg.channels || img.width != self.cfg.image_width || img.height != self.cfg.image_height {
            return Err(Error::shape(
                "image",
                &[img.channels, img.width, img.height],
                &[self.cfg.channels, self.cfg.image_width, self.cfg.image_height],
            ));
        }
        Ok(())
    }

    /// Encoder outputs followed by the bridge, for one image.
    pub fn visual_path(&self, tape: &mut Tape<T>, bind: &Binding, img: &ImageTensor) -> Result<(Var, Option<Var>)> {
        self.check_image(img)?;
        let grid = patchify(img, self.cfg.patch, self.cfg.patch)?;
        let patches = tape.constant(grid.to_tensor());
        let reps = self.encoder.forward(tape, bind, patches)?;
        self.bridge.forward(tape, bind, reps)
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, sample: &MultimodalSample) -> Result<Forward> {
        let (visual, tokens) = match &sample.image {
            Some(img) => {
                let (v, t) = self.visual_path(tape, bind, img)?;
                (Some(v), t)
            }
            None => (None, None),
        };
        let input = assemble(tape, bind, sample, visual, &self.llm.tokens)?;
        let logits = self.llm.forward(tape, bind, &input)?;
        Ok(Forward { logits, input, tokens })
    }

    /// Masked next-token cross-entropy over the sample's target tokens.
    pub fn loss(&self, tape: &mut Tape<T>, bind: &Binding, sample: &MultimodalSample) -> Result<Var> {
        let fwd = self.forward(tape, bind, sample)?;
        let (targets, mask) = fwd.input.layout.next_token_targets();
        tape.cross_entropy(fwd.logits, &targets, &mask)
    }

    /// Logits and layout for a sample without tracking gradients.
    pub fn logits(&self, sample: &MultimodalSample) -> Result<(Tensor<T>, AssembledInput)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, |_| false);
        let fwd = self.forward(&mut tape, &bind, sample)?;
        Ok((tape.value(fwd.logits).clone(), fwd.input))
    }

    /// Probabilistic tokens of an image; only defined for the Ovis bridge.
    pub fn visual_tokens(&self, img: &ImageTensor) -> Result<Vec<ProbabilisticToken<T>>> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, |_| false);
        match self.visual_path(&mut tape, &bind, img)? {
            (_, Some(probs)) => Ok(tokens_from_tensor(tape.value(probs))),
            (_, None) => Err(Error::invalid("the connector bridge produces no probabilistic tokens")),
        }
    }

    /// Appends argmax tokens until end-of-sequence or `max_new` tokens.
    pub fn generate_greedy(&self, prompt: &MultimodalSample, max_new: usize) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(Error::invalid("max_new must be at least 1"));
        }
        let mut sample = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let (logits, _) = self.logits(&sample)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            out.push(next);
            if next == self.vocab.eos() {
                break;
            }
            sample.target.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced argmax hits over target positions: `(correct, total)`.
    pub fn token_hits(&self, sample: &MultimodalSample) -> Result<(usize, usize)> {
        let (logits, input) = self.logits(sample)?;
        let (targets, mask) = input.layout.next_token_targets();
        let mut hits = (0, 0);
        for (p, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
            if m {
                hits.1 += 1;
                if argmax(logits.row(p)) == t {
                    hits.0 += 1;
                }
            }
        }
        Ok(hits)
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
