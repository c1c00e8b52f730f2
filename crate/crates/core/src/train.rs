//! Three-stage training.
//!
//! | stage | trainable                                  | data         |
//! |-------|--------------------------------------------|--------------|
//! | 1     | last encoder block, tokenizer head, table  | captions     |
//! | 2     | whole encoder, tokenizer head, table       | descriptions |
//! | 3     | everything                                 | instructions |
//!
//! Stage 1 also re-draws the last encoder block before training.

use std::fmt;

use rand::seq::SliceRandom;

use crate::assemble::MultimodalSample;
use crate::config::TrainConfig;
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::model::{OvisModel, VisualBridge};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::stream;
use crate::tensor::{Scalar, Tape, Var};

/// Number of updates after which the probe loss is no longer tracked.
pub const PROBE_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    One = 1,
    Two = 2,
    Three = 3,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::One, StageId::Two, StageId::Three];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn dataset_kind(self) -> DatasetKind {
        match self {
            StageId::One => DatasetKind::Caption,
            StageId::Two => DatasetKind::Description,
            StageId::Three => DatasetKind::Instruction,
        }
    }
}

impl TryFrom<u8> for StageId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(StageId::One),
            2 => Ok(StageId::Two),
            3 => Ok(StageId::Three),
            other => Err(Error::invalid(format!("unknown stage {other} (expected 1, 2 or 3)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    EncoderLastBlock,
    Encoder,
    Bridge,
    Llm,
}

/// Parameter-name predicate for a set of groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    pub groups: Vec<ParamGroup>,
    last_block_prefix: String,
}

impl TrainableSet {
    pub fn new<T: Scalar>(groups: Vec<ParamGroup>, model: &OvisModel<T>) -> Self {
        Self {
            groups,
            last_block_prefix: model.encoder.last_block_prefix(),
        }
    }

    pub fn group_contains(&self, group: ParamGroup, name: &str) -> bool {
        match group {
            ParamGroup::EncoderLastBlock => name.starts_with(&self.last_block_prefix),
            ParamGroup::Encoder => name.starts_with("encoder."),
            ParamGroup::Bridge => VisualBridge::is_param(name),
            ParamGroup::Llm => name.starts_with("llm."),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.iter().any(|&g| self.group_contains(g, name))
    }

    pub fn ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| self.contains(&p.name)).map(|(id, _)| id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    pub trainable: TrainableSet,
    pub kind: DatasetKind,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

pub fn build_stage<T: Scalar>(stage: u8, model: &OvisModel<T>, cfg: &TrainConfig) -> Result<StageConfig> {
    let stage = StageId::try_from(stage)?;
    let groups = match stage {
        StageId::One => vec![ParamGroup::EncoderLastBlock, ParamGroup::Bridge],
        StageId::Two => vec![ParamGroup::Encoder, ParamGroup::Bridge],
        StageId::Three => vec![ParamGroup::Encoder, ParamGroup::Bridge, ParamGroup::Llm],
    };
    let s = cfg.stages[stage.number() as usize - 1];
    if s.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("steps and batch size must be positive"));
    }
    Ok(StageConfig {
        stage,
        trainable: TrainableSet::new(groups, model),
        kind: stage.dataset_kind(),
        lr: s.lr,
        warmup_ratio: s.warmup_ratio,
        steps: s.steps,
        batch_size: cfg.batch_size,
        grad_clip: cfg.grad_clip,
        adamw: cfg.adamw,
    })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for StepMetric {
    /// `step<TAB>stage<TAB>lr<TAB>loss`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6e}\t{:.6}", self.step, self.stage, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: StageId,
    pub metrics: Vec<StepMetric>,
    /// Loss on a fixed probe batch before the first update and after each of
    /// the first [`PROBE_STEPS`] updates.
    pub probe_losses: Vec<f64>,
    pub frozen_hash_before: u64,
    pub frozen_hash_after: u64,
}

/// Mean of per-sample losses, built on one tape.
pub fn batch_loss<T: Scalar>(
    model: &OvisModel<T>,
    tape: &mut Tape<T>,
    bind: &Binding,
    batch: &[&MultimodalSample],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in batch {
        let l = model.loss(tape, bind, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Dataset("empty batch".into()))?;
    tape.scale(total, T::of(1.0 / batch.len() as f64))
}

pub fn eval_loss<T: Scalar>(model: &OvisModel<T>, batch: &[&MultimodalSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, |_| false);
    let l = batch_loss(model, &mut tape, &bind, batch)?;
    Ok(tape.value(l).item().f64())
}

/// Forward + backward of one batch; gradients land in the store.
pub fn accumulate_batch_grads<T: Scalar>(
    model: &mut OvisModel<T>,
    trainable: &TrainableSet,
    batch: &[&MultimodalSample],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, |n| trainable.contains(n));
    let loss = batch_loss(model, &mut tape, &bind, batch)?;
    let value = tape.value(loss).item().f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    model.store.accumulate_grads(&tape, &bind);
    Ok(value)
}

/// Cycles through a seeded permutation of the dataset, reshuffling per epoch.
struct BatchOrder {
    seed: u64,
    label: String,
    len: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(seed: u64, stage: StageId, len: usize) -> Self {
        let mut o = Self {
            seed,
            label: format!("order/stage{}", stage.number()),
            len,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        o.shuffle();
        o
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut stream(self.seed, &self.label, self.epoch));
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.len {
                    self.epoch += 1;
                    self.shuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains the stage's trainable set on `data`. Update `k` (1-based) uses
/// `lr_at(k)`, so the first update already has a nonzero rate. `sink` sees
/// every step's metric as soon as it is computed.
pub fn train_stage<T: Scalar>(
    model: &mut OvisModel<T>,
    cfg: &StageConfig,
    data: &Dataset,
    seed: u64,
    mut sink: impl FnMut(&StepMetric) -> Result<()>,
) -> Result<StageOutcome> {
    if data.kind != cfg.kind {
        return Err(Error::Dataset(format!(
            "stage {} trains on {} data, got {}",
            cfg.stage.number(),
            cfg.kind,
            data.kind
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let trainable_ids = cfg.trainable.ids(&model.store);
    let frozen = |n: &str| !cfg.trainable.contains(n);
    let frozen_hash_before = model.store.hash_where(frozen);

    let sched = LrSchedule::new(cfg.lr, cfg.warmup_ratio, cfg.steps)?;
    let mut opt = AdamW::new(cfg.adamw, &model.store, &trainable_ids);
    let mut order = BatchOrder::new(seed, cfg.stage, data.len());

    let probe_idx: Vec<usize> = BatchOrder::new(seed, cfg.stage, data.len()).next_batch(cfg.batch_size);
    let probe: Vec<&MultimodalSample> = probe_idx.iter().map(|&i| &data.samples[i]).collect();
    let mut probe_losses = vec![eval_loss(model, &probe)?];

    let mut metrics = Vec::with_capacity(cfg.steps);
    model.store.zero_grads();
    for step in 1..=cfg.steps {
        let batch: Vec<&MultimodalSample> = order.next_batch(cfg.batch_size).into_iter().map(|i| &data.samples[i]).collect();
        let loss = accumulate_batch_grads(model, &cfg.trainable, &batch)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("stage {} step {step}: {m}", cfg.stage.number())),
                other => other,
            })?;
        clip_grad_norm(&mut model.store, &trainable_ids, cfg.grad_clip);
        let lr = sched.lr_at(step)?;
        opt.update(&mut model.store, lr);
        model.store.zero_grads();

        let m = StepMetric {
            step,
            stage: cfg.stage.number(),
            lr,
            loss,
        };
        sink(&m)?;
        metrics.push(m);
        if step <= PROBE_STEPS {
            probe_losses.push(eval_loss(model, &probe)?);
        }
    }
    Ok(StageOutcome {
        stage: cfg.stage,
        metrics,
        probe_losses,
        frozen_hash_before,
        frozen_hash_after: model.store.hash_where(frozen),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::ModelConfig;

    fn tiny() -> OvisModel<f32> {
        let cfg = ModelConfig {
            image_width: 8,
            image_height: 8,
            channels: 1,
            patch: 4,
            enc_width: 8,
            enc_layers: 2,
            enc_heads: 2,
            visual_vocab: 6,
            llm_width: 8,
            llm_layers: 1,
            llm_heads: 2,
            max_seq: 16,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        OvisModel::new(cfg, 0).unwrap()
    }

    #[test]
    fn stage_masks() {
        let m = tiny();
        let t = TrainConfig::default();
        let s1 = build_stage(1, &m, &t).unwrap();
        assert_eq!(m.store.count_where(|n| n.starts_with("llm.") && s1.trainable.contains(n)), 0);
        assert!(!s1.trainable.contains("encoder.blocks.0.attn.q.w"));
        assert!(s1.trainable.contains("encoder.blocks.1.attn.q.w"));
        assert!(!s1.trainable.contains("encoder.pos"));
        assert!(s1.trainable.contains("vt.head") && s1.trainable.contains("vt.table"));

        let s2 = build_stage(2, &m, &t).unwrap();
        assert!(s2.trainable.contains("encoder.blocks.0.attn.q.w"));
        assert!(s2.trainable.contains("encoder.pos"));
        assert!(!s2.trainable.contains("llm.tok"));

        let s3 = build_stage(3, &m, &t).unwrap();
        assert_eq!(m.store.count_where(|n| s3.trainable.contains(n)), m.store.num_elements());
        assert!(build_stage(4, &m, &t).is_err());
        assert_eq!(s3.kind, DatasetKind::Instruction);
    }

    #[test]
    fn batch_order_cycles_every_index() {
        let mut o = BatchOrder::new(1, StageId::One, 5);
        let mut seen: Vec<usize> = o.next_batch(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(o.next_batch(7).len(), 7);
    }
}
