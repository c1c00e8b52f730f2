//! Runs the three stages in order on one model.

use crate::config::Config;
use crate::data::{DataBundle, Dataset, DatasetKind, DatasetRecord};
use crate::error::Result;
use crate::model::OvisModel;
use crate::train::{build_stage, train_stage, StageId, StageOutcome, StepMetric};

/// Hashes around the stage-1 re-draw of the last encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReinitCheck {
    pub last_before: u64,
    pub last_after: u64,
    pub rest_before: u64,
    pub rest_after: u64,
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub outcome: StageOutcome,
    pub reinit: Option<ReinitCheck>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: OvisModel<f32>,
    pub stages: Vec<StageRun>,
    /// Every step of every stage, one TSV line each.
    pub metrics_log: String,
}

pub fn dataset(records: &[DatasetRecord], model: &OvisModel<f32>) -> Result<Dataset> {
    let c = &model.cfg;
    Dataset::from_records(records, &model.vocab, c.channels, c.image_width, c.image_height)
}

/// Re-draws the last encoder block with `seed + 1` before stage 1, then trains.
pub fn run_stage(
    model: &mut OvisModel<f32>,
    stage: StageId,
    cfg: &Config,
    data: &Dataset,
    sink: impl FnMut(&StepMetric) -> Result<()>,
) -> Result<StageRun> {
    let reinit = if stage == StageId::One {
        let prefix = model.encoder.last_block_prefix();
        let in_last = |n: &str| n.starts_with(&prefix);
        let last_before = model.store.hash_where(in_last);
        let rest_before = model.store.hash_where(|n| !in_last(n));
        model.reinit_last_block(cfg.seed + 1);
        Some(ReinitCheck {
            last_before,
            last_after: model.store.hash_where(in_last),
            rest_before,
            rest_after: model.store.hash_where(|n| !in_last(n)),
        })
    } else {
        None
    };
    let sc = build_stage(stage.number(), model, &cfg.train)?;
    let outcome = train_stage(model, &sc, data, cfg.seed, sink)?;
    Ok(StageRun { outcome, reinit })
}

/// Fresh model from `cfg.seed`, then stages 1 to 3.
pub fn run_pipeline(cfg: &Config, bundle: &DataBundle, mut sink: impl FnMut(&StepMetric) -> Result<()>) -> Result<PipelineRun> {
    let mut model = OvisModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut stages = Vec::with_capacity(3);
    let mut metrics_log = String::new();
    for stage in StageId::ALL {
        let data = dataset(bundle.split(stage.dataset_kind()), &model)?;
        let run = run_stage(&mut model, stage, cfg, &data, |m| {
            metrics_log.push_str(&format!("{m}\n"));
            sink(m)
        })?;
        stages.push(run);
    }
    Ok(PipelineRun {
        model,
        stages,
        metrics_log,
    })
}

pub fn heldout(bundle: &DataBundle, model: &OvisModel<f32>) -> Result<Dataset> {
    let d = dataset(&bundle.heldout, model)?;
    debug_assert_eq!(d.kind, DatasetKind::Instruction);
    Ok(d)
}
