use proptest::prelude::*;

use ovis_core::assemble::{layout, MultimodalSample};
use ovis_core::checkpoint;
use ovis_core::config::{Config, TrainConfig};
use ovis_core::data::{DataBundle, DataCounts, Dataset, DatasetKind};
use ovis_core::model::{BridgeKind, ModelConfig, OvisModel};
use ovis_core::optim::{clip_grad_norm, LrSchedule};
use ovis_core::params::{Init, ParamStore};
use ovis_core::pipeline::{dataset, run_pipeline};
use ovis_core::patch::ImageTensor;
use ovis_core::tokenizer::{sparsity_stats, ProbabilisticToken};
use ovis_core::train::{build_stage, train_stage};

const IMG: usize = 3;

fn tiny(bridge: BridgeKind) -> ModelConfig {
    ModelConfig {
        bridge,
        image_width: 16,
        image_height: 16,
        patch: 8,
        enc_width: 8,
        enc_layers: 2,
        enc_heads: 2,
        visual_vocab: 12,
        llm_width: 8,
        llm_layers: 1,
        llm_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn tiny_config(bridge: BridgeKind, steps: usize) -> Config {
    let mut cfg = Config {
        model: tiny(bridge),
        ..Config::default()
    };
    for s in &mut cfg.train.stages {
        s.steps = steps;
    }
    cfg.train.batch_size = 4;
    cfg.data = DataCounts {
        captions: 12,
        descriptions: 12,
        instructions: 12,
        heldout: 8,
    };
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_length_and_mask(
        prompt_len in 1usize..10,
        at in 0usize..10,
        target_len in 1usize..6,
        n in 1usize..20,
    ) {
        let at = at % prompt_len;
        let mut prompt: Vec<usize> = (0..prompt_len).map(|i| 10 + i).collect();
        prompt[at] = IMG;
        let sample = MultimodalSample { prompt, target: vec![7; target_len], image: Some(ImageTensor::zeros(1, 8, 8)) };
        let l = layout(&sample, n, IMG).unwrap();
        let m = prompt_len + target_len;
        prop_assert_eq!(l.len(), m - 1 + n);
        prop_assert_eq!(l.visual_span, Some((at, n)));
        let first_target = l.len() - target_len;
        for (p, &mask) in l.loss_mask.iter().enumerate() {
            prop_assert_eq!(mask, p >= first_target);
        }
        prop_assert!(l.token_ids[at..at + n].iter().all(Option::is_none));
    }

    #[test]
    fn sparsity_counts_match_brute_force(
        raw in prop::collection::vec(prop::collection::vec(-30.0f64..0.0, 8), 1..20),
    ) {
        let tokens: Vec<ProbabilisticToken<f64>> = raw
            .iter()
            .map(|r| {
                let e: Vec<f64> = r.iter().map(|x| x.exp()).collect();
                let s: f64 = e.iter().sum();
                ProbabilisticToken { probs: e.iter().map(|x| x / s).collect() }
            })
            .collect();
        let rep = sparsity_stats(&tokens, &[1e-4, 1e-5, 1e-6]).unwrap();
        let mut brute = [0u64; 4];
        for t in &tokens {
            for &p in &t.probs {
                let b = if p >= 1e-4 { 0 } else if p >= 1e-5 { 1 } else if p >= 1e-6 { 2 } else { 3 };
                brute[b] += 1;
            }
        }
        prop_assert_eq!(rep.bucket_counts, brute.to_vec());
        prop_assert!((rep.bucket_ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_preserves_direction(g in prop::collection::vec(-50.0f64..50.0, 2..12), max in 0.1f64..5.0) {
        prop_assume!(g.iter().any(|x| x.abs() > 1e-3));
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[g.len()], Init::Zeros, 0).unwrap();
        store.get_mut(id).grad = g.clone();
        let norm = clip_grad_norm(&mut store, &[id], max);
        let after = &store.get(id).grad;
        let after_norm = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = g.iter().zip(after).map(|(a, b)| a * b).sum::<f64>() / (norm * after_norm);
        prop_assert!((cos - 1.0).abs() < 1e-6);
        prop_assert!(after_norm <= max * (1.0 + 1e-12) || norm <= max);
    }

    #[test]
    fn schedule_is_bounded(base in 1e-6f64..1e-1, ratio in 0.0f64..1.0, total in 1usize..400) {
        let s = LrSchedule::new(base, ratio, total).unwrap();
        for k in 0..=total {
            let lr = s.lr_at(k).unwrap();
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, stage in 0u32..4, connector in any::<bool>()) {
        let bridge = if connector { BridgeKind::Connector } else { BridgeKind::Ovis };
        let model = OvisModel::<f32>::new(tiny(bridge), seed).unwrap();
        let bytes = checkpoint::to_bytes(&model, stage).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.stage, stage);
        prop_assert_eq!(checkpoint::to_bytes(&back.model, stage).unwrap(), bytes);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("ovis-core-ckpt-{}", std::process::id()));
    let path = dir.join("m.bin");
    let model = OvisModel::<f32>::new(tiny(BridgeKind::Ovis), 3).unwrap();
    checkpoint::save(&path, &model, 1).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back.model, 1).unwrap(), bytes);
    let mut bad = bytes;
    let mid = bad.len() - 12;
    bad[mid] ^= 1;
    std::fs::write(&path, &bad).unwrap();
    assert!(checkpoint::load(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

/// Both bridges go through the same data, stage and training code.
#[test]
fn both_bridges_share_one_harness() {
    for bridge in [BridgeKind::Ovis, BridgeKind::Connector] {
        let cfg = tiny_config(bridge, 3);
        let bundle = DataBundle::generate(cfg.seed, cfg.data).unwrap();
        let run = run_pipeline(&cfg, &bundle, |_| Ok(())).unwrap();
        assert_eq!(run.stages.len(), 3);
        for s in &run.stages {
            assert_eq!(s.outcome.frozen_hash_before, s.outcome.frozen_hash_after, "{bridge}");
            assert_eq!(s.outcome.probe_losses.len(), 4);
            assert!(s.outcome.metrics.iter().all(|m| m.loss.is_finite()));
        }
        assert_eq!(run.metrics_log.lines().count(), 9);
        let reinit = run.stages[0].reinit.unwrap();
        assert_ne!(reinit.last_before, reinit.last_after);
        assert_eq!(reinit.rest_before, reinit.rest_after);
    }
}

#[test]
fn stage_rejects_wrong_data_kind() {
    let cfg = tiny_config(BridgeKind::Ovis, 2);
    let bundle = DataBundle::generate(0, cfg.data).unwrap();
    let mut model = OvisModel::<f32>::new(cfg.model.clone(), 0).unwrap();
    let captions = dataset(&bundle.captions, &model).unwrap();
    let stage3 = build_stage(3, &model, &cfg.train).unwrap();
    assert!(train_stage(&mut model, &stage3, &captions, 0, |_| Ok(())).is_err());
    let empty = Dataset {
        kind: DatasetKind::Instruction,
        samples: vec![],
        questions: vec![],
    };
    assert!(train_stage(&mut model, &stage3, &empty, 0, |_| Ok(())).is_err());
    assert!(build_stage(0, &model, &TrainConfig::default()).is_err());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny_config(BridgeKind::Ovis, 2);
    let bundle = DataBundle::generate(5, cfg.data).unwrap();
    let a = run_pipeline(&cfg, &bundle, |_| Ok(())).unwrap();
    let b = run_pipeline(&cfg, &bundle, |_| Ok(())).unwrap();
    assert_eq!(a.metrics_log, b.metrics_log);
    assert_eq!(
        checkpoint::to_bytes(&a.model, 3).unwrap(),
        checkpoint::to_bytes(&b.model, 3).unwrap()
    );
    let mut other = cfg.clone();
    other.seed = 6;
    let c = run_pipeline(&other, &bundle, |_| Ok(())).unwrap();
    assert_ne!(a.model.store.hash_where(|_| true), c.model.store.hash_where(|_| true));
}

#[test]
fn forward_values_stay_finite() {
    let cfg = tiny(BridgeKind::Ovis);
    let model = OvisModel::<f32>::new(cfg.clone(), 1).unwrap();
    let bundle = DataBundle::generate(1, DataCounts { captions: 4, descriptions: 4, instructions: 4, heldout: 4 }).unwrap();
    for kind in DatasetKind::ALL {
        for s in &dataset(bundle.split(kind), &model).unwrap().samples {
            let (logits, _) = model.logits(s).unwrap();
            assert!(logits.is_finite());
        }
    }
}
