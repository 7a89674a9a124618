use rfr_core::autograd::{EntryKind, ParamStore, Tape};
use rfr_core::layers::NormMode;
use rfr_core::loss::{compute_losses, FeatureExtractor, LossWeights};
use rfr_core::net::{NetConfig, RfrNet};
use rfr_core::train::{
    generate_masks, history_csv, norm_param_names, MaskBand, SyntheticDataset, TrainConfig, Trainer, BAND_SLACK,
};
use rfr_core::weights;
use rfr_core::{Precision, RfrError};

fn trainable_values(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(_, e)| e.kind == EntryKind::Trainable)
        .map(|(n, e)| (n.clone(), e.value.data().to_vec()))
        .collect()
}

fn small_run(steps: usize, finetune: usize, lr: f64) -> (RfrNet, Trainer) {
    let mut net = RfrNet::build(NetConfig::micro(32, 2), 7).unwrap();
    let data = SyntheticDataset::generate(4, 32, MaskBand::Medium, 7).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        lr_main: lr,
        lr_finetune: lr,
        main_steps: steps,
        finetune_steps: finetune,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.train(&mut net, &data).unwrap();
    (net, trainer)
}

#[test]
fn generated_masks_land_in_their_band() {
    for band in [MaskBand::Small, MaskBand::Medium, MaskBand::Large] {
        let (lo, hi) = band.range();
        for size in [32, 64] {
            let masks = generate_masks(band, 12, size, 3).unwrap();
            for m in &masks {
                let f = m.hole_fraction();
                assert!(f >= lo - BAND_SLACK && f <= hi + BAND_SLACK, "{band} at {size}: {f}");
            }
            let again = generate_masks(band, 12, size, 3).unwrap();
            assert_eq!(masks, again);
        }
    }
}

#[test]
fn tiny_mask_resolution_is_a_configuration_error() {
    assert!(matches!(
        generate_masks(MaskBand::Large, 1, 8, 0),
        Err(RfrError::Config(_))
    ));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let before = RfrNet::build(NetConfig::micro(32, 2), 7).unwrap();
    let (after, trainer) = small_run(2, 0, 0.0);
    assert_eq!(trainable_values(&before.params), trainable_values(&after.params));
    assert_eq!(trainer.history.len(), 2);
}

#[test]
fn every_layer_receives_gradient() {
    let mut net = RfrNet::build(NetConfig::micro(32, 2), 7).unwrap();
    let data = SyntheticDataset::generate(2, 32, MaskBand::Medium, 1).unwrap();
    let batch = data.batch(0, 2).unwrap();
    let extractor = FeatureExtractor::new(0).unwrap();
    let tape = Tape::new(Precision::Double);
    let out = net
        .arch
        .forward(&tape, &net.params, &tape.constant(batch.masked.clone()), &batch.mask, NormMode::Train)
        .unwrap();
    let terms = compute_losses(&tape, &extractor, &out.prediction, &batch.gt, &batch.mask, &LossWeights::default())
        .unwrap();
    tape.backward(&terms.total, Some(&mut net.params)).unwrap();
    for l in net.arch.layers() {
        let g = net.params.grad(&l.weight_name()).unwrap();
        assert!(g.max_abs() > 0.0, "{} has no gradient", l.name);
        assert!(g.is_finite());
    }
    assert!(net.params.grad("rfr.kca.lambda").unwrap().max_abs() > 0.0);
}

#[test]
fn finetune_phase_leaves_norm_affine_terms_alone() {
    let (main_only, _) = small_run(2, 0, 1e-3);
    let (with_finetune, trainer) = small_run(2, 2, 1e-3);
    assert_eq!(trainer.history.len(), 4);
    let names = norm_param_names(&main_only);
    assert!(!names.is_empty());
    for n in &names {
        assert_eq!(
            main_only.params.value(n).unwrap().data(),
            with_finetune.params.value(n).unwrap().data(),
            "{n}"
        );
        assert!(!with_finetune.params.entry(n).unwrap().frozen);
    }
    // running statistics are also fixed during fine-tuning
    for (n, e) in main_only.params.iter().filter(|(_, e)| e.kind == EntryKind::Buffer) {
        assert_eq!(e.value.data(), with_finetune.params.value(n).unwrap().data(), "{n}");
    }
    let w = "rfr.conv4.weight";
    assert_ne!(main_only.params.value(w).unwrap().data(), with_finetune.params.value(w).unwrap().data());
}

#[test]
fn loss_extractor_is_not_trained() {
    let (_, trainer) = small_run(2, 0, 1e-3);
    let fresh = FeatureExtractor::new(7 ^ 0x5eed).unwrap();
    assert!(trainer.extractor.params.same_values(&fresh.params));
    assert!(trainer.extractor.params.iter().all(|(_, e)| e.frozen));
}

#[test]
fn training_is_reproducible_and_finite() {
    let (a, ta) = small_run(3, 0, 1e-3);
    let (b, tb) = small_run(3, 0, 1e-3);
    assert_eq!(weights::encode(&a.params), weights::encode(&b.params));
    assert_eq!(history_csv(&ta.history), history_csv(&tb.history));
    for r in &ta.history {
        let c = r.components;
        assert!([r.total, c.hole, c.valid, c.perceptual, c.style].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let (_, trainer) = small_run(1, 0, 0.0);
    let r = trainer.history[0];
    let w = LossWeights::default();
    let c = r.components;
    let want = 6.0 * c.hole + c.valid + 0.1 * c.perceptual + 180.0 * c.style;
    assert!((r.total - want).abs() <= 1e-5 * want.abs());
    assert!((w.total(&c) - want).abs() <= 1e-12 * want.abs());
}
