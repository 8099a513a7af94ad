use protocaps::checkpoint::{load_checkpoint, save_checkpoint};
use protocaps::data::{synth_generate, AttributeSchema, NoduleSample};
use protocaps::evaluation::{evaluate, explain_sample};
use protocaps::model::{param_ids, Profile};
use protocaps::prototypes::push_prototypes;
use protocaps::training::{init_model, latents, prepare, train, Ablation, TrainConfig};
use protocaps::{Error, PrototypeBank32, ProtoCaps32};

fn quick() -> TrainConfig {
    TrainConfig {
        profile: Profile::Reduced,
        batch_size: 16,
        max_epochs: 8,
        patience: 8,
        push_start_epoch: 3,
        push_every: 2,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn trained(samples: &[NoduleSample]) -> (ProtoCaps32, PrototypeBank32) {
    let cfg = quick();
    let (mut m, mut b) = init_model(&cfg).unwrap();
    let outcome = train(&mut m, &mut b, samples, &[], &cfg).unwrap();
    assert_eq!(outcome.reports.len(), cfg.max_epochs);
    (m, b)
}

/// Samples whose attribute classes are pairwise distinct, so each is the
/// only push candidate of its class.
fn distinct_classes() -> Vec<NoduleSample> {
    let schema = AttributeSchema::lidc();
    let mut samples = synth_generate(3, 21);
    for (i, s) in samples.iter_mut().enumerate() {
        s.labels.attr_means = schema
            .iter()
            .map(|a| a.min_score as f64 + i as f64 * (a.max_score - a.min_score) as f64 / 2.0)
            .collect();
    }
    samples
}

#[test]
fn bank_pushed_on_the_evaluated_set_reproduces_its_scores() {
    let samples = distinct_classes();
    let (model, mut bank) = init_model::<f32>(&quick()).unwrap();
    let lat = latents(&model, &prepare(&samples, model.config())).unwrap();
    push_prototypes(&mut bank, &lat, &samples).unwrap();
    let r = evaluate(&model, &bank, &samples, Ablation::Full).unwrap();
    assert!(r.attribute_within1.iter().all(|&a| a == 1.0), "{:?}", r.attribute_within1);
    for rec in &r.records {
        for ex in rec.explanations.as_ref().unwrap() {
            assert_eq!(ex.distance, 0.0);
            assert_eq!(ex.source_sample_id, rec.id);
        }
        assert_eq!(rec.attr_pred, rec.attr_gt);
    }
}

#[test]
fn full_mode_ignores_the_attribute_head() {
    let samples = synth_generate(24, 5);
    let (mut model, bank) = trained(&samples);
    let before = evaluate(&model, &bank, &samples, Ablation::Full).unwrap();
    let dense_before = evaluate(&model, &bank, &samples, Ablation::WoUse).unwrap();
    for id in [param_ids::ATTR_W, param_ids::ATTR_B] {
        let zeros = vec![0.0; model.params().get(id).len()];
        model.params_mut().assign(id, &zeros).unwrap();
    }
    let after = evaluate(&model, &bank, &samples, Ablation::Full).unwrap();
    let dense_after = evaluate(&model, &bank, &samples, Ablation::WoUse).unwrap();
    for (a, b) in before.records.iter().zip(&after.records) {
        assert_eq!(a.attr_pred, b.attr_pred);
        assert_eq!(a.malignancy_dist, b.malignancy_dist);
    }
    assert!(dense_after.records.iter().all(|r| r.attr_pred.iter().all(|&v| v == 0.0)));
    assert_ne!(dense_before.attribute_within1, dense_after.attribute_within1);
}

#[test]
fn modes_share_malignancy_and_reconstruction() {
    let samples = synth_generate(24, 6);
    let (model, bank) = trained(&samples);
    let full = evaluate(&model, &bank, &samples, Ablation::Full).unwrap();
    let dense = evaluate(&model, &bank, &samples, Ablation::WoLearn).unwrap();
    assert_eq!(full.malignancy_within1, dense.malignancy_within1);
    assert_eq!(full.mean_dice, dense.mean_dice);
    assert!(full.records.iter().all(|r| r.explanations.is_some()));
    assert!(dense.records.iter().all(|r| r.explanations.is_none()));
    for v in full.attribute_within1.iter().chain([&full.malignancy_within1, &full.mean_dice]) {
        assert!((0.0..=1.0).contains(v));
    }
    assert_eq!(full.n_samples, samples.len());
}

#[test]
fn unpushed_bank_cannot_explain() {
    let samples = synth_generate(4, 7);
    let (model, bank) = init_model::<f32>(&quick()).unwrap();
    assert!(matches!(evaluate(&model, &bank, &samples, Ablation::Full), Err(Error::UnpushedBank)));
    assert!(evaluate(&model, &bank, &samples, Ablation::WoUse).is_ok());
}

#[test]
fn invalid_config_fails_before_training() {
    let cfg = TrainConfig {
        lr_params: 0.0,
        push_every: 0,
        ..quick()
    };
    let (mut m, mut b) = init_model::<f32>(&quick()).unwrap();
    match train(&mut m, &mut b, &synth_generate(4, 0), &[], &cfg) {
        Err(Error::InvalidConfig(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
        other => panic!("expected InvalidConfig, got {other:?}"),
    }
}

#[test]
fn epoch_reports_follow_the_schedule() {
    let samples = synth_generate(24, 8);
    let cfg = quick();
    let (mut m, mut b) = init_model::<f32>(&cfg).unwrap();
    let outcome = train(&mut m, &mut b, &samples, &samples[..8], &cfg).unwrap();
    for r in &outcome.reports {
        assert_eq!(r.pushed, [3, 5, 7].contains(&r.epoch), "epoch {}", r.epoch);
        assert_eq!(r.cluster > 0.0, r.epoch >= 3, "epoch {}", r.epoch);
        assert!((0.0..=1.0).contains(&r.train_malignancy_within1));
        assert!((0.0..=1.0).contains(&r.val_malignancy_within1));
        assert!(r.total.is_finite());
    }
    assert!(outcome.best_epoch >= cfg.push_start_epoch, "a pushed state is preferred");
    assert!(b.is_pushed());
}

#[test]
fn checkpoint_preserves_evaluation() {
    let samples = synth_generate(24, 9);
    let (model, bank) = trained(&samples);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.pcap");
    save_checkpoint(&path, &model, &bank, Some(&quick()), Some(7)).unwrap();
    let (m2, b2, meta) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(meta.train_config, Some(quick()));
    let a = evaluate(&model, &bank, &samples, Ablation::Full).unwrap();
    let b = evaluate(&m2, &b2, &samples, Ablation::Full).unwrap();
    assert_eq!(a, b);
    // f64 loading goes through the same container
    let (m64, b64, _) = load_checkpoint::<f64>(&path).unwrap();
    let c = evaluate(&m64, &b64, &samples, Ablation::Full).unwrap();
    assert!((a.malignancy_within1 - c.malignancy_within1).abs() <= 1.0 / samples.len() as f64);
}

#[test]
fn explanation_of_a_prototype_source() {
    let samples = distinct_classes();
    let (model, mut bank) = init_model::<f32>(&quick()).unwrap();
    let lat = latents(&model, &prepare(&samples, model.config())).unwrap();
    push_prototypes(&mut bank, &lat, &samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bundle = explain_sample(&model, &bank, &samples[1], dir.path()).unwrap();
    assert_eq!(bundle.attributes.len(), 8);
    let images = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_prototype.pgm"))
        .count();
    assert_eq!(images, 8);
    for (a, gt) in bundle.attributes.iter().zip(&samples[1].labels.attr_means) {
        assert_eq!(a.distance, 0.0);
        assert_eq!(a.source_sample_id, samples[1].id());
        assert_eq!(a.source_gt_score, *gt);
    }
}
