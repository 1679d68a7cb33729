use canfuse::experiment::{
    compare, evaluate, generate_synthetic, percent_decrease, predict_samples, train, ExperimentConfig,
    ExperimentError, SynthConfig,
};
use canfuse::fusionmodel::Variant;
use canfuse::sync::{split_groups, SyncedSample};

fn small(seed: u64) -> Vec<SyncedSample> {
    generate_synthetic(&SynthConfig::new(seed, 10)).unwrap()
}

fn quick(seed: u64, epochs: usize) -> ExperimentConfig {
    ExperimentConfig { epochs, batch_size: 8, ..ExperimentConfig::with_seed(seed) }
}

#[test]
fn constant_labels_are_fit() {
    // one scene repeated with a constant label: the bias alone can fit it
    let mut samples = small(3);
    let scene = samples[0].clone();
    samples.iter_mut().for_each(|s| {
        s.image = scene.image.clone();
        s.can_features = scene.can_features;
        s.steering_angle = 0.25;
    });
    let cfg = ExperimentConfig { batch_size: 4, ..quick(3, 30) };
    let out = train(&cfg, &samples, Variant::VisionOnly).unwrap();
    let (train_set, _) = split_groups(&samples, &cfg.val_groups).unwrap();
    let rmse = evaluate(&out.model, &train_set).unwrap();
    assert!(rmse <= 1e-3, "train rmse {rmse}");
    let mse: Vec<f64> = out.history.iter().map(|h| h.train_mse).collect();
    assert!(mse.windows(2).all(|w| w[1] <= w[0]), "{mse:?}");
}

#[test]
fn training_is_deterministic() {
    let samples = small(4);
    let a = train(&quick(9, 2), &samples, Variant::Fused).unwrap();
    let b = train(&quick(9, 2), &samples, Variant::Fused).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.parameters(), b.model.parameters());
    let c = train(&quick(10, 2), &samples, Variant::Fused).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_epoch_is_the_lowest_validation_error() {
    let samples = small(5);
    let cfg = quick(1, 4);
    let out = train(&cfg, &samples, Variant::Fused).unwrap();
    assert_eq!(out.history.len(), 4);
    let best = out.history.iter().map(|h| h.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.history[out.best_epoch - 1].val_rmse, best);
    let (_, val) = split_groups(&samples, &cfg.val_groups).unwrap();
    assert_eq!(evaluate(&out.model, &val).unwrap(), best);
}

#[test]
fn reported_rmse_matches_recomputation() {
    let samples = small(6);
    let cfg = quick(2, 2);
    let out = train(&cfg, &samples, Variant::Fused).unwrap();
    let (_, val) = split_groups(&samples, &cfg.val_groups).unwrap();
    let pred = predict_samples(&out.model, &val).unwrap();
    let mut sq = 0.0;
    for (p, s) in pred.iter().zip(&val) {
        sq += (p - s.steering_angle).powi(2);
    }
    let independent = (sq / val.len() as f64).sqrt();
    let reported = out.history[out.best_epoch - 1].val_rmse;
    assert!((reported - independent).abs() <= 1e-12 * independent.max(1e-300), "{reported} vs {independent}");
}

#[test]
fn control_comparison_is_exactly_zero() {
    let samples = small(7);
    let cfg = ExperimentConfig { variants: [Variant::VisionOnly, Variant::VisionOnly], ..quick(5, 2) };
    let r = compare(&cfg, &samples).unwrap();
    assert_eq!(r.percent_decrease_val, 0.0);
    assert_eq!(r.vision_only.rmse_val, r.fused.rmse_val);
}

#[test]
fn report_percent_is_computed_from_reported_values() {
    let samples = small(8);
    let r = compare(&quick(3, 1), &samples).unwrap();
    assert_eq!(r.percent_decrease_val, percent_decrease(r.vision_only.rmse_val, r.fused.rmse_val));
    assert_eq!(r.percent_decrease_val, 100.0 * (r.vision_only.rmse_val - r.fused.rmse_val) / r.vision_only.rmse_val);
    assert_eq!(r.vision_only.variant, Variant::VisionOnly);
    assert_eq!(r.fused.variant, Variant::Fused);
}

#[test]
fn split_errors_surface() {
    let samples = small(1);
    let cfg = ExperimentConfig { val_groups: [9].into(), ..quick(1, 1) };
    assert!(matches!(train(&cfg, &samples, Variant::Fused), Err(ExperimentError::UnknownGroup(9))));
    let only_val: Vec<_> = samples.iter().filter(|s| s.group_id == 5).cloned().collect();
    assert!(matches!(train(&quick(1, 1), &only_val, Variant::Fused), Err(ExperimentError::EmptySplit(_))));
    assert!(matches!(evaluate(&train(&quick(1, 1), &samples, Variant::Fused).unwrap().model, &[]), Err(ExperimentError::EmptyInput)));
}
