mod common;

use phasesearch::train::{batch_loss, cosine_lr, loss_and_grad, train_aggregator_from, AdamW, LinearHead, Params, PooledSet};
use phasesearch::{
    predict_from_records, search, train_aggregator, AggregateMode, AggregatorParams, BudgetConfig, CriterionKind,
    Dataset, Error, TrainConfig,
};

fn small_config() -> TrainConfig {
    TrainConfig {
        budget: 4,
        epochs: 2,
        batch: 16,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let g = common::toy();
    let data = common::digits(20);
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let (p, report) = train_aggregator(&g, &data, &cfg).unwrap();
    assert_eq!(p, AggregatorParams::init(g.backbone_output_shape()[0], cfg.seed));
    assert_eq!(report.steps, 0);
    assert_eq!(report.final_train_loss, report.initial_train_loss);
    assert_eq!((report.train_images, report.val_images), (16, 4));
}

#[test]
fn zero_output_weight_makes_attention_averaging() {
    let g = common::toy();
    let data = common::digits(10);
    let c = g.backbone_output_shape()[0];
    let init = AggregatorParams::new(vec![0.3; c], vec![0.2; c], vec![0.0; c]).unwrap();
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let (p, _) = train_aggregator_from(&g, &data, &cfg, init).unwrap();
    for x in &data.images {
        let recs = search(&g, x, &BudgetConfig::new(4, CriterionKind::Entropy), None).unwrap();
        assert_eq!(
            predict_from_records(&g, &recs, AggregateMode::Attention, Some(&p)).unwrap(),
            predict_from_records(&g, &recs, AggregateMode::Avg, None).unwrap()
        );
    }
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let g = common::toy();
    let data = common::digits(120);
    let cfg = small_config();
    let (a, report) = train_aggregator(&g, &data, &cfg).unwrap();
    assert!(report.final_train_loss < report.initial_train_loss, "{report:?}");
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.steps, 2 * 96usize.div_ceil(16));
    let (b, again) = train_aggregator(&g, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(report, again);
    let (other, _) = train_aggregator(&g, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn training_rejects_bad_inputs() {
    let g = common::toy();
    let data = common::digits(10);
    assert!(matches!(train_aggregator(&g, &Dataset::default(), &small_config()), Err(Error::Validation(_))));
    for bad in [
        TrainConfig { lr: 0.0, ..small_config() },
        TrainConfig { batch: 0, ..small_config() },
        TrainConfig { budget: 0, ..small_config() },
        TrainConfig { temperature: -1.0, ..small_config() },
        TrainConfig { val_fraction: 1.0, ..small_config() },
    ] {
        assert!(matches!(train_aggregator(&g, &data, &bad), Err(Error::Config(_))), "{bad:?}");
    }
    let seg = common::segmenter(0, &[(2, 2), (2, 2)], 3);
    let seg_data = Dataset {
        images: vec![common::random_input(&seg, 0)],
        labels: vec![0],
    };
    assert!(matches!(train_aggregator(&seg, &seg_data, &small_config()), Err(Error::Config(_))));
    let wrong = AggregatorParams::init(3, 0);
    assert!(train_aggregator_from(&g, &data, &small_config(), wrong).is_err());
}

#[test]
fn adamw_fits_a_separable_pooled_set() {
    // two classes; the informative state is the one with a large first channel
    let head = LinearHead::<f64> {
        weight: vec![1.0, 0.0, -1.0, 0.0],
        bias: vec![0.0, 0.0],
        classes: 2,
        channels: 2,
    };
    let mut r = common::rng(1);
    let batch: Vec<PooledSet<f64>> = (0..40)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            let noise = common::random_tensor(&mut r, vec![4], 0.2).into_data();
            PooledSet {
                pooled: vec![
                    vec![sign * 2.0 + noise[0] as f64, 1.0],
                    vec![noise[1] as f64, -1.0],
                    vec![noise[2] as f64 - sign * 0.3, 0.5 + noise[3] as f64],
                ],
                label,
            }
        })
        .collect();
    let mut p = Params {
        w_q: vec![0.01, -0.01],
        w_k: vec![0.02, 0.01],
        w_o: vec![0.0, 0.0],
    };
    let start = batch_loss(&p, &head, &batch);
    let mut opt = AdamW::new(&p, 0.0);
    for step in 0..200 {
        let (_, grad) = loss_and_grad(&p, &head, &batch);
        opt.step(&mut p, &grad, cosine_lr(0.05, step, 200));
    }
    let end = batch_loss(&p, &head, &batch);
    assert!(end < 0.8 * start, "{start} → {end}");
    assert!(p.w_o[0] > 0.0);
}
