mod common;

use phasesearch::aggregate::{aggregate_perpixel, label_map, weights_from_entropies};
use phasesearch::{
    aggregate_attention, aggregate_avg, aggregate_entropy, align_feature, attention_matrix, predict,
    predict_from_records, search, segment, AggregateMode, AggregatorParams, BudgetConfig, CriterionKind, Error,
    LayerWindow, Tensor,
};

#[test]
fn attention_reduces_to_average_without_output_weight() {
    let g = common::toy();
    let c = g.backbone_output_shape()[0];
    let p = AggregatorParams::new(vec![0.7; c], vec![-0.3; c], vec![0.0; c]).unwrap();
    for x in &common::digits(10).images {
        let recs = search(&g, x, &BudgetConfig::new(6, CriterionKind::Entropy), None).unwrap();
        let feats: Vec<&Tensor> = recs.iter().map(|r| &r.aligned).collect();
        assert_eq!(aggregate_attention(&recs, &p).unwrap(), aggregate_avg(&feats).unwrap());
    }
}

#[test]
fn attention_matches_direct_formula() {
    let g = common::toy();
    let x = &common::digits(1).images[0];
    let recs = search(&g, x, &BudgetConfig::new(4, CriterionKind::Entropy), None).unwrap();
    let c = g.backbone_output_shape()[0];
    let mut r = common::rng(3);
    let p = AggregatorParams::new(
        common::random_tensor(&mut r, vec![c], 0.5).into_data(),
        common::random_tensor(&mut r, vec![c], 0.5).into_data(),
        common::random_tensor(&mut r, vec![c], 0.5).into_data(),
    )
    .unwrap();
    let w = attention_matrix(&recs, &p).unwrap();
    let b = recs.len();
    let out = aggregate_attention(&recs, &p).unwrap();
    let plane = out.len() / c;
    // (1/B) Σ_s (f_s + w_o ⊙ Σ_s' W_ss' f_s'), evaluated literally
    for i in (0..out.len()).step_by(37) {
        let ch = i / plane;
        let mut acc = 0f64;
        for s in 0..b {
            let mixed: f64 = (0..b).map(|t| w.data()[s * b + t] * recs[t].aligned.data()[i] as f64).sum();
            acc += recs[s].aligned.data()[i] as f64 + p.w_o[ch] as f64 * mixed;
        }
        assert!((acc / b as f64 - out.data()[i] as f64).abs() < 1e-5);
    }
}

#[test]
fn entropy_aggregation_prefers_confident_states() {
    let k = 4;
    let confident = Tensor::full(vec![1, 1, 1], 1.0);
    let unsure = Tensor::full(vec![1, 1, 1], -1.0);
    let w = weights_from_entropies(&[0.1, 1.2], k).unwrap();
    assert!(w.weights[0] > w.weights[1]);
    let expected = w.weights[0] * 1.0 - w.weights[1];
    let g = common::toy();
    let x = &common::digits(1).images[0];
    let mut recs = search(&g, x, &BudgetConfig::new(2, CriterionKind::Entropy), None).unwrap();
    recs[0].aligned = confident;
    recs[0].entropy = 0.1;
    recs[1].aligned = unsure;
    recs[1].entropy = 1.2;
    let out = aggregate_entropy(&recs, k).unwrap();
    assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
}

#[test]
fn all_uniform_predictions_fall_back_to_averaging() {
    let ln_k = 3f64.ln();
    let w = weights_from_entropies(&[ln_k, ln_k, ln_k], 3).unwrap();
    assert!(w.weights.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn predict_checks_configuration() {
    let g = common::toy();
    let x = &common::digits(1).images[0];
    let cfg = BudgetConfig::new(4, CriterionKind::Entropy);
    assert!(matches!(predict(&g, x, &cfg, AggregateMode::Attention, None), Err(Error::Config(_))));
    let base = predict(&g, x, &BudgetConfig::new(1, CriterionKind::Entropy), AggregateMode::Avg, None).unwrap();
    assert_eq!(base, g.forward_default(x).unwrap());
    let z = predict(&g, x, &cfg, AggregateMode::Entropy, None).unwrap();
    let recs = search(&g, x, &cfg, None).unwrap();
    assert_eq!(z, predict_from_records(&g, &recs, AggregateMode::Entropy, None).unwrap());

    let seg = common::segmenter(1, &[(2, 2), (2, 2)], 3);
    let xs = common::random_input(&seg, 0);
    assert!(matches!(predict(&seg, &xs, &cfg, AggregateMode::Avg, None), Err(Error::Config(_))));
    assert!(matches!(segment(&g, x, &cfg), Err(Error::Config(_))));
}

#[test]
fn segmentation_weights_and_labels() {
    let g = common::segmenter(2, &[(2, 2), (2, 2), (2, 2)], 3);
    let [_, h, w] = g.input_shape();
    for t in 0..4 {
        let x = common::random_input(&g, t);
        let cfg = BudgetConfig::new(5, CriterionKind::Entropy).with_window(LayerWindow::full(3));
        let seg = segment(&g, &x, &cfg).unwrap();
        assert_eq!(seg.probs.shape(), &[3, h, w]);
        assert_eq!(seg.weights.weights.len(), 5);
        for px in 0..h * w {
            let total: f64 = seg.weights.weights.iter().map(|ws| ws[px]).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let p: f32 = (0..3).map(|c| seg.probs.data()[c * h * w + px]).sum();
            assert!((p - 1.0).abs() < 1e-5);
        }
        assert_eq!(seg.labels, label_map(&seg.probs).unwrap());
    }
}

#[test]
fn single_state_segmentation_is_the_aligned_default_map() {
    let g = common::segmenter(3, &[(2, 2), (2, 2)], 4);
    let x = common::random_input(&g, 9);
    let seg = segment(&g, &x, &BudgetConfig::new(1, CriterionKind::Entropy)).unwrap();
    let s = phasesearch::Selection::default_for(&g);
    let map = align_feature(&g, &g.forward_default(&x).unwrap(), &s).unwrap();
    let (_, pw) = aggregate_perpixel(&[&map], 4).unwrap();
    assert!(pw.weights[0].iter().all(|&v| v == 1.0));
    let labels = label_map(&map).unwrap();
    assert_eq!(seg.labels, labels);
}

#[test]
fn perpixel_weighting_is_local() {
    // state 0 is confident on the left pixel, state 1 on the right
    let a = Tensor::new(vec![2, 1, 2], vec![9.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 0.0, 9.0]).unwrap();
    let (probs, pw) = aggregate_perpixel(&[&a, &b], 2).unwrap();
    assert!(pw.weights[0][0] > 0.9 && pw.weights[1][1] > 0.9);
    assert_eq!(label_map(&probs).unwrap(), vec![0, 1]);
}
