use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::SlideBag;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config(aggregator: AggregatorConfig, extractor: ExtractorConfig) -> ModelConfig {
    ModelConfig {
        content_dim: 5,
        descriptor_dim: 5,
        classes: 2,
        extractor,
        aggregator,
        decision_hidden: vec![7, 4],
        scorer_bias: true,
    }
}

fn random_bag(rng: &mut ChaCha8Rng, tiles: usize, dim: usize) -> SlideBag {
    let data = (0..tiles * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    SlideBag::from_rows("r", dim, data).unwrap()
}

fn dense_row(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (layer.inputs(), layer.outputs());
    (0..n_out)
        .map(|o| {
            let mut acc = layer.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            for (i, xi) in x.iter().enumerate().take(n_in) {
                acc += xi * layer.weight.data()[i * n_out + o];
            }
            acc
        })
        .collect()
}

/// Layer-by-layer decision head written out independently of the tape.
fn head_oracle(model: &WsiClassifier, d: &[f64]) -> Vec<f64> {
    let layers = model.decision_layers();
    let mut h = d.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = dense_row(l, &h);
        if i + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let m = h.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn identity_extractor_passes_content_through() {
    let cfg = ModelConfig {
        content_dim: 3,
        descriptor_dim: 3,
        ..small_config(AggregatorConfig::min_max(1), ExtractorConfig::Identity)
    };
    let model = WsiClassifier::new(cfg, &mut rng(1)).unwrap();
    assert_eq!(model.encode_tile(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    assert!(matches!(
        model.encode_tile(&[1.0, 2.0]),
        Err(ModelError::Dimension { .. })
    ));
}

#[test]
fn zero_mlp_extractor_gives_zero_descriptor() {
    let cfg = ModelConfig {
        content_dim: 4,
        descriptor_dim: 3,
        ..small_config(
            AggregatorConfig::min_max(1),
            ExtractorConfig::Mlp {
                hidden: vec![6],
                output_activation: Activation::Identity,
            },
        )
    };
    let model = WsiClassifier::zeroed(cfg).unwrap();
    assert_eq!(model.encode_tile(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
}

#[test]
fn mlp_extractor_matches_hand_evaluation() {
    let mut r = rng(2);
    for _ in 0..20 {
        let cfg = ModelConfig {
            content_dim: 6,
            descriptor_dim: 4,
            ..small_config(
                AggregatorConfig::min_max(1),
                ExtractorConfig::Mlp {
                    hidden: vec![5, 3],
                    output_activation: Activation::Tanh,
                },
            )
        };
        let model = WsiClassifier::new(cfg, &mut r).unwrap();
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let layers = model.extractor_layers();
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            h = dense_row(l, &h);
            let last = i + 1 == layers.len();
            h.iter_mut()
                .for_each(|v| *v = if last { v.tanh() } else { v.max(0.0) });
        }
        let got = model.encode_tile(&x).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_scorer_examples() {
    let cfg = small_config(AggregatorConfig::min_max(1), ExtractorConfig::Identity);
    let mut model = WsiClassifier::zeroed(cfg).unwrap();
    model.scorer_layers_mut()[0]
        .weight
        .assign(&[1.0, 0.0, 0.0, 0.0, 0.0])
        .unwrap();
    assert_eq!(model.score_tile(&[7.0, 1.0, 2.0, 3.0, 4.0]).unwrap(), 7.0);

    model.scorer_layers_mut()[0].weight.assign(&[0.0; 5]).unwrap();
    model.scorer_layers_mut()[0].bias.as_mut().unwrap().assign(&[3.0]).unwrap();
    assert_eq!(model.score_tile(&[9.0, -1.0, 2.0, 3.0, 4.0]).unwrap(), 3.0);

    let mut r = rng(3);
    let model = WsiClassifier::new(model.config().clone(), &mut r).unwrap();
    let d: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
    let oracle = dense_row(&model.scorer_layers()[0], &d)[0];
    assert!((model.score_tile(&d).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn min_max_examples() {
    let s = [3.0, 1.0, -2.0, 0.0, 5.0];
    let one = aggregate_minmax(&s, 1).unwrap();
    assert_eq!(one.slide_descriptor, vec![5.0, -2.0]);
    assert_eq!(one.slots, vec![4, 2]);

    let two = aggregate_minmax(&s, 2).unwrap();
    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    let oracle = vec![sorted[4], sorted[3], sorted[0], sorted[1]];
    assert_eq!(two.slide_descriptor, oracle);

    let tied = aggregate_minmax(&[1.0; 6], 2).unwrap();
    assert_eq!(tied.slide_descriptor, vec![1.0; 4]);
    assert_eq!(tied.slots, vec![0, 1, 2, 3]);

    assert!(matches!(
        aggregate_minmax(&s, 3),
        Err(ModelError::BagTooSmall { .. })
    ));
}

#[test]
fn min_max_forward_rejects_small_bags() {
    let cfg = small_config(AggregatorConfig::min_max(2), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(4)).unwrap();
    let bag = random_bag(&mut rng(5), 3, 5);
    assert!(matches!(
        model.forward_slide(&bag),
        Err(ModelError::BagTooSmall { tiles: 3, r: 2, .. })
    ));
}

#[test]
fn attention_examples() {
    let cfg = small_config(AggregatorConfig::attention(), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(6)).unwrap();
    let d = [0.5, -1.0, 2.0, 0.0, 1.5];
    let (w, pooled) = model.aggregate_attention(&d).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(pooled, d.to_vec());

    let two: Vec<f64> = d.iter().chain(&d).cloned().collect();
    let (w, _) = model.aggregate_attention(&two).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
}

#[test]
fn attention_matches_direct_formula() {
    let mut r = rng(7);
    for _ in 0..10 {
        let cfg = small_config(
            AggregatorConfig::Attention {
                hidden: 6,
                activation: Activation::Tanh,
            },
            ExtractorConfig::Identity,
        );
        let model = WsiClassifier::new(cfg, &mut r).unwrap();
        let d: Vec<f64> = (0..25).map(|_| r.random_range(-2.0..2.0)).collect();
        let [v, u] = model.scorer_layers() else { panic!() };
        let logits: Vec<f64> = (0..5)
            .map(|j| {
                let h: Vec<f64> = dense_row(v, &d[j * 5..(j + 1) * 5]).iter().map(|x| x.tanh()).collect();
                dense_row(u, &h)[0]
            })
            .collect();
        let total: f64 = logits.iter().map(|l| l.exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|l| l.exp() / total).collect();
        let (w, pooled) = model.aggregate_attention(&d).unwrap();
        for (a, b) in w.iter().zip(&weights) {
            assert!((a - b).abs() < 1e-12);
        }
        for k in 0..5 {
            let oracle: f64 = (0..5).map(|j| weights[j] * d[j * 5 + k]).sum();
            assert!((pooled[k] - oracle).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn decision_head_examples() {
    let cfg = small_config(AggregatorConfig::min_max(2), ExtractorConfig::Identity);
    let zero = WsiClassifier::zeroed(cfg.clone()).unwrap();
    assert_eq!(zero.decide(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.5, 0.5]);
    assert!(matches!(zero.decide(&[1.0]), Err(ModelError::Dimension { .. })));

    let mut r = rng(8);
    for _ in 0..20 {
        let model = WsiClassifier::new(cfg.clone(), &mut r).unwrap();
        let d: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
        let p = model.decide(&d).unwrap();
        let oracle = head_oracle(&model, &d);
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_composes_blocks() {
    let cfg = small_config(AggregatorConfig::min_max(1), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(9)).unwrap();
    let bag = random_bag(&mut rng(10), 2, 5);
    let f = model.forward_slide(&bag).unwrap();
    let s0 = model.score_tile(bag.tile(0)).unwrap();
    let s1 = model.score_tile(bag.tile(1)).unwrap();
    let expected = model.decide(&[s0.max(s1), s0.min(s1)]).unwrap();
    assert_eq!(f.prediction, expected);

    let cfg = small_config(AggregatorConfig::attention(), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(11)).unwrap();
    let bag = random_bag(&mut rng(12), 1, 5);
    let f = model.forward_slide(&bag).unwrap();
    assert_eq!(f.prediction, model.decide(bag.tile(0)).unwrap());
    assert!((f.prediction.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn slide_dims_follow_aggregator() {
    let mm = WsiClassifier::new(ModelConfig::default(), &mut rng(1)).unwrap();
    assert_eq!(mm.dims().slide_dim, 10);
    let att = WsiClassifier::new(
        ModelConfig {
            aggregator: AggregatorConfig::attention(),
            ..ModelConfig::default()
        },
        &mut rng(1),
    )
    .unwrap();
    assert_eq!(att.dims().slide_dim, 64);
    assert_eq!(att.decision_layers()[0].inputs(), 64);
    assert_eq!(att.decision_layers()[0].outputs(), 200);
    assert_eq!(att.decision_layers()[1].outputs(), 100);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig::default();
    for cfg in [
        ModelConfig { classes: 1, ..base.clone() },
        ModelConfig { descriptor_dim: 32, ..base.clone() },
        ModelConfig { aggregator: AggregatorConfig::min_max(0), ..base.clone() },
    ] {
        assert!(WsiClassifier::new(cfg, &mut rng(1)).is_err());
    }
}

#[test]
fn min_max_is_permutation_invariant() {
    let cfg = small_config(AggregatorConfig::min_max(2), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(13)).unwrap();
    let bag = random_bag(&mut rng(14), 9, 5);
    let order = [4, 2, 8, 0, 7, 1, 6, 3, 5];
    let a = model.forward_slide(&bag).unwrap();
    let b = model.forward_slide(&bag.permuted(&order).unwrap()).unwrap();
    assert_eq!(a.slide_descriptor, b.slide_descriptor);
    assert_eq!(a.prediction, b.prediction);
    let (TileSelection::MinMax { slots: sa }, TileSelection::MinMax { slots: sb }) =
        (&a.selection, &b.selection)
    else {
        panic!()
    };
    for (x, y) in sa.iter().zip(sb) {
        assert_eq!(*x, order[*y]);
    }
}

#[test]
fn attention_is_permutation_invariant() {
    let cfg = small_config(AggregatorConfig::attention(), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(15)).unwrap();
    let bag = random_bag(&mut rng(16), 6, 5);
    let order = [3, 5, 0, 1, 4, 2];
    let a = model.forward_slide(&bag).unwrap();
    let b = model.forward_slide(&bag.permuted(&order).unwrap()).unwrap();
    for (x, y) in a.slide_descriptor.iter().zip(&b.slide_descriptor) {
        assert!((x - y).abs() < 1e-12);
    }
    let (TileSelection::Attention { weights: wa }, TileSelection::Attention { weights: wb }) =
        (&a.selection, &b.selection)
    else {
        panic!()
    };
    for (j, &o) in order.iter().enumerate() {
        assert!((wb[j] - wa[o]).abs() < 1e-15);
    }
}

#[test]
fn half_bag_r_reproduces_sorted_scores() {
    let cfg = small_config(AggregatorConfig::min_max(4), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(17)).unwrap();
    let bag = random_bag(&mut rng(18), 8, 5);
    let f = model.forward_slide(&bag).unwrap();
    let mut desc = f.scores.clone();
    desc.sort_by(|a, b| b.total_cmp(a));
    assert_eq!(&f.slide_descriptor[..4], &desc[..4]);
    let mut asc = f.scores.clone();
    asc.sort_by(f64::total_cmp);
    assert_eq!(&f.slide_descriptor[4..], &asc[..4]);
}

#[test]
fn end_to_end_gradient_to_descriptors_matches_finite_differences() {
    let mut r = rng(19);
    for aggregator in [AggregatorConfig::min_max(2), AggregatorConfig::attention()] {
        let cfg = small_config(aggregator, ExtractorConfig::Identity);
        let model = WsiClassifier::new(cfg, &mut r).unwrap();
        let bag = random_bag(&mut r, 6, 5);
        let prob = |bag: &SlideBag| model.forward_slide(bag).unwrap().prediction[1];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let (vars, _) = model.forward_on_tape(&mut tape, &bound, &bag, true).unwrap();
        let p1 = tape.gather(vars.prediction, &[1]).unwrap();
        tape.backward(p1).unwrap();
        let analytic = tape.grad(vars.descriptors).unwrap().to_vec();
        let h = 1e-5;
        let mut num = Vec::new();
        for i in 0..bag.tiles().len() {
            let mut up = bag.tiles().to_vec();
            up[i] += h;
            let mut down = bag.tiles().to_vec();
            down[i] -= h;
            let b_up = SlideBag::from_rows("r", 5, up).unwrap();
            let b_down = SlideBag::from_rows("r", 5, down).unwrap();
            num.push((prob(&b_up) - prob(&b_down)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm.max(1e-8) < 1e-4, "{analytic:?} vs {num:?}");
    }
}

#[test]
fn json_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for aggregator in [AggregatorConfig::min_max(3), AggregatorConfig::attention()] {
        let cfg = ModelConfig {
            content_dim: 6,
            descriptor_dim: 4,
            extractor: ExtractorConfig::Mlp {
                hidden: vec![5],
                output_activation: Activation::Relu,
            },
            ..small_config(aggregator, ExtractorConfig::Identity)
        };
        let model = WsiClassifier::new(cfg, &mut rng(20)).unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let back = WsiClassifier::load_json(&path).unwrap();
        assert_eq!(back, model);
    }
}

#[test]
fn tampered_document_is_rejected() {
    let model = WsiClassifier::new(ModelConfig::default(), &mut rng(21)).unwrap();
    let mut doc = model.to_document();
    doc.parameters[0].shape = vec![3, 3];
    assert!(WsiClassifier::from_document(&doc).is_err());
    let mut doc = model.to_document();
    doc.parameters.pop();
    assert!(WsiClassifier::from_document(&doc).is_err());
}

#[test]
fn orientation_flip_preserves_predictions() {
    let cfg = small_config(AggregatorConfig::min_max(2), ExtractorConfig::Identity);
    let model = WsiClassifier::new(cfg, &mut rng(22)).unwrap();
    let mut flipped = model.clone();
    flipped.flip_score_orientation().unwrap();
    let mut r = rng(23);
    for _ in 0..10 {
        let bag = random_bag(&mut r, 7, 5);
        let a = model.forward_slide(&bag).unwrap();
        let b = flipped.forward_slide(&bag).unwrap();
        for (x, y) in a.prediction.iter().zip(&b.prediction) {
            assert!((x - y).abs() < 1e-12);
        }
        let neg: Vec<f64> = a.scores.iter().map(|s| -s).collect();
        assert_eq!(b.scores, neg);
    }
    let mut twice = flipped.clone();
    twice.flip_score_orientation().unwrap();
    assert_eq!(twice, model);
}
