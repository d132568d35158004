#![allow(clippy::needless_range_loop)]

use selagg_core::aggregation::{
    self, Activation, AggregatorMode, AggregatorSpec, Dense, ScoreModel, ScoreModelSpec,
};
use selagg_core::metrics::{row_entropy, SelectionVector};
use selagg_core::probe::{probe_forward, ProbeParams, Sample};
use selagg_core::storage;
use selagg_core::tensor::{rand_normal, Tensor};
use selagg_core::vit::{AttentionTensor, TokenSequence};
use selagg_core::RngStream;

fn tokens(rows: usize, dim: usize, seed: u64) -> TokenSequence<f64> {
    TokenSequence::new(
        rand_normal(vec![rows, dim], &RngStream::new(seed, 0)).cast(),
        true,
        0,
    )
    .unwrap()
}

fn random_attention(blocks: usize, heads: usize, t: usize, seed: u64) -> AttentionTensor {
    let raw = rand_normal(vec![blocks, heads, t, t], &RngStream::new(seed, 1));
    let mut data = raw.data().to_vec();
    for row in data.chunks_mut(t) {
        let m = row.iter().cloned().fold(f32::MIN, f32::max);
        let s: f32 = row.iter().map(|x| (x - m).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - m).exp() / s);
    }
    AttentionTensor::new(
        Tensor::from_vec(vec![blocks, heads, t, t], data).unwrap(),
        true,
    )
    .unwrap()
}

/// Layer-by-layer evaluation in f64 with explicit loops.
fn score_oracle(x: &[f64], t: &ScoreModel<f64>) -> f64 {
    let mut h = x.to_vec();
    for (l, layer) in t.layers.iter().enumerate() {
        let (i, o) = (layer.input_dim(), layer.output_dim());
        let mut next = vec![0.0; o];
        for (c, out) in next.iter_mut().enumerate() {
            *out = layer.bias.data()[c];
            for r in 0..i {
                *out += h[r] * layer.weight.data()[r * o + c];
            }
        }
        if l + 1 < t.layers.len() {
            next.iter_mut()
                .for_each(|v| *v = t.activation.unwrap().apply(*v));
        }
        h = next;
    }
    h[0]
}

#[test]
fn parameter_counts_match_reported_sizes() {
    let plain = AggregatorSpec::new(AggregatorMode::Cls, None).unwrap();
    let linear = AggregatorSpec::new(
        AggregatorMode::AbmilpPatches,
        Some(ScoreModelSpec::linear()),
    )
    .unwrap();
    assert_eq!(aggregation::parameter_count(&plain, 768, 1000), 769_000);
    assert_eq!(aggregation::parameter_count(&linear, 768, 1000), 769_769);
    for h in [1, 7, 64] {
        let spec = AggregatorSpec::new(
            AggregatorMode::AbmilpWithCls,
            Some(ScoreModelSpec::mlp(2, h, Activation::Gelu)),
        )
        .unwrap();
        assert_eq!(
            aggregation::parameter_count(&spec, 768, 1000),
            769 * h + (h + 1) + 769_000
        );
    }
}

#[test]
fn parameter_counts_match_materialized_tensors() {
    for mode in AggregatorMode::ALL {
        for spec in [
            None,
            Some(ScoreModelSpec::linear()),
            Some(ScoreModelSpec::mlp(2, 5, Activation::Relu)),
            Some(ScoreModelSpec::mlp(4, 3, Activation::Tanh)),
        ] {
            let Ok(agg) = AggregatorSpec::new(mode, spec) else {
                continue;
            };
            let probe = ProbeParams::<f32>::init(12, 4, agg.score_model.as_ref(), 0).unwrap();
            let counted: usize = probe.tensors().iter().map(|t| t.len()).sum();
            assert_eq!(
                aggregation::parameter_count(&agg, 12, 4),
                counted,
                "{mode} {spec:?}"
            );
        }
    }
}

#[test]
fn abmilp_weights_match_exp_sum_oracle() {
    for seed in 0..5 {
        let z = tokens(11, 6, seed);
        let spec = ScoreModelSpec::mlp(3, 4, Activation::Gelu);
        let t = ScoreModel::<f64>::init(&spec, 6, &RngStream::new(seed, 7)).unwrap();
        let scores: Vec<f64> = (0..11).map(|r| score_oracle(z.tokens.row(r), &t)).collect();
        let got_scores = aggregation::score_model_forward(&z.tokens, &t).unwrap();
        for (g, w) in got_scores.iter().zip(&scores) {
            assert!((g - w).abs() < 1e-5);
        }
        for include_cls in [true, false] {
            let start = usize::from(!include_cls);
            let e: Vec<f64> = scores[start..].iter().map(|s| s.exp()).collect();
            let sum: f64 = e.iter().sum();
            let got = aggregation::abmilp_scores(&z, &t, include_cls).unwrap();
            assert_eq!(got.len(), 11 - start);
            for (g, w) in got.weights.iter().zip(&e) {
                assert!((g - w / sum).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shifting_the_score_bias_changes_nothing() {
    let d = 10;
    let samples: Vec<Sample> = (0..4)
        .map(|i| Sample {
            id: format!("s{i}"),
            tokens: TokenSequence::new(rand_normal(vec![17, d], &RngStream::new(i, 3)), true, 0)
                .unwrap(),
            label: 0,
            fixed_weights: None,
        })
        .collect();
    for spec in [
        ScoreModelSpec::linear(),
        ScoreModelSpec::mlp(2, 6, Activation::Tanh),
    ] {
        for mode in [AggregatorMode::AbmilpPatches, AggregatorMode::AbmilpWithCls] {
            let base = ProbeParams::<f32>::init(d, 3, Some(&spec), 5).unwrap();
            for c in [-10.0f32, 1.0, 10.0] {
                let mut shifted = base.clone();
                let t = shifted.score.as_mut().unwrap();
                t.layers.last_mut().unwrap().bias.data_mut()[0] += c;
                for s in &samples {
                    let a = probe_forward(s, &base, mode).unwrap();
                    let b = probe_forward(s, &shifted, mode).unwrap();
                    let dw = a
                        .weights
                        .iter()
                        .zip(&b.weights)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f32::max);
                    let dl = a
                        .logits
                        .iter()
                        .zip(&b.logits)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f32::max);
                    assert!(dw <= 1e-6, "weights moved by {dw} for c={c}");
                    assert!(dl <= 1e-5, "logits moved by {dl} for c={c}");
                }
            }
        }
    }
}

#[test]
fn aggregate_matches_matmul_oracle() {
    let z = tokens(9, 5, 2);
    let raw: Vec<f64> = rand_normal(vec![8], &RngStream::new(4, 4))
        .data()
        .iter()
        .map(|x| x.abs() as f64)
        .collect();
    let s = SelectionVector::from_scores(&raw, "x").unwrap();
    let got = aggregation::aggregate(&z, &s.weights).unwrap();
    for (j, g) in got.iter().enumerate() {
        let want: f64 = (0..8).map(|i| s.weights[i] * z.tokens.row(i + 1)[j]).sum();
        assert!((g - want).abs() < 1e-6);
    }
    let avg = aggregation::avg_pool(&z).unwrap();
    for (j, a) in avg.iter().enumerate() {
        let want: f64 = (1..9).map(|i| z.tokens.row(i)[j]).sum::<f64>() / 8.0;
        assert!((a - want).abs() < 1e-6);
    }
    let uniform = aggregation::aggregate(&z, &[1.0 / 8.0; 8]).unwrap();
    for (u, a) in uniform.iter().zip(&avg) {
        assert!((u - a).abs() < 1e-6);
    }
    assert!(aggregation::aggregate(&z, &[0.5; 3]).is_err());
}

#[test]
fn constant_score_model_scores_everything_alike() {
    let z = tokens(5, 4, 1);
    let t = ScoreModel {
        layers: vec![Dense {
            weight: Tensor::zeros(vec![4, 1]),
            bias: Tensor::full(vec![1], 3.0),
        }],
        activation: None,
    };
    assert_eq!(
        aggregation::score_model_forward(&z.tokens, &t).unwrap(),
        vec![3.0; 5]
    );
    let s = aggregation::abmilp_scores(&z, &t, false).unwrap();
    assert!(s.weights.iter().all(|w| (w - 0.25).abs() < 1e-12));
}

#[test]
fn attention_selectors_match_head_loops() {
    for seed in 0..4 {
        let a = random_attention(2, 3, 10, seed);
        let last = 1;
        let avg = aggregation::selector_avg_cls_attention(&a).unwrap();
        let mut want = vec![0.0; 9];
        for h in 0..3 {
            for (j, w) in want.iter_mut().enumerate() {
                *w += a.row(last, h, 0)[j + 1] as f64 / 3.0;
            }
        }
        let total: f64 = want.iter().sum();
        for (g, w) in avg.weights.iter().zip(&want) {
            assert!((g - w / total).abs() < 1e-7);
        }

        let entropies: Vec<f64> = (0..3)
            .map(|h| row_entropy(a.row(last, h, 0), 1..10).unwrap())
            .collect();
        let mut best = 0;
        for h in 1..3 {
            if entropies[h] < entropies[best] {
                best = h;
            }
        }
        let low = aggregation::selector_lowest_entropy_head(&a).unwrap();
        let row = &a.row(last, best, 0)[1..];
        let mass: f64 = row.iter().map(|&x| x as f64).sum();
        for (g, &x) in low.weights.iter().zip(row) {
            assert!((g - x as f64 / mass).abs() < 1e-7);
        }

        let central = aggregation::selector_central_patch(&a, 3, 3).unwrap();
        let mut want = vec![0.0; 9];
        for h in 0..3 {
            for (j, w) in want.iter_mut().enumerate() {
                *w += a.row(last, h, 1 + 4)[j + 1] as f64;
            }
        }
        let total: f64 = want.iter().sum();
        for (g, w) in central.weights.iter().zip(&want) {
            assert!((g - w / total).abs() < 1e-7);
        }
    }
    assert_eq!(aggregation::central_patch_index(14, 14), 105);
    assert_eq!(aggregation::central_patch_index(4, 4), 10);
}

#[test]
fn identity_attention_points_the_central_selector_at_the_centre() {
    let t = 1 + 14 * 14;
    let a = AttentionTensor::new(
        Tensor::<f32>::eye(t).reshape(vec![1, 1, t, t]).unwrap(),
        true,
    )
    .unwrap();
    let s = aggregation::selector_central_patch(&a, 14, 14).unwrap();
    assert_eq!(s.weights[105], 1.0);
    assert_eq!(s.weights.iter().sum::<f64>(), 1.0);
}

#[test]
fn external_maps_survive_storage_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..16)
        .map(|i| (i as f64 * 0.37).sin().abs() + 0.01)
        .collect();
    let path = dir.path().join("map.satf");
    storage::write_tensor(
        &path,
        &Tensor::from_vec(vec![16], values.iter().map(|&v| v as f32).collect()).unwrap(),
    )
    .unwrap();
    let back = storage::read_tensor(&path).unwrap();
    let read: Vec<f64> = back.data().iter().map(|&v| v as f64).collect();
    let direct = aggregation::selector_external(&values, 16).unwrap();
    let loaded = aggregation::selector_external(&read, 16).unwrap();
    for (a, b) in direct.weights.iter().zip(&loaded.weights) {
        assert!((a - b).abs() < 1e-7);
    }
    assert_eq!(
        aggregation::selector_external(&[2.0, 2.0], 2)
            .unwrap()
            .weights,
        vec![0.5, 0.5]
    );
    assert!(aggregation::selector_external(&[1.0], 2).is_err());
}
