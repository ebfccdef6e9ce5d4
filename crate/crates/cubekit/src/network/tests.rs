use super::*;
use crate::gconv::max_errors;
use crate::voxel::apply_group_action;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn random_map(shape: MapShape, seed: u64) -> FeatureMap<f64> {
    let mut r = rng(seed);
    FeatureMap::from_fn(shape, |_, _, _, _, _| r.gen_range(-1.0..1.0))
}

fn small_graph(group: GroupKind) -> LayerGraph {
    LayerGraph {
        group,
        layers: vec![
            Layer::GConvLift { out_channels: 2, kernel: 3 },
            Layer::BatchNorm,
            Layer::Relu,
            Layer::GConvHidden { out_channels: 3, kernel: 3 },
            Layer::BatchNorm,
            Layer::Relu,
            Layer::GlobalSpatialPool,
            Layer::GroupPool,
            Layer::Dense { out_features: 4 },
            Layer::SoftmaxCrossEntropy,
        ],
    }
}

#[test]
fn relu_clamps_and_is_idempotent() {
    let map = random_map(MapShape::new(2, 1, 3, 3, 3), 0);
    let negative = FeatureMap::from_vec(map.shape(), map.data().iter().map(|&v| -v.abs()).collect()).unwrap();
    let out = relu(&negative);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let once = relu(&map);
    assert_eq!(relu(&once), once);
}

#[test]
fn relu_commutes_with_group_action() {
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let map = random_map(MapShape::new(2, 4, 4, 4, 4), 1);
    for p in 0..4 {
        let a = relu(&apply_group_action(&map, &v, p).unwrap());
        let b = apply_group_action(&relu(&map), &v, p).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn batch_norm_normalizes_constant_channel_to_zero() {
    let shape = MapShape::new(1, 1, 3, 3, 3);
    let constant = FeatureMap::<f64>::from_fn(shape, |_, _, _, _, _| 2.5);
    let batch = vec![constant.clone(), constant.clone()];
    let refs: Vec<&FeatureMap<f64>> = batch.iter().collect();
    let mut state = BatchNormState::new(1);
    let out = batch_norm(&refs, &mut state, Mode::Train);
    for m in &out {
        for &v in m.data() {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn batch_norm_train_stats_are_standardized() {
    let batch: Vec<FeatureMap<f64>> = (0..4)
        .map(|s| random_map(MapShape::new(2, 4, 3, 3, 3), 10 + s))
        .collect();
    let refs: Vec<&FeatureMap<f64>> = batch.iter().collect();
    let mut state = BatchNormState::new(2);
    let out = batch_norm(&refs, &mut state, Mode::Train);
    for c in 0..2 {
        let mut values = Vec::new();
        for m in &out {
            for g in 0..4 {
                values.extend_from_slice(m.spatial_slice(c, g));
            }
        }
        let n = values.len() as f64;
        let mean: f64 = values.iter().sum::<f64>() / n;
        let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6, "mean={mean}");
        assert!((var - 1.0).abs() <= 1e-3, "var={var}"); // ε floor shifts variance slightly
    }
}

#[test]
fn batch_norm_commutes_with_group_action() {
    // Statistics pooled over the group axis are permutation-invariant.
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let batch: Vec<FeatureMap<f64>> = (0..3)
        .map(|s| random_map(MapShape::new(2, 4, 4, 4, 4), 20 + s))
        .collect();
    for p in 0..4 {
        let acted: Vec<FeatureMap<f64>> = batch
            .iter()
            .map(|m| apply_group_action(m, &v, p).unwrap())
            .collect();
        let refs_a: Vec<&FeatureMap<f64>> = acted.iter().collect();
        let refs_b: Vec<&FeatureMap<f64>> = batch.iter().collect();
        let mut state_a = BatchNormState::new(2);
        let mut state_b = BatchNormState::new(2);
        let out_a = batch_norm(&refs_a, &mut state_a, Mode::Train);
        let out_b = batch_norm(&refs_b, &mut state_b, Mode::Train);
        for (a, b) in out_a.iter().zip(&out_b) {
            let expected = apply_group_action(b, &v, p).unwrap();
            let (abs, _) = max_errors(a.data(), expected.data());
            assert!(abs <= 1e-12, "p={p} abs={abs}");
        }
    }
}

#[test]
fn avg_pool2_on_constant_map_halves_shape() {
    let map = FeatureMap::<f64>::from_fn(MapShape::new(1, 1, 4, 4, 4), |_, _, _, _, _| 3.0);
    let out = avg_pool2(&map).unwrap();
    assert_eq!(out.shape().spatial(), [2, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 3.0));
}

#[test]
fn avg_pool2_block_mean() {
    let map = FeatureMap::<f64>::from_fn(MapShape::new(1, 1, 2, 2, 2), |_, _, d, h, w| {
        (4 * d + 2 * h + w) as f64
    });
    let out = avg_pool2(&map).unwrap();
    assert_eq!(out.data(), &[3.5]);
}

#[test]
fn avg_pool2_rejects_odd_dims() {
    let map = random_map(MapShape::new(1, 1, 3, 4, 4), 2);
    assert!(matches!(avg_pool2(&map), Err(ShapeError::OddSpatialDim(_))));
}

#[test]
fn avg_pool2_commutes_with_group_action_on_even_cubes() {
    let s4 = FiniteRotationGroup::generate(GroupKind::S4);
    let map = random_map(MapShape::new(1, 24, 8, 8, 8), 3);
    for p in 0..24 {
        let a = avg_pool2(&apply_group_action(&map, &s4, p).unwrap()).unwrap();
        let b = apply_group_action(&avg_pool2(&map).unwrap(), &s4, p).unwrap();
        let (abs, _) = max_errors(a.data(), b.data());
        assert!(abs <= 1e-13, "p={p} abs={abs}");
    }
}

#[test]
fn pools_on_constant_map_return_the_constant() {
    let map = FeatureMap::<f64>::from_fn(MapShape::new(2, 4, 3, 3, 3), |_, _, _, _, _| 1.25);
    let spatial = global_spatial_pool(&map);
    assert!(spatial.data().iter().all(|&v| (v - 1.25).abs() <= 1e-15));
    let grouped = group_pool(&spatial);
    assert!(grouped.data().iter().all(|&v| (v - 1.25).abs() <= 1e-15));
}

#[test]
fn spatial_pool_turns_rotation_into_group_permutation() {
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let map = random_map(MapShape::new(2, 4, 4, 4, 4), 4);
    for p in 0..4 {
        let pooled_after = global_spatial_pool(&apply_group_action(&map, &v, p).unwrap());
        let pooled_before = apply_group_action(&global_spatial_pool(&map), &v, p).unwrap();
        let (abs, _) = max_errors(pooled_after.data(), pooled_before.data());
        assert!(abs <= 1e-13, "p={p}: abs={abs}");
    }
}

#[test]
fn group_pool_is_invariant_to_group_action() {
    let s4 = FiniteRotationGroup::generate(GroupKind::S4);
    let map = random_map(MapShape::new(2, 24, 3, 3, 3), 5);
    let base = group_pool(&global_spatial_pool(&map));
    for p in 0..24 {
        let acted = group_pool(&global_spatial_pool(&apply_group_action(&map, &s4, p).unwrap()));
        let (abs, _) = max_errors(acted.data(), base.data());
        assert!(abs <= 1e-13, "p={p}: abs={abs}");
    }
}

#[test]
fn uniform_logits_loss_is_ln_k() {
    let logits = vec![0.7f64; 10];
    let (loss, grad) = softmax_xent(&logits, 3);
    assert!((loss - 10f64.ln()).abs() <= 1e-12);
    for (i, g) in grad.iter().enumerate() {
        let expected = if i == 3 { 0.1 - 1.0 } else { 0.1 };
        assert!((g - expected).abs() <= 1e-12);
    }
}

#[test]
fn softmax_xent_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let logits: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
    let label = 2;
    let (_, grad) = softmax_xent(&logits, label);
    let eps = 1e-6;
    for i in 0..5 {
        let mut plus = logits.clone();
        plus[i] += eps;
        let mut minus = logits.clone();
        minus[i] -= eps;
        let fd = (softmax_xent(&plus, label).0 - softmax_xent(&minus, label).0) / (2.0 * eps);
        assert!((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8) <= 1e-8);
    }
}

#[test]
fn he_init_variance_matches_fan_in() {
    // fan_in = I·Gax·k³ = 2·4·27 = 216; sample variance over ~10⁵ draws.
    let mut bank = FilterBank::<f64>::zeros(500, 2, 4, 3).unwrap();
    he_init(&mut bank, 99);
    let n = bank.data().len() as f64;
    assert!(n >= 1e5);
    let mean: f64 = bank.data().iter().sum::<f64>() / n;
    let var: f64 = bank.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let expected = 2.0 / 216.0;
    assert!((var - expected).abs() / expected <= 0.05, "var={var} expected={expected}");
}

#[test]
fn weight_noise_zero_std_is_identity() {
    let mut bank = FilterBank::<f64>::zeros(1, 1, 4, 3).unwrap();
    he_init(&mut bank, 1);
    let (noised, mask) = weight_noise(&bank, 0.0, 7);
    assert_eq!(noised, bank);
    assert!(mask.iter().all(|&m| m == 1.0));
}

#[test]
fn weight_noise_before_rotation_preserves_equivariance() {
    use crate::gconv::{gconv_hidden, ConvSpec};
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let mut bank = FilterBank::<f64>::zeros(2, 1, 4, 3).unwrap();
    he_init(&mut bank, 2);
    let (noised, _) = weight_noise(&bank, 0.5, 8);
    let input = random_map(MapShape::new(1, 4, 5, 5, 5), 9);
    let spec = ConvSpec::same();
    let base = gconv_hidden(&input, &noised, &v, &spec).unwrap();
    for p in 0..4 {
        let acted = gconv_hidden(&apply_group_action(&input, &v, p).unwrap(), &noised, &v, &spec).unwrap();
        let expected = apply_group_action(&base, &v, p).unwrap();
        let (abs, _) = max_errors(acted.data(), expected.data());
        assert!(abs <= 1e-12, "p={p} abs={abs}");
    }
}

#[test]
fn adam_zero_gradient_leaves_params_fixed() {
    let mut params = vec![1.0f64, -2.0, 3.0];
    let grads = vec![0.0; 3];
    let mut state = AdamState::new(3);
    let config = AdamConfig::default();
    for _ in 0..10 {
        adam_step(&mut params, &grads, &mut state, &config);
    }
    assert_eq!(params, vec![1.0, -2.0, 3.0]);
    assert!(state.m.iter().all(|&m| m == 0.0));
}

#[test]
fn adam_descends_a_quadratic() {
    // f(w) = w², ∇f = 2w, lr 0.1. Steps are ≈ lr·sign(g), so starting at 50
    // keeps all 100 steps inside the monotone descent regime.
    let mut w = vec![50.0f64];
    let mut state = AdamState::new(1);
    let config = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut prev = w[0] * w[0];
    for _ in 0..100 {
        let grads = vec![2.0 * w[0]];
        adam_step(&mut w, &grads, &mut state, &config);
        let loss = w[0] * w[0];
        assert!(loss < prev, "loss={loss} prev={prev}");
        prev = loss;
    }
}

#[test]
fn adam_first_step_magnitude_is_lr() {
    for g in [1e-4, 1.0, 1e4] {
        let mut w = vec![0.0f64];
        let mut state = AdamState::new(1);
        let config = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        adam_step(&mut w, &[g], &mut state, &config);
        assert!((w[0].abs() - 1e-3).abs() <= 1e-6, "g={g} step={}", w[0]);
    }
}

#[test]
fn lr_schedule_steps_down_by_factor() {
    let config = TrainConfig::default();
    assert_eq!(config.lr_at_epoch(0), 1e-3);
    assert_eq!(config.lr_at_epoch(4), 1e-3);
    assert!((config.lr_at_epoch(5) - 2e-4).abs() <= 1e-18);
    assert!((config.lr_at_epoch(24) - 1e-3 * 0.2f64.powi(4)).abs() <= 1e-18);
}

#[test]
fn graph_validation_rejects_bad_chains() {
    let g = GroupKind::V;
    // Hidden before lift.
    let graph = LayerGraph {
        group: g,
        layers: vec![
            Layer::GConvHidden { out_channels: 2, kernel: 3 },
            Layer::GlobalSpatialPool,
            Layer::Dense { out_features: 2 },
        ],
    };
    assert!(matches!(graph.validate(1, [5, 5, 5]), Err(GraphError::FirstConvNotLift)));
    // Group pool before the last conv.
    let graph = LayerGraph {
        group: g,
        layers: vec![
            Layer::GConvLift { out_channels: 2, kernel: 3 },
            Layer::GroupPool,
            Layer::GConvHidden { out_channels: 2, kernel: 3 },
            Layer::GlobalSpatialPool,
            Layer::Dense { out_features: 2 },
        ],
    };
    assert!(matches!(graph.validate(1, [5, 5, 5]), Err(GraphError::GroupPoolPlacement)));
    // Dense straight from a spatial map.
    let graph = LayerGraph {
        group: g,
        layers: vec![
            Layer::GConvLift { out_channels: 2, kernel: 3 },
            Layer::Dense { out_features: 2 },
        ],
    };
    assert!(matches!(graph.validate(1, [5, 5, 5]), Err(GraphError::Invalid { .. })));
    // Odd grid into AvgPool2 is caught at validation, not mid-forward.
    let graph = LayerGraph {
        group: g,
        layers: vec![
            Layer::GConvLift { out_channels: 2, kernel: 3 },
            Layer::AvgPool2,
            Layer::GlobalSpatialPool,
            Layer::Dense { out_features: 2 },
        ],
    };
    assert!(matches!(graph.validate(1, [5, 5, 5]), Err(GraphError::Invalid { .. })));
    assert!(graph.validate(1, [6, 6, 6]).is_ok());
}

#[test]
fn build_graph_wires_channels_in_order() {
    let names: Vec<String> = ["lift", "relu", "hidden", "global_pool", "group_pool", "dense"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let graph = build_graph(GroupKind::V, &names, &[4, 6], 3, 5).unwrap();
    assert_eq!(graph.layers[0], Layer::GConvLift { out_channels: 4, kernel: 3 });
    assert_eq!(graph.layers[2], Layer::GConvHidden { out_channels: 6, kernel: 3 });
    assert_eq!(graph.layers[5], Layer::Dense { out_features: 5 });
    assert!(matches!(
        build_graph(GroupKind::V, &names, &[4], 3, 5),
        Err(GraphError::ChannelsCount { expected: 2, got: 1 })
    ));
    let bad = vec!["lift".to_string(), "mystery".to_string()];
    assert!(matches!(build_graph(GroupKind::V, &bad, &[4], 3, 5), Err(GraphError::UnknownLayer(_))));
}

#[test]
fn whole_network_logits_are_invariant() {
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let mut net = Network::<f64>::init(small_graph(GroupKind::V), 1, [6, 6, 6], 11).unwrap();
    // Push the network away from its fresh-init state so the check is not
    // trivially about zeros: one training step on random data.
    let batch: Vec<FeatureMap<f64>> = (0..4).map(|s| random_map(MapShape::new(1, 1, 6, 6, 6), 60 + s)).collect();
    let labels = [0usize, 1, 2, 3];
    let trace = net.forward_train(&batch, None);
    let dlogits: Vec<Vec<f64>> = trace
        .logits()
        .iter()
        .zip(labels)
        .map(|(l, y)| softmax_xent(l, y).1)
        .collect();
    let grads = net.backward(&trace, &dlogits);
    let mut opt = NetworkOptimizer::new(&mut net);
    opt.step(&mut net, &grads, &AdamConfig::default());

    let input = random_map(MapShape::new(1, 1, 6, 6, 6), 12);
    let base = net.logits(&input);
    let base_mag = base.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for p in 0..4 {
        let rotated = apply_group_action(&input, &v, p).unwrap();
        let out = net.logits(&rotated);
        for (a, b) in out.iter().zip(&base) {
            assert!((a - b).abs() <= 1e-10 * base_mag.max(1.0), "p={p}: {a} vs {b}");
        }
    }
}

#[test]
fn rotation_averaged_prediction_equals_single_view_for_invariant_net() {
    let v = FiniteRotationGroup::generate(GroupKind::V);
    let net = Network::<f64>::init(small_graph(GroupKind::V), 1, [5, 5, 5], 13).unwrap();
    for s in 0..10 {
        let input = random_map(MapShape::new(1, 1, 5, 5, 5), 100 + s);
        let single = argmax(&net.logits(&input).iter().map(|v| v.to_f64()).collect::<Vec<_>>());
        let averaged = predict_rotation_averaged(&net, &input, &v);
        assert_eq!(single, averaged);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    // Small graph, f64, central differences at ε = 1e-5 against every
    // trainable scalar; batch-norm runs in train mode inside the loss.
    let graph = LayerGraph {
        group: GroupKind::V,
        layers: vec![
            Layer::GConvLift { out_channels: 2, kernel: 3 },
            Layer::BatchNorm,
            Layer::Relu,
            Layer::GConvHidden { out_channels: 2, kernel: 3 },
            Layer::Relu,
            Layer::GlobalSpatialPool,
            Layer::GroupPool,
            Layer::Dense { out_features: 3 },
        ],
    };
    let mut net = Network::<f64>::init(graph, 1, [5, 5, 5], 17).unwrap();
    let batch: Vec<FeatureMap<f64>> = (0..2)
        .map(|s| random_map(MapShape::new(1, 1, 5, 5, 5), 200 + s))
        .collect();
    let labels = [1usize, 2];

    let loss_of = |net: &Network<f64>| -> f64 {
        let mut probe = net.clone();
        let trace = probe.forward_train(&batch, None);
        trace
            .logits()
            .iter()
            .zip(labels)
            .map(|(l, y)| softmax_xent(l, y).0)
            .sum::<f64>()
            / batch.len() as f64
    };

    let trace = net.clone().forward_train(&batch, None);
    let scale = 1.0 / batch.len() as f64;
    let dlogits: Vec<Vec<f64>> = trace
        .logits()
        .iter()
        .zip(labels)
        .map(|(l, y)| {
            let (_, mut g) = softmax_xent(l, y);
            for v in &mut g {
                *v *= scale;
            }
            g
        })
        .collect();
    let grads = net.backward(&trace, &dlogits);
    let flat = grads_flat(&grads);
    let eps = 1e-5;
    let mut net_probe = net.clone();
    let tensor_count = net_probe.trainable_mut().len();
    assert_eq!(tensor_count, flat.len());

    let mut checked = 0usize;
    for t in 0..tensor_count {
        let len = net_probe.trainable_mut()[t].len();
        for idx in (0..len).step_by(7) {
            let mut plus = net.clone();
            plus.trainable_mut()[t][idx] += eps;
            let mut minus = net.clone();
            minus.trainable_mut()[t][idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let analytic = flat[t][idx];
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-7 {
                assert!(
                    (analytic - fd).abs() / denom <= 1e-5,
                    "tensor {t} idx {idx}: analytic={analytic} fd={fd}"
                );
            } else {
                assert!((analytic - fd).abs() <= 1e-8);
            }
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn training_fixed_seed_is_deterministic() {
    let samples: Vec<(FeatureMap<f64>, usize)> = (0..12)
        .map(|s| (random_map(MapShape::new(1, 1, 5, 5, 5), 300 + s), (s % 3) as usize))
        .collect();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let graph = small_graph(GroupKind::V);
        let mut net = Network::<f64>::init(
            LayerGraph {
                group: graph.group,
                layers: graph
                    .layers
                    .iter()
                    .map(|l| match l {
                        Layer::Dense { .. } => Layer::Dense { out_features: 3 },
                        other => *other,
                    })
                    .collect(),
            },
            1,
            [5, 5, 5],
            21,
        )
        .unwrap();
        let report = train(&mut net, &samples, &config);
        (report.epoch_losses, net)
    };
    let (losses_a, net_a) = run();
    let (losses_b, net_b) = run();
    assert_eq!(losses_a, losses_b);
    let mut a = net_a;
    let mut b = net_b;
    let ta = a.trainable_mut();
    let tb = b.trainable_mut();
    for (x, y) in ta.iter().zip(tb.iter()) {
        let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn checkpoint_round_trip_preserves_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::<f64>::init(small_graph(GroupKind::V), 1, [5, 5, 5], 23).unwrap();
    save_network(dir.path(), &net).unwrap();
    let loaded: Network<f64> = load_network(dir.path()).unwrap();
    let input = random_map(MapShape::new(1, 1, 5, 5, 5), 400);
    assert_eq!(net.logits(&input), loaded.logits(&input));
    // Wrong precision is refused.
    assert!(matches!(
        load_network::<f32>(dir.path()),
        Err(CheckpointError::WrongPrecision { .. })
    ));
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.precision, "f64");
    assert_eq!(manifest.grid, [5, 5, 5]);
}
