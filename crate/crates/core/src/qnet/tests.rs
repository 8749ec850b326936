use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{finite_diff_check, forward_backward, AdamState};

fn small_config(head: HeadMode, spatial: bool, norm: bool) -> QNetworkConfig {
    QNetworkConfig {
        input_shape: [4, 4, 3],
        conv: vec![
            ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
            },
            ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            },
        ],
        group_size: 2,
        spatial_embedding: spatial,
        trunk_width: 8,
        hidden_width: 6,
        hidden_layers: 1,
        feature_norm: norm,
        head,
        action_counts: vec![3, 5],
    }
}

fn c51_small() -> HeadMode {
    HeadMode::Categorical {
        support: SupportSpec::new(-2.0, 2.0, 5).unwrap(),
    }
}

fn random_obs(rng: &mut ChaCha8Rng, batch: usize, shape: [usize; 3]) -> Tensor<f32> {
    let n = batch * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![batch, shape[0], shape[1], shape[2]], data).unwrap()
}

#[test]
fn zeroed_heads_output_their_biases() {
    let cfg = small_config(HeadMode::Scalar, true, true);
    let mut net = QNetwork::new(cfg, 1).unwrap();
    for task in 0..2 {
        let w = net.params.get_mut(&head_param(task, "w")).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = net.params.get_mut(&head_param(task, "b")).unwrap();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.5 - 1.0;
        }
    }
    let obs = Tensor::zeros(&[2, 4, 4, 3]);
    let q = net.q_values(&obs, &[0, 1]).unwrap();
    assert_eq!(q[0], vec![-1.0, -0.5, 0.0]);
    assert_eq!(q[1], vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
}

#[test]
fn spatial_pool_is_elementwise() {
    let f = Tensor::new(vec![1, 1, 2], vec![1.0f32, 2.0]).unwrap();
    let e = Tensor::new(vec![1, 1, 2], vec![3.0f32, 0.5]).unwrap();
    assert_eq!(spatial_pool(&f, &e).unwrap(), vec![3.0, 1.0]);
    let bad = Tensor::new(vec![2, 1, 1], vec![1.0f32, 1.0]).unwrap();
    assert!(spatial_pool(&f, &bad).is_err());
}

#[test]
fn output_shapes_follow_tasks_and_head_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obs = random_obs(&mut rng, 3, [4, 4, 3]);
    let net = QNetwork::new(small_config(c51_small(), true, true), 2).unwrap();
    let out = net.forward(&obs, &[1, 0, 1]).unwrap();
    match &out[0] {
        QOutput::Categorical { logits, atoms } => {
            assert_eq!(*atoms, 5);
            assert_eq!(logits.len(), 25);
        }
        other => panic!("unexpected {other:?}"),
    }
    let q = net.q_values(&obs, &[1, 0, 1]).unwrap();
    assert_eq!(q.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 3, 5]);
    assert!(q.iter().flatten().all(|v| (-2.0..=2.0).contains(v)));

    let pooled = QNetwork::new(small_config(HeadMode::Scalar, false, false), 2).unwrap();
    assert!(!pooled.params.contains(SPATIAL_EMBEDDING));
    let q = pooled.q_values(&obs, &[0, 0, 0]).unwrap();
    assert!(q.iter().all(|r| r.len() == 3));
}

#[test]
fn batch_rows_are_independent_of_grouping() {
    // a row's output must not depend on which other tasks share the batch
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = random_obs(&mut rng, 3, [4, 4, 3]);
    let net = QNetwork::new(small_config(HeadMode::Scalar, true, true), 5).unwrap();
    let mixed = net.q_values(&obs, &[0, 1, 0]).unwrap();
    for i in 0..3 {
        let single = Tensor::new(vec![1, 4, 4, 3], obs.data()[i * 48..(i + 1) * 48].to_vec())
            .unwrap();
        let t = [0, 1, 0][i];
        let alone = net.q_values(&single, &[t]).unwrap();
        for (a, b) in alone[0].iter().zip(&mixed[i]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn rejects_bad_task_ids_and_shapes() {
    let net = QNetwork::new(small_config(HeadMode::Scalar, true, true), 0).unwrap();
    let obs = Tensor::zeros(&[1, 4, 4, 3]);
    assert!(matches!(net.forward(&obs, &[2]), Err(Error::OutOfRange(_))));
    let wrong = Tensor::zeros(&[1, 4, 4, 2]);
    assert!(net.forward(&wrong, &[0]).is_err());
    let mut cfg = small_config(HeadMode::Scalar, true, true);
    cfg.group_size = 3;
    assert!(QNetwork::new(cfg, 0).is_err());
}

#[test]
fn init_is_deterministic_in_seed() {
    let cfg = small_config(c51_small(), true, true);
    let a = QNetwork::new(cfg.clone(), 9).unwrap();
    let b = QNetwork::new(cfg.clone(), 9).unwrap();
    let c = QNetwork::new(cfg, 10).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn init_is_truncated_at_two_std() {
    let cfg = small_config(HeadMode::Scalar, true, true);
    let net = QNetwork::new(cfg, 1).unwrap();
    let w = net.params.get("trunk.fc0.w").unwrap();
    let fan_in = w.shape()[0] as f32;
    let bound = 2.0 / fan_in.sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound + 1e-6));
}

#[test]
fn sync_target_copies_exactly() {
    let cfg = small_config(HeadMode::Scalar, true, true);
    let online = QNetwork::new(cfg.clone(), 1).unwrap();
    let mut target = QNetwork::new(cfg, 2).unwrap();
    assert_ne!(online.params, target.params);
    sync_target(&online, &mut target).unwrap();
    assert_eq!(online.params, target.params);

    let other = QNetwork::new(small_config(HeadMode::Scalar, false, true), 1).unwrap();
    assert!(sync_target(&other, &mut target).is_err());
}

#[test]
fn transfer_copies_encoder_and_respects_freeze() {
    let pre = QNetwork::new(small_config(c51_small(), true, true), 1).unwrap();
    let mut new_cfg = small_config(c51_small(), true, true);
    new_cfg.action_counts = vec![4];
    let net = transfer_encoder(&pre, new_cfg.clone(), 7, true).unwrap();
    for (name, t) in net.params.iter() {
        if QNetwork::is_encoder_param(name) {
            assert_eq!(Some(t), pre.params.get(name), "{name}");
        }
    }
    assert_ne!(net.params.get("trunk.fc0.w"), pre.params.get("trunk.fc0.w"));
    let (train, frozen) = net.partition();
    assert!(frozen.contains(SPATIAL_EMBEDDING));
    assert!(frozen.contains("encoder.conv0.kernel"));
    assert!(!train.contains("encoder.conv0.kernel"));
    assert!(train.contains("head.0.w"));

    let thawed = transfer_encoder(&pre, new_cfg.clone(), 7, false).unwrap();
    assert_eq!(thawed.partition().1.len(), 0);

    let mut other = new_cfg;
    other.conv[0].out_channels = 8;
    assert!(transfer_encoder(&pre, other, 7, false).is_err());
}

#[test]
fn full_network_gradients_match_finite_differences() {
    for (head, spatial, norm) in [
        (c51_small(), true, true),
        (HeadMode::Scalar, false, false),
        (HeadMode::Scalar, true, true),
    ] {
        let cfg = small_config(head, spatial, norm);
        let params = cfg.init_params(11).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obs = random_obs(&mut rng, 3, [4, 4, 3]).cast::<f64>();
        let tasks = [0usize, 1, 1];
        let weights: Vec<Vec<f64>> = (0..2)
            .map(|t| {
                (0..cfg.head_outputs(t))
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let f = |p: &ParamSet<f64>| {
            forward_backward(p, None, |g| {
                let x = g.constant(obs.clone());
                let heads = cfg.build_forward(g, x, &tasks)?;
                let mut total = None;
                for h in heads {
                    let d = g.row_dot(h.node, &weights[h.task])?;
                    let s = g.sum(d)?;
                    total = Some(match total {
                        None => s,
                        Some(t) => g.add(t, s)?,
                    });
                }
                Ok(total.unwrap())
            })
        };
        let err = finite_diff_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let cfg = small_config(c51_small(), true, true);
    let net = QNetwork::new(cfg.clone(), 3).unwrap();
    let mut adam = AdamState::new(&net.params);
    adam.t = 17;
    adam.m.iter_mut().for_each(|(_, t)| t.data_mut()[0] = 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    rng.next_u64();
    let mut ck = Checkpoint {
        config_text: cfg.canonical_text(),
        step: 1234,
        ..Default::default()
    };
    ck.params.insert("online".into(), net.params.clone());
    ck.optimizers.insert("online".into(), adam.clone());
    ck.rngs.insert("train".into(), RngState::capture(&rng));

    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..7], CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let mut restored = back.rngs["train"].restore();
    assert_eq!(restored.next_u64(), rng.next_u64());
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut ck = Checkpoint {
        config_text: "x".into(),
        ..Default::default()
    };
    let mut set = ParamSet::new();
    set.insert("w", Tensor::full(&[2, 2], 1.0f32)).unwrap();
    ck.params.insert("online".into(), set);
    let bytes = ck.to_bytes();
    for cut in [0, 5, 12, bytes.len() - 1] {
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..cut]),
            Err(Error::Format { .. })
        ));
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 7, .. })));
    let mut longer = bytes;
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let ck = Checkpoint {
        config_text: "a=1\n".into(),
        step: 5,
        ..Default::default()
    };
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalized_features_have_at_most_unit_norm(seed in 0u64..1000, scale in 0.0f32..50.0) {
        let net = QNetwork::new(small_config(HeadMode::Scalar, true, true), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut obs = random_obs(&mut rng, 2, [4, 4, 3]);
        obs.data_mut().iter_mut().for_each(|v| *v *= scale);
        let f = net.features(&obs).unwrap();
        for row in f.data().chunks(f.shape()[1]) {
            let n: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            prop_assert!(n <= 1.0 + 1e-5);
        }
    }

    #[test]
    fn categorical_q_values_stay_in_support(seed in 0u64..1000) {
        let net = QNetwork::new(small_config(c51_small(), false, false), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = random_obs(&mut rng, 2, [4, 4, 3]);
        for q in net.q_values(&obs, &[0, 1]).unwrap().iter().flatten() {
            prop_assert!((-2.0..=2.0).contains(q));
        }
    }
}
