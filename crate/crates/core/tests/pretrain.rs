use std::collections::BTreeMap;

use treevocab_autodiff::{OptimizerState, ParamBinder, Parameters, Tape, Tensor};
use treevocab_core::error::Error;
use treevocab_core::graph::Graph;
use treevocab_core::nn::ParamSource;
use treevocab_core::pretrain::*;
use treevocab_core::rng::stream;
use treevocab_core::synthetic::{build_synthetic, Family, SyntheticFamily};

fn g1(blocks: usize, seed: u64) -> Graph {
    let spec = SyntheticFamily::new(Family::G1, blocks).unwrap();
    build_synthetic(&spec, 4, &mut stream(seed, "data", 0)).unwrap()
}

fn small_config() -> PretrainConfig {
    PretrainConfig {
        hidden_dim: 8,
        vocab: treevocab_core::vocab::VocabConfig {
            num_tokens: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn decoders(dim: usize, feature_dim: usize) -> Decoders {
    Decoders::new(dim, feature_dim, None, &mut stream(3, "init", 0))
}

fn identity_mlp(m: &mut treevocab_core::nn::Mlp) {
    let d = m.w1.rows();
    m.w1 = Tensor::eye(d);
    m.w2 = Tensor::eye(d);
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[test]
fn defaults_match_reference_weights() {
    let c = PretrainConfig::default();
    assert_eq!((c.beta1, c.beta2, c.beta3, c.beta4), (10.0, 100.0, 1.0, 0.01));
    assert_eq!(c.gamma, 1.0);
    assert_eq!(c.link_fraction, 0.1);
    assert_eq!(c.epochs, 25);
    assert_eq!(c.ema_decay, 0.99);
}

#[test]
fn config_validation() {
    for bad in [
        PretrainConfig {
            beta2: -1.0,
            ..Default::default()
        },
        PretrainConfig {
            link_fraction: 0.0,
            ..Default::default()
        },
        PretrainConfig {
            link_fraction: 1.5,
            ..Default::default()
        },
        PretrainConfig {
            gamma: 0.0,
            ..Default::default()
        },
        PretrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))), "{bad:?}");
    }
    let json = r#"{"hidden_dim": 8, "typo": 1}"#;
    assert!(serde_json::from_str::<PretrainConfig>(json).is_err());
}

#[test]
fn decoder_output_widths() {
    let d = Decoders::new(6, 4, Some(3), &mut stream(1, "init", 0));
    assert_eq!(d.sem.out_dim(), 6);
    assert_eq!(d.feat.out_dim(), 4);
    assert_eq!(d.topo.out_dim(), 6);
    assert_eq!(d.edge.as_ref().unwrap().out_dim(), 2);
    assert!(decoders(6, 4).edge.is_none());
}

#[test]
fn feat_loss_scalar_case() {
    let mut dec = decoders(1, 1);
    dec.feat.w2 = Tensor::zeros(&[1, 1]);
    let tape = Tape::new();
    let src = ParamSource::Frozen(&tape);
    let q = tape.constant(Tensor::from_rows(&[vec![0.5]]).unwrap());
    let x = Tensor::from_rows(&[vec![2.0]]).unwrap();
    assert_eq!(feat_recon_loss(&src, &dec, q, &x).unwrap().item(), 4.0);
}

#[test]
fn feat_loss_zero_when_decoder_reproduces_features() {
    let mut dec = decoders(2, 2);
    identity_mlp(&mut dec.feat);
    let tape = Tape::new();
    let src = ParamSource::Frozen(&tape);
    let x = Tensor::from_rows(&[vec![0.3, 1.2], vec![2.0, 0.1]]).unwrap();
    let q = tape.constant(x.clone());
    assert_eq!(feat_recon_loss(&src, &dec, q, &x).unwrap().item(), 0.0);
}

#[test]
fn feat_loss_width_mismatch() {
    let dec = decoders(2, 3);
    let tape = Tape::new();
    let src = ParamSource::Frozen(&tape);
    let q = tape.constant(Tensor::ones(&[2, 2]));
    assert!(matches!(
        feat_recon_loss(&src, &dec, q, &Tensor::ones(&[2, 2])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn feat_loss_gradient_matches_finite_differences() {
    let dec = decoders(3, 2);
    let q = Tensor::from_rows(&[vec![0.4, -0.2, 0.9], vec![-0.7, 0.5, 0.3], vec![0.1, 0.8, -0.6]]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.2, 0.3], vec![-1.1, 0.7]]).unwrap();
    let loss_at = |d: &Decoders| {
        let tape = Tape::new();
        let src = ParamSource::Frozen(&tape);
        feat_recon_loss(&src, d, tape.constant(q.clone()), &x).unwrap().item()
    };
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape);
    let src = ParamSource::Train(&binder);
    let loss = feat_recon_loss(&src, &dec, tape.constant(q.clone()), &x).unwrap();
    let grads = binder.collect(&tape.backward(loss).unwrap());
    let h = 1e-6;
    for name in ["dec.feat.w1", "dec.feat.b1", "dec.feat.w2", "dec.feat.b2"] {
        let analytic = &grads[name];
        for i in 0..analytic.numel() {
            let mut plus = dec.clone();
            let mut minus = dec.clone();
            plus.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[i] += h;
                }
            });
            minus.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[i] -= h;
                }
            });
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{name}[{i}]: {a} vs {numeric}"
            );
        }
    }
}

fn sem_value(q: Vec<Vec<f64>>, z_hat: Vec<Vec<f64>>, gamma: f64) -> f64 {
    let d = q[0].len();
    let mut dec = decoders(d, 1);
    identity_mlp(&mut dec.sem);
    let tape = Tape::new();
    let src = ParamSource::Frozen(&tape);
    let q = tape.constant(Tensor::from_rows(&q).unwrap());
    sem_recon_loss(&src, &dec, q, &Tensor::from_rows(&z_hat).unwrap(), gamma)
        .unwrap()
        .item()
}

#[test]
fn sem_loss_parallel_and_perpendicular() {
    assert!(sem_value(vec![vec![1.0, 2.0]], vec![vec![3.0, 6.0]], 1.0).abs() <= 1e-12);
    assert!((sem_value(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], 1.0) - 1.0).abs() <= 1e-12);
    // cos = 1/2 gives a distance of 1/2, squared under gamma = 2
    let v = sem_value(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.75f64.sqrt()]], 2.0);
    assert!((v - 0.25).abs() <= 1e-12);
}

#[test]
fn sem_loss_rejects_zero_target() {
    let d = decoders(2, 1);
    let tape = Tape::new();
    let src = ParamSource::Frozen(&tape);
    let q = tape.constant(Tensor::ones(&[1, 2]));
    let r = sem_recon_loss(&src, &d, q, &Tensor::zeros(&[1, 2]), 1.0);
    assert!(matches!(r, Err(Error::Domain(_))));
    let r = sem_recon_loss(&src, &d, q, &Tensor::ones(&[1, 2]), 0.0);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn topo_loss_matches_hand_evaluation_on_path() {
    let h3 = vec![vec![0.5, -0.2], vec![1.0, 0.3], vec![-0.4, 0.8], vec![0.2, 0.6]];
    let h4 = vec![vec![0.1, 0.2], vec![0.3, -0.1], vec![0.0, 0.4], vec![-0.2, 0.5]];
    let pos = [(0, 1), (1, 2), (2, 3)];
    let neg = [(0, 2), (1, 3), (0, 3)];
    let e = vec![
        vec![1.0, 0.0, 0.5, 0.0],
        vec![0.2, 0.2, 0.2, 0.0],
        vec![-0.3, 0.1, 0.0, 0.0],
    ];

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos_term: f64 = pos.iter().map(|&(u, v)| softplus(-dot(&h3[u], &h3[v]))).sum::<f64>() / 3.0;
    let neg_term: f64 = neg.iter().map(|&(u, v)| softplus(dot(&h3[u], &h3[v]))).sum::<f64>() / 3.0;
    let edge_term: f64 = pos
        .iter()
        .zip(&e)
        .map(|(&(u, v), row)| {
            let cat: Vec<f64> = h4[u].iter().chain(&h4[v]).copied().collect();
            cat.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / 3.0;
    let expected = pos_term + neg_term + edge_term;

    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&h3).unwrap());
    let b = tape.constant(Tensor::from_rows(&h4).unwrap());
    let got = topo_terms(a, Some(b), &pos, &neg, Some(&Tensor::from_rows(&e).unwrap()))
        .unwrap()
        .item();
    assert!((got - expected).abs() <= 1e-10, "{got} vs {expected}");
}

#[test]
fn topo_loss_limits() {
    let tape = Tape::new();
    let big = 40.0;
    let h3 = tape.constant(Tensor::from_rows(&[vec![big, 0.0], vec![big, 0.0], vec![-big, 0.0]]).unwrap());
    let h4 = Tensor::from_rows(&[vec![0.5], vec![-0.5], vec![1.0]]).unwrap();
    let targets = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
    let v = topo_terms(h3, Some(tape.constant(h4)), &[(0, 1)], &[(0, 2)], Some(&targets))
        .unwrap()
        .item();
    assert!(v < 1e-12, "{v}");
}

#[test]
fn topo_loss_needs_positive_edges() {
    let tape = Tape::new();
    let h3 = tape.constant(Tensor::ones(&[2, 2]));
    assert!(matches!(
        topo_terms(h3, None, &[], &[], None),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn edge_targets_pad_odd_widths() {
    let g = Graph::new(3, vec![(0, 1), (1, 2)], Tensor::ones(&[3, 2]))
        .unwrap()
        .with_edge_features(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap())
        .unwrap();
    let t = edge_targets(&g, &[(2, 1)]).unwrap().unwrap();
    assert_eq!(t.to_rows(), vec![vec![4.0, 5.0, 6.0, 0.0]]);
    assert!(edge_targets(&g, &[(0, 2)]).is_err());
    let plain = Graph::new(2, vec![(0, 1)], Tensor::ones(&[2, 2])).unwrap();
    assert!(edge_targets(&plain, &[(0, 1)]).unwrap().is_none());
}

fn model_for(g: &Graph, cfg: PretrainConfig) -> PretrainModel {
    PretrainModel::new(cfg, g.feature_dim(), None, &mut stream(5, "init", 0)).unwrap()
}

fn plain_view(g: &Graph) -> View<'_> {
    View {
        original: g,
        augmented: g.clone(),
    }
}

#[test]
fn zero_weights_leave_only_vocab_loss() {
    let g = g1(2, 1);
    let cfg = PretrainConfig {
        beta1: 0.0,
        beta2: 0.0,
        beta3: 0.0,
        beta4: 0.0,
        lambda: 0.0,
        ..small_config()
    };
    let mut model = model_for(&g, cfg.clone());
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let out = pretrain_step_views(&mut model, &mut opt, &[plain_view(&g)], &mut stream(5, "sampling", 0)).unwrap();
    assert_eq!(out.losses.total, out.losses.vocab);
    assert!(out.losses.vocab > 0.0);
}

#[test]
fn reported_total_is_weighted_sum() {
    let g = g1(3, 2);
    let cfg = small_config();
    let mut model = model_for(&g, cfg.clone());
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let mut aug = stream(2, "augment", 0);
    let mut samp = stream(2, "sampling", 0);
    for _ in 0..3 {
        let out = pretrain_step(&mut model, &mut opt, &[&g, &g], &mut aug, &mut samp).unwrap();
        let l = out.losses;
        assert!((l.total - l.weighted(&cfg)).abs() <= 1e-10);
        assert!([l.feat, l.sem, l.topo, l.vocab, l.commit, l.ortho]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(out.assignments.len(), 2);
    }
}

#[test]
fn vocab_loss_pulls_tokens_toward_assigned_embeddings() {
    let g = g1(3, 3);
    let cfg = PretrainConfig {
        beta2: 0.0,
        beta3: 0.0,
        beta4: 0.0,
        lambda: 0.0,
        lr: 1e-3,
        ..small_config()
    };
    let mut model = model_for(&g, cfg.clone());
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let before = model.codebook.tokens.clone();
    let out = pretrain_step_views(&mut model, &mut opt, &[plain_view(&g)], &mut stream(3, "sampling", 0)).unwrap();
    let z = &out.last_embeddings;
    let idx = &out.assignments[0];
    let spread = |c: &Tensor| -> f64 {
        idx.iter()
            .enumerate()
            .map(|(i, &j)| {
                c.row(j)
                    .iter()
                    .zip(z.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    };
    let (b, a) = (spread(&before), spread(&model.codebook.tokens));
    assert!(a < b, "{a} !< {b}");
}

#[test]
fn target_encoder_follows_ema_only() {
    let g = g1(2, 4);
    let cfg = small_config();
    let mut model = model_for(&g, cfg.clone());
    let mut opt = OptimizerState::adamw(1e-2, 0.0);
    let old_target: BTreeMap<String, Tensor> = model.target.named_params().into_iter().collect();
    pretrain_step_views(&mut model, &mut opt, &[plain_view(&g)], &mut stream(4, "sampling", 0)).unwrap();
    let online: BTreeMap<String, Tensor> = model.encoder.named_params().into_iter().collect();
    let mut moved = false;
    for (name, t) in model.target.named_params() {
        let old = &old_target[&name];
        let src = &online[&name];
        moved |= src != old;
        for i in 0..t.numel() {
            let expected = 0.99 * old.data()[i] + (1.0 - 0.99) * src.data()[i];
            assert_eq!(t.data()[i], expected, "{name}[{i}]");
        }
    }
    assert!(moved);
}

#[test]
fn feature_targets_are_pre_augmentation() {
    let g = g1(2, 5);
    let masked = g
        .with_node_features(Tensor::zeros(&[g.num_nodes(), g.feature_dim()]))
        .unwrap();
    let mut dec = decoders(8, 4);
    dec.feat.w2 = Tensor::zeros(&[8, 4]);
    let cfg = small_config();
    let mut model = model_for(&g, cfg.clone());
    model.decoders.feat = dec.feat;
    // Stands in for a trained shift so all-zero inputs still embed to non-zero trees.
    let last = model.encoder.layers.last_mut().unwrap();
    last.norm.as_mut().unwrap().beta = Tensor::full(&[8], 0.5);
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let view = View {
        original: &g,
        augmented: masked,
    };
    let out = pretrain_step_views(&mut model, &mut opt, &[view], &mut stream(5, "sampling", 0)).unwrap();
    // With a zero decoder the loss is the mean squared norm of the original features.
    let x = g.node_features();
    let expected = x.data().iter().map(|v| v * v).sum::<f64>() / g.num_nodes() as f64;
    assert!(expected > 0.0);
    assert!((out.losses.feat - expected).abs() <= 1e-12);
}

#[test]
fn non_finite_loss_names_component() {
    let g = g1(2, 6);
    let mut model = model_for(&g, small_config());
    model.decoders.feat.b2.data_mut()[0] = f64::NAN;
    let mut opt = OptimizerState::adamw(1e-3, 0.0);
    let before = model.clone();
    match pretrain_step_views(&mut model, &mut opt, &[plain_view(&g)], &mut stream(6, "sampling", 0)) {
        Err(Error::NonFinite(what)) => assert!(what.contains("feat"), "{what}"),
        other => panic!("expected non-finite error, got {:?}", other.map(|o| o.losses)),
    }
    assert_eq!(model.encoder, before.encoder);
}

#[test]
fn wrong_feature_width_is_rejected() {
    let g = g1(2, 7);
    let mut model = PretrainModel::new(small_config(), 3, None, &mut stream(7, "init", 0)).unwrap();
    let mut opt = OptimizerState::adamw(1e-3, 0.0);
    let r = pretrain_step_views(&mut model, &mut opt, &[plain_view(&g)], &mut stream(7, "sampling", 0));
    assert!(matches!(r, Err(Error::Shape(_))));
    assert!(pretrain(&[], &small_config(), 0).is_err());
}

#[test]
fn graphs_with_edge_features_train() {
    let g = g1(2, 8);
    let ef = Tensor::from_fn(g.num_edges(), 4, |r, c| ((r + c) % 3) as f64 * 0.5);
    let g = g.with_edge_features(ef).unwrap();
    let cfg = PretrainConfig {
        epochs: 2,
        ..small_config()
    };
    let run = pretrain(&[g], &cfg, 8).unwrap();
    assert_eq!(run.model.decoders.edge.as_ref().unwrap().out_dim(), 2);
    assert!(run.curve.iter().all(|r| r.losses.topo.is_finite()));
}

#[test]
fn twenty_five_epochs_descend_on_g1() {
    let g = g1(3, 11);
    let run = pretrain(&[g], &PretrainConfig::default(), 11).unwrap();
    assert_eq!(run.curve.len(), 25);
    let first = run.curve[0].losses.total;
    let last = run.curve[24].losses.total;
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn curve_csv_has_declared_columns() {
    let dir = tempfile::tempdir().unwrap();
    let g = g1(2, 12);
    let run = pretrain(
        &[g],
        &PretrainConfig {
            epochs: 2,
            ..small_config()
        },
        12,
    )
    .unwrap();
    let path = dir.path().join("curve.csv");
    write_curve(&path, &run.curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,L_total,L_feat,L_sem,L_topo,vocab,commit,ortho,perplexity"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn vocab_usage_counts_every_node() {
    let graphs = [g1(2, 13), g1(3, 14)];
    let run = pretrain(
        &graphs,
        &PretrainConfig {
            epochs: 1,
            ..small_config()
        },
        13,
    )
    .unwrap();
    let diag = vocab_usage(&run.model, &graphs).unwrap();
    assert_eq!(
        diag.counts.iter().sum::<u64>() as usize,
        graphs.iter().map(Graph::num_nodes).sum::<usize>()
    );
    assert_eq!(graphs[0].num_nodes() + graphs[1].num_nodes(), 30);
    assert_eq!(diag.num_tokens, 16);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = g1(3, 20);
    let run = pretrain(
        std::slice::from_ref(&g),
        &PretrainConfig {
            epochs: 3,
            ..small_config()
        },
        20,
    )
    .unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &run, 20).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.seed, 20);
    assert_eq!(back.run.model.state(), run.model.state());
    assert_eq!(back.run.model.config, run.model.config);
    assert_eq!(back.run.optimizer, run.optimizer);
    assert_eq!(back.run.curve, run.curve);
    let a = run.model.encoder.encode(&g).unwrap();
    let b = back.run.model.encoder.encode(&g).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
    assert_eq!(manifest["version"], CHECKPOINT_VERSION);
    assert_eq!(manifest["epochs_done"], 3);
    assert!(manifest["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .any(|t| t["name"] == "model/vocab.tokens"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let graphs = [g1(2, 21)];
    let full = pretrain(
        &graphs,
        &PretrainConfig {
            epochs: 4,
            ..small_config()
        },
        21,
    )
    .unwrap();
    let half = pretrain(
        &graphs,
        &PretrainConfig {
            epochs: 2,
            ..small_config()
        },
        21,
    )
    .unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &half, 21).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap().run;
    resumed.model.config.epochs = 4;
    let resumed = continue_pretraining(resumed, &graphs, 21).unwrap();
    assert_eq!(resumed.model.state(), full.model.state());
    assert_eq!(resumed.curve, full.curve);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = g1(2, 22);
    let run = pretrain(
        &[g],
        &PretrainConfig {
            epochs: 1,
            ..small_config()
        },
        22,
    )
    .unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &run, 22).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptCheckpoint(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let fpath = dir.path().join("flip.ckpt");
    std::fs::write(&fpath, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&fpath), Err(Error::CorruptCheckpoint(_))));

    let mut versioned = bytes.clone();
    versioned[8] = 99;
    let vpath = dir.path().join("v.ckpt");
    std::fs::write(&vpath, &versioned).unwrap();
    assert!(matches!(
        load_checkpoint(&vpath),
        Err(Error::CheckpointVersion {
            found: 99,
            expected: CHECKPOINT_VERSION
        })
    ));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"hello").unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn checkpoint_with_other_width_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = g1(2, 23);
    let cfg32 = PretrainConfig {
        epochs: 1,
        hidden_dim: 32,
        ..small_config()
    };
    let run = pretrain(&[g], &cfg32, 23).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &run, 23).unwrap();
    let cfg64 = PretrainConfig {
        hidden_dim: 64,
        ..cfg32.clone()
    };
    match load_checkpoint_expecting(&path, &cfg64) {
        Err(Error::CheckpointShape { stored, expected, .. }) => {
            assert!(
                stored.contains(&32) && expected.contains(&64),
                "{stored:?} {expected:?}"
            );
        }
        Err(e) => panic!("expected a shape error, got {e}"),
        Ok(_) => panic!("expected a shape error"),
    }
    assert!(load_checkpoint_expecting(&path, &cfg32).is_ok());
}
