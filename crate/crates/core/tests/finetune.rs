use treevocab_autodiff::Tensor;
use treevocab_core::error::Error;
use treevocab_core::finetune::*;
use treevocab_core::graph::Graph;
use treevocab_core::pretrain::{PretrainConfig, PretrainModel};
use treevocab_core::rng::stream;
use treevocab_core::synthetic::{build_labeled, LabeledConfig};
use treevocab_core::vocab::{quantize, Codebook, Metric, VocabConfig};

const E: f64 = std::f64::consts::E;

fn small_config() -> PretrainConfig {
    PretrainConfig {
        hidden_dim: 8,
        vocab: VocabConfig {
            num_tokens: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn model_for(g: &Graph, seed: u64) -> PretrainModel {
    PretrainModel::new(small_config(), g.feature_dim(), None, &mut stream(seed, "init", 0)).unwrap()
}

fn labeled(cfg: &LabeledConfig, seed: u64) -> Graph {
    build_labeled(cfg, &mut stream(seed, "data", 0)).unwrap()
}

fn axes() -> Codebook {
    Codebook::from_tokens("vocab", Tensor::eye(2), Metric::Cosine).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn prototype_probability_matches_hand_evaluation() {
    let protos = Prototypes::new(Tensor::eye(2), 1.0).unwrap();
    let p = proto_predict(&protos, &[1.0, 0.0]).unwrap();
    let expect = 1.0 / (1.0 + E.powf(-1.0));
    assert!((p[0] - expect).abs() < 1e-12);
    assert!((p[0] - 0.731).abs() < 5e-4);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn identical_prototypes_give_uniform_probabilities() {
    let means = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap();
    let p = proto_predict(&Prototypes::new(means, 1.0).unwrap(), &[1.0, 2.0, 3.0]).unwrap();
    assert_close(&p, &[0.25; 4], 1e-12);
}

#[test]
fn prototype_probabilities_ignore_query_scale() {
    let means = Tensor::from_rows(&[vec![1.0, 0.2, 0.0], vec![-0.5, 1.0, 0.3], vec![0.1, 0.1, -1.0]]).unwrap();
    let protos = Prototypes::new(means, 0.5).unwrap();
    let z = [0.4, -0.7, 0.2];
    let base = proto_predict(&protos, &z).unwrap();
    for alpha in [0.01, 1.0, 100.0] {
        let scaled: Vec<f64> = z.iter().map(|x| alpha * x).collect();
        assert_close(&proto_predict(&protos, &scaled).unwrap(), &base, 1e-12);
    }
}

#[test]
fn zero_query_or_prototype_is_a_domain_error() {
    let protos = Prototypes::new(Tensor::eye(2), 1.0).unwrap();
    assert!(matches!(proto_predict(&protos, &[0.0, 0.0]), Err(Error::Domain(_))));
    let zero = Prototypes::new(Tensor::zeros(&[2, 2]), 1.0).unwrap();
    assert!(matches!(proto_predict(&zero, &[1.0, 0.0]), Err(Error::Domain(_))));
    assert!(matches!(
        Prototypes::new(Tensor::eye(2), 0.0),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn linear_head_softmax_arithmetic() {
    let zero = LinearHead::zeros(2, 3, 1.0).unwrap();
    assert_close(
        &lin_predict(&zero, &axes(), &[0.2, 0.9]).unwrap(),
        &[1.0 / 3.0; 3],
        1e-12,
    );

    let mut head = LinearHead::zeros(2, 2, 1.0).unwrap();
    head.w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    // [0.9, 0.1] quantizes to the first axis token, so the logits are (1, 0).
    let p = lin_predict(&head, &axes(), &[0.9, 0.1]).unwrap();
    let expect = 1.0 / (1.0 + E.powf(-1.0));
    assert_close(&p, &[expect, 1.0 - expect], 1e-12);
    assert!((p[0] - 0.731).abs() < 5e-4 && (p[1] - 0.269).abs() < 5e-4);
}

#[test]
fn combined_probabilities_reduce_to_single_heads() {
    let pp = [0.7, 0.2, 0.1];
    let pl = [0.1, 0.3, 0.6];
    let both = combine(Some(&pp), Some(&pl), 1.0, 0.1).unwrap();
    assert!((both.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let expect: Vec<f64> = pp.iter().zip(&pl).map(|(a, b)| (a + 0.1 * b) / 1.1).collect();
    assert_close(&both, &expect, 1e-12);
    assert_close(&combine(Some(&pp), Some(&pl), 1.0, 0.0).unwrap(), &pp, 1e-15);
    assert_close(&combine(None, Some(&pl), 0.0, 2.0).unwrap(), &pl, 1e-15);
    assert!(combine(Some(&pp), None, 0.0, 0.0).is_err());
}

fn path3() -> Vec<Graph> {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0], vec![-1.0, 1.0]]).unwrap();
    vec![Graph::new(3, vec![(0, 1), (1, 2)], x).unwrap()]
}

#[test]
fn task_embeddings_for_each_kind() {
    let graphs = path3();
    let model = model_for(&graphs[0], 1);
    let z = model.encoder.encode(&graphs[0]).unwrap();

    let node = task_embedding(&model.encoder, &graphs, &TaskInstance::node(0, 1, 0)).unwrap();
    assert_close(&node, z.row(1), 0.0);

    let self_link = task_embedding(&model.encoder, &graphs, &TaskInstance::link(0, 2, 2, 0)).unwrap();
    assert_close(&self_link, z.row(2), 1e-15);

    let whole = task_embedding(&model.encoder, &graphs, &TaskInstance::whole_graph(0, 3, 0)).unwrap();
    let direct: Vec<f64> = (0..z.cols())
        .map(|j| (z.get(0, j) + z.get(1, j) + z.get(2, j)) / 3.0)
        .collect();
    assert_close(&whole, &direct, 1e-12);

    let single = vec![Graph::new(1, vec![], Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap()).unwrap()];
    let z1 = model.encoder.encode(&single[0]).unwrap();
    let one = task_embedding(&model.encoder, &single, &TaskInstance::whole_graph(0, 1, 0)).unwrap();
    assert_close(&one, z1.row(0), 0.0);
}

#[test]
fn instance_validation() {
    let graphs = path3();
    assert!(TaskInstance::node(0, 2, 1).validate(&graphs, 2).is_ok());
    let bad = [
        TaskInstance::node(0, 3, 0),
        TaskInstance::node(1, 0, 0),
        TaskInstance::node(0, 0, 2),
        TaskInstance {
            kind: TaskKind::Link,
            graph: 0,
            nodes: vec![0],
            label: 0,
        },
        TaskInstance {
            kind: TaskKind::Graph,
            graph: 0,
            nodes: vec![0, 1],
            label: 0,
        },
        TaskInstance {
            kind: TaskKind::Node,
            graph: 0,
            nodes: vec![],
            label: 0,
        },
    ];
    for inst in bad {
        assert!(
            matches!(inst.validate(&graphs, 2), Err(Error::Precondition(_))),
            "{inst:?}"
        );
    }
}

#[test]
fn memory_bank_grouping_caps_and_means() {
    let codebook = Codebook::from_tokens(
        "vocab",
        Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap(),
        Metric::Cosine,
    )
    .unwrap();
    let z = Tensor::from_rows(&[
        vec![1.0, 0.1, 0.0],
        vec![0.0, 1.0, 0.2],
        vec![0.1, 0.0, 1.0],
        vec![1.0, 1.0, 0.9],
        vec![0.0, 0.1, 5.0],
    ])
    .unwrap();
    let labels = [0, 0, 1, 1, 1];
    let q = quantize(&codebook, &z).unwrap().quantized;

    let bank = MemoryBank::from_embeddings(&codebook, &z, &labels, 2, None, &mut stream(0, "bank", 0)).unwrap();
    assert_eq!(bank.len(), 5);
    assert_eq!(bank.classes[0].len(), 2);
    assert_eq!(bank.classes[1].len(), 3);
    let protos = bank.prototypes(1.0).unwrap();
    for (k, rows) in [(0, vec![0, 1]), (1, vec![2, 3, 4])] {
        for j in 0..3 {
            let mean = rows.iter().map(|&i| q.get(i, j)).sum::<f64>() / rows.len() as f64;
            assert!((protos.means.get(k, j) - mean).abs() <= 1e-12);
        }
    }

    let capped = MemoryBank::from_embeddings(&codebook, &z, &labels, 2, Some(1), &mut stream(0, "bank", 0)).unwrap();
    assert_eq!(capped.classes.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1]);
    for (k, members) in capped.classes.iter().enumerate() {
        let from_class = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .any(|(i, _)| q.row(i) == members[0].as_slice());
        assert!(from_class);
    }
    let wide = MemoryBank::from_embeddings(&codebook, &z, &labels, 2, Some(1500), &mut stream(0, "bank", 0)).unwrap();
    assert_eq!(
        wide,
        MemoryBank {
            cap: Some(1500),
            ..bank
        }
    );
}

#[test]
fn single_instance_prototype_is_that_instance() {
    let z = Tensor::from_rows(&[vec![0.9, 0.2], vec![-0.1, 0.8]]).unwrap();
    let bank = MemoryBank::from_embeddings(&axes(), &z, &[0, 1], 2, None, &mut stream(0, "bank", 0)).unwrap();
    let protos = bank.prototypes(1.0).unwrap();
    assert_eq!(protos.means, Tensor::eye(2));
}

#[test]
fn empty_class_in_bank_is_rejected() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let err = MemoryBank::from_embeddings(&axes(), &z, &[0], 2, None, &mut stream(0, "bank", 0)).unwrap_err();
    assert!(matches!(err, Error::Precondition(ref m) if m.contains("class 1")));
}

fn separable() -> LabeledConfig {
    LabeledConfig {
        num_classes: 2,
        nodes_per_class: 60,
        signal: 3.0,
        noise: 0.5,
        ..Default::default()
    }
}

/// Plain logistic regression on raw node features, trained on `train`.
fn logistic_accuracy(g: &Graph, train: &[usize], eval: &[usize]) -> f64 {
    let x = g.node_features();
    let y = g.labels().unwrap();
    let d = x.cols();
    let mut w = vec![0.0; d + 1];
    for _ in 0..2000 {
        let mut grad = vec![0.0; d + 1];
        for &i in train {
            let s = w[d] + (0..d).map(|j| w[j] * x.get(i, j)).sum::<f64>();
            let err = 1.0 / (1.0 + (-s).exp()) - y[i] as f64;
            for (j, gj) in grad.iter_mut().take(d).enumerate() {
                *gj += err * x.get(i, j);
            }
            grad[d] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= 0.1 * gj / train.len() as f64;
        }
    }
    let hits = eval
        .iter()
        .filter(|&&i| {
            let s = w[d] + (0..d).map(|j| w[j] * x.get(i, j)).sum::<f64>();
            (s > 0.0) as usize == y[i]
        })
        .count();
    hits as f64 / eval.len() as f64
}

#[test]
fn separable_twenty_shot_task_is_learned() {
    let g = labeled(&separable(), 4);
    let (train, eval) =
        treevocab_core::sampling::kshot_indices(g.labels().unwrap(), 20, &mut stream(9, "fewshot", 0)).unwrap();
    assert!(logistic_accuracy(&g, &train, &eval) >= 0.95);

    let model = model_for(&g, 4);
    let graphs = vec![g];
    let run = fewshot(&model, &graphs, 0, 20, &FinetuneConfig::default(), 9).unwrap();
    assert!(run.eval_acc >= 0.9, "accuracy {}", run.eval_acc);
    assert!(run.best_epoch < run.curve.len());
}

#[test]
fn codebook_is_untouched_and_either_head_can_be_disabled() {
    let g = labeled(&separable(), 5);
    let model = model_for(&g, 5);
    let graphs = vec![g];
    for (lp, ll) in [(1.0, 0.0), (0.0, 1.0), (1.0, 0.1)] {
        let cfg = FinetuneConfig {
            epochs: 15,
            lambda_proto: lp,
            lambda_lin: ll,
            ..Default::default()
        };
        let run = fewshot(&model, &graphs, 0, 5, &cfg, 1).unwrap();
        assert_eq!(run.classifier.codebook, model.codebook);
        assert!(run.curve.iter().all(|e| e.loss.is_finite()));
        if lp == 0.0 {
            assert!(run.curve.iter().all(|e| e.proto_loss == 0.0));
        }
        if ll == 0.0 {
            assert!(run.curve.iter().all(|e| e.lin_loss == 0.0));
        }
        assert_ne!(run.classifier.encoder, model.encoder);
    }
}

#[test]
fn link_and_graph_tasks_train() {
    let g = labeled(&separable(), 6);
    let model = model_for(&g, 6);
    let graphs = vec![g];
    // Links labeled by the class of their first endpoint.
    let links: Vec<TaskInstance> = (0..40)
        .map(|i| TaskInstance::link(0, i, (i * 7 + 3) % 120, i % 2))
        .collect();
    let split = TaskSplit {
        train: &links[..20],
        monitor: None,
        eval: &links[20..],
    };
    let run = finetune(
        &model,
        &graphs,
        &split,
        2,
        &FinetuneConfig {
            epochs: 5,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(run.classifier.codebook, model.codebook);

    let small: Vec<Graph> = (0..6)
        .map(|s| {
            labeled(
                &LabeledConfig {
                    nodes_per_class: 5,
                    ..separable()
                },
                100 + s,
            )
        })
        .collect();
    let insts: Vec<TaskInstance> = small
        .iter()
        .enumerate()
        .map(|(i, g)| TaskInstance::whole_graph(i, g.num_nodes(), i % 2))
        .collect();
    let split = TaskSplit {
        train: &insts[..4],
        monitor: Some(&insts[..4]),
        eval: &insts[4..],
    };
    let model = model_for(&small[0], 7);
    let run = finetune(
        &model,
        &small,
        &split,
        2,
        &FinetuneConfig {
            epochs: 5,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert!(run.curve.len() <= 5);
    assert_eq!(run.classifier.predict(&small, &insts).unwrap().len(), 6);
}

#[test]
fn finetune_is_deterministic_and_writes_its_curve() {
    let g = labeled(&LabeledConfig::default(), 8);
    let model = model_for(&g, 8);
    let graphs = vec![g];
    let cfg = FinetuneConfig {
        epochs: 10,
        ..Default::default()
    };
    let a = fewshot(&model, &graphs, 0, 5, &cfg, 3).unwrap();
    let b = fewshot(&model, &graphs, 0, 5, &cfg, 3).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.eval_acc, b.eval_acc);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_finetune_curve(&path, &a.curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "epoch,loss,proto_loss,lin_loss,train_acc,monitor_acc"
    );
    assert_eq!(text.lines().count(), a.curve.len() + 1);
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let g = labeled(&LabeledConfig::default(), 10);
    let model = model_for(&g, 10);
    let graphs = vec![g];
    let cfg = FinetuneConfig {
        epochs: 300,
        patience: 3,
        ..Default::default()
    };
    let run = fewshot(&model, &graphs, 0, 5, &cfg, 2).unwrap();
    let best = run.curve.iter().map(|e| e.monitor_acc).fold(f64::MIN, f64::max);
    assert_eq!(run.curve[run.best_epoch].monitor_acc, best);
    assert!(run.curve.len() <= run.best_epoch + 1 + cfg.patience);
    // Monitor and eval are the same split here, so the restored model
    // reproduces the recorded accuracy.
    assert_eq!(run.eval_acc, best);
}

#[test]
fn kshot_larger_than_a_class_names_it() {
    let g = labeled(
        &LabeledConfig {
            nodes_per_class: 4,
            ..Default::default()
        },
        11,
    );
    let model = model_for(&g, 11);
    let graphs = vec![g];
    let err = fewshot(&model, &graphs, 0, 5, &FinetuneConfig::default(), 0)
        .err()
        .unwrap();
    assert!(
        matches!(err, Error::Precondition(ref m) if m.contains("class 0")),
        "{err}"
    );
}

#[test]
fn identical_arms_have_zero_gap() {
    let g = labeled(&LabeledConfig::default(), 12);
    let model = model_for(&g, 12);
    let graphs = vec![g];
    let cfg = FinetuneConfig {
        epochs: 8,
        ..Default::default()
    };
    let recs = nt_gap_experiment(&model, Some(&model), &graphs, 0, 5, &cfg, &[0, 1]).unwrap();
    for r in &recs {
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.acc_pre, r.acc_scratch);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gap.csv");
    write_nt_gap(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "seed,acc_pre,acc_scratch,gap");
    assert!(text.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn config_validation() {
    assert!(FinetuneConfig::default().validate().is_ok());
    let d = FinetuneConfig::default();
    assert_eq!(
        (d.lambda_proto, d.lambda_lin, d.tau_proto, d.tau_lin, d.patience),
        (1.0, 0.1, 1.0, 1.0, 20)
    );
    for bad in [
        FinetuneConfig {
            lambda_proto: 0.0,
            lambda_lin: 0.0,
            ..d.clone()
        },
        FinetuneConfig {
            tau_proto: 0.0,
            ..d.clone()
        },
        FinetuneConfig {
            lr: f64::NAN,
            ..d.clone()
        },
        FinetuneConfig {
            bank_cap: Some(0),
            ..d.clone()
        },
        FinetuneConfig {
            patience: 0,
            ..d.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
    }
}

#[test]
fn similarity_reading_reverses_the_ranking() {
    let protos = Prototypes::new(Tensor::eye(2), 1.0)
        .unwrap()
        .with_sim(ProtoSim::CosineSimilarity);
    let p = proto_predict(&protos, &[1.0, 0.0]).unwrap();
    let expect = 1.0 / (1.0 + E);
    assert!((p[0] - expect).abs() < 1e-12);
    assert!(p[1] > p[0]);
}
