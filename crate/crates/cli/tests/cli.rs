use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use treevocab_core::graph::Graph;
use treevocab_core::transfer::experiment::TRANSFER_HEADER;

fn treevocab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treevocab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = treevocab(args, cwd);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Three block graphs, a pre-trained checkpoint (2 epochs) and a labeled
/// graph, all in `dir`.
fn pipeline_fixture(dir: &Path, labeled: &[&str]) {
    for f in ["g1", "g2", "g3"] {
        ok(
            &[
                "synth",
                "--family",
                f,
                "--blocks",
                "2",
                "--dim",
                "8",
                "--out",
                &format!("{f}.json"),
            ],
            dir,
        );
    }
    let mut args = vec!["synth", "--family", "labeled", "--out", "labeled.json"];
    args.extend_from_slice(labeled);
    ok(&args, dir);
    write_config(
        dir,
        "pretrain.json",
        json!({"version": 1, "graphs": ["g1.json", "g2.json", "g3.json"], "out": "pre"}),
    );
    ok(&["pretrain", "--config", "pretrain.json", "--epochs", "2"], dir);
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "synth", "--family", "g1", "--blocks", "3", "--dim", "4", "--seed", "7", "--out", out,
        ]
    };
    ok(&args("a.json"), dir.path());
    ok(&args("b.json"), dir.path());
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    let g = Graph::load(dir.path().join("a.json")).unwrap();
    assert_eq!((g.num_nodes(), g.feature_dim()), (18, 4));
    assert!(g.is_connected());

    ok(
        &[
            "synth",
            "--family",
            "labeled",
            "--classes",
            "2",
            "--nodes-per-class",
            "10",
            "--out",
            "l.json",
        ],
        dir.path(),
    );
    let l = Graph::load(dir.path().join("l.json")).unwrap();
    assert_eq!(l.num_classes(), Some(2));
    let total: usize = ["train", "val", "test"].iter().map(|s| l.splits()[*s].len()).sum();
    assert_eq!(total, 20);
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&treevocab(&["frobnicate"], d)), 1);
    assert_eq!(
        code(&treevocab(
            &["synth", "--family", "g9", "--blocks", "2", "--out", "x.json"],
            d
        )),
        1
    );
    assert_eq!(
        code(&treevocab(
            &["synth", "--family", "g1", "--blocks", "0", "--out", "x.json"],
            d
        )),
        1
    );
    assert_eq!(code(&treevocab(&["pretrain", "--config", "missing.json"], d)), 1);
    assert_eq!(code(&treevocab(&["--help"], d)), 0);

    write_config(d, "noversion.json", json!({"graphs": ["g.json"]}));
    let o = treevocab(&["pretrain", "--config", "noversion.json"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("version"));
    write_config(d, "v2.json", json!({"version": 2, "graphs": ["g.json"]}));
    assert_eq!(code(&treevocab(&["pretrain", "--config", "v2.json"], d)), 1);
    write_config(d, "typo.json", json!({"version": 1, "graphs": ["g.json"], "epohcs": 3}));
    let o = treevocab(&["pretrain", "--config", "typo.json"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epohcs"), "{}", stderr(&o));
    write_config(
        d,
        "bad-model.json",
        json!({"version": 1, "graphs": ["g.json"], "model": {"beta1": 1.0}}),
    );
    assert_eq!(code(&treevocab(&["pretrain", "--config", "bad-model.json"], d)), 1);

    fs::write(d.join("broken.json"), "{ not json").unwrap();
    write_config(d, "broken-graph.json", json!({"version": 1, "graphs": ["broken.json"]}));
    assert_eq!(code(&treevocab(&["pretrain", "--config", "broken-graph.json"], d)), 1);
}

#[test]
fn missing_dataset_is_rejected_before_any_compute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--family", "g1", "--blocks", "2", "--out", "g1.json"], d);
    write_config(
        d,
        "pre.json",
        json!({"version": 1, "graphs": ["g1.json", "nowhere.json"], "out": "run"}),
    );
    let o = treevocab(&["pretrain", "--config", "pre.json"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere.json"));
    assert!(!d.join("run").exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--family", "g1", "--blocks", "2", "--out", "g1.json"], d);
    fs::write(d.join("blocker"), "a file, not a directory").unwrap();
    write_config(d, "pre.json", json!({"version": 1, "graphs": ["g1.json"]}));
    let o = treevocab(
        &[
            "pretrain",
            "--config",
            "pre.json",
            "--epochs",
            "1",
            "--out",
            "blocker/run",
        ],
        d,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn pretrain_writes_checkpoint_manifest_and_curve_without_touching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--family", "g2", "--blocks", "2", "--out", "g2.json"], d);
    let before = fs::read(d.join("g2.json")).unwrap();
    write_config(
        d,
        "pre.json",
        json!({"version": 1, "seed": 3, "graphs": ["g2.json"], "out": "run"}),
    );
    let cfg_before = fs::read(d.join("pre.json")).unwrap();
    ok(&["pretrain", "--config", "pre.json", "--epochs", "3"], d);
    assert!(d.join("run/checkpoint.bin").exists());
    let manifest = read_json(&d.join("run/checkpoint.bin.manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["epochs_done"], 3);
    let curve = fs::read_to_string(d.join("run/pretrain_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,L_total,"));
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(fs::read(d.join("g2.json")).unwrap(), before);
    assert_eq!(fs::read(d.join("pre.json")).unwrap(), cfg_before);

    // --seed and --out override the config.
    ok(
        &[
            "pretrain", "--config", "pre.json", "--epochs", "1", "--seed", "9", "--out", "other",
        ],
        d,
    );
    assert_eq!(read_json(&d.join("other/checkpoint.bin.manifest.json"))["seed"], 9);
}

#[test]
fn shipped_pretrain_config_uses_reference_loss_weights() {
    let cfg = read_json(&configs_dir().join("pretrain.json"));
    assert_eq!(cfg["version"], 1);
    let m = &cfg["model"];
    assert_eq!(m["beta1"], 10.0);
    assert_eq!(m["beta2"], 100.0);
    assert_eq!(m["beta3"], 1.0);
    assert_eq!(m["beta4"], 0.01);
    assert_eq!(m["lambda"], 1.0);
    assert_eq!(m["gamma"], 1.0);
    assert_eq!(m["vocab"]["num_tokens"], 128);
    assert_eq!(m["epochs"], 25);
    assert_eq!(m["lr"], 1e-4);
    assert_eq!(m["weight_decay"], 1e-5);
    assert_eq!(m["edge_drop_rate"], 0.2);
    assert_eq!(m["feature_drop_rate"], 0.2);
    assert_eq!(m["link_fraction"], 0.1);
}

/// (name, lr, epochs, early stop, bank cap, lambda_proto, lambda_lin)
type Profile = (&'static str, f64, u64, u64, Option<u64>, f64, f64);

#[test]
fn shipped_finetune_profiles_match_the_reference_table() {
    let table: [Profile; 8] = [
        ("cora", 5e-4, 1000, 200, None, 1.0, 0.1),
        ("pubmed", 5e-3, 1000, 200, None, 0.1, 1.0),
        ("arxiv", 5e-4, 1000, 200, None, 1.0, 0.1),
        ("wikics", 1e-4, 2000, 500, None, 1.0, 1.0),
        ("wn18rr", 1e-3, 1000, 200, None, 0.1, 1.0),
        ("fb15k237", 5e-4, 3000, 200, Some(50), 0.1, 0.1),
        ("hiv", 3e-4, 100, 20, Some(1500), 0.1, 1.0),
        ("pcba", 1e-3, 50, 10, Some(20), 1.0, 1.0),
    ];
    for (name, lr, epochs, stop, cap, lp, ll) in table {
        let cfg = read_json(&configs_dir().join(format!("profiles/{name}.json")));
        let f = &cfg["finetune"];
        assert_eq!(f["lr"], lr, "{name}");
        assert_eq!(f["epochs"], epochs, "{name}");
        assert_eq!(f["patience"], stop, "{name}");
        assert_eq!(f["bank_cap"].as_u64(), cap, "{name}");
        assert_eq!(f["lambda_proto"], lp, "{name}");
        assert_eq!(f["lambda_lin"], ll, "{name}");
        assert_eq!(f["tau_proto"], 1.0, "{name}");
        assert_eq!(f["tau_lin"], 1.0, "{name}");
    }
}

#[test]
fn shipped_configs_parse_and_fail_only_on_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut configs: Vec<PathBuf> = fs::read_dir(configs_dir().join("profiles"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    configs.sort();
    for p in &configs {
        let o = treevocab(&["finetune", "--config", p.to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 1, "{}", p.display());
        assert!(stderr(&o).contains("does not exist"), "{}: {}", p.display(), stderr(&o));
    }
    for (cmd, file) in [
        ("pretrain", "pretrain.json"),
        ("fewshot", "fewshot.json"),
        ("finetune", "finetune.json"),
        ("kernel", "kernel.json"),
    ] {
        let p = configs_dir().join(file);
        let o = treevocab(&[cmd, "--config", p.to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 1, "{file}");
        assert!(stderr(&o).contains("does not exist"), "{file}: {}", stderr(&o));
    }
    let o = treevocab(
        &[
            "inspect-vocab",
            "--config",
            configs_dir().join("inspect_vocab.json").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    let transfer = read_json(&configs_dir().join("transfer.json"));
    assert_eq!(transfer["seeds"], 100);
    assert_eq!(transfer["transfer"]["feature_dim"], 4);
}

#[test]
fn fewshot_with_one_shot_on_two_classes_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline_fixture(d, &["--classes", "2", "--nodes-per-class", "10"]);
    write_config(
        d,
        "fs.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["labeled.json"], "k": 1,
               "out": "fs", "finetune": {"epochs": 5, "patience": 5}}),
    );
    let out = ok(&["fewshot", "--config", "fs.json"], d);
    assert!(out.contains("accuracy"));
    let m = read_json(&d.join("fs/fewshot_metrics.json"));
    assert_eq!(m["task"], "node");
    assert_eq!(m["k_shot"], 1);
    assert_eq!(m["seed"], 0);
    let acc = m["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(m["loss_curve_path"], "fewshot_curve.csv");
    let curve = fs::read_to_string(d.join("fs/fewshot_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss,proto_loss,lin_loss,train_acc,monitor_acc"));
    let before = fs::read(d.join("fs/fewshot_metrics.json")).unwrap();
    ok(&["fewshot", "--config", "fs.json"], d);
    assert_eq!(fs::read(d.join("fs/fewshot_metrics.json")).unwrap(), before);

    // A class with fewer than k members is named in the error.
    let o = treevocab(&["fewshot", "--config", "fs.json", "--k", "11"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("class 0"), "{}", stderr(&o));
}

#[test]
fn finetune_on_splits_and_on_instance_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline_fixture(d, &["--classes", "2", "--nodes-per-class", "12"]);
    let small = json!({"epochs": 4, "patience": 4});
    write_config(
        d,
        "ft.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["labeled.json"],
               "monitor_split": "val", "out": "ft", "finetune": small}),
    );
    ok(&["finetune", "--config", "ft.json"], d);
    let m = read_json(&d.join("ft/finetune_metrics.json"));
    assert_eq!(m["task"], "node");
    assert_eq!(m["k_shot"], Value::Null);

    write_config(
        d,
        "nosplit.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["labeled.json"],
               "train_split": "nope", "finetune": small}),
    );
    let o = treevocab(&["finetune", "--config", "nosplit.json"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope"));

    let link = |s: usize, t: usize, label: usize| json!({"kind": "link", "graph": 0, "nodes": [s, t], "label": label});
    write_config(
        d,
        "links.json",
        json!({"num_classes": 2,
               "train": [link(0, 2, 0), link(4, 6, 0), link(1, 3, 1), link(5, 7, 1)],
               "eval": [link(8, 10, 0), link(9, 11, 1)]}),
    );
    write_config(
        d,
        "ft-link.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["labeled.json"], "task": "link",
               "instances": "links.json", "out": "ftl", "finetune": small}),
    );
    ok(&["finetune", "--config", "ft-link.json"], d);
    assert_eq!(read_json(&d.join("ftl/finetune_metrics.json"))["task"], "link");

    let whole = |g: usize, n: usize, label: usize| json!({"kind": "graph", "graph": g, "nodes": (0..n).collect::<Vec<_>>(), "label": label});
    write_config(
        d,
        "graphs.json",
        json!({"num_classes": 2, "train": [whole(0, 12, 0), whole(1, 12, 1)],
               "eval": [whole(2, 12, 0), whole(1, 12, 1)]}),
    );
    write_config(
        d,
        "ft-graph.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["g1.json", "g2.json", "g3.json"],
               "task": "graph", "instances": "graphs.json", "out": "ftg", "finetune": small}),
    );
    ok(&["finetune", "--config", "ft-graph.json"], d);
    assert_eq!(read_json(&d.join("ftg/finetune_metrics.json"))["task"], "graph");

    write_config(
        d,
        "ft-missing.json",
        json!({"version": 1, "checkpoint": "pre/checkpoint.bin", "graphs": ["labeled.json"], "task": "link"}),
    );
    assert_eq!(code(&treevocab(&["finetune", "--config", "ft-missing.json"], d)), 1);
}

#[test]
fn kernel_matrix_has_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for f in ["g1", "g3"] {
        ok(
            &["synth", "--family", f, "--blocks", "3", "--out", &format!("{f}.json")],
            d,
        );
    }
    for kernel in ["wl", "graphlet"] {
        write_config(
            d,
            "k.json",
            json!({"version": 1, "graphs": ["g1.json", "g1.json", "g3.json"], "names": ["a", "b", "c"],
                   "kernel": kernel, "out": kernel}),
        );
        ok(&["kernel", "--config", "k.json"], d);
        let text = fs::read_to_string(d.join(kernel).join("kernel.csv")).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
        assert_eq!(rows[0], ["graph", "a", "b", "c"]);
        for (i, row) in rows.iter().enumerate().skip(1) {
            assert_eq!(row[i], "1.00000000000e0", "{kernel}");
            for (j, other) in rows.iter().enumerate().skip(1) {
                assert_eq!(row[j], other[i]);
            }
        }
        assert_eq!(rows[1][2], "1.00000000000e0");
    }
}

#[test]
fn transfer_defaults_to_one_hundred_seeds_with_declared_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(
        d,
        "t.json",
        json!({"version": 1, "sources": ["g2"], "blocks": [2], "out": "t"}),
    );
    ok(&["transfer", "--config", "t.json"], d);
    let text = fs::read_to_string(d.join("t/transfer.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), TRANSFER_HEADER.join(","));
    assert_eq!(
        TRANSFER_HEADER,
        [
            "source",
            "target",
            "num_blocks",
            "seed",
            "wl_sim",
            "graphlet_sim",
            "cmd",
            "transferability"
        ]
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows
        .iter()
        .all(|r| r.starts_with("g2,g1,2,") && r.split(',').count() == 8));
    let summary = fs::read_to_string(d.join("t/transfer_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn inspect_vocab_reports_usage_and_flags_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--family", "g1", "--blocks", "1", "--out", "tiny.json"], d);
    write_config(
        d,
        "pre.json",
        json!({"version": 1, "graphs": ["tiny.json"], "out": "run"}),
    );
    ok(&["pretrain", "--config", "pre.json", "--epochs", "2"], d);
    let out = ok(
        &[
            "inspect-vocab",
            "--checkpoint",
            "run/checkpoint.bin",
            "--graph",
            "tiny.json",
            "--out",
            "rep",
        ],
        d,
    );
    assert!(out.contains("tokens (K): 128"));
    assert!(out.contains("perplexity:"));
    assert!(out.contains("top tokens"));
    assert!(out.contains("max off-diagonal token cosine:"));
    // Six nodes can use at most six of 128 tokens: perplexity <= 6 < 6.4.
    assert!(out.contains("COLLAPSE"), "{out}");
    let rep = read_json(&d.join("rep/vocab_report.json"));
    assert_eq!(rep["num_tokens"], 128);
    assert_eq!(rep["collapsed"], true);
    assert!(rep["top_tokens"].as_array().unwrap().len() <= 10);
    let counted: u64 = rep["top_tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t[1].as_u64().unwrap())
        .sum();
    assert_eq!(counted, 6);

    for f in ["g1", "g2", "g3"] {
        ok(
            &["synth", "--family", f, "--blocks", "10", "--out", &format!("{f}.json")],
            d,
        );
    }
    let out = ok(
        &[
            "inspect-vocab",
            "--checkpoint",
            "run/checkpoint.bin",
            "--graph",
            "g1.json",
            "--graph",
            "g2.json",
            "--graph",
            "g3.json",
        ],
        d,
    );
    let ppl: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("perplexity: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(ppl < 6.4, out.contains("COLLAPSE"));

    let o = treevocab(
        &["inspect-vocab", "--checkpoint", "nope.bin", "--graph", "tiny.json"],
        d,
    );
    assert_eq!(code(&o), 1);
}
