use std::path::Path;
use std::process::{Command, Output};

const TRAIN: &str = "\
UsedFor\teat breakfast\tstart the day
UsedFor\thave breakfast\tstart the day
AtLocation\teat breakfast\tkitchen
AtLocation\tcook food\tkitchen
Causes\tcook food\teat breakfast
Causes\tbuy food\tcook food
UsedFor\tkitchen\tcook food
AtLocation\tbuy food\tstore
UsedFor\tstore\tbuy food
Causes\thave breakfast\tfeel full
Causes\teat breakfast\tfeel full
AtLocation\thave breakfast\ttable
";
const VALID: &str = "AtLocation\teat breakfast\ttable\nCauses\tbuy food\teat breakfast\n";
const TEST: &str = "AtLocation\thave breakfast\tkitchen\nUsedFor\tbuy food\tstart the day\n";

const CONFIG: &str = r#"{
    "encoder": {"dim": 8},
    "pretrain": {"epochs": 2, "batch_size": 4},
    "kmeans": {"k": 4},
    "model": {"d_model": 8, "channels": 2, "kernel_width": 3, "gcn": {"dim": 8}},
    "train": {"epochs": 10, "max_epochs": 10, "eval_every": 5, "lr": 0.01, "mask_epochs": 5},
    "paths": {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv", "out_dir": "out"}
}"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("train.tsv", TRAIN), ("valid.tsv", VALID), ("test.tsv", TEST), ("cfg.json", CONFIG)] {
        std::fs::write(dir.path().join(name), body).unwrap();
    }
    dir
}

fn cskg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cskg"))
        .current_dir(dir)
        .args(["--config", "cfg.json"])
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let o = Command::new(env!("CARGO_BIN_EXE_cskg")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn gradcheck_reports_every_component() {
    let o = Command::new(env!("CARGO_BIN_EXE_cskg"))
        .args(["gradcheck", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    for c in ["mnr_loss", "gcn_forward", "fuse", "decode_query", "score_candidates", "full_model"] {
        assert!(out.contains(c), "missing {c}");
    }
    assert!(out.contains("all passed"));
}

#[test]
fn gradcheck_empty_component_list() {
    let o = Command::new(env!("CARGO_BIN_EXE_cskg"))
        .args(["gradcheck", "--components", ""])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 checks"));
    let o = Command::new(env!("CARGO_BIN_EXE_cskg"))
        .args(["gradcheck", "--components", "nope"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_stage_sequence_writes_documented_artifacts() {
    let ws = workspace();
    let d = ws.path();
    for args in [&["ingest"][..], &["pretrain"], &["cluster", "--k", "4"], &["train"], &["eval", "--dump"]] {
        let o = cskg(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = d.join("out");
    for f in [
        "graph.json",
        "graph_train.tsv",
        "encoder.ckpt",
        "semantic_embeddings.txt",
        "pretrain_metrics.json",
        "clusters.tsv",
        "centroids.txt",
        "cluster_metrics.json",
        "model.ckpt",
        "train_log.jsonl",
        "eval_metrics.json",
        "rankings.tsv",
        "top10.tsv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let graph = read_json(out.join("graph.json"));
    assert_eq!(graph["summary"]["train"], 12);
    assert_eq!(graph["summary"]["augmented"], true);
    let manifest = read_json(out.join("manifest.json"));
    assert_eq!(manifest["layout_version"], 1);
    for stage in ["ingest", "pretrain", "cluster", "train", "eval"] {
        assert!(manifest["stages"][stage].is_array(), "stage {stage} not recorded");
    }
    let metrics = read_json(out.join("eval_metrics.json"));
    assert_eq!(metrics["metrics"]["count"], 4);
    assert_eq!(metrics["config"]["kmeans"]["seed"], 0);
    assert!(metrics["checkpoint_id"].as_str().unwrap().len() == 16);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0]["mask_factor"], 0.0);
    assert!(lines[4]["dev_mrr"].is_number());
    assert!(lines[3].get("dev_mrr").is_none());
    let clusters = std::fs::read_to_string(out.join("clusters.tsv")).unwrap();
    assert_eq!(clusters.lines().count(), 9);

    let raw = cskg(d, &["eval", "--raw", "--out-dir", "out"]);
    assert_eq!(raw.status.code(), Some(0));
    let raw = read_json(out.join("eval_metrics.json"));
    assert_eq!(raw["metrics"]["setting"], "raw");
    assert!(metrics["metrics"]["mrr"].as_f64().unwrap() >= raw["metrics"]["mrr"].as_f64().unwrap());
}

#[test]
fn ablation_flags_skip_missing_artifacts() {
    let ws = workspace();
    let o = cskg(ws.path(), &["train", "--no-cp", "--no-nc", "--gcn-init", "random"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(ws.path().join("out/train_summary.json"));
    assert_eq!(summary["config"]["train"]["use_cp"], false);
    assert_eq!(summary["config"]["model"]["gcn"]["init"], "random");
}

#[test]
fn missing_artifact_is_config_error() {
    let ws = workspace();
    let o = cskg(ws.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}

#[test]
fn invalid_config_and_inputs_exit_1() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(cskg(d, &["train", "--epochs", "7"]).status.code(), Some(1));
    assert_eq!(cskg(d, &["ingest", "--gcn-init", "fancy"]).status.code(), Some(1));
    assert_eq!(cskg(d, &["ingest", "--train", "absent.tsv"]).status.code(), Some(1));
    std::fs::write(d.join("bad.tsv"), "UsedFor\tonly two\n").unwrap();
    let o = cskg(d, &["ingest", "--train", "bad.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(cskg(d, &["cluster", "--k", "99"]).status.code(), Some(1));
}

#[test]
fn sparsify_removes_floor_fraction() {
    let ws = workspace();
    let o = cskg(ws.path(), &["sparsify", "--fraction", "0.25"]);
    assert_eq!(o.status.code(), Some(0));
    let out = ws.path().join("out");
    let kept = std::fs::read_to_string(out.join("sparse_train.tsv")).unwrap();
    let removed = std::fs::read_to_string(out.join("removed.tsv")).unwrap();
    assert_eq!(removed.lines().count(), 3);
    assert_eq!(kept.lines().count(), 9);
    assert_eq!(cskg(ws.path(), &["sparsify", "--fraction", "1.5"]).status.code(), Some(1));
}

#[test]
fn sweeps_write_one_row_per_setting() {
    let ws = workspace();
    let o = cskg(ws.path(), &["sweep-sparsity", "--fractions", "0,0.25,0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ws.path().join("out/sweep_sparsity.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("fraction,mrr"));
    assert!(lines[2].starts_with("0.25,"));

    let o = cskg(ws.path(), &["sweep-k", "--k", "2,4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ws.path().join("out/sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("2,"));
}
