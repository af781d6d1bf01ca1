//! Subcommand implementations. Each returns `Ok(true)` on success and
//! `Ok(false)` when the command ran but its check failed.

use std::fs;
use std::io::Write;
use std::time::Instant;

use anyhow::{Context, Result};
use cskg_core::clustering::cluster as run_kmeans;
use cskg_core::encoder::{EmbeddingMatrix, EmbeddingRole};
use cskg_core::eval::{write_rankings, write_top_candidates, Setting};
use cskg_core::gradcheck::{gradcheck as run_gradcheck, Component};
use cskg_core::kg::{write_tuples, Graph, Split};
use cskg_core::model::{random_semantic, train_completion, CompletionModel};
use cskg_core::pipeline::{self, ExperimentConfig, SweepRow};
use cskg_core::{checkpoint::Checkpoint, Error};
use serde_json::json;

use crate::artifacts::*;
use crate::Common;

const DEFAULT_OUT_DIR: &str = "cskg-out";

pub fn resolve_config(flags: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(d) = &flags.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    for (slot, flag) in [
        (&mut cfg.paths.train, &flags.train),
        (&mut cfg.paths.valid, &flags.valid),
        (&mut cfg.paths.test, &flags.test),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if flags.no_cp {
        cfg.train.use_cp = false;
    }
    if flags.no_nc {
        cfg.train.use_nc = false;
    }
    if let Some(init) = &flags.gcn_init {
        cfg.model.gcn.init = init.parse()?;
    }
    if flags.raw {
        cfg.eval.setting = Setting::Raw;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
        cfg.train.max_epochs = cfg.train.max_epochs.max(e);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    cfg.validate_paths()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<ArtifactDir> {
    ArtifactDir::create(cfg.paths.out_dir.clone().unwrap_or_else(|| DEFAULT_OUT_DIR.into()))
}

fn semantic_for(dir: &ArtifactDir, graph: &Graph, cfg: &ExperimentConfig) -> Result<EmbeddingMatrix> {
    if cfg.train.use_cp {
        read_semantic(dir, graph)
    } else {
        let m = random_semantic(graph.num_nodes(), cfg.encoder.dim, cfg.train.seed);
        Ok(EmbeddingMatrix::new(m, EmbeddingRole::Semantic)?)
    }
}

/// The graph a model is trained and evaluated on (densified if configured).
fn working_graph(dir: &ArtifactDir, cfg: &ExperimentConfig) -> Result<(Graph, EmbeddingMatrix)> {
    let graph = load_graph(cfg)?;
    let semantic = semantic_for(dir, &graph, cfg)?;
    let graph = pipeline::densify_stage(&graph, &semantic, cfg)?;
    Ok((graph, semantic))
}

pub fn ingest(cfg: &ExperimentConfig) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let mut files = vec![GRAPH_JSON];
    for (split, name) in [
        (Split::Train, "graph_train.tsv"),
        (Split::Valid, "graph_valid.tsv"),
        (Split::Test, "graph_test.tsv"),
    ] {
        let mut w = dir.writer(name)?;
        graph.write_split_tsv(split, &mut w)?;
        w.flush()?;
        files.push(name);
    }
    let summary = graph.summary();
    dir.write_json(
        GRAPH_JSON,
        &json!({
            "summary": summary,
            "relations": graph.base_relation_names(),
            "case_fold": cfg.case_fold,
            "config": cfg,
        }),
    )?;
    dir.record("ingest", &files, t.elapsed().as_secs_f64())?;
    println!(
        "nodes {}  relations {}  edges {}  (train {}, valid {}, test {})",
        summary.nodes, summary.relations, summary.edges, summary.train, summary.valid, summary.test
    );
    Ok(true)
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let stage = pipeline::semantic_stage(&graph, cfg)?;
    write_semantic(&dir, &graph, &stage.semantic)?;
    let mut files = vec![SEMANTIC, PRETRAIN_METRICS];
    if let Some(enc) = &stage.encoder {
        enc.to_checkpoint().save(dir.path(ENCODER))?;
        files.push(ENCODER);
    }
    let source = match (&stage.encoder, cfg.train.use_cp) {
        (_, false) => "random",
        (Some(_), true) => "pretrained",
        (None, true) => "precomputed",
    };
    let report = stage.report.unwrap_or_default();
    dir.write_json(
        PRETRAIN_METRICS,
        &json!({
            "source": source,
            "epoch_losses": report.epoch_losses,
            "samples": report.samples,
            "skipped": report.skipped,
            "steps": report.steps,
            "config": cfg,
        }),
    )?;
    dir.record("pretrain", &files, t.elapsed().as_secs_f64())?;
    match report.epoch_losses.last() {
        Some(l) => println!("semantic vectors: {source}; final epoch loss {l:.6}; skipped {}", report.skipped),
        None => println!("semantic vectors: {source}"),
    }
    Ok(true)
}

pub fn cluster(cfg: &ExperimentConfig, k: usize) -> Result<bool> {
    let t = Instant::now();
    let mut cfg = cfg.clone();
    cfg.kmeans.k = k;
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    let graph = load_graph(&cfg)?;
    if cfg.kmeans.k > graph.num_nodes() {
        let msg = format!("k = {} exceeds the number of nodes ({})", cfg.kmeans.k, graph.num_nodes());
        return Err(Error::Config(msg).into());
    }
    let semantic = semantic_for(&dir, &graph, &cfg)?;
    let a = run_kmeans(semantic.rows().view(), &cfg.kmeans)?;
    write_clusters(&dir, &graph, &a)?;
    dir.write_json(
        CLUSTER_METRICS,
        &json!({
            "k": a.k(),
            "inertia": a.inertia,
            "iterations": a.iterations,
            "inertia_trace": a.inertia_trace,
            "size_histogram": a.size_histogram(),
            "config": cfg,
        }),
    )?;
    dir.record("cluster", &[CLUSTERS, CENTROIDS, CLUSTER_METRICS], t.elapsed().as_secs_f64())?;
    println!("k {}  inertia {:.6}  iterations {}", a.k(), a.inertia, a.iterations);
    Ok(true)
}

pub fn train(cfg: &ExperimentConfig) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let (graph, semantic) = working_graph(&dir, cfg)?;
    let assignment = if cfg.train.use_nc {
        Some(read_clusters(&dir, &graph, &semantic)?)
    } else {
        None
    };
    let outcome = train_completion(&graph, &semantic, assignment.as_ref(), &cfg.model, &cfg.train)?;
    outcome.model.to_checkpoint().save(dir.path(MODEL))?;
    let mut w = dir.writer(TRAIN_LOG)?;
    for entry in &outcome.log {
        serde_json::to_writer(&mut w, entry)?;
        writeln!(w)?;
    }
    w.flush()?;
    dir.write_json(
        TRAIN_SUMMARY,
        &json!({
            "best_epoch": outcome.best_epoch,
            "best_dev_mrr": outcome.best_dev_mrr,
            "epochs_run": outcome.epochs_run,
            "final_loss": outcome.log.last().map(|l| l.loss),
            "config": cfg,
        }),
    )?;
    dir.record("train", &[MODEL, TRAIN_LOG, TRAIN_SUMMARY], t.elapsed().as_secs_f64())?;
    match outcome.best_dev_mrr {
        Some(m) => println!("epochs {}  best epoch {}  dev MRR {m:.4}", outcome.epochs_run, outcome.best_epoch),
        None => println!("epochs {}  (no dev split)", outcome.epochs_run),
    }
    Ok(true)
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Argument(format!("unknown split '{name}'")).into())
}

pub fn eval(cfg: &ExperimentConfig, split: &str, dump: bool) -> Result<bool> {
    let t = Instant::now();
    let split = parse_split(split)?;
    let dir = out_dir(cfg)?;
    dir.manifest()?;
    let model_path = dir.require(MODEL, "train")?;
    let graph = if cfg.densify.top_k > 0 {
        working_graph(&dir, cfg)?.0
    } else {
        load_graph(cfg)?
    };
    let model = CompletionModel::from_checkpoint(Checkpoint::load(&model_path)?, &graph)?;
    let (metrics, results) = pipeline::evaluate_split(&model, &graph, split, &cfg.eval)?;
    let mut files = vec![EVAL_METRICS];
    if dump {
        let mut w = dir.writer(RANKINGS)?;
        write_rankings(&mut w, &results, &graph)?;
        w.flush()?;
        let scorer = model.scorer()?;
        let mut w = dir.writer(TOP_CANDIDATES)?;
        write_top_candidates(&mut w, &scorer, &results, &graph, 10)?;
        w.flush()?;
        files.extend([RANKINGS, TOP_CANDIDATES]);
    }
    dir.write_json(
        EVAL_METRICS,
        &json!({
            "checkpoint_id": file_digest(&model_path)?,
            "split": split.name(),
            "metrics": metrics,
            "config": cfg,
        }),
    )?;
    dir.record("eval", &files, t.elapsed().as_secs_f64())?;
    println!(
        "{} {:?}: MRR {:.4}  HITS@1 {:.4}  HITS@3 {:.4}  HITS@10 {:.4}  ({} queries)",
        split.name(),
        metrics.setting,
        metrics.mrr,
        metrics.hits_at_1,
        metrics.hits_at_3,
        metrics.hits_at_10,
        metrics.count
    );
    Ok(true)
}

pub fn sparsify(cfg: &ExperimentConfig, fraction: f64) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let (sparse, removed) = graph.sparsify_with_removed(fraction, cfg.seed)?;
    let names = ["sparse_train.tsv", "sparse_valid.tsv", "sparse_test.tsv"];
    for (split, name) in Split::ALL.into_iter().zip(names) {
        let mut w = dir.writer(name)?;
        sparse.write_split_tsv(split, &mut w)?;
        w.flush()?;
    }
    let mut w = dir.writer("removed.tsv")?;
    write_tuples(&mut w, &removed, graph.nodes(), graph.base_relation_names())?;
    w.flush()?;
    dir.write_json(
        "sparsify.json",
        &json!({
            "fraction": fraction,
            "removed": removed.len(),
            "remaining_train": sparse.summary().train,
            "config": cfg,
        }),
    )?;
    let mut files = names.to_vec();
    files.extend(["removed.tsv", "sparsify.json"]);
    dir.record("sparsify", &files, t.elapsed().as_secs_f64())?;
    println!("removed {} of {} train edges", removed.len(), graph.summary().train);
    Ok(true)
}

fn write_sweep(dir: &ArtifactDir, stem: &str, column: &str, rows: &[SweepRow], cfg: &ExperimentConfig) -> Result<()> {
    let csv = format!("{stem}.csv");
    let mut w = dir.writer(&csv)?;
    writeln!(w, "{column},mrr,hits_at_1,hits_at_3,hits_at_10")?;
    for r in rows {
        let m = &r.metrics;
        writeln!(w, "{},{},{},{},{}", r.value, m.mrr, m.hits_at_1, m.hits_at_3, m.hits_at_10)?;
        println!("{column} {}  MRR {:.4}  HITS@10 {:.4}", r.value, m.mrr, m.hits_at_10);
    }
    w.flush()?;
    dir.write_json(&format!("{stem}.json"), &json!({ "rows": rows, "config": cfg }))
}

pub fn sweep_k(cfg: &ExperimentConfig, ks: &[usize]) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let rows = pipeline::sweep_k(&graph, cfg, ks)?;
    write_sweep(&dir, "sweep_k", "k", &rows, cfg)?;
    dir.record("sweep-k", &["sweep_k.csv", "sweep_k.json"], t.elapsed().as_secs_f64())?;
    Ok(true)
}

pub fn sweep_sparsity(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<bool> {
    let t = Instant::now();
    let dir = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let rows = pipeline::sweep_sparsity(&graph, cfg, fractions)?;
    write_sweep(&dir, "sweep_sparsity", "fraction", &rows, cfg)?;
    dir.record(
        "sweep-sparsity",
        &["sweep_sparsity.csv", "sweep_sparsity.json"],
        t.elapsed().as_secs_f64(),
    )?;
    Ok(true)
}

pub fn gradcheck(cfg: &ExperimentConfig, components: Option<&[String]>) -> Result<bool> {
    let components: Vec<Component> = match components {
        None => Component::ALL.to_vec(),
        Some(names) => names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| n.trim().parse())
            .collect::<cskg_core::Result<_>>()?,
    };
    let report = run_gradcheck(&components, cfg.seed);
    for c in &report.checks {
        let err = c.max_rel_error.map_or("non-finite".to_string(), |e| format!("{e:.3e}"));
        let verdict = if c.passed { "ok" } else { "FAIL" };
        println!("{:<18} {:<28} {:>11}  (<= {:.0e})  {verdict}", c.component.name(), c.tensor, err, c.threshold);
    }
    if let Some(d) = &cfg.paths.out_dir {
        let dir = ArtifactDir::create(d.clone())?;
        dir.write_json("gradcheck.json", &json!({ "report": report, "config": cfg }))
            .context("writing gradcheck report")?;
    }
    println!(
        "{} checks, {}",
        report.checks.len(),
        if report.passed() { "all passed" } else { "FAILURES" }
    );
    Ok(report.passed())
}
