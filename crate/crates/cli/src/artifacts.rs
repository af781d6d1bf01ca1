//! Artifact directory layout, manifest and file helpers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cskg_core::clustering::ClusterAssignment;
use cskg_core::encoder::{read_embedding_text, write_embedding_text, EmbeddingMatrix};
use cskg_core::kg::{Graph, Split, TupleParser};
use cskg_core::pipeline::ExperimentConfig;
use cskg_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LAYOUT_VERSION: u32 = 1;

pub const GRAPH_JSON: &str = "graph.json";
pub const ENCODER: &str = "encoder.ckpt";
pub const SEMANTIC: &str = "semantic_embeddings.txt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.json";
pub const CLUSTERS: &str = "clusters.tsv";
pub const CENTROIDS: &str = "centroids.txt";
pub const CLUSTER_METRICS: &str = "cluster_metrics.json";
pub const MODEL: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const EVAL_METRICS: &str = "eval_metrics.json";
pub const RANKINGS: &str = "rankings.tsv";
pub const TOP_CANDIDATES: &str = "top10.tsv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub layout_version: u32,
    /// Stage name to the artifact files it wrote, in stage order.
    pub stages: BTreeMap<String, Vec<String>>,
    /// Wall-clock seconds per stage; the only non-deterministic content.
    pub timings: BTreeMap<String, f64>,
}

pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(ArtifactDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    /// Fails with a configuration error naming the stage that produces it.
    pub fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Config(format!(
                "missing artifact {} (run `{stage}` first)",
                p.display()
            ))
            .into());
        }
        Ok(p)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        let f = File::create(&p).with_context(|| format!("writing {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(&self, name: &str, stage: &str) -> Result<Value> {
        let p = self.require(name, stage)?;
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&text).map_err(Error::from)?)
    }

    /// Existing manifest, if any; fails on an unsupported layout version.
    pub fn manifest(&self) -> Result<Option<Manifest>> {
        if !self.exists(MANIFEST) {
            return Ok(None);
        }
        let m: Manifest = serde_json::from_value(self.read_json(MANIFEST, "ingest")?).map_err(Error::from)?;
        if m.layout_version != LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "artifact layout version {} is not supported",
                m.layout_version
            ))
            .into());
        }
        Ok(Some(m))
    }

    pub fn record(&self, stage: &str, files: &[&str], seconds: f64) -> Result<()> {
        let mut m = self.manifest()?.unwrap_or(Manifest {
            layout_version: LAYOUT_VERSION,
            ..Default::default()
        });
        m.stages.insert(stage.into(), files.iter().map(|s| s.to_string()).collect());
        m.timings.insert(stage.into(), seconds);
        self.write_json(MANIFEST, &m)
    }
}

/// Reads the configured splits with one shared vocabulary, so node ids
/// depend only on file contents.
pub fn load_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    let train = cfg
        .paths
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("no train TSV given (--train or paths.train)".into()))?;
    let mut parser = TupleParser::new(cfg.case_fold);
    let mut splits = Vec::new();
    for (split, path) in [
        (Split::Train, Some(train)),
        (Split::Valid, cfg.paths.valid.as_ref()),
        (Split::Test, cfg.paths.test.as_ref()),
    ] {
        if let Some(p) = path {
            let f = File::open(p).map_err(|_| Error::Config(format!("cannot open {}", p.display())))?;
            let tuples = parser
                .parse(BufReader::new(f))
                .with_context(|| format!("parsing {}", p.display()))?;
            splits.push((split, tuples));
        }
    }
    let (nodes, relations) = parser.into_parts();
    let mut builder = cskg_core::kg::GraphBuilder::new(nodes, relations);
    for (split, tuples) in &splits {
        builder = builder.add(*split, tuples);
    }
    Ok(builder.build(cfg.add_inverse)?)
}

pub fn write_semantic(dir: &ArtifactDir, graph: &Graph, semantic: &EmbeddingMatrix) -> Result<()> {
    let mut w = dir.writer(SEMANTIC)?;
    write_embedding_text(&mut w, graph.nodes().texts().iter().map(String::as_str), semantic.rows())?;
    w.flush()?;
    Ok(())
}

pub fn read_semantic(dir: &ArtifactDir, graph: &Graph) -> Result<EmbeddingMatrix> {
    let p = dir.require(SEMANTIC, "pretrain")?;
    Ok(cskg_core::encoder::load_precomputed(p, graph.nodes())?)
}

pub fn write_clusters(dir: &ArtifactDir, graph: &Graph, a: &ClusterAssignment) -> Result<()> {
    let mut w = dir.writer(CLUSTERS)?;
    for (i, c) in a.assignment.iter().enumerate() {
        writeln!(w, "{}\t{c}", graph.nodes().text(i))?;
    }
    w.flush()?;
    let names: Vec<String> = (0..a.k()).map(|c| format!("cluster{c}")).collect();
    let mut w = dir.writer(CENTROIDS)?;
    write_embedding_text(&mut w, names.iter().map(String::as_str), &a.centroids)?;
    w.flush()?;
    Ok(())
}

pub fn read_clusters(dir: &ArtifactDir, graph: &Graph, semantic: &EmbeddingMatrix) -> Result<ClusterAssignment> {
    let p = dir.require(CLUSTERS, "cluster")?;
    let mut assignment = vec![usize::MAX; graph.num_nodes()];
    for (ln, line) in BufReader::new(File::open(&p)?).lines().enumerate() {
        let line = line?;
        let (text, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Parse { line: ln + 1, message: "expected node<TAB>cluster".into() })?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: ln + 1, message: format!("bad cluster id '{id}'") })?;
        let node = graph
            .nodes()
            .get(text)
            .ok_or_else(|| Error::Lookup(format!("clustered node '{text}' is not in the graph")))?;
        assignment[node] = id;
    }
    if let Some(i) = assignment.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Coverage {
            count: assignment.iter().filter(|&&c| c == usize::MAX).count(),
            examples: vec![graph.nodes().text(i).to_string()],
        }
        .into());
    }
    let cp = dir.require(CENTROIDS, "cluster")?;
    let (dim, rows) = read_embedding_text(BufReader::new(File::open(&cp)?))?;
    let mut centroids = ndarray::Array2::zeros((rows.len(), dim));
    for (c, (_, v)) in rows.iter().enumerate() {
        centroids.row_mut(c).assign(&ndarray::ArrayView1::from(v));
    }
    if assignment.iter().any(|&c| c >= centroids.nrows()) || dim != semantic.dim() {
        return Err(Error::Format("cluster ids or centroid width do not match".into()).into());
    }
    let mut a = ClusterAssignment {
        assignment,
        centroids,
        inertia: 0.0,
        inertia_trace: Vec::new(),
        iterations: 0,
    };
    a.inertia = a.recompute_inertia(semantic.rows().view());
    Ok(a)
}

/// FNV-1a digest of a file, used as a checkpoint id.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}
