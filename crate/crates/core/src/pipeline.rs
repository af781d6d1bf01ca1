//! Experiment configuration and the end-to-end pipeline:
//! pretrain -> cluster -> train -> evaluate, plus the sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, ClusterAssignment, KMeansConfig};
use crate::contrastive::{pretrain_on_graph, PretrainConfig, PretrainReport};
use crate::encoder::{load_precomputed, EmbeddingMatrix, EmbeddingRole, EncoderConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detailed, Metrics, RankingResult, Setting, TiePolicy};
use crate::kg::{Graph, Split};
use crate::model::{random_semantic, train_completion, CompletionModel, ModelConfig, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub setting: Setting,
    pub tie_policy: TiePolicy,
}

/// Optional similarity edges added before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// 0 disables densification.
    pub top_k: usize,
    pub min_sim: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig { top_k: 0, min_sim: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Precomputed semantic vectors, used instead of pretraining.
    pub embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Global seed; copied into every stochastic stage by [`Self::resolved`].
    pub seed: u64,
    pub case_fold: bool,
    pub add_inverse: bool,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub kmeans: KMeansConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub densify: DensifyConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            case_fold: true,
            add_inverse: true,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            kmeans: KMeansConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            densify: DensifyConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Copy with the global seed propagated to every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.kmeans.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.encoder.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        if self.kmeans.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.model.d_model == 0 || self.model.channels == 0 || self.model.kernel_width % 2 == 0 {
            return Err(Error::Config("decoder needs positive sizes and an odd kernel width".into()));
        }
        if !(0.0..1.0).contains(&self.model.gcn.dropout) {
            return Err(Error::Config("GCN dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every configured input path must exist.
    pub fn validate_paths(&self) -> Result<()> {
        let p = &self.paths;
        for path in [&p.train, &p.valid, &p.test, &p.embeddings].into_iter().flatten() {
            if !Path::new(path).exists() {
                return Err(Error::Config(format!("path does not exist: {}", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SemanticStage {
    /// `None` when pretraining is disabled or vectors were precomputed.
    pub encoder: Option<TextEncoder>,
    pub report: Option<PretrainReport>,
    pub semantic: EmbeddingMatrix,
}

/// Produces `E_sem`: pretrained encoder output, precomputed vectors, or
/// (without contrastive pretraining) a frozen random matrix.
pub fn semantic_stage(graph: &Graph, cfg: &ExperimentConfig) -> Result<SemanticStage> {
    let n = graph.num_nodes();
    if !cfg.train.use_cp {
        let m = random_semantic(n, cfg.encoder.dim, cfg.train.seed);
        return Ok(SemanticStage {
            encoder: None,
            report: None,
            semantic: EmbeddingMatrix::new(m, EmbeddingRole::Semantic)?,
        });
    }
    if let Some(path) = &cfg.paths.embeddings {
        return Ok(SemanticStage {
            encoder: None,
            report: None,
            semantic: load_precomputed(path, graph.nodes())?,
        });
    }
    let encoder = TextEncoder::from_texts(graph.nodes().texts().iter().map(String::as_str), cfg.encoder, cfg.seed)?;
    let (encoder, report) = pretrain_on_graph(encoder, graph, &cfg.pretrain)?;
    let semantic = encoder.encode_all(graph.nodes());
    Ok(SemanticStage {
        encoder: Some(encoder),
        report: Some(report),
        semantic,
    })
}

/// Latent concepts, or `None` when they are disabled.
pub fn cluster_stage(semantic: &EmbeddingMatrix, cfg: &ExperimentConfig) -> Result<Option<ClusterAssignment>> {
    if !cfg.train.use_nc {
        return Ok(None);
    }
    if cfg.kmeans.k > semantic.len() {
        return Err(Error::Config(format!(
            "k = {} exceeds the number of nodes ({})",
            cfg.kmeans.k,
            semantic.len()
        )));
    }
    cluster(semantic.rows().view(), &cfg.kmeans).map(Some)
}

/// Adds similarity edges when configured.
pub fn densify_stage(graph: &Graph, semantic: &EmbeddingMatrix, cfg: &ExperimentConfig) -> Result<Graph> {
    if cfg.densify.top_k == 0 {
        return Ok(graph.clone());
    }
    graph.densify_by_similarity(semantic.rows().view(), cfg.densify.top_k, cfg.densify.min_sim)
}

pub fn evaluate_split(
    model: &CompletionModel,
    graph: &Graph,
    split: Split,
    eval: &EvalConfig,
) -> Result<(Metrics, Vec<RankingResult>)> {
    let scorer = model.scorer()?;
    evaluate_detailed(&scorer, &graph.split_tuples(split), graph, eval.setting, eval.tie_policy)
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub semantic: SemanticStage,
    pub assignment: Option<ClusterAssignment>,
    /// The graph the model was trained on (densified if configured).
    pub graph: Graph,
    pub outcome: TrainOutcome,
    pub test: Metrics,
}

/// Trains and evaluates given a semantic stage.
fn train_and_test(
    graph: &Graph,
    semantic: SemanticStage,
    assignment: Option<ClusterAssignment>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentRun> {
    let graph = densify_stage(graph, &semantic.semantic, cfg)?;
    let outcome = train_completion(&graph, &semantic.semantic, assignment.as_ref(), &cfg.model, &cfg.train)?;
    let (test, _) = evaluate_split(&outcome.model, &graph, Split::Test, &cfg.eval)?;
    Ok(ExperimentRun {
        semantic,
        assignment,
        graph,
        outcome,
        test,
    })
}

pub fn run_experiment(graph: &Graph, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let semantic = semantic_stage(graph, &cfg)?;
    let assignment = cluster_stage(&semantic.semantic, &cfg)?;
    train_and_test(graph, semantic, assignment, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// One cluster/train/evaluate run per `k`, sharing a single semantic stage.
pub fn sweep_k(graph: &Graph, cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepRow>> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let semantic = semantic_stage(graph, &cfg)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.kmeans.k = k;
        c.validate()?;
        let assignment = cluster_stage(&semantic.semantic, &c)?;
        let run = train_and_test(graph, semantic.clone(), assignment, &c)?;
        rows.push(SweepRow {
            value: k as f64,
            metrics: run.test,
        });
    }
    Ok(rows)
}

/// Full pipeline on the graph with a fraction of train edges removed.
pub fn sweep_sparsity(graph: &Graph, cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let sparse = graph.sparsify(f, cfg.seed)?;
        let run = run_experiment(&sparse, &cfg)?;
        rows.push(SweepRow {
            value: f,
            metrics: run.test,
        });
    }
    Ok(rows)
}
