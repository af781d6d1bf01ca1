//! 1-vs-N training loop with progressive unmasking, periodic dev
//! evaluation and best-checkpoint selection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_factor, CompletionModel, MaskRamp, ModelConfig};
use crate::clustering::ClusterAssignment;
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Setting, TiePolicy};
use crate::kg::{Graph, Split};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Minimum number of epochs before early stopping may trigger.
    pub epochs: usize,
    /// Hard cap on training length.
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Evaluations without dev-MRR improvement tolerated after `epochs`.
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_epochs: usize,
    pub mask_ramp: MaskRamp,
    pub label_smoothing: f64,
    pub seed: u64,
    pub use_cp: bool,
    pub use_nc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            max_epochs: 500,
            eval_every: 10,
            patience: 5,
            lr: 1e-4,
            batch_size: 128,
            mask_epochs: 100,
            mask_ramp: MaskRamp::Linear,
            label_smoothing: 0.1,
            seed: 0,
            use_cp: true,
            use_nc: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.max_epochs < self.epochs {
            return fail("train needs epochs >= 1 and max_epochs >= epochs");
        }
        if self.eval_every == 0 || self.epochs % self.eval_every != 0 {
            return fail("eval_every must be positive and divide epochs");
        }
        if self.batch_size == 0 {
            return fail("train batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("train lr must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mask_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint with the best dev MRR, or the last one without a dev split.
    pub model: CompletionModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_mrr: Option<f64>,
    pub epochs_run: usize,
}

fn stream(seed: u64, id: u64) -> u64 {
    seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn mean_row_norm(m: &Array2<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m.nrows() as f64
}

/// Frozen stand-in for the semantic matrix when contrastive pretraining is
/// disabled; rows have unit mean norm.
pub fn random_semantic(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 3));
    let m = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
    let norm = mean_row_norm(&m);
    if norm > 0.0 {
        m / norm
    } else {
        m
    }
}

/// Trains a completion model on the graph's train split. The semantic
/// matrix is rescaled to unit mean row norm (the centroids with it) so
/// that the fused blocks start on a comparable scale.
pub fn train_completion(
    graph: &Graph,
    semantic: &EmbeddingMatrix,
    assignment: Option<&ClusterAssignment>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = graph.num_nodes();
    if semantic.len() != n {
        return Err(Error::Argument(format!("semantic matrix has {} rows for {n} nodes", semantic.len())));
    }
    let (sem, scale) = if cfg.use_cp {
        let norm = mean_row_norm(semantic.rows());
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        (semantic.rows() * scale, scale)
    } else {
        (random_semantic(n, semantic.dim(), cfg.seed), 1.0)
    };
    let latent = if cfg.use_nc {
        let a = assignment
            .ok_or_else(|| Error::Config("latent concepts enabled but no cluster assignment given".into()))?;
        if a.assignment.len() != n || a.centroids.ncols() != semantic.dim() {
            return Err(Error::Argument("cluster assignment does not match the semantic matrix".into()));
        }
        Some(a.latent_matrix() * scale)
    } else {
        None
    };

    let queries: Vec<((usize, usize), Vec<usize>)> =
        graph.train_queries().iter().map(|(k, v)| (*k, v.clone())).collect();
    if queries.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let valid = graph.split_tuples(Split::Valid);

    let mut model = CompletionModel::new(*model_cfg, graph, sem, latent, cfg.seed)?;
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 2));

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, CompletionModel)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        let factor = mask_factor(cfg.mask_ramp, epoch, cfg.mask_epochs);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| queries[i].0).collect();
            let targets: Vec<&[usize]> = chunk.iter().map(|&i| queries[i].1.as_slice()).collect();
            let (loss, grads) =
                model.batch_loss(&batch, &targets, factor, cfg.label_smoothing, Some(&mut dropout_rng))?;
            total += loss * chunk.len() as f64;
            adam.begin_step();
            for (slot, (param, grad)) in model.params.tensors_mut().into_iter().zip(&grads).enumerate() {
                adam.update(slot, param, grad, cfg.lr);
            }
        }
        model.mask_factor = factor;
        epochs_run = epoch + 1;
        let mut entry = EpochLog {
            epoch: epochs_run,
            loss: total / queries.len() as f64,
            mask_factor: factor,
            dev_mrr: None,
        };
        if epochs_run % cfg.eval_every == 0 && !valid.is_empty() {
            let scorer = model.scorer()?;
            let mrr = evaluate(&scorer, &valid, graph, Setting::Filtered, TiePolicy::Average)?.mrr;
            entry.dev_mrr = Some(mrr);
            if best.as_ref().map_or(true, |b| mrr > b.0) {
                best = Some((mrr, epochs_run, model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(entry);
        if epochs_run >= cfg.epochs && (valid.is_empty() || stale >= cfg.patience) {
            break;
        }
    }
    Ok(match best {
        Some((mrr, epoch, m)) => TrainOutcome {
            model: m,
            log,
            best_epoch: epoch,
            best_dev_mrr: Some(mrr),
            epochs_run,
        },
        None => TrainOutcome {
            model,
            log,
            best_epoch: epochs_run,
            best_dev_mrr: None,
            epochs_run,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans;
    use crate::encoder::EmbeddingRole;
    use crate::eval::Scorer;
    use crate::gcn::GcnConfig;
    use crate::kg::{GraphBuilder, Tuple, Vocab};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            channels: 4,
            kernel_width: 3,
            gcn: GcnConfig {
                layers: 2,
                dim: 8,
                dropout: 0.0,
                ..GcnConfig::default()
            },
        }
    }

    /// Two disjoint rings of 6 nodes; relation 0 steps forward along a ring.
    fn toy(seed: u64) -> (Graph, EmbeddingMatrix) {
        let names: Vec<String> = (0..12).map(|i| format!("n{i}")).collect();
        let nodes = Vocab::from_texts(&names, true).unwrap();
        let tuples: Vec<Tuple> = (0..12).map(|i| Tuple::new(i, 0, (i / 6) * 6 + (i + 1) % 6)).collect();
        let graph = GraphBuilder::new(nodes, vec!["next".into()])
            .add(Split::Train, &tuples)
            .build(true)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sem = Array2::from_shape_fn((12, 6), |_| rng.gen_range(-1.0..1.0));
        (graph, EmbeddingMatrix::new(sem, EmbeddingRole::Semantic).unwrap())
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            max_epochs: epochs,
            eval_every: 5,
            lr: 0.01,
            batch_size: 8,
            mask_epochs: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { eval_every: 7, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 10, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { label_smoothing: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn missing_clusters_with_nc_is_config_error() {
        let (g, sem) = toy(0);
        let r = train_completion(&g, &sem, None, &small_cfg(), &train_cfg(5));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn loss_decreases_on_toy() {
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let (g, sem) = toy(seed);
            let cfg = TrainConfig { seed, use_nc: false, ..train_cfg(20) };
            let out = train_completion(&g, &sem, None, &small_cfg(), &cfg).unwrap();
            ratios.push(out.log.last().unwrap().loss / out.log[0].loss);
        }
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[2] < 1.0, "median loss ratio {}", ratios[2]);
    }

    #[test]
    fn training_is_deterministic() {
        let (g, sem) = toy(1);
        let a = kmeans(sem.rows().view(), 3, 0, 50, 1e-6).unwrap();
        let cfg = train_cfg(10);
        let x = train_completion(&g, &sem, Some(&a), &small_cfg(), &cfg).unwrap();
        let y = train_completion(&g, &sem, Some(&a), &small_cfg(), &cfg).unwrap();
        assert_eq!(x.log, y.log);
        assert_eq!(x.model.params, y.model.params);
    }

    #[test]
    fn without_nc_cluster_perturbation_is_invisible() {
        let (g, sem) = toy(2);
        let a = kmeans(sem.rows().view(), 3, 0, 50, 1e-6).unwrap();
        let b = kmeans(sem.rows().view(), 4, 9, 50, 1e-6).unwrap();
        let cfg = TrainConfig { use_nc: false, ..train_cfg(5) };
        let x = train_completion(&g, &sem, Some(&a), &small_cfg(), &cfg).unwrap();
        let y = train_completion(&g, &sem, Some(&b), &small_cfg(), &cfg).unwrap();
        let (sx, sy) = (x.model.scorer().unwrap(), y.model.scorer().unwrap());
        for h in 0..12 {
            assert_eq!(sx.score(h, 0), sy.score(h, 0));
        }
    }

    #[test]
    fn without_cp_semantic_is_replaced() {
        let (g, sem) = toy(3);
        let cfg = TrainConfig { use_cp: false, use_nc: false, ..train_cfg(5) };
        let out = train_completion(&g, &sem, None, &small_cfg(), &cfg).unwrap();
        assert_eq!(out.model.semantic(), &random_semantic(12, 6, cfg.seed));
    }

    #[test]
    fn dev_evaluation_selects_a_logged_epoch() {
        let (g, sem) = toy(4);
        let valid = vec![Tuple::new(0, 0, 1)];
        let g = GraphBuilder::new(g.nodes().clone(), vec!["next".into()])
            .add(Split::Train, &g.split_tuples(Split::Train)[1..])
            .add(Split::Valid, &valid)
            .build(true)
            .unwrap();
        let cfg = TrainConfig { use_nc: false, patience: 1, max_epochs: 40, ..train_cfg(10) };
        let out = train_completion(&g, &sem, None, &small_cfg(), &cfg).unwrap();
        let evals: Vec<_> = out.log.iter().filter_map(|l| l.dev_mrr.map(|m| (l.epoch, m))).collect();
        assert!(evals.iter().all(|(e, _)| e % 5 == 0));
        let best = evals.iter().map(|e| e.1).fold(f64::MIN, f64::max);
        assert_eq!(out.best_dev_mrr, Some(best));
        assert!(evals.iter().any(|&(e, m)| e == out.best_epoch && m == best));
    }
}
