//! The completion model: GCN structure encoder, fusion with the frozen
//! semantic and latent-concept views, convolutional decoder and 1-vs-N
//! scoring.

mod decoder;
mod fusion;
mod train;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::gcn::{gcn_backward, gcn_forward, xavier, GcnConfig, GcnInit, GcnParams, NormalizedAdjacency};
use crate::kg::Graph;

pub use decoder::{
    conv_forward, decode_batch, decode_batch_backward, decode_query, score_candidates, score_logits, sigmoid,
    DecodeCache, DecodeGrads, DecoderParams,
};
pub use fusion::{fuse, fuse_backward, fuse_rows, mask_factor, mask_schedule, FusionParams, MaskRamp};
pub use train::{random_semantic, train_completion, EpochLog, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub gcn: GcnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 200,
            channels: 32,
            kernel_width: 5,
            gcn: GcnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub gcn: GcnParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn new(cfg: &ModelConfig, num_nodes: usize, num_relations: usize, d_sem: usize, seed: u64) -> Result<Self> {
        if cfg.d_model == 0 || d_sem == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        let gcn = GcnParams::new(&cfg.gcn, num_nodes, d_sem, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE_0F5E_ED00_0001);
        let w_embedding = xavier(2 * d_sem + cfg.gcn.dim, cfg.d_model, &mut rng);
        let relations = xavier(num_relations, cfg.d_model, &mut rng);
        let decoder = DecoderParams::new(cfg.d_model, cfg.channels, cfg.kernel_width, &mut rng)?;
        Ok(ModelParams {
            fusion: FusionParams { w_embedding, relations },
            gcn,
            decoder,
        })
    }

    /// Trainable tensor names, in the order used by [`Self::tensors`] and gradients.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["w_embedding".to_string(), "relations".to_string()];
        names.extend((0..self.gcn.weights.len()).map(|l| format!("gcn.w{l}")));
        if self.gcn.features.is_some() {
            names.push("gcn.features".into());
        }
        names.extend(["decoder.kernels", "decoder.projection", "decoder.w_conv"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.fusion.w_embedding, &self.fusion.relations];
        out.extend(self.gcn.weights.iter());
        out.extend(self.gcn.features.iter());
        out.extend([&self.decoder.kernels, &self.decoder.projection, &self.decoder.w_conv]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.fusion.w_embedding, &mut self.fusion.relations];
        out.extend(self.gcn.weights.iter_mut());
        out.extend(self.gcn.features.iter_mut());
        out.extend([
            &mut self.decoder.kernels,
            &mut self.decoder.projection,
            &mut self.decoder.w_conv,
        ]);
        out
    }
}

/// Smoothed multi-hot target row: `(1 - eps) * y + eps / N`.
pub fn smoothed_targets(gold: &[usize], n: usize, smoothing: f64) -> Array1<f64> {
    let mut y = Array1::from_elem(n, smoothing / n as f64);
    for &t in gold {
        y[t] += 1.0 - smoothing;
    }
    y
}

/// Numerically stable `-(y log sigma(s) + (1 - y) log(1 - sigma(s)))`.
fn bce_with_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// A trained (or training) model bound to one graph.
#[derive(Debug, Clone)]
pub struct CompletionModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    semantic: Array2<f64>,
    latent: Option<Array2<f64>>,
    adjacency: NormalizedAdjacency,
    /// Latent-block factor used when scoring.
    pub mask_factor: f64,
}

impl CompletionModel {
    /// `semantic` and `latent` are frozen `N x d_sem` inputs; `latent = None`
    /// keeps the latent block at zero.
    pub fn new(
        config: ModelConfig,
        graph: &Graph,
        semantic: Array2<f64>,
        latent: Option<Array2<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if semantic.nrows() != n {
            return Err(Error::Argument(format!(
                "semantic matrix has {} rows for {n} nodes",
                semantic.nrows()
            )));
        }
        if latent.as_ref().is_some_and(|l| l.dim() != semantic.dim()) {
            return Err(Error::Argument("latent matrix must match the semantic matrix shape".into()));
        }
        let params = ModelParams::new(&config, n, graph.num_relations(), semantic.ncols(), seed)?;
        Ok(CompletionModel {
            config,
            params,
            semantic,
            latent,
            adjacency: NormalizedAdjacency::from_graph(graph),
            mask_factor: 1.0,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn semantic(&self) -> &Array2<f64> {
        &self.semantic
    }

    pub fn latent(&self) -> Option<&Array2<f64>> {
        self.latent.as_ref()
    }

    /// Replaces the latent block; `None` zeroes it.
    pub fn set_latent(&mut self, latent: Option<Array2<f64>>) -> Result<()> {
        if latent.as_ref().is_some_and(|l| l.dim() != self.semantic.dim()) {
            return Err(Error::Argument("latent matrix must match the semantic matrix shape".into()));
        }
        self.latent = latent;
        Ok(())
    }

    /// Fused node embeddings `E_N` without dropout.
    pub fn node_embeddings(&self, factor: f64) -> Result<Array2<f64>> {
        let x0 = self.params.gcn.input(&self.semantic);
        let (g, _) = gcn_forward(&self.params.gcn, &self.adjacency, x0, None)?;
        let (e, _) = fuse_rows(&self.semantic, &g, self.latent.as_ref(), factor, &self.params.fusion.w_embedding)?;
        Ok(e)
    }

    /// Mean BCE over `B x N` for the queries, and gradients for every tensor
    /// in [`ModelParams::tensors`] order.
    pub fn batch_loss(
        &self,
        queries: &[(usize, usize)],
        targets: &[&[usize]],
        factor: f64,
        smoothing: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if queries.is_empty() || queries.len() != targets.len() {
            return Err(Error::Argument("batch needs one target set per query".into()));
        }
        let p = &self.params;
        let n = self.num_nodes();
        let d_sem = self.semantic.ncols();
        let d_graph = p.gcn.output_dim();
        for &(h, r) in queries {
            if h >= n || r >= p.fusion.relations.nrows() {
                return Err(Error::Argument(format!("query ({h}, {r}) out of range")));
            }
        }

        let x0 = p.gcn.input(&self.semantic);
        let rate = self.config.gcn.dropout;
        let (g, gcache) = gcn_forward(&p.gcn, &self.adjacency, x0, dropout.map(|r| (rate, r)))?;
        let (e, concat) = fuse_rows(&self.semantic, &g, self.latent.as_ref(), factor, &p.fusion.w_embedding)?;

        let hs: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let rs: Vec<usize> = queries.iter().map(|q| q.1).collect();
        let heads = e.select(Axis(0), &hs);
        let rels = p.fusion.relations.select(Axis(0), &rs);
        let (q, dcache) = decode_batch(heads.view(), rels.view(), &p.decoder)?;
        let u = q.dot(&p.decoder.w_conv);
        let scores = u.dot(&e.t());

        let b = queries.len();
        let denom = (b * n) as f64;
        let mut loss = 0.0;
        let mut d_scores = Array2::zeros((b, n));
        for (i, gold) in targets.iter().enumerate() {
            let y = smoothed_targets(gold, n, smoothing);
            for j in 0..n {
                let s = scores[[i, j]];
                loss += bce_with_logit(s, y[j]);
                d_scores[[i, j]] = (sigmoid(s) - y[j]) / denom;
            }
        }
        let loss = loss / denom;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }

        let mut d_e = d_scores.t().dot(&u);
        let d_u = d_scores.dot(&e);
        let d_wconv = q.t().dot(&d_u);
        let d_q = d_u.dot(&p.decoder.w_conv.t());
        let dg = decode_batch_backward(heads.view(), rels.view(), &p.decoder, &dcache, &d_q);
        let mut d_rel = Array2::zeros(p.fusion.relations.dim());
        for (i, (&h, &r)) in hs.iter().zip(&rs).enumerate() {
            let mut row = d_e.row_mut(h);
            row += &dg.heads.row(i);
            let mut row = d_rel.row_mut(r);
            row += &dg.rels.row(i);
        }
        let (d_wemb, d_concat) = fuse_backward(&concat, &d_e, &p.fusion.w_embedding);
        let d_graph_rows = d_concat.slice(s![.., d_sem..d_sem + d_graph]).to_owned();
        let gg = gcn_backward(&p.gcn, &self.adjacency, &gcache, &d_graph_rows);

        let mut grads = vec![d_wemb, d_rel];
        grads.extend(gg.weights);
        if p.gcn.features.is_some() {
            grads.push(gg.input);
        }
        grads.extend([dg.kernels, dg.projection, d_wconv]);
        Ok((loss, grads))
    }

    /// Frozen scoring snapshot at the model's mask factor.
    pub fn scorer(&self) -> Result<ModelScorer> {
        Ok(ModelScorer {
            nodes: self.node_embeddings(self.mask_factor)?,
            relations: self.params.fusion.relations.clone(),
            decoder: self.params.decoder.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "completion-model",
            "config": self.config,
            "mask_factor": self.mask_factor,
            "has_latent": self.latent.is_some(),
        }));
        for (name, t) in self.params.names().into_iter().zip(self.params.tensors()) {
            ck.push(name, t.clone());
        }
        ck.push("semantic", self.semantic.clone());
        if let Some(l) = &self.latent {
            ck.push("latent", l.clone());
        }
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint, graph: &Graph) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("completion-model") {
            return Err(Error::Format("checkpoint does not hold a completion model".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mask_factor = ck.meta["mask_factor"]
            .as_f64()
            .ok_or_else(|| Error::Format("checkpoint lacks mask_factor".into()))?;
        let semantic = ck.take("semantic")?;
        let latent = if ck.meta["has_latent"].as_bool().unwrap_or(false) {
            Some(ck.take("latent")?)
        } else {
            None
        };
        let weights = (0..config.gcn.layers)
            .map(|l| ck.take(&format!("gcn.w{l}")))
            .collect::<Result<Vec<_>>>()?;
        let features = match config.gcn.init {
            GcnInit::Random => Some(ck.take("gcn.features")?),
            GcnInit::Semantic => None,
        };
        let params = ModelParams {
            fusion: FusionParams {
                w_embedding: ck.take("w_embedding")?,
                relations: ck.take("relations")?,
            },
            gcn: GcnParams {
                weights,
                init: config.gcn.init,
                features,
            },
            decoder: DecoderParams {
                kernels: ck.take("decoder.kernels")?,
                projection: ck.take("decoder.projection")?,
                w_conv: ck.take("decoder.w_conv")?,
            },
        };
        if semantic.nrows() != graph.num_nodes() || params.fusion.relations.nrows() != graph.num_relations() {
            return Err(Error::Format("checkpoint does not match the graph's nodes or relations".into()));
        }
        Ok(CompletionModel {
            config,
            params,
            semantic,
            latent,
            adjacency: NormalizedAdjacency::from_graph(graph),
            mask_factor,
        })
    }
}

/// Read-only scoring snapshot. Scores are raw logits; the sigmoid is
/// monotone, so ranks are unchanged and saturation cannot create ties.
#[derive(Debug, Clone)]
pub struct ModelScorer {
    nodes: Array2<f64>,
    relations: Array2<f64>,
    decoder: DecoderParams,
}

impl ModelScorer {
    pub fn node_embeddings(&self) -> &Array2<f64> {
        &self.nodes
    }

    pub fn logits(&self, head: usize, rel: usize) -> Array1<f64> {
        let q = decode_query(self.nodes.row(head), self.relations.row(rel), &self.decoder)
            .expect("scorer shapes are fixed at construction");
        self.nodes.dot(&q.dot(&self.decoder.w_conv))
    }

    pub fn probabilities(&self, head: usize, rel: usize) -> Array1<f64> {
        self.logits(head, rel).mapv(sigmoid)
    }
}

impl Scorer for ModelScorer {
    fn num_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    fn score(&self, head: usize, rel: usize) -> Vec<f64> {
        self.logits(head, rel).to_vec()
    }
}

/// Small random model over a 6-node graph, shared by gradient checks.
pub fn toy_model(init: GcnInit, seed: u64) -> Result<(CompletionModel, Vec<(usize, usize)>, Vec<Vec<usize>>)> {
    use crate::kg::{Tuple, Vocab};
    let nodes = Vocab::from_texts(["a", "b", "c", "d", "e", "f"], true)?;
    let tuples = [(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (4, 0, 5), (5, 1, 0), (0, 1, 3)]
        .map(|(h, r, t)| Tuple::new(h, r, t));
    let graph = Graph::from_tuples(nodes, vec!["r0".into(), "r1".into()], &tuples, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_sem = 4;
    let semantic = Array2::from_shape_fn((6, d_sem), |_| rng.gen_range(-1.0..1.0));
    let latent = Array2::from_shape_fn((6, d_sem), |_| rng.gen_range(-1.0..1.0));
    let cfg = ModelConfig {
        d_model: 5,
        channels: 3,
        kernel_width: 3,
        gcn: GcnConfig {
            layers: 2,
            dim: 4,
            init,
            random_input_dim: 3,
            dropout: 0.0,
        },
    };
    let model = CompletionModel::new(cfg, &graph, semantic, Some(latent), seed)?;
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (&(h, r), tails) in graph.train_queries() {
        queries.push((h, r));
        targets.push(tails.clone());
    }
    Ok((model, queries, targets))
}
