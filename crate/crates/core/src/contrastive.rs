//! Contrastive pretraining of the node encoder.
//!
//! Every train edge `(h, rel, t)` yields a forward sample `(h, t, t̄)` and a
//! reverse sample `(t, h, h̄)` where the hard negative is a node with no link
//! to the anchor. Batches are scored with the multiple negatives ranking
//! loss: each anchor is contrasted against every positive and every hard
//! negative in the batch through cosine similarity.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::kg::{Graph, Split, Vocab};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSample {
    pub anchor: usize,
    pub positive: usize,
    pub hard_negative: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<ContrastiveSample>,
    /// Anchors for which no unlinked negative was found within the attempt cap.
    pub skipped: usize,
}

fn draw_negative(graph: &Graph, anchor: usize, rng: &mut ChaCha8Rng, attempts: usize) -> Option<usize> {
    let n = graph.num_nodes();
    (0..attempts)
        .map(|_| rng.gen_range(0..n))
        .find(|&x| x != anchor && !graph.linked(anchor, x))
}

/// Builds one forward and one reverse sample per non-synthetic train edge.
pub fn build_samples(graph: &Graph, seed: u64, max_attempts: usize) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SampleSet::default();
    for edge in graph
        .forward_edges()
        .iter()
        .filter(|e| e.split == Split::Train && !e.synthetic)
    {
        let (h, t) = (edge.tuple.head, edge.tuple.tail);
        for (anchor, positive, direction) in [(h, t, Direction::Forward), (t, h, Direction::Reverse)] {
            match draw_negative(graph, anchor, &mut rng, max_attempts) {
                Some(hard_negative) => set.samples.push(ContrastiveSample {
                    anchor,
                    positive,
                    hard_negative,
                    direction,
                }),
                None => set.skipped += 1,
            }
        }
    }
    set
}

pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct MnrOutput {
    pub loss: f64,
    pub grad_anchors: Array2<f64>,
    pub grad_positives: Array2<f64>,
    pub grad_negatives: Array2<f64>,
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric("zero-norm or non-finite embedding in batch".into()));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backpropagates through `x̂ = x / |x|`.
fn unnormalize_grad(unit: &Array2<f64>, norms: &[f64], grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let u = unit.row(i);
        let proj = u.dot(&grad_unit.row(i));
        row.scaled_add(-proj, &u);
        row /= norms[i];
    }
    out
}

/// Multiple negatives ranking loss summed over the batch, with gradients
/// for all `3M` input rows. Logits are cosine similarities divided by
/// `temperature` (1.0 reproduces the plain loss).
pub fn mnr_loss(
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    temperature: f64,
) -> Result<MnrOutput> {
    let m = anchors.nrows();
    if m == 0 || positives.nrows() != m || negatives.nrows() != m {
        return Err(Error::Argument("mnr_loss needs M >= 1 rows in each block".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let (a_hat, a_norm) = normalize_rows(anchors)?;
    let (p_hat, p_norm) = normalize_rows(positives)?;
    let (n_hat, n_norm) = normalize_rows(negatives)?;
    let cands = ndarray::concatenate(Axis(0), &[p_hat.view(), n_hat.view()])
        .expect("candidate blocks share width");

    let logits = a_hat.dot(&cands.t()) / temperature;
    let mut grad_logits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for i in 0..m {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for (j, &s) in row.iter().enumerate() {
            grad_logits[[i, j]] = (s - lse).exp();
        }
        grad_logits[[i, i]] -= 1.0;
    }
    grad_logits /= temperature;

    let grad_a_hat = grad_logits.dot(&cands);
    let grad_c_hat = grad_logits.t().dot(&a_hat);
    let grad_p_hat = grad_c_hat.slice(ndarray::s![..m, ..]).to_owned();
    let grad_n_hat = grad_c_hat.slice(ndarray::s![m.., ..]).to_owned();
    Ok(MnrOutput {
        loss,
        grad_anchors: unnormalize_grad(&a_hat, &a_norm, &grad_a_hat),
        grad_positives: unnormalize_grad(&p_hat, &p_norm, &grad_p_hat),
        grad_negatives: unnormalize_grad(&n_hat, &n_norm, &grad_n_hat),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    /// Only used when the encoder has a projection head.
    pub lr_head: f64,
    pub seed: u64,
    pub max_rejection_attempts: usize,
    pub temperature: f64,
    pub resample_negatives_each_epoch: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 128,
            epochs: 3,
            lr_encoder: 1e-4,
            lr_head: 5e-5,
            seed: 0,
            max_rejection_attempts: 100,
            temperature: 1.0,
            resample_negatives_each_epoch: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain batch_size must be at least 2".into()));
        }
        if !(self.lr_encoder > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("pretrain learning rates must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub steps: usize,
}

fn train_epoch(
    encoder: &mut TextEncoder,
    token_ids: &[Vec<usize>],
    samples: &[ContrastiveSample],
    cfg: &PretrainConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut steps = 0;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let d = encoder.dim();
        let m = chunk.len();
        let mut blocks = [Array2::zeros((m, d)), Array2::zeros((m, d)), Array2::zeros((m, d))];
        for (r, &si) in chunk.iter().enumerate() {
            let s = samples[si];
            for (block, node) in blocks.iter_mut().zip([s.anchor, s.positive, s.hard_negative]) {
                block.row_mut(r).assign(&encoder.encode_ids(&token_ids[node]));
            }
        }
        let out = mnr_loss(blocks[0].view(), blocks[1].view(), blocks[2].view(), cfg.temperature)?;
        let mut grads = encoder.zero_grads();
        for (r, &si) in chunk.iter().enumerate() {
            let s = samples[si];
            encoder.backward(&token_ids[s.anchor], out.grad_anchors.row(r), &mut grads);
            encoder.backward(&token_ids[s.positive], out.grad_positives.row(r), &mut grads);
            encoder.backward(&token_ids[s.hard_negative], out.grad_negatives.row(r), &mut grads);
        }
        adam.begin_step();
        adam.update(0, encoder.table_mut(), &grads.table, cfg.lr_encoder);
        if let (Some(head), Some(gh)) = (encoder.head_mut(), grads.head.as_ref()) {
            adam.update(1, head, gh, cfg.lr_head);
        }
        total += out.loss;
        counted += m;
        steps += 1;
    }
    let mean = if counted > 0 { total / counted as f64 } else { 0.0 };
    Ok((mean, steps))
}

/// Trains the encoder on a fixed sample list with Adam.
pub fn pretrain(
    mut encoder: TextEncoder,
    nodes: &Vocab,
    samples: &[ContrastiveSample],
    cfg: &PretrainConfig,
) -> Result<(TextEncoder, PretrainReport)> {
    cfg.validate()?;
    let mut report = PretrainReport {
        samples: samples.len(),
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok((encoder, report));
    }
    if samples.is_empty() {
        return Err(Error::Argument("no contrastive samples to train on".into()));
    }
    let token_ids: Vec<Vec<usize>> = nodes.texts().iter().map(|t| encoder.tokenize(t)).collect();
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        let (loss, steps) = train_epoch(&mut encoder, &token_ids, samples, cfg, &mut adam, &mut rng)?;
        report.epoch_losses.push(loss);
        report.steps += steps;
    }
    Ok((encoder, report))
}

/// Builds samples from the graph's train split and pretrains. With
/// `resample_negatives_each_epoch`, hard negatives are redrawn every epoch.
pub fn pretrain_on_graph(
    encoder: TextEncoder,
    graph: &Graph,
    cfg: &PretrainConfig,
) -> Result<(TextEncoder, PretrainReport)> {
    cfg.validate()?;
    let first = build_samples(graph, cfg.seed, cfg.max_rejection_attempts);
    if !cfg.resample_negatives_each_epoch {
        let (enc, mut report) = pretrain(encoder, graph.nodes(), &first.samples, cfg)?;
        report.skipped = first.skipped;
        return Ok((enc, report));
    }
    let mut encoder = encoder;
    let mut report = PretrainReport {
        samples: first.samples.len(),
        skipped: first.skipped,
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok((encoder, report));
    }
    if first.samples.is_empty() {
        return Err(Error::Argument("no contrastive samples to train on".into()));
    }
    let token_ids: Vec<Vec<usize>> = graph
        .nodes()
        .texts()
        .iter()
        .map(|t| encoder.tokenize(t))
        .collect();
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = first;
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            set = build_samples(graph, cfg.seed.wrapping_add(epoch as u64), cfg.max_rejection_attempts);
            report.skipped += set.skipped;
        }
        let (loss, steps) = train_epoch(&mut encoder, &token_ids, &set.samples, cfg, &mut adam, &mut rng)?;
        report.epoch_losses.push(loss);
        report.steps += steps;
    }
    Ok((encoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kg::{parse_tuples, Tuple};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent oracle: per-anchor softmax cross-entropy over the 2M
    /// cosine logits, computed with explicit loops.
    fn oracle_loss(a: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>) -> f64 {
        let m = a.nrows();
        let mut total = 0.0;
        for i in 0..m {
            let mut logits = Vec::new();
            for j in 0..m {
                logits.push(cosine_sim(a.row(i), p.row(j)).unwrap());
            }
            for j in 0..m {
                logits.push(cosine_sim(a.row(i), n.row(j)).unwrap());
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[i];
        }
        total
    }

    fn graph(text: &str) -> Graph {
        let p = parse_tuples(text.as_bytes(), true).unwrap();
        Graph::from_tuples(p.nodes, p.relations, &p.tuples, true).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_cases() {
        let u = array![1.0, 0.0];
        assert_eq!(cosine_sim(u.view(), u.view()).unwrap(), 1.0);
        assert_eq!(cosine_sim(u.view(), array![0.0, 3.0].view()).unwrap(), 0.0);
        let c = cosine_sim(u.view(), array![1.0, 1.0].view()).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((c - 0.70711).abs() < 1e-5);
        assert!(matches!(cosine_sim(u.view(), array![0.0, 0.0].view()), Err(Error::Numeric(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn symmetric_single_sample_is_log2() {
        let v = array![[0.3, -0.2, 0.5]];
        let out = mnr_loss(v.view(), v.view(), v.view(), 1.0).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert!((out.loss - 0.693147).abs() < 5e-7);
    }

    #[test]
    fn unit_margin_case() {
        // D(h,t) = 1, D(h,t̄) = 0
        let out = mnr_loss(
            array![[1.0, 0.0]].view(),
            array![[2.0, 0.0]].view(),
            array![[0.0, 5.0]].view(),
            1.0,
        )
        .unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-12);
        assert!((out.loss - 0.313262).abs() < 5e-7);
    }

    #[test]
    fn zero_norm_is_domain_error() {
        let z = array![[0.0, 0.0]];
        let o = array![[1.0, 0.0]];
        assert!(matches!(mnr_loss(z.view(), o.view(), o.view(), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_block = |m: usize, d: usize| Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        let (m, d) = (4, 5);
        let blocks = [rand_block(m, d), rand_block(m, d), rand_block(m, d)];
        let out = mnr_loss(blocks[0].view(), blocks[1].view(), blocks[2].view(), 0.7).unwrap();
        let grads = [&out.grad_anchors, &out.grad_positives, &out.grad_negatives];
        let h = 1e-6;
        for b in 0..3 {
            for i in 0..m {
                for j in 0..d {
                    let eval = |delta: f64| {
                        let mut bl = blocks.clone();
                        bl[b][[i, j]] += delta;
                        mnr_loss(bl[0].view(), bl[1].view(), bl[2].view(), 0.7).unwrap().loss
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = grads[b][[i, j]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    assert!(rel <= 1e-4, "block {b} [{i},{j}] fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn fig3_style_sample() {
        let g = graph("R\ttake breakfast\tcook food\nR\tcook food\tfind information\n");
        let set = build_samples(&g, 3, 100);
        let nodes = g.nodes();
        let forward: Vec<_> = set
            .samples
            .iter()
            .filter(|s| s.anchor == nodes.get("take breakfast").unwrap())
            .collect();
        assert_eq!(forward.len(), 1);
        assert_eq!(nodes.text(forward[0].positive), "cook food");
        assert_eq!(nodes.text(forward[0].hard_negative), "find information");
    }

    #[test]
    fn two_node_graph_has_no_negatives() {
        let g = graph("R\ta\tb\n");
        let set = build_samples(&g, 1, 100);
        assert!(set.samples.is_empty());
        assert_eq!(set.skipped, 2);
    }

    #[test]
    fn at_most_two_samples_per_edge_and_deterministic() {
        let mut text = String::new();
        for i in 0..30 {
            text.push_str(&format!("R\tn{i}\tn{}\n", (i * 7 + 3) % 40));
        }
        let g = graph(&text);
        let a = build_samples(&g, 9, 100);
        let b = build_samples(&g, 9, 100);
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.len() + a.skipped == 2 * g.forward_edges().len());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let g = graph("R\ta x\tb y\nR\tc\td\nR\te\tf\n");
        let enc = TextEncoder::from_texts(g.nodes().texts().iter().map(String::as_str), EncoderConfig { dim: 4, projection_head: false }, 1).unwrap();
        let set = build_samples(&g, 0, 100);
        let cfg = PretrainConfig { epochs: 0, ..Default::default() };
        let (out, report) = pretrain(enc.clone(), g.nodes(), &set.samples, &cfg).unwrap();
        assert_eq!(out.table(), enc.table());
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(PretrainConfig { lr_encoder: 0.0, ..Default::default() }.validate().is_err());
        assert!(PretrainConfig::default().validate().is_ok());
    }

    /// Two 5-node topics with intra-topic edges only.
    fn two_topics() -> Graph {
        let mut text = String::new();
        for topic in ["sun", "rain"] {
            for i in 0..5 {
                for j in (i + 1)..5 {
                    if (i + j) % 2 == 1 {
                        text.push_str(&format!("Rel\t{topic} word{i}\t{topic} thing{j}\n"));
                    }
                }
            }
        }
        graph(&text)
    }

    #[test]
    fn pretraining_separates_topics() {
        let g = two_topics();
        let enc = TextEncoder::from_texts(
            g.nodes().texts().iter().map(String::as_str),
            EncoderConfig { dim: 16, projection_head: false },
            2,
        )
        .unwrap();
        let cfg = PretrainConfig { epochs: 50, batch_size: 8, lr_encoder: 1e-2, seed: 4, ..Default::default() };
        let (enc, report) = pretrain_on_graph(enc, &g, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 50);
        let e = enc.encode_all(g.nodes());
        let topic = |i: usize| g.nodes().text(i).split(' ').next().unwrap().to_string();
        let (mut linked, mut cross) = (Vec::new(), Vec::new());
        let n = g.num_nodes();
        for i in 0..n {
            for j in (i + 1)..n {
                let c = cosine_sim(e.row(i), e.row(j)).unwrap();
                if g.linked(i, j) {
                    linked.push(c);
                } else if topic(i) != topic(j) {
                    cross.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&linked) > mean(&cross), "{} vs {}", mean(&linked), mean(&cross));
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let g = two_topics();
        let enc = TextEncoder::from_texts(
            g.nodes().texts().iter().map(String::as_str),
            EncoderConfig { dim: 16, projection_head: true },
            3,
        )
        .unwrap();
        let set = build_samples(&g, 1, 100);
        let batch: Vec<ContrastiveSample> = set.samples.into_iter().take(8).collect();
        let cfg = PretrainConfig { epochs: 10, batch_size: 8, lr_encoder: 1e-2, lr_head: 1e-2, ..Default::default() };
        let (_, report) = pretrain(enc, g.nodes(), &batch, &cfg).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.epoch_losses);
        }
    }

    #[test]
    fn pad_row_stays_zero() {
        let g = two_topics();
        let enc = TextEncoder::from_texts(g.nodes().texts().iter().map(String::as_str), EncoderConfig { dim: 8, projection_head: false }, 3).unwrap();
        let cfg = PretrainConfig { epochs: 5, batch_size: 4, lr_encoder: 0.05, resample_negatives_each_epoch: true, ..Default::default() };
        let (enc, _) = pretrain_on_graph(enc, &g, &cfg).unwrap();
        assert!(enc.table().row(crate::encoder::PAD).iter().all(|&x| x == 0.0));
    }

    fn batch_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..=16, 1usize..=8).prop_flat_map(|(m, d)| {
            (Just(m), Just(d), prop::collection::vec(prop_oneof![-1.0f64..-0.05, 0.05f64..1.0], 3 * m * d))
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_scale_invariant((m, d, data) in batch_strategy(), alpha in 0.1f64..10.0, pick in 0usize..3) {
            let block = |k: usize| Array2::from_shape_vec((m, d), data[k * m * d..(k + 1) * m * d].to_vec()).unwrap();
            let (a, p, n) = (block(0), block(1), block(2));
            let loss = mnr_loss(a.view(), p.view(), n.view(), 1.0).unwrap().loss;
            prop_assert!((loss - oracle_loss(&a, &p, &n)).abs() <= 1e-10);
            let mut scaled = [a.clone(), p.clone(), n.clone()];
            scaled[pick].row_mut(0).mapv_inplace(|x| x * alpha);
            let l2 = mnr_loss(scaled[0].view(), scaled[1].view(), scaled[2].view(), 1.0).unwrap().loss;
            prop_assert!((loss - l2).abs() <= 1e-8);
        }

        #[test]
        fn negatives_are_never_linked(edges in prop::collection::vec((0usize..12, 0usize..12), 1..30), seed in any::<u64>()) {
            let nodes = Vocab::from_texts((0..12).map(|i| format!("n{i}")), true).unwrap();
            let tuples: Vec<Tuple> = edges.iter().map(|&(h, t)| Tuple::new(h, 0, t)).collect();
            let g = Graph::from_tuples(nodes, vec!["R".into()], &tuples, true).unwrap();
            let set = build_samples(&g, seed, 100);
            for s in &set.samples {
                prop_assert!(s.anchor != s.hard_negative);
                prop_assert!(!g.linked(s.anchor, s.hard_negative));
                prop_assert!(g.linked(s.anchor, s.positive) || s.anchor == s.positive);
            }
        }
    }
}
