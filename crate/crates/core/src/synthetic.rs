//! Seeded synthetic CSKGs for smoke tests and ablation benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Graph, GraphBuilder, Split, Tuple, Vocab};

const FILLERS: [&str; 8] = ["the", "a", "some", "to", "at", "go", "get", "be"];

fn relation_names(n: usize) -> Vec<String> {
    (0..n).map(|r| format!("Rel{r}")).collect()
}

/// `nodes` random two-word phrases and `edges` distinct train tuples.
pub fn overfit_graph(nodes: usize, relations: usize, edges: usize, seed: u64) -> Result<Graph> {
    if nodes < 2 || relations == 0 || edges > nodes * (nodes - 1) * relations {
        return Err(Error::Config("impossible synthetic graph size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<String> = (0..nodes)
        .map(|i| format!("{} item{i}", FILLERS[rng.gen_range(0..FILLERS.len())]))
        .collect();
    let vocab = Vocab::from_texts(&texts, true)?;
    let mut seen = std::collections::HashSet::new();
    let mut tuples = Vec::with_capacity(edges);
    while tuples.len() < edges {
        let t = Tuple::new(rng.gen_range(0..nodes), rng.gen_range(0..relations), rng.gen_range(0..nodes));
        if t.head != t.tail && seen.insert(t) {
            tuples.push(t);
        }
    }
    Graph::from_tuples(vocab, relation_names(relations), &tuples, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedundancyConfig {
    pub concepts: usize,
    /// Paraphrase nodes per concept; siblings share two concept tokens and
    /// differ in one filler word.
    pub paraphrases: usize,
    pub relations: usize,
    /// Fraction of edges moved out of train.
    pub held_out: f64,
    /// Share of the held-out edges that go to valid; the rest is test.
    pub valid_share: f64,
    pub seed: u64,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        RedundancyConfig {
            concepts: 40,
            paraphrases: 3,
            relations: 4,
            held_out: 0.3,
            valid_share: 1.0 / 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub graph: Graph,
    /// Underlying concept of each node.
    pub concept_of: Vec<usize>,
}

/// Each concept is realized as several paraphrase nodes. Concept-level
/// facts `(a, r, b)` become one edge per paraphrase of `a`, pointing at a
/// random paraphrase of `b`.
pub fn redundancy_benchmark(cfg: &RedundancyConfig) -> Result<Synthetic> {
    if cfg.concepts < 2 || cfg.paraphrases == 0 || cfg.paraphrases > FILLERS.len() || cfg.relations == 0 {
        return Err(Error::Config("redundancy benchmark needs >= 2 concepts and at most 8 paraphrases".into()));
    }
    if !(0.0..1.0).contains(&cfg.held_out) || !(0.0..=1.0).contains(&cfg.valid_share) {
        return Err(Error::Config("held_out must be in [0, 1) and valid_share in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut texts = Vec::new();
    let mut concept_of = Vec::new();
    for c in 0..cfg.concepts {
        let mut variants = FILLERS.to_vec();
        variants.shuffle(&mut rng);
        for v in variants.iter().take(cfg.paraphrases) {
            texts.push(format!("c{c}x c{c}y {v}"));
            concept_of.push(c);
        }
    }
    let vocab = Vocab::from_texts(&texts, true)?;
    let p = cfg.paraphrases;
    let mut edges = Vec::new();
    for a in 0..cfg.concepts {
        for r in 0..cfg.relations {
            let mut b = rng.gen_range(0..cfg.concepts - 1);
            if b >= a {
                b += 1;
            }
            for i in 0..p {
                edges.push(Tuple::new(a * p + i, r, b * p + rng.gen_range(0..p)));
            }
        }
    }
    edges.shuffle(&mut rng);
    let held = (cfg.held_out * edges.len() as f64).round() as usize;
    let n_valid = (cfg.valid_share * held as f64).round() as usize;
    let graph = GraphBuilder::new(vocab, relation_names(cfg.relations))
        .add(Split::Valid, &edges[..n_valid])
        .add(Split::Test, &edges[n_valid..held])
        .add(Split::Train, &edges[held..])
        .build(true)?;
    Ok(Synthetic { graph, concept_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_graph_has_requested_size() {
        let g = overfit_graph(50, 4, 200, 3).unwrap();
        let s = g.summary();
        assert_eq!((s.nodes, s.base_relations, s.train), (50, 4, 200));
        assert_eq!(s.edges, 400);
        assert!(overfit_graph(2, 1, 5, 0).is_err());
    }

    #[test]
    fn redundancy_benchmark_shape() {
        let cfg = RedundancyConfig::default();
        let s = redundancy_benchmark(&cfg).unwrap();
        let sum = s.graph.summary();
        assert_eq!(sum.nodes, 120);
        let total = sum.train + sum.valid + sum.test;
        assert_eq!(total, 40 * 4 * 3);
        assert_eq!(sum.valid + sum.test, 144);
        assert_eq!(sum.valid, 48);
        let a = s.graph.nodes().text(0).split(' ').collect::<Vec<_>>();
        let b = s.graph.nodes().text(1).split(' ').collect::<Vec<_>>();
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
        assert_eq!(s.concept_of[..4], [0, 0, 0, 1]);
    }

    #[test]
    fn generators_are_seeded() {
        let a = redundancy_benchmark(&RedundancyConfig { seed: 5, ..Default::default() }).unwrap();
        let b = redundancy_benchmark(&RedundancyConfig { seed: 5, ..Default::default() }).unwrap();
        assert_eq!(a.graph.split_tuples(Split::Test), b.graph.split_tuples(Split::Test));
    }
}
