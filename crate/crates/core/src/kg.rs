//! Commonsense knowledge graph data model.
//!
//! Nodes are free-form short phrases interned into a dense vocabulary,
//! relations are named edge types, and a [`Graph`] holds the deduplicated
//! forward edge list of every split. Inverse edges `(t, rel__inv, h)` are
//! derived from the forward list when augmentation is enabled, so the
//! forward/inverse symmetry can never drift under perturbation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use ndarray::ArrayView2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix appended to a relation name to form its inverse.
pub const INVERSE_SUFFIX: &str = "__inv";

/// Relation name used for similarity-densification edges.
pub const SIM_RELATION: &str = "SIM";

/// Interned node phrases. Ids are dense and 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    texts: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    case_fold: bool,
}

impl Vocab {
    pub fn new(case_fold: bool) -> Self {
        Vocab {
            texts: Vec::new(),
            index: HashMap::new(),
            case_fold,
        }
    }

    /// Rebuilds a vocabulary from texts in id order.
    pub fn from_texts<I, S>(texts: I, case_fold: bool) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab::new(case_fold);
        for (i, text) in texts.into_iter().enumerate() {
            let id = vocab.intern(text.as_ref())?;
            if id != i {
                return Err(Error::Format(format!(
                    "duplicate node text {:?} in vocabulary",
                    text.as_ref()
                )));
            }
        }
        Ok(vocab)
    }

    pub fn case_fold(&self) -> bool {
        self.case_fold
    }

    /// Trims and, if enabled, lowercases a raw phrase.
    pub fn normalize(&self, raw: &str) -> String {
        let trimmed = raw.trim();
        if self.case_fold {
            trimmed.to_lowercase()
        } else {
            trimmed.to_string()
        }
    }

    pub fn intern(&mut self, raw: &str) -> Result<usize> {
        let text = self.normalize(raw);
        if text.is_empty() {
            return Err(Error::Argument("empty node text".into()));
        }
        if let Some(&id) = self.index.get(&text) {
            return Ok(id);
        }
        let id = self.texts.len();
        self.index.insert(text.clone(), id);
        self.texts.push(text);
        Ok(id)
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(&self.normalize(raw)).copied()
    }

    pub fn text(&self, id: usize) -> &str {
        &self.texts[id]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// One `(head, relation, tail)` assertion over vocabulary ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tuple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Tuple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Tuple { head, rel, tail }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub name: String,
    pub is_inverse: bool,
    /// Id of the non-inverse partner; equals `id` for forward relations.
    pub base_id: usize,
    /// Partner relation, present only in augmented graphs.
    pub inverse: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A forward edge with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub tuple: Tuple,
    pub split: Split,
    /// Similarity-densification scaffolding, never an evaluation gold fact.
    pub synthetic: bool,
}

/// Incremental line parser sharing node and relation vocabularies across
/// several files (train/valid/test).
#[derive(Debug, Clone)]
pub struct TupleParser {
    nodes: Vocab,
    relations: Vec<String>,
    rel_index: HashMap<String, usize>,
}

impl TupleParser {
    pub fn new(case_fold: bool) -> Self {
        TupleParser {
            nodes: Vocab::new(case_fold),
            relations: Vec::new(),
            rel_index: HashMap::new(),
        }
    }

    /// Parses `relation<TAB>head<TAB>tail[<TAB>weight]` lines. Blank lines
    /// are skipped; the weight column is ignored.
    pub fn parse<R: BufRead>(&mut self, reader: R) -> Result<Vec<Tuple>> {
        let mut tuples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            tuples.push(self.parse_line(line, lineno)?);
        }
        Ok(tuples)
    }

    pub fn parse_str(&mut self, text: &str) -> Result<Vec<Tuple>> {
        self.parse(text.as_bytes())
    }

    fn parse_line(&mut self, line: &str, lineno: usize) -> Result<Tuple> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 or 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let rel_name = cols[0].trim();
        if rel_name.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty relation name".into(),
            });
        }
        let head = self.nodes.intern(cols[1]).map_err(|_| Error::Parse {
            line: lineno,
            message: "empty head text".into(),
        })?;
        let tail = self.nodes.intern(cols[2]).map_err(|_| Error::Parse {
            line: lineno,
            message: "empty tail text".into(),
        })?;
        let rel = match self.rel_index.get(rel_name) {
            Some(&id) => id,
            None => {
                let id = self.relations.len();
                self.relations.push(rel_name.to_string());
                self.rel_index.insert(rel_name.to_string(), id);
                id
            }
        };
        Ok(Tuple { head, rel, tail })
    }

    pub fn nodes(&self) -> &Vocab {
        &self.nodes
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn into_parts(self) -> (Vocab, Vec<String>) {
        (self.nodes, self.relations)
    }
}

/// Result of parsing a single stream.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub tuples: Vec<Tuple>,
    pub nodes: Vocab,
    pub relations: Vec<String>,
}

pub fn parse_tuples<R: BufRead>(reader: R, case_fold: bool) -> Result<Parsed> {
    let mut parser = TupleParser::new(case_fold);
    let tuples = parser.parse(reader)?;
    let (nodes, relations) = parser.into_parts();
    Ok(Parsed {
        tuples,
        nodes,
        relations,
    })
}

/// Writes tuples in the same TSV layout [`TupleParser`] reads.
pub fn write_tuples<W: Write>(
    mut out: W,
    tuples: &[Tuple],
    nodes: &Vocab,
    relation_names: &[String],
) -> std::io::Result<()> {
    for t in tuples {
        writeln!(
            out,
            "{}\t{}\t{}",
            relation_names[t.rel],
            nodes.text(t.head),
            nodes.text(t.tail)
        )?;
    }
    Ok(())
}

/// Collects forward edges per split before building a [`Graph`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vocab,
    base_names: Vec<String>,
    edges: Vec<Edge>,
}

impl GraphBuilder {
    pub fn new(nodes: Vocab, relation_names: Vec<String>) -> Self {
        GraphBuilder {
            nodes,
            base_names: relation_names,
            edges: Vec::new(),
        }
    }

    pub fn add(mut self, split: Split, tuples: &[Tuple]) -> Self {
        self.edges.extend(tuples.iter().map(|&tuple| Edge {
            tuple,
            split,
            synthetic: false,
        }));
        self
    }

    pub fn build(self, add_inverse: bool) -> Result<Graph> {
        Graph::assemble(self.nodes, self.base_names, self.edges, add_inverse)
    }
}

/// An immutable CSKG snapshot.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vocab,
    base_names: Vec<String>,
    relations: Vec<Relation>,
    forward: Vec<Edge>,
    augmented: bool,
    /// Sorted undirected neighbor lists over the train split (self excluded).
    neighbors: Vec<Vec<usize>>,
    links: HashSet<(usize, usize)>,
    /// Every known non-synthetic tail per query, over all splits.
    gold: HashMap<(usize, usize), Vec<usize>>,
    /// Train-split tails per query, including inverse and synthetic edges.
    train_targets: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Graph {
    /// Builds a graph whose tuples all belong to the train split.
    pub fn from_tuples(
        nodes: Vocab,
        relation_names: Vec<String>,
        tuples: &[Tuple],
        add_inverse: bool,
    ) -> Result<Graph> {
        GraphBuilder::new(nodes, relation_names)
            .add(Split::Train, tuples)
            .build(add_inverse)
    }

    fn assemble(
        nodes: Vocab,
        base_names: Vec<String>,
        edges: Vec<Edge>,
        augmented: bool,
    ) -> Result<Graph> {
        let n_base = base_names.len();
        let mut seen_names = HashSet::new();
        for name in &base_names {
            if !seen_names.insert(name.as_str()) {
                return Err(Error::Argument(format!("duplicate relation name {name:?}")));
            }
        }
        if augmented {
            for name in &base_names {
                let inv = format!("{name}{INVERSE_SUFFIX}");
                if seen_names.contains(inv.as_str()) {
                    return Err(Error::Argument(format!(
                        "inverse relation name {inv:?} collides with an existing relation"
                    )));
                }
            }
        }

        let mut relations: Vec<Relation> = base_names
            .iter()
            .enumerate()
            .map(|(id, name)| Relation {
                id,
                name: name.clone(),
                is_inverse: false,
                base_id: id,
                inverse: augmented.then_some(id + n_base),
            })
            .collect();
        if augmented {
            for id in 0..n_base {
                relations.push(Relation {
                    id: id + n_base,
                    name: format!("{}{INVERSE_SUFFIX}", base_names[id]),
                    is_inverse: true,
                    base_id: id,
                    inverse: Some(id),
                });
            }
        }

        let n = nodes.len();
        let mut dedup = HashSet::new();
        let mut forward = Vec::with_capacity(edges.len());
        for edge in edges {
            let t = edge.tuple;
            if t.head >= n || t.tail >= n || t.rel >= n_base {
                return Err(Error::Argument(format!(
                    "tuple {t:?} references ids outside the vocabulary"
                )));
            }
            if dedup.insert(t) {
                forward.push(edge);
            }
        }

        let mut neighbor_sets: Vec<HashSet<usize>> = vec![HashSet::new(); n];
        let mut gold: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut train_targets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for edge in &forward {
            let t = edge.tuple;
            let mut directed = vec![t];
            if augmented {
                directed.push(Tuple::new(t.tail, t.rel + n_base, t.head));
            }
            for d in directed {
                if !edge.synthetic {
                    gold.entry((d.head, d.rel)).or_default().push(d.tail);
                }
                if edge.split == Split::Train {
                    train_targets.entry((d.head, d.rel)).or_default().push(d.tail);
                }
            }
            if edge.split == Split::Train && t.head != t.tail {
                neighbor_sets[t.head].insert(t.tail);
                neighbor_sets[t.tail].insert(t.head);
            }
        }
        for tails in gold.values_mut().chain(train_targets.values_mut()) {
            tails.sort_unstable();
            tails.dedup();
        }
        let mut links = HashSet::new();
        let neighbors = neighbor_sets
            .into_iter()
            .enumerate()
            .map(|(h, set)| {
                let mut v: Vec<usize> = set.into_iter().collect();
                v.sort_unstable();
                for &x in &v {
                    links.insert((h, x));
                }
                v
            })
            .collect();

        Ok(Graph {
            nodes,
            base_names,
            relations,
            forward,
            augmented,
            neighbors,
            links,
            gold,
            train_targets,
        })
    }

    fn rebuild(&self, base_names: Vec<String>, forward: Vec<Edge>, augmented: bool) -> Result<Graph> {
        Graph::assemble(self.nodes.clone(), base_names, forward, augmented)
    }

    /// Adds inverse edges. Already-augmented graphs are returned unchanged.
    pub fn augment(&self) -> Result<Graph> {
        if self.augmented {
            return Ok(self.clone());
        }
        self.rebuild(self.base_names.clone(), self.forward.clone(), true)
    }

    pub fn nodes(&self) -> &Vocab {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn base_relation_names(&self) -> &[String] {
        &self.base_names
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Inverse partner of a relation, if the graph is augmented.
    pub fn inverse(&self, rel: usize) -> Option<usize> {
        self.relations.get(rel).and_then(|r| r.inverse)
    }

    pub fn forward_edges(&self) -> &[Edge] {
        &self.forward
    }

    /// All edges, forward first and then (when augmented) their inverses.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        let n_base = self.base_names.len();
        let inverse = self.augmented.then(|| {
            self.forward.iter().map(move |e| Edge {
                tuple: Tuple::new(e.tuple.tail, e.tuple.rel + n_base, e.tuple.head),
                ..*e
            })
        });
        self.forward.iter().copied().chain(inverse.into_iter().flatten())
    }

    pub fn num_edges(&self) -> usize {
        self.forward.len() * if self.augmented { 2 } else { 1 }
    }

    pub fn contains_edge(&self, t: Tuple) -> bool {
        self.edges().any(|e| e.tuple == t)
    }

    /// Non-synthetic forward tuples of one split, in insertion order.
    pub fn split_tuples(&self, split: Split) -> Vec<Tuple> {
        self.forward
            .iter()
            .filter(|e| e.split == split && !e.synthetic)
            .map(|e| e.tuple)
            .collect()
    }

    /// True when `a` and `x` share a train edge in either direction under any
    /// relation.
    pub fn linked(&self, a: usize, x: usize) -> bool {
        self.links.contains(&(a, x))
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// Known non-synthetic tails for a query across all splits.
    pub fn known_tails(&self, head: usize, rel: usize) -> &[usize] {
        self.gold.get(&(head, rel)).map_or(&[], Vec::as_slice)
    }

    /// Training queries with their gold tail sets, in key order.
    pub fn train_queries(&self) -> &BTreeMap<(usize, usize), Vec<usize>> {
        &self.train_targets
    }

    /// Removes `floor(fraction * |train|)` forward train edges, chosen
    /// uniformly without replacement. Inverse edges follow automatically.
    pub fn sparsify(&self, fraction: f64, seed: u64) -> Result<Graph> {
        self.sparsify_with_removed(fraction, seed).map(|(g, _)| g)
    }

    pub fn sparsify_with_removed(&self, fraction: f64, seed: u64) -> Result<(Graph, Vec<Tuple>)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Argument(format!(
                "sparsify fraction {fraction} outside [0, 1]"
            )));
        }
        let train_idx: Vec<usize> = self
            .forward
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train && !e.synthetic)
            .map(|(i, _)| i)
            .collect();
        let count = (fraction * train_idx.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drop: HashSet<usize> = index::sample(&mut rng, train_idx.len(), count)
            .into_iter()
            .map(|k| train_idx[k])
            .collect();
        let mut removed: Vec<usize> = drop.iter().copied().collect();
        removed.sort_unstable();
        let removed = removed.into_iter().map(|i| self.forward[i].tuple).collect();
        let kept = self
            .forward
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, e)| *e)
            .collect();
        let graph = self.rebuild(self.base_names.clone(), kept, self.augmented)?;
        Ok((graph, removed))
    }

    /// Connects each node to its `top_k` most cosine-similar nodes (at least
    /// `min_sim`) with synthetic `SIM` edges. The relation is symmetric, so
    /// each unordered pair yields one forward edge.
    pub fn densify_by_similarity(
        &self,
        embeddings: ArrayView2<f64>,
        top_k: usize,
        min_sim: f64,
    ) -> Result<Graph> {
        let n = self.num_nodes();
        if embeddings.nrows() != n {
            return Err(Error::Argument(format!(
                "embedding rows {} != node count {n}",
                embeddings.nrows()
            )));
        }
        if top_k >= n {
            return Err(Error::Argument(format!(
                "top_k {top_k} must be smaller than the node count {n}"
            )));
        }
        if top_k == 0 {
            return Ok(self.clone());
        }
        if self.base_names.iter().any(|r| r == SIM_RELATION) {
            return Err(Error::Argument(format!(
                "relation {SIM_RELATION:?} already present"
            )));
        }

        let norms: Vec<f64> = embeddings
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let sim_rel = self.base_names.len();
        let mut pairs = HashSet::new();
        let mut new_edges = Vec::new();
        for i in 0..n {
            if norms[i] == 0.0 {
                continue;
            }
            let row = embeddings.row(i);
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && norms[j] > 0.0)
                .map(|j| (row.dot(&embeddings.row(j)) / (norms[i] * norms[j]), j))
                .filter(|&(s, _)| s >= min_sim)
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, j) in scored.iter().take(top_k) {
                let key = (i.min(j), i.max(j));
                if pairs.insert(key) {
                    new_edges.push(Edge {
                        tuple: Tuple::new(key.0, sim_rel, key.1),
                        split: Split::Train,
                        synthetic: true,
                    });
                }
            }
        }
        let mut names = self.base_names.clone();
        names.push(SIM_RELATION.to_string());
        let mut forward = self.forward.clone();
        forward.extend(new_edges);
        self.rebuild(names, forward, self.augmented)
    }

    /// Writes the non-synthetic forward edges of one split as TSV.
    pub fn write_split_tsv<W: Write>(&self, split: Split, out: W) -> std::io::Result<()> {
        write_tuples(out, &self.split_tuples(split), &self.nodes, &self.base_names)
    }

    pub fn summary(&self) -> GraphSummary {
        let count = |s: Split| {
            self.forward
                .iter()
                .filter(|e| e.split == s && !e.synthetic)
                .count()
        };
        GraphSummary {
            nodes: self.num_nodes(),
            relations: self.num_relations(),
            base_relations: self.base_names.len(),
            edges: self.num_edges(),
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
            synthetic: self.forward.iter().filter(|e| e.synthetic).count(),
            augmented: self.augmented,
        }
    }
}

/// JSON sidecar written next to a graph snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub relations: usize,
    pub base_relations: usize,
    pub edges: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub synthetic: usize,
    pub augmented: bool,
}
