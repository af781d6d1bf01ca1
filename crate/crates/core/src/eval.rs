//! Ranking evaluation: MRR and HITS@{1,3,10} over forward queries
//! `(h, rel) -> t` and inverse queries `(t, rel__inv) -> h`, in filtered or
//! raw setting. The candidate set is always the full node vocabulary.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Graph, Tuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Gold sits in the middle of its tie group.
    #[default]
    Average,
    Optimistic,
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Other known-true tails are removed before ranking.
    #[default]
    Filtered,
    Raw,
}

/// Anything that scores every node as the tail of a query. Higher is better.
pub trait Scorer: Sync {
    fn num_nodes(&self) -> usize;
    fn score(&self, head: usize, rel: usize) -> Vec<f64>;
}

/// Rank of `gold` among `scores`, where candidates in `filter` are removed.
pub fn rank(scores: &[f64], gold: usize, filter: &[usize], tie: TiePolicy) -> Result<f64> {
    if gold >= scores.len() {
        return Err(Error::Argument(format!(
            "gold {gold} outside candidate range {}",
            scores.len()
        )));
    }
    if filter.contains(&gold) {
        return Err(Error::Argument("gold candidate is in the filter set".into()));
    }
    let mut skip = vec![false; scores.len()];
    for &f in filter {
        if f < skip.len() {
            skip[f] = true;
        }
    }
    let g = scores[gold];
    let (mut higher, mut ties) = (0usize, 0usize);
    for (j, &s) in scores.iter().enumerate() {
        if j == gold || skip[j] {
            continue;
        }
        if s > g {
            higher += 1;
        } else if s == g {
            ties += 1;
        }
    }
    let base = 1.0 + higher as f64;
    Ok(match tie {
        TiePolicy::Average => base + ties as f64 / 2.0,
        TiePolicy::Optimistic => base,
        TiePolicy::Pessimistic => base + ties as f64,
    })
}

/// Indices of the `k` best candidates, best first; ties go to the lower id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryDirection {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub head: usize,
    pub rel: usize,
    pub gold: usize,
    pub rank: f64,
    pub direction: QueryDirection,
    pub filtered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub count: usize,
}

impl DirectionMetrics {
    fn from_ranks<'a>(ranks: impl Iterator<Item = &'a f64>) -> Self {
        let mut m = DirectionMetrics::default();
        for &r in ranks {
            m.count += 1;
            m.mrr += 1.0 / r;
            m.hits_at_1 += (r <= 1.0) as u8 as f64;
            m.hits_at_3 += (r <= 3.0) as u8 as f64;
            m.hits_at_10 += (r <= 10.0) as u8 as f64;
        }
        if m.count > 0 {
            let c = m.count as f64;
            m.mrr /= c;
            m.hits_at_1 /= c;
            m.hits_at_3 /= c;
            m.hits_at_10 /= c;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub count: usize,
    pub forward: DirectionMetrics,
    pub inverse: DirectionMetrics,
    pub setting: Setting,
    pub tie_policy: TiePolicy,
}

impl Metrics {
    pub fn from_results(results: &[RankingResult], setting: Setting, tie_policy: TiePolicy) -> Self {
        let all = DirectionMetrics::from_ranks(results.iter().map(|r| &r.rank));
        let of = |d: QueryDirection| {
            DirectionMetrics::from_ranks(results.iter().filter(|r| r.direction == d).map(|r| &r.rank))
        };
        Metrics {
            mrr: all.mrr,
            hits_at_1: all.hits_at_1,
            hits_at_3: all.hits_at_3,
            hits_at_10: all.hits_at_10,
            count: all.count,
            forward: of(QueryDirection::Forward),
            inverse: of(QueryDirection::Inverse),
            setting,
            tie_policy,
        }
    }
}

fn queries(tuples: &[Tuple], graph: &Graph) -> Vec<(usize, usize, usize, QueryDirection)> {
    let mut out = Vec::with_capacity(2 * tuples.len());
    for t in tuples {
        out.push((t.head, t.rel, t.tail, QueryDirection::Forward));
        if let Some(inv) = graph.inverse(t.rel) {
            out.push((t.tail, inv, t.head, QueryDirection::Inverse));
        }
    }
    out
}

/// Ranks every forward query and, on augmented graphs, every inverse query.
pub fn evaluate_detailed<S: Scorer + ?Sized>(
    scorer: &S,
    tuples: &[Tuple],
    graph: &Graph,
    setting: Setting,
    tie: TiePolicy,
) -> Result<(Metrics, Vec<RankingResult>)> {
    let results = queries(tuples, graph)
        .into_par_iter()
        .map(|(head, rel, gold, direction)| {
            let scores = scorer.score(head, rel);
            let filter: Vec<usize> = match setting {
                Setting::Filtered => graph
                    .known_tails(head, rel)
                    .iter()
                    .copied()
                    .filter(|&t| t != gold)
                    .collect(),
                Setting::Raw => Vec::new(),
            };
            let r = rank(&scores, gold, &filter, tie)?;
            Ok(RankingResult {
                head,
                rel,
                gold,
                rank: r,
                direction,
                filtered: setting == Setting::Filtered,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Metrics::from_results(&results, setting, tie), results))
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    tuples: &[Tuple],
    graph: &Graph,
    setting: Setting,
    tie: TiePolicy,
) -> Result<Metrics> {
    evaluate_detailed(scorer, tuples, graph, setting, tie).map(|(m, _)| m)
}

/// Per-query TSV dump: `query<TAB>gold<TAB>rank`.
pub fn write_rankings<W: Write>(mut out: W, results: &[RankingResult], graph: &Graph) -> std::io::Result<()> {
    writeln!(out, "query\tgold\trank")?;
    for r in results {
        writeln!(
            out,
            "{} | {}\t{}\t{}",
            graph.nodes().text(r.head),
            graph.relations()[r.rel].name,
            graph.nodes().text(r.gold),
            r.rank
        )?;
    }
    Ok(())
}

/// Top-k candidate export for manual judgement: one line per candidate,
/// `query<TAB>gold<TAB>position<TAB>candidate<TAB>score`.
pub fn write_top_candidates<W: Write, S: Scorer + ?Sized>(
    mut out: W,
    scorer: &S,
    results: &[RankingResult],
    graph: &Graph,
    k: usize,
) -> std::io::Result<()> {
    writeln!(out, "query\tgold\tposition\tcandidate\tscore")?;
    for r in results {
        let scores = scorer.score(r.head, r.rel);
        for (pos, (cand, score)) in top_k(&scores, k).into_iter().enumerate() {
            writeln!(
                out,
                "{} | {}\t{}\t{}\t{}\t{}",
                graph.nodes().text(r.head),
                graph.relations()[r.rel].name,
                graph.nodes().text(r.gold),
                pos + 1,
                graph.nodes().text(cand),
                score
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphBuilder, Split, Vocab};
    use proptest::prelude::*;

    /// Sort-based oracle: position of gold after a stable descending sort,
    /// averaged over its tie group.
    fn sort_rank(scores: &[f64], gold: usize, filter: &[usize]) -> f64 {
        let mut kept: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| !filter.contains(j))
            .map(|(j, &s)| (s, j))
            .collect();
        kept.sort_by(|a, b| b.0.total_cmp(&a.0));
        let g = scores[gold];
        let first = kept.iter().position(|&(s, _)| s == g).unwrap() + 1;
        let last = kept.iter().rposition(|&(s, _)| s == g).unwrap() + 1;
        (first + last) as f64 / 2.0
    }

    #[test]
    fn rank_cases() {
        assert_eq!(rank(&[0.1, 0.9, 0.3], 1, &[], TiePolicy::Average).unwrap(), 1.0);
        assert_eq!(rank(&[0.9, 0.9, 0.3], 1, &[], TiePolicy::Average).unwrap(), 1.5);
        assert_eq!(rank(&[0.9, 0.9, 0.3], 1, &[], TiePolicy::Optimistic).unwrap(), 1.0);
        assert_eq!(rank(&[0.9, 0.9, 0.3], 1, &[], TiePolicy::Pessimistic).unwrap(), 2.0);
        assert_eq!(rank(&[0.9, 0.5, 0.7], 1, &[0, 2], TiePolicy::Average).unwrap(), 1.0);
        assert!(rank(&[0.1], 3, &[], TiePolicy::Average).is_err());
        assert!(rank(&[0.1, 0.2], 1, &[1], TiePolicy::Average).is_err());
    }

    #[test]
    fn top_k_order() {
        assert_eq!(top_k(&[0.2, 0.9, 0.9, -1.0], 3), vec![(1, 0.9), (2, 0.9), (0, 0.2)]);
    }

    /// Scorer backed by an explicit table keyed by (head, rel).
    struct Table {
        n: usize,
        rows: std::collections::HashMap<(usize, usize), Vec<f64>>,
    }

    impl Scorer for Table {
        fn num_nodes(&self) -> usize {
            self.n
        }
        fn score(&self, head: usize, rel: usize) -> Vec<f64> {
            self.rows.get(&(head, rel)).cloned().unwrap_or_else(|| vec![0.0; self.n])
        }
    }

    fn fixture() -> (Graph, Vec<Tuple>) {
        let nodes = Vocab::from_texts(["a", "b", "c", "d"], true).unwrap();
        let test = vec![Tuple::new(0, 0, 1)];
        let g = GraphBuilder::new(nodes, vec!["r".into()])
            .add(Split::Test, &test)
            .build(true)
            .unwrap();
        (g, test)
    }

    #[test]
    fn rank_two_in_both_directions() {
        let (g, test) = fixture();
        let mut rows = std::collections::HashMap::new();
        rows.insert((0, 0), vec![0.0, 0.5, 0.9, 0.1]);
        rows.insert((1, 1), vec![0.5, 0.0, 0.1, 0.9]);
        let m = evaluate(&Table { n: 4, rows }, &test, &g, Setting::Filtered, TiePolicy::Average).unwrap();
        assert_eq!(m.count, 2);
        assert_eq!((m.mrr, m.hits_at_1, m.hits_at_3, m.hits_at_10), (0.5, 0.0, 1.0, 1.0));
        assert_eq!(m.forward.count, 1);
        assert_eq!(m.inverse.mrr, 0.5);
    }

    #[test]
    fn perfect_model() {
        let (g, test) = fixture();
        let mut rows = std::collections::HashMap::new();
        rows.insert((0, 0), vec![0.0, 1.0, 0.0, 0.0]);
        rows.insert((1, 1), vec![1.0, 0.0, 0.0, 0.0]);
        let m = evaluate(&Table { n: 4, rows }, &test, &g, Setting::Raw, TiePolicy::Average).unwrap();
        assert_eq!((m.mrr, m.hits_at_1, m.hits_at_3, m.hits_at_10), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn filtering_removes_other_gold_tails() {
        let nodes = Vocab::from_texts(["a", "b", "c", "d"], true).unwrap();
        let train = vec![Tuple::new(0, 0, 2)];
        let test = vec![Tuple::new(0, 0, 1)];
        let g = GraphBuilder::new(nodes, vec!["r".into()])
            .add(Split::Train, &train)
            .add(Split::Test, &test)
            .build(true)
            .unwrap();
        let mut rows = std::collections::HashMap::new();
        rows.insert((0, 0), vec![0.0, 0.5, 0.9, 0.1]);
        rows.insert((1, 1), vec![0.9, 0.0, 0.1, 0.2]);
        let t = Table { n: 4, rows };
        let raw = evaluate(&t, &test, &g, Setting::Raw, TiePolicy::Average).unwrap();
        let filt = evaluate(&t, &test, &g, Setting::Filtered, TiePolicy::Average).unwrap();
        assert_eq!(raw.forward.mrr, 0.5);
        assert_eq!(filt.forward.mrr, 1.0);
        assert!(filt.mrr >= raw.mrr);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(
            scores in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(|v| v as f64), -1.0f64..1.0], 10),
            gold in 0usize..10,
            filter_mask in prop::collection::vec(any::<bool>(), 10),
        ) {
            let filter: Vec<usize> = (0..10).filter(|&j| j != gold && filter_mask[j]).collect();
            let r = rank(&scores, gold, &filter, TiePolicy::Average).unwrap();
            prop_assert_eq!(r, sort_rank(&scores, gold, &filter));
            let raw = rank(&scores, gold, &[], TiePolicy::Average).unwrap();
            prop_assert!(r <= raw);
        }

        #[test]
        fn monotone_transform_invariance(scores in prop::collection::vec(-5.0f64..5.0, 12), gold in 0usize..12) {
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
            let r = rank(&scores, gold, &[], TiePolicy::Average).unwrap();
            prop_assert_eq!(r, rank(&squashed, gold, &[], TiePolicy::Average).unwrap());
            prop_assert_eq!(r, rank(&cubed, gold, &[], TiePolicy::Average).unwrap());
        }
    }
}
