//! Graph convolutional structure encoder.
//!
//! Propagation uses `Â = D^{-1/2} (A + I) D^{-1/2}` over the undirected,
//! relation-collapsed train adjacency. Hidden layers apply ReLU, the last
//! layer is linear.

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Graph;

/// Symmetric normalized adjacency in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    /// `neighbors[i]` lists neighbors of node `i`. Links are symmetrized;
    /// self entries and duplicates are ignored.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Self {
        let n = neighbors.len();
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, nb) in neighbors.iter().enumerate() {
            for &j in nb.iter().filter(|&&j| j != i) {
                rows[i].push(j);
                rows[j].push(i);
            }
        }
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
        }
        let degree: Vec<f64> = rows.iter().map(|r| r.len() as f64).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                indices.push(j);
                values.push(1.0 / (degree[i] * degree[j]).sqrt());
            }
            indptr.push(indices.len());
        }
        NormalizedAdjacency {
            indptr,
            indices,
            values,
        }
    }

    pub fn from_graph(graph: &Graph) -> Self {
        let neighbors: Vec<Vec<usize>> = (0..graph.num_nodes())
            .map(|i| graph.neighbors(i).to_vec())
            .collect();
        NormalizedAdjacency::from_neighbors(&neighbors)
    }

    pub fn identity(n: usize) -> Self {
        NormalizedAdjacency::from_neighbors(&vec![Vec::new(); n])
    }

    pub fn n(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `Â · x`. Rows are computed independently in a fixed order, so the
    /// result does not depend on the thread count.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n(), "adjacency/feature row mismatch");
        let mut out = Array2::zeros(x.dim());
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut dst)| {
                for (j, v) in self.row(i) {
                    dst.scaled_add(v, &x.row(j));
                }
            });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcnInit {
    /// Trainable random node features as GCN input.
    Random,
    /// Frozen semantic vectors as GCN input.
    Semantic,
}

impl std::str::FromStr for GcnInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GcnInit::Random),
            "semantic" => Ok(GcnInit::Semantic),
            other => Err(Error::Argument(format!("unknown GCN init mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub layers: usize,
    /// Output (and hidden) width.
    pub dim: usize,
    pub init: GcnInit,
    /// Feature width in random mode.
    pub random_input_dim: usize,
    pub dropout: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            layers: 2,
            dim: 200,
            init: GcnInit::Semantic,
            random_input_dim: 200,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Array2<f64>>,
    pub init: GcnInit,
    /// Trainable input features (random mode only).
    pub features: Option<Array2<f64>>,
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl GcnParams {
    /// `semantic_dim` is the input width in semantic mode.
    pub fn new(cfg: &GcnConfig, num_nodes: usize, semantic_dim: usize, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.dim == 0 {
            return Err(Error::Config("GCN needs at least one layer and a positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, features) = match cfg.init {
            GcnInit::Semantic => (semantic_dim, None),
            GcnInit::Random => {
                let d = cfg.random_input_dim;
                let bound = (3.0 / d as f64).sqrt();
                let f = Array2::from_shape_fn((num_nodes, d), |_| rng.gen_range(-bound..bound));
                (d, Some(f))
            }
        };
        let mut weights = Vec::with_capacity(cfg.layers);
        let mut width = d_in;
        for _ in 0..cfg.layers {
            weights.push(xavier(width, cfg.dim, &mut rng));
            width = cfg.dim;
        }
        Ok(GcnParams {
            weights,
            init: cfg.init,
            features,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    /// The GCN input matrix: trainable features or the given semantic rows.
    pub fn input<'a>(&'a self, semantic: &'a Array2<f64>) -> &'a Array2<f64> {
        self.features.as_ref().unwrap_or(semantic)
    }
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    /// Input of each layer (after dropout for hidden inputs).
    inputs: Vec<Array2<f64>>,
    /// `Â H W` of each layer, before activation.
    pre: Vec<Array2<f64>>,
    /// Scaled dropout masks applied to each layer input (`None` for layer 0).
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Debug, Clone)]
pub struct GcnGrads {
    pub weights: Vec<Array2<f64>>,
    pub input: Array2<f64>,
}

/// Forward pass. `dropout = Some((rate, rng))` enables inverted dropout on
/// hidden activations.
pub fn gcn_forward(
    params: &GcnParams,
    adj: &NormalizedAdjacency,
    x0: &Array2<f64>,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Array2<f64>, GcnCache)> {
    if x0.nrows() != adj.n() || x0.ncols() != params.input_dim() {
        return Err(Error::Argument(format!(
            "GCN input is {}x{}, expected {}x{}",
            x0.nrows(),
            x0.ncols(),
            adj.n(),
            params.input_dim()
        )));
    }
    let layers = params.weights.len();
    let mut cache = GcnCache {
        inputs: Vec::with_capacity(layers),
        pre: Vec::with_capacity(layers),
        masks: Vec::with_capacity(layers),
    };
    let mut h = x0.clone();
    for (l, w) in params.weights.iter().enumerate() {
        let mut mask = None;
        if l > 0 {
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    let keep = 1.0 - *rate;
                    let m = Array2::from_shape_fn(h.dim(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    mask = Some(m);
                }
            }
        }
        let z = adj.matmul(&h.dot(w));
        cache.inputs.push(h);
        cache.masks.push(mask);
        h = if l + 1 < layers {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        cache.pre.push(z);
    }
    Ok((h, cache))
}

pub fn gcn_backward(
    params: &GcnParams,
    adj: &NormalizedAdjacency,
    cache: &GcnCache,
    grad_out: &Array2<f64>,
) -> GcnGrads {
    let layers = params.weights.len();
    let mut weights = vec![Array2::zeros((0, 0)); layers];
    let mut g = grad_out.clone();
    for l in (0..layers).rev() {
        if l + 1 < layers {
            Zip::from(&mut g)
                .and(&cache.pre[l])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
        }
        // Â is symmetric, so Âᵀ G = Â G.
        let d_xw = adj.matmul(&g);
        weights[l] = cache.inputs[l].t().dot(&d_xw);
        g = d_xw.dot(&params.weights[l].t());
        if let Some(mask) = &cache.masks[l] {
            g *= mask;
        }
    }
    GcnGrads { weights, input: g }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Tuple, Vocab};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn params_from(weights: Vec<Array2<f64>>) -> GcnParams {
        GcnParams {
            weights,
            init: GcnInit::Semantic,
            features: None,
        }
    }

    #[test]
    fn isolated_node_row_is_self_loop() {
        let adj = NormalizedAdjacency::from_neighbors(&[vec![1], vec![0], vec![]]);
        let d = adj.to_dense();
        assert_eq!(d.row(2).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_edge_is_all_halves() {
        let adj = NormalizedAdjacency::from_neighbors(&[vec![1], vec![0]]);
        assert_eq!(adj.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn adjacency_from_graph_collapses_relations() {
        let nodes = Vocab::from_texts(["a", "b", "c"], true).unwrap();
        let tuples = [Tuple::new(0, 0, 1), Tuple::new(1, 1, 0), Tuple::new(0, 1, 1), Tuple::new(2, 0, 2)];
        let g = crate::kg::Graph::from_tuples(nodes, vec!["r".into(), "s".into()], &tuples, true).unwrap();
        let d = NormalizedAdjacency::from_graph(&g).to_dense();
        assert_eq!(d, array![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn identity_propagation() {
        let x = array![[1.0, -2.0], [3.0, 0.5], [0.0, 4.0]];
        let p = params_from(vec![Array2::eye(2)]);
        let (out, _) = gcn_forward(&p, &NormalizedAdjacency::identity(3), &x, None).unwrap();
        assert_eq!(out, x);
        // hidden layers only apply ReLU
        let p = params_from(vec![Array2::eye(2), Array2::eye(2)]);
        let (out, _) = gcn_forward(&p, &NormalizedAdjacency::identity(3), &x, None).unwrap();
        assert_eq!(out, x.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn two_connected_nodes_average() {
        let x = array![[1.0, 3.0], [5.0, -1.0]];
        let adj = NormalizedAdjacency::from_neighbors(&[vec![1], vec![0]]);
        let (out, _) = gcn_forward(&params_from(vec![Array2::eye(2)]), &adj, &x, None).unwrap();
        assert_eq!(out, array![[3.0, 1.0], [3.0, 1.0]]);
    }

    #[test]
    fn dimension_mismatch() {
        let p = params_from(vec![Array2::eye(3)]);
        let x = Array2::zeros((2, 2));
        assert!(gcn_forward(&p, &NormalizedAdjacency::identity(2), &x, None).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let adj = NormalizedAdjacency::from_neighbors(&[vec![1, 2], vec![0], vec![0, 3], vec![2], vec![], vec![3]]);
        let x = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let p = params_from(vec![xavier(3, 4, &mut rng), xavier(4, 2, &mut rng)]);
        let target = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &GcnParams, x: &Array2<f64>| {
            let (out, _) = gcn_forward(p, &adj, x, None).unwrap();
            (&out * &target).sum() + 0.5 * out.mapv(|v| v * v).sum()
        };
        let (out, cache) = gcn_forward(&p, &adj, &x, None).unwrap();
        let grads = gcn_backward(&p, &adj, &cache, &(&target + &out));
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        for l in 0..2 {
            for idx in ndarray::indices(p.weights[l].dim()) {
                let mut plus = p.clone();
                plus.weights[l][idx] += h;
                let mut minus = p.clone();
                minus.weights[l][idx] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                assert!(rel(fd, grads.weights[l][idx]) <= 1e-4, "W{l}{idx:?} fd {fd} an {}", grads.weights[l][idx]);
            }
        }
        for idx in ndarray::indices(x.dim()) {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * h);
            assert!(rel(fd, grads.input[idx]) <= 1e-4, "X{idx:?}");
        }
    }

    #[test]
    fn dropout_masks_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adj = NormalizedAdjacency::from_neighbors(&[vec![1], vec![0, 2], vec![1]]);
        let x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let p = params_from(vec![xavier(2, 5, &mut rng), xavier(5, 2, &mut rng)]);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(8);
        let (out, cache) = gcn_forward(&p, &adj, &x, Some((0.5, &mut drop_rng))).unwrap();
        let grads = gcn_backward(&p, &adj, &cache, &Array2::ones(out.dim()));
        // replaying the same mask must give the same output
        let mut drop_rng = ChaCha8Rng::seed_from_u64(8);
        let (again, _) = gcn_forward(&p, &adj, &x, Some((0.5, &mut drop_rng))).unwrap();
        assert_eq!(out, again);
        assert!(grads.weights.iter().all(|w| w.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn random_mode_has_trainable_features() {
        let cfg = GcnConfig { init: GcnInit::Random, random_input_dim: 7, dim: 3, ..Default::default() };
        let p = GcnParams::new(&cfg, 5, 11, 0).unwrap();
        assert_eq!(p.features.as_ref().unwrap().dim(), (5, 7));
        assert_eq!(p.input_dim(), 7);
        let cfg = GcnConfig { dim: 3, ..Default::default() };
        let p = GcnParams::new(&cfg, 5, 11, 0).unwrap();
        assert!(p.features.is_none());
        assert_eq!((p.input_dim(), p.output_dim()), (11, 3));
    }

    fn small_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<usize>)> {
        (2usize..=30).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec((0..n, 0..n), 0..60),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn permutation_equivariance((n, edges, perm) in small_graph(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut nb = vec![Vec::new(); n];
            let mut nb_p = vec![Vec::new(); n];
            for &(a, b) in &edges {
                nb[a].push(b);
                nb[b].push(a);
                nb_p[perm[a]].push(perm[b]);
                nb_p[perm[b]].push(perm[a]);
            }
            let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let mut xp = Array2::zeros((n, 3));
            for i in 0..n {
                xp.row_mut(perm[i]).assign(&x.row(i));
            }
            let p = params_from(vec![xavier(3, 4, &mut rng), xavier(4, 2, &mut rng)]);
            let adj = NormalizedAdjacency::from_neighbors(&nb);
            let adj_p = NormalizedAdjacency::from_neighbors(&nb_p);
            prop_assert_eq!(adj.to_dense(), adj.to_dense().t().to_owned());
            let (out, _) = gcn_forward(&p, &adj, &x, None).unwrap();
            let (out_p, _) = gcn_forward(&p, &adj_p, &xp, None).unwrap();
            for i in 0..n {
                for c in 0..2 {
                    prop_assert!((out[[i, c]] - out_p[[perm[i], c]]).abs() < 1e-12);
                }
            }
            // duplicated edges leave the binary adjacency unchanged
            let mut doubled = nb.clone();
            for (i, row) in nb.iter().enumerate() {
                doubled[i].extend(row.iter().copied());
            }
            prop_assert_eq!(NormalizedAdjacency::from_neighbors(&doubled), adj);
        }
    }
}
