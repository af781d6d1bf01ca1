//! Finite-difference gradient checks over every trainable operation.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::mnr_loss;
use crate::error::{Error, Result};
use crate::gcn::{gcn_backward, gcn_forward, GcnInit, GcnParams, NormalizedAdjacency};
use crate::model::{
    decode_batch, decode_batch_backward, fuse_backward, fuse_rows, sigmoid, toy_model, DecoderParams,
};

pub const STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared absolutely; central
/// differences carry roughly `1e-11` of rounding noise at this step.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    MnrLoss,
    GcnForward,
    Fuse,
    DecodeQuery,
    ScoreCandidates,
    FullModel,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::MnrLoss,
        Component::GcnForward,
        Component::Fuse,
        Component::DecodeQuery,
        Component::ScoreCandidates,
        Component::FullModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::MnrLoss => "mnr_loss",
            Component::GcnForward => "gcn_forward",
            Component::Fuse => "fuse",
            Component::DecodeQuery => "decode_query",
            Component::ScoreCandidates => "score_candidates",
            Component::FullModel => "full_model",
        }
    }

    pub fn threshold(self) -> f64 {
        match self {
            Component::FullModel => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown gradcheck component '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub component: Component,
    pub tensor: String,
    /// `None` when a non-finite value was met.
    pub max_rel_error: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Compares `analytic` against central differences of `loss` around `x`.
pub fn compare(
    component: Component,
    tensor: &str,
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    threshold: f64,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> TensorCheck {
    let mut worst = Some(0.0f64);
    if x.dim() != analytic.dim() {
        worst = None;
    }
    let mut probe = x.to_owned();
    for idx in 0..x.len() {
        if worst.is_none() {
            break;
        }
        let at = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[at];
        probe[at] = orig + STEP;
        let up = loss(&probe);
        probe[at] = orig - STEP;
        let down = loss(&probe);
        probe[at] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let a = analytic[at];
        if !fd.is_finite() || !a.is_finite() {
            worst = None;
            break;
        }
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(ABS_FLOOR);
        worst = worst.map(|w| w.max(rel));
    }
    TensorCheck {
        component,
        tensor: tensor.to_string(),
        max_rel_error: worst,
        threshold,
        passed: worst.is_some_and(|w| w <= threshold),
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(tanh(out * probe))` and its gradient w.r.t. `out`.
fn readout(out: &Array2<f64>, probe: &Array2<f64>) -> (f64, Array2<f64>) {
    let z = out * probe;
    let grad = z.mapv(|v| 1.0 - v.tanh().powi(2)) * probe;
    (z.mapv(f64::tanh).sum(), grad)
}

fn six_node_adjacency() -> NormalizedAdjacency {
    NormalizedAdjacency::from_neighbors(&[
        vec![1, 3],
        vec![0, 2],
        vec![1, 3, 4],
        vec![0, 2],
        vec![2, 5],
        vec![4],
    ])
}

fn check_mnr(seed: u64) -> Vec<TensorCheck> {
    let c = Component::MnrLoss;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = [random(6, 5, &mut rng), random(6, 5, &mut rng), random(6, 5, &mut rng)];
    let out = match mnr_loss(blocks[0].view(), blocks[1].view(), blocks[2].view(), 1.0) {
        Ok(o) => o,
        Err(_) => return vec![failed(c, "anchors")],
    };
    let grads = [out.grad_anchors, out.grad_positives, out.grad_negatives];
    ["anchors", "positives", "negatives"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            compare(c, name, &blocks[k], &grads[k], c.threshold(), |x| {
                let mut b = blocks.clone();
                b[k] = x.clone();
                mnr_loss(b[0].view(), b[1].view(), b[2].view(), 1.0).map_or(f64::NAN, |o| o.loss)
            })
        })
        .collect()
}

fn failed(component: Component, tensor: &str) -> TensorCheck {
    TensorCheck {
        component,
        tensor: tensor.into(),
        max_rel_error: None,
        threshold: component.threshold(),
        passed: false,
    }
}

fn check_gcn(seed: u64) -> Vec<TensorCheck> {
    let c = Component::GcnForward;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adj = six_node_adjacency();
    let params = GcnParams {
        weights: vec![random(4, 5, &mut rng), random(5, 3, &mut rng)],
        init: GcnInit::Semantic,
        features: None,
    };
    let x0 = random(6, 4, &mut rng);
    let probe = random(6, 3, &mut rng);
    let loss = |p: &GcnParams, x: &Array2<f64>| {
        gcn_forward(p, &adj, x, None).map_or(f64::NAN, |(o, _)| readout(&o, &probe).0)
    };
    let Ok((out, cache)) = gcn_forward(&params, &adj, &x0, None) else {
        return vec![failed(c, "input")];
    };
    let grads = gcn_backward(&params, &adj, &cache, &readout(&out, &probe).1);
    let mut checks = Vec::new();
    for l in 0..params.weights.len() {
        checks.push(compare(c, &format!("w{l}"), &params.weights[l], &grads.weights[l], c.threshold(), |w| {
            let mut p = params.clone();
            p.weights[l] = w.clone();
            loss(&p, &x0)
        }));
    }
    checks.push(compare(c, "input", &x0, &grads.input, c.threshold(), |x| loss(&params, x)));
    checks
}

fn check_fuse(seed: u64) -> Vec<TensorCheck> {
    let c = Component::Fuse;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sem, graph, lat) = (random(6, 3, &mut rng), random(6, 4, &mut rng), random(6, 3, &mut rng));
    let w = random(10, 5, &mut rng);
    let probe = random(6, 5, &mut rng);
    let loss = |w: &Array2<f64>, g: &Array2<f64>| {
        fuse_rows(&sem, g, Some(&lat), 0.4, w).map_or(f64::NAN, |(e, _)| readout(&e, &probe).0)
    };
    let Ok((e, concat)) = fuse_rows(&sem, &graph, Some(&lat), 0.4, &w) else {
        return vec![failed(c, "w_embedding")];
    };
    let (dw, dx) = fuse_backward(&concat, &readout(&e, &probe).1, &w);
    let dg = dx.slice(ndarray::s![.., 3..7]).to_owned();
    vec![
        compare(c, "w_embedding", &w, &dw, c.threshold(), |x| loss(x, &graph)),
        compare(c, "e_graph", &graph, &dg, c.threshold(), |x| loss(&w, x)),
    ]
}

fn check_decode(seed: u64) -> Vec<TensorCheck> {
    let c = Component::DecodeQuery;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let Ok(params) = DecoderParams::new(d, 3, 3, &mut rng) else {
        return vec![failed(c, "kernels")];
    };
    let (heads, rels, probe) = (random(4, d, &mut rng), random(4, d, &mut rng), random(4, d, &mut rng));
    let loss = |p: &DecoderParams, h: &Array2<f64>, r: &Array2<f64>| {
        decode_batch(h.view(), r.view(), p).map_or(f64::NAN, |(q, _)| readout(&q, &probe).0)
    };
    let Ok((q, cache)) = decode_batch(heads.view(), rels.view(), &params) else {
        return vec![failed(c, "kernels")];
    };
    let g = decode_batch_backward(heads.view(), rels.view(), &params, &cache, &readout(&q, &probe).1);
    vec![
        compare(c, "kernels", &params.kernels, &g.kernels, c.threshold(), |k| {
            let mut p = params.clone();
            p.kernels = k.clone();
            loss(&p, &heads, &rels)
        }),
        compare(c, "projection", &params.projection, &g.projection, c.threshold(), |m| {
            let mut p = params.clone();
            p.projection = m.clone();
            loss(&p, &heads, &rels)
        }),
        compare(c, "e_h", &heads, &g.heads, c.threshold(), |h| loss(&params, h, &rels)),
        compare(c, "e_rel", &rels, &g.rels, c.threshold(), |r| loss(&params, &heads, r)),
    ]
}

fn check_scores(seed: u64) -> Vec<TensorCheck> {
    let c = Component::ScoreCandidates;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, w, e) = (random(3, 5, &mut rng), random(5, 5, &mut rng), random(6, 5, &mut rng));
    let y = random(3, 6, &mut rng).mapv(|v| (v > 0.0) as u8 as f64);
    // Mean BCE against a fixed 0/1 target, as in training.
    let loss = |q: &Array2<f64>, w: &Array2<f64>, e: &Array2<f64>| {
        let p = q.dot(w).dot(&e.t()).mapv(sigmoid);
        let l = ndarray::Zip::from(&p)
            .and(&y)
            .fold(0.0, |acc, &p, &y| acc - (y * p.ln() + (1.0 - y) * (1.0 - p).ln()));
        l / p.len() as f64
    };
    let u = q.dot(&w);
    let p = u.dot(&e.t()).mapv(sigmoid);
    let ds = (&p - &y) / p.len() as f64;
    let de = ds.t().dot(&u);
    let du = ds.dot(&e);
    let dw = q.t().dot(&du);
    let dq = du.dot(&w.t());
    vec![
        compare(c, "q", &q, &dq, c.threshold(), |x| loss(x, &w, &e)),
        compare(c, "w_conv", &w, &dw, c.threshold(), |x| loss(&q, x, &e)),
        compare(c, "e_n", &e, &de, c.threshold(), |x| loss(&q, &w, x)),
    ]
}

fn check_full(seed: u64) -> Vec<TensorCheck> {
    let c = Component::FullModel;
    let mut checks = Vec::new();
    for init in [GcnInit::Semantic, GcnInit::Random] {
        let prefix = match init {
            GcnInit::Semantic => "semantic",
            GcnInit::Random => "random",
        };
        let Ok((model, queries, targets)) = toy_model(init, seed) else {
            checks.push(failed(c, prefix));
            continue;
        };
        let tref: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let Ok((_, grads)) = model.batch_loss(&queries, &tref, 0.6, 0.1, None) else {
            checks.push(failed(c, prefix));
            continue;
        };
        let tensors: Vec<Array2<f64>> = model.params.tensors().into_iter().cloned().collect();
        for (ti, name) in model.params.names().iter().enumerate() {
            let mut probe = model.clone();
            checks.push(compare(c, &format!("{prefix}/{name}"), &tensors[ti], &grads[ti], c.threshold(), |x| {
                probe.params.tensors_mut()[ti].assign(x);
                probe
                    .batch_loss(&queries, &tref, 0.6, 0.1, None)
                    .map_or(f64::NAN, |(l, _)| l)
            }));
        }
    }
    checks
}

/// Runs the requested components on seeded small instances.
pub fn gradcheck(components: &[Component], seed: u64) -> GradcheckReport {
    let mut checks = Vec::new();
    for &c in components {
        checks.extend(match c {
            Component::MnrLoss => check_mnr(seed),
            Component::GcnForward => check_gcn(seed),
            Component::Fuse => check_fuse(seed),
            Component::DecodeQuery => check_decode(seed),
            Component::ScoreCandidates => check_scores(seed),
            Component::FullModel => check_full(seed),
        });
    }
    GradcheckReport { seed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        for seed in [0, 7] {
            let report = gradcheck(&Component::ALL, seed);
            for c in &report.checks {
                assert!(c.passed, "{} {}: {:?}", c.component, c.tensor, c.max_rel_error);
            }
            assert!(report.checks.len() >= 20);
        }
    }

    #[test]
    fn empty_list_is_empty_report() {
        let r = gradcheck(&[], 1);
        assert!(r.checks.is_empty());
        assert!(r.passed());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.3 - 0.4);
        let loss = |x: &Array2<f64>| x.mapv(|v| v * v).sum();
        let good = x.mapv(|v| 2.0 * v);
        assert!(compare(Component::Fuse, "x", &x, &good, 1e-4, loss).passed);
        let mut bad = good.clone();
        bad[[1, 2]] *= 1.01;
        let check = compare(Component::Fuse, "x", &x, &bad, 1e-4, loss);
        assert!(!check.passed);
        assert!(check.max_rel_error.unwrap() > 1e-3);
    }

    #[test]
    fn non_finite_is_reported_not_raised() {
        let x = Array2::from_elem((1, 2), 0.5);
        let check = compare(Component::Fuse, "x", &x, &x, 1e-4, |_| f64::NAN);
        assert!(!check.passed);
        assert_eq!(check.max_rel_error, None);
        let json = serde_json::to_string(&check).unwrap();
        assert!(json.contains("\"max_rel_error\":null"));
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("bogus".parse::<Component>().is_err());
    }
}
