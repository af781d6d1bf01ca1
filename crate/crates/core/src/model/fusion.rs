//! Node embedding fusion: `[e_sem; e_graph; f * e_lc] . W_embedding`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the latent-concept block is unmasked over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRamp {
    /// `min(1, epoch / mask_epochs)`.
    #[default]
    Linear,
    /// Fully masked until `mask_epochs`, then fully on.
    Step,
}

pub fn mask_schedule(epoch: usize, mask_epochs: usize) -> f64 {
    if mask_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / mask_epochs as f64).min(1.0)
}

pub fn mask_factor(ramp: MaskRamp, epoch: usize, mask_epochs: usize) -> f64 {
    match ramp {
        MaskRamp::Linear => mask_schedule(epoch, mask_epochs),
        MaskRamp::Step => {
            if epoch >= mask_epochs {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `(d_sem + d_graph + d_sem) x d_model`.
    pub w_embedding: Array2<f64>,
    /// One row per relation, inverse relations included.
    pub relations: Array2<f64>,
}

impl FusionParams {
    pub fn d_model(&self) -> usize {
        self.w_embedding.ncols()
    }
}

fn check_factor(factor: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::Argument(format!("mask factor {factor} outside [0, 1]")));
    }
    Ok(())
}

pub fn fuse(
    e_sem: ArrayView1<f64>,
    e_graph: ArrayView1<f64>,
    e_lc: ArrayView1<f64>,
    factor: f64,
    w_embedding: &Array2<f64>,
) -> Result<Array1<f64>> {
    check_factor(factor)?;
    if e_lc.len() != e_sem.len() {
        return Err(Error::Argument(format!(
            "latent block has width {}, semantic block {}",
            e_lc.len(),
            e_sem.len()
        )));
    }
    let width = e_sem.len() + e_graph.len() + e_lc.len();
    if width != w_embedding.nrows() {
        return Err(Error::Argument(format!(
            "concatenation width {width} does not match W_embedding input {}",
            w_embedding.nrows()
        )));
    }
    let lc = e_lc.mapv(|v| v * factor);
    let x = concatenate![Axis(0), e_sem, e_graph, lc];
    Ok(x.dot(w_embedding))
}

/// Row-wise fusion of all nodes. `latent = None` means a permanently zero
/// latent block. Returns the fused rows and the concatenated input.
pub fn fuse_rows(
    semantic: &Array2<f64>,
    graph: &Array2<f64>,
    latent: Option<&Array2<f64>>,
    factor: f64,
    w_embedding: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_factor(factor)?;
    let n = semantic.nrows();
    let d_sem = semantic.ncols();
    if graph.nrows() != n || latent.is_some_and(|l| l.dim() != semantic.dim()) {
        return Err(Error::Argument("fusion blocks disagree on shape".into()));
    }
    let width = 2 * d_sem + graph.ncols();
    if width != w_embedding.nrows() {
        return Err(Error::Argument(format!(
            "concatenation width {width} does not match W_embedding input {}",
            w_embedding.nrows()
        )));
    }
    let mut x = Array2::zeros((n, width));
    x.slice_mut(s![.., ..d_sem]).assign(semantic);
    x.slice_mut(s![.., d_sem..d_sem + graph.ncols()]).assign(graph);
    if let Some(l) = latent {
        if factor != 0.0 {
            x.slice_mut(s![.., d_sem + graph.ncols()..]).assign(&l.mapv(|v| v * factor));
        }
    }
    Ok((x.dot(w_embedding), x))
}

/// Returns `(dW_embedding, d_concat)`.
pub fn fuse_backward(
    concat: &Array2<f64>,
    grad_out: &Array2<f64>,
    w_embedding: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    (concat.t().dot(grad_out), grad_out.dot(&w_embedding.t()))
}
