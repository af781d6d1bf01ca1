//! Convolutional query decoder and 1-vs-N candidate scoring.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gcn::xavier;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `C x 2w`; row `c` holds the `w` taps over `e_h` then the `w` taps over `e_rel`.
    pub kernels: Array2<f64>,
    /// `(C * d) x d`.
    pub projection: Array2<f64>,
    /// `d x d`.
    pub w_conv: Array2<f64>,
}

impl DecoderParams {
    pub fn new(dim: usize, channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width % 2 == 0 || channels == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "decoder needs an odd kernel width and positive sizes, got C={channels} w={width} d={dim}"
            )));
        }
        Ok(DecoderParams {
            kernels: xavier(channels, 2 * width, rng),
            projection: xavier(channels * dim, dim, rng),
            w_conv: xavier(dim, dim, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn width(&self) -> usize {
        self.kernels.ncols() / 2
    }

    pub fn dim(&self) -> usize {
        self.w_conv.nrows()
    }

    fn check(&self) -> Result<()> {
        let (c, d) = (self.channels(), self.dim());
        if self.kernels.ncols() % 2 != 0 || self.width() % 2 == 0 {
            return Err(Error::Argument("kernel rows must hold two odd-width taps".into()));
        }
        if self.projection.dim() != (c * d, d) || self.w_conv.dim() != (d, d) {
            return Err(Error::Argument("decoder tensor shapes are inconsistent".into()));
        }
        Ok(())
    }
}

/// Same-padded 2-channel convolution, before the activation: `C x d`.
pub fn conv_forward(kernels: &Array2<f64>, e_h: ArrayView1<f64>, e_rel: ArrayView1<f64>) -> Array2<f64> {
    let (c_out, w) = (kernels.nrows(), kernels.ncols() / 2);
    let d = e_h.len();
    let half = (w / 2) as isize;
    let mut z = Array2::zeros((c_out, d));
    for c in 0..c_out {
        let k = kernels.row(c);
        for p in 0..d {
            let mut acc = 0.0;
            for t in 0..w {
                let src = p as isize + t as isize - half;
                if src < 0 || src >= d as isize {
                    continue;
                }
                let src = src as usize;
                acc += k[t] * e_h[src] + k[w + t] * e_rel[src];
            }
            z[[c, p]] = acc;
        }
    }
    z
}

/// Backward of [`conv_forward`]: `(dK, d_e_h, d_e_rel)`.
fn conv_backward(
    kernels: &Array2<f64>,
    e_h: ArrayView1<f64>,
    e_rel: ArrayView1<f64>,
    grad: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (c_out, w) = (kernels.nrows(), kernels.ncols() / 2);
    let d = e_h.len();
    let half = (w / 2) as isize;
    let mut dk = Array2::zeros(kernels.dim());
    let mut dh = Array1::zeros(d);
    let mut dr = Array1::zeros(d);
    for c in 0..c_out {
        for p in 0..d {
            let g = grad[[c, p]];
            if g == 0.0 {
                continue;
            }
            for t in 0..w {
                let src = p as isize + t as isize - half;
                if src < 0 || src >= d as isize {
                    continue;
                }
                let src = src as usize;
                dk[[c, t]] += g * e_h[src];
                dk[[c, w + t]] += g * e_rel[src];
                dh[src] += g * kernels[[c, t]];
                dr[src] += g * kernels[[c, w + t]];
            }
        }
    }
    (dk, dh, dr)
}

/// `q = relu(conv(e_h, e_rel)).flatten() . projection`.
pub fn decode_query(e_h: ArrayView1<f64>, e_rel: ArrayView1<f64>, params: &DecoderParams) -> Result<Array1<f64>> {
    params.check()?;
    if e_h.len() != params.dim() || e_rel.len() != params.dim() {
        return Err(Error::Argument(format!(
            "query vectors must have length {}",
            params.dim()
        )));
    }
    let act = conv_forward(&params.kernels, e_h, e_rel).mapv(|v| v.max(0.0));
    let flat = act.into_shape_with_order(params.channels() * params.dim()).expect("contiguous");
    Ok(flat.dot(&params.projection))
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    /// Flattened activations, `B x (C * d)`.
    act: Array2<f64>,
}

/// Decodes a batch of queries; rows of `heads` and `rels` pair up.
pub fn decode_batch(
    heads: ArrayView2<f64>,
    rels: ArrayView2<f64>,
    params: &DecoderParams,
) -> Result<(Array2<f64>, DecodeCache)> {
    params.check()?;
    let (b, d) = heads.dim();
    if rels.dim() != (b, d) || d != params.dim() {
        return Err(Error::Argument("query batch shapes disagree with the decoder".into()));
    }
    let cd = params.channels() * d;
    let mut act = Array2::zeros((b, cd));
    act.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let z = conv_forward(&params.kernels, heads.row(i), rels.row(i));
            for (dst, v) in row.iter_mut().zip(z.iter()) {
                *dst = v.max(0.0);
            }
        });
    let q = act.dot(&params.projection);
    Ok((q, DecodeCache { act }))
}

#[derive(Debug, Clone)]
pub struct DecodeGrads {
    pub kernels: Array2<f64>,
    pub projection: Array2<f64>,
    pub heads: Array2<f64>,
    pub rels: Array2<f64>,
}

pub fn decode_batch_backward(
    heads: ArrayView2<f64>,
    rels: ArrayView2<f64>,
    params: &DecoderParams,
    cache: &DecodeCache,
    grad_q: &Array2<f64>,
) -> DecodeGrads {
    let (b, d) = heads.dim();
    let c = params.channels();
    let projection = cache.act.t().dot(grad_q);
    let mut d_act = grad_q.dot(&params.projection.t());
    d_act.zip_mut_with(&cache.act, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    let per_query: Vec<_> = (0..b)
        .into_par_iter()
        .map(|i| {
            let g = d_act.row(i);
            let g = g.into_shape_with_order((c, d)).expect("contiguous");
            conv_backward(&params.kernels, heads.row(i), rels.row(i), g)
        })
        .collect();
    let mut kernels = Array2::zeros(params.kernels.dim());
    let mut dh = Array2::zeros((b, d));
    let mut dr = Array2::zeros((b, d));
    for (i, (dk, h, r)) in per_query.into_iter().enumerate() {
        kernels += &dk;
        dh.row_mut(i).assign(&h);
        dr.row_mut(i).assign(&r);
    }
    DecodeGrads {
        kernels,
        projection,
        heads: dh,
        rels: dr,
    }
}

/// Raw scores `q . W_conv . E^T` for a batch of decoded queries: `B x N`.
pub fn score_logits(q: &Array2<f64>, w_conv: &Array2<f64>, nodes: &Array2<f64>) -> Array2<f64> {
    q.dot(w_conv).dot(&nodes.t())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigma(q . W_conv . E^T)` for every candidate row of `nodes`.
pub fn score_candidates(q: ArrayView1<f64>, w_conv: &Array2<f64>, nodes: &Array2<f64>) -> Result<Array1<f64>> {
    if q.len() != w_conv.nrows() || w_conv.ncols() != nodes.ncols() {
        return Err(Error::Argument("score operands disagree on width".into()));
    }
    Ok(nodes.dot(&q.dot(w_conv)).mapv(sigmoid))
}
