//! A small pre-norm residual network with RMSNorm, used to exercise
//! rotation invariance and the per-layer compression pipeline end to end.
//!
//! Residual stream positions are numbered `0..=L`: the embedding writes
//! position 0, block `l` (1-based) reads position `l - 1` and writes
//! position `l`, and the head reads position `L`. A rotation `Q_p` of
//! position `p` turns the embedding into `W_emb Q_0`, block `l` into
//! `Q_{l-1}^T W_in`, `W_out Q_l`, `b_out Q_l` with skip matrix
//! `Q_{l-1}^T Q_l`, and the head into `Q_L^T W_head`.

mod io;
mod pipeline;
mod sizing;

pub use io::{load_network, save_network};
pub use pipeline::{
    collect_calibration, compress_network, planted_network, Calibration, CompressionPlan, CompressionReport, PositionPlan,
    PositionReport,
};
pub use sizing::{choose_gs_shape, choose_kron_shape, default_gs_blocks, kron_param_fraction, GS_RATIO_SLACK};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{hstack, orthogonality_error, random_normal, Mat};
use crate::procrustes::OrthogonalFactor;
use crate::structured::Structured;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    /// Single-head causal self-attention over the sequence. The inner
    /// columns are `[queries, keys, values]` of equal width.
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub activation: Activation,
    /// Projected part of the input map, `n x c`.
    pub w_in: Structured,
    /// Trailing input-map columns kept dense (attention values when they
    /// are excluded from compression), `n x k`.
    pub w_kept: Mat,
    pub b_in: Option<Vec<f64>>,
    /// `h x n`.
    pub w_out: Structured,
    pub b_out: Option<Vec<f64>>,
    /// Skip-connection matrix; `None` is the identity.
    pub skip: Option<OrthogonalFactor>,
}

impl ToyBlock {
    /// Width of `[w_in, w_kept]`.
    pub fn inner_width(&self) -> usize {
        self.w_in.shape().1 + self.w_kept.ncols()
    }

    /// Width of the activation output, the input of `w_out`.
    pub fn activation_width(&self) -> usize {
        match self.activation {
            Activation::Attention => self.inner_width() / 3,
            _ => self.inner_width(),
        }
    }

    /// The full dense input map `[w_in, w_kept]`.
    pub fn input_map(&self) -> Mat {
        hstack(&[&self.w_in.materialize(), &self.w_kept])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    /// `V x n`.
    pub embedding: Structured,
    pub blocks: Vec<ToyBlock>,
    /// `n x V`.
    pub head: Structured,
}

/// Dimensions for random network generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub vocab: usize,
    pub hidden: usize,
    /// Activation width of each block; attention blocks take `3 * inner`
    /// input columns.
    pub inner: usize,
    pub blocks: Vec<Activation>,
    pub biases: bool,
}

impl NetShape {
    /// Attention followed by a ReLU block, repeated `pairs` times.
    pub fn alternating(vocab: usize, hidden: usize, inner: usize, pairs: usize) -> Self {
        let blocks = (0..pairs).flat_map(|_| [Activation::Attention, Activation::Relu]).collect();
        Self { vocab, hidden, inner, blocks, biases: true }
    }
}

/// `x / ||x||_2` for a row vector.
pub fn rmsnorm(x: &[f64]) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Row-wise RMSNorm in which zero rows stay zero.
fn normalize_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add_bias(m: &mut Mat, b: &Option<Vec<f64>>) {
    if let Some(b) = b {
        for mut row in m.row_iter_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

fn causal_attention(z: &Mat) -> Mat {
    let h = z.ncols() / 3;
    let (q, k, v) = (z.columns(0, h), z.columns(h, h), z.columns(2 * h, h));
    let scale = 1.0 / (h.max(1) as f64).sqrt();
    let s = z.nrows();
    let mut out = Mat::zeros(s, h);
    for i in 0..s {
        let scores: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) * scale).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|sc| (sc - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            let row = v.row(j) * (w / total);
            let mut o = out.row_mut(i);
            o += row;
        }
    }
    out
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Normalized stream at positions `0..=L`: the inputs of the block input
    /// maps and of the head.
    pub normalized: Vec<Mat>,
    /// Activation outputs of each block: the inputs of `w_out`.
    pub activations: Vec<Mat>,
    pub logits: Mat,
}

impl ToyNetwork {
    pub fn vocab(&self) -> usize {
        self.embedding.shape().0
    }

    pub fn hidden(&self) -> usize {
        self.embedding.shape().1
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Dense weights with identity skips from `shape`, entries scaled by
    /// `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(shape: &NetShape, rng: &mut R) -> Self {
        let (v, n, h) = (shape.vocab, shape.hidden, shape.inner);
        let scaled = |r: usize, c: usize, rng: &mut R| random_normal(r, c, rng) / (r as f64).sqrt();
        let embedding = Structured::Dense(random_normal(v, n, rng));
        let blocks = shape
            .blocks
            .iter()
            .map(|&activation| {
                let width = if activation == Activation::Attention { 3 * h } else { h };
                let bias = |len: usize, rng: &mut R| shape.biases.then(|| (0..len).map(|_| 0.1 * rng.random::<f64>()).collect());
                ToyBlock {
                    activation,
                    w_in: Structured::Dense(scaled(n, width, rng)),
                    w_kept: Mat::zeros(n, 0),
                    b_in: if activation == Activation::Attention { None } else { bias(width, rng) },
                    w_out: Structured::Dense(scaled(h, n, rng)),
                    b_out: bias(n, rng),
                    skip: None,
                }
            })
            .collect();
        let head = Structured::Dense(scaled(n, v, rng));
        Self { embedding, blocks, head }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, n) = self.embedding.shape();
        if self.head.shape() != (n, v) {
            return Err(shape_err(format!("head is {:?}, expected {}x{}", self.head.shape(), n, v)));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let width = b.inner_width();
            let ok = b.w_in.shape().0 == n
                && b.w_kept.nrows() == n
                && (b.activation != Activation::Attention || width % 3 == 0)
                && b.w_out.shape() == (b.activation_width(), n)
                && b.b_in.as_ref().is_none_or(|x| x.len() == width)
                && b.b_out.as_ref().is_none_or(|x| x.len() == n)
                && b.skip.as_ref().is_none_or(|s| s.order() == n);
            if !ok {
                return Err(shape_err(format!("block {} does not chain with hidden size {}", i + 1, n)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Mat> {
        Ok(self.forward_trace(ids)?.logits)
    }

    pub fn forward_trace(&self, ids: &[usize]) -> Result<Trace> {
        let vocab = self.vocab();
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::IdOutOfRange { id, vocab });
        }
        let emb = self.embedding.materialize();
        let n = self.hidden();
        let mut x = Mat::from_fn(ids.len(), n, |i, j| emb[(ids[i], j)]);
        let mut normalized = Vec::with_capacity(self.depth() + 1);
        let mut activations = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let h = normalize_rows(&x);
            let mut z = hstack(&[&b.w_in.apply(&h)?, &(&h * &b.w_kept)]);
            add_bias(&mut z, &b.b_in);
            let a = match b.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Gelu => z.map(gelu),
                Activation::Attention => causal_attention(&z),
            };
            let mut y = b.w_out.apply(&a)?;
            add_bias(&mut y, &b.b_out);
            x = match &b.skip {
                Some(s) => &x * s.to_dense()? + y,
                None => x + y,
            };
            normalized.push(h);
            activations.push(a);
        }
        let h = normalize_rows(&x);
        let logits = self.head.apply(&h)?;
        normalized.push(h);
        if !crate::linalg::is_finite(&logits) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(Trace { normalized, activations, logits })
    }

    /// Applies one rotation per stream position (`depth + 1` matrices).
    /// Rotated weights are stored densely.
    pub fn rotate(&self, qs: &[Mat]) -> Result<Self> {
        let n = self.hidden();
        if qs.len() != self.depth() + 1 {
            return Err(shape_err(format!("need {} rotations, got {}", self.depth() + 1, qs.len())));
        }
        for q in qs {
            if q.shape() != (n, n) {
                return Err(shape_err(format!("rotation is {:?}, hidden size is {}", q.shape(), n)));
            }
            let err = orthogonality_error(q);
            if !(err < 1e-10) {
                return Err(Error::NotOrthogonal(err));
            }
        }
        let embedding = Structured::Dense(self.embedding.materialize() * &qs[0]);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let (before, after) = (&qs[i], &qs[i + 1]);
                let skip = match &b.skip {
                    Some(s) => before.transpose() * s.to_dense()? * after,
                    None => before.transpose() * after,
                };
                Ok(ToyBlock {
                    activation: b.activation,
                    w_in: Structured::Dense(before.transpose() * b.w_in.materialize()),
                    w_kept: before.transpose() * &b.w_kept,
                    b_in: b.b_in.clone(),
                    w_out: Structured::Dense(b.w_out.materialize() * after),
                    b_out: b.b_out.as_ref().map(|v| rotate_row(v, after)),
                    skip: Some(OrthogonalFactor::Dense(skip)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Structured::Dense(qs[self.depth()].transpose() * self.head.materialize());
        Ok(Self { embedding, blocks, head })
    }

    /// Stored scalars of all weight matrices and skip factors; biases are
    /// not counted.
    pub fn param_count(&self) -> usize {
        self.embedding.param_count()
            + self.head.param_count()
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.w_in.param_count()
                        + b.w_kept.len()
                        + b.w_out.param_count()
                        + b.skip.as_ref().map_or(0, OrthogonalFactor::param_count)
                })
                .sum::<usize>()
    }
}

fn rotate_row(v: &[f64], q: &Mat) -> Vec<f64> {
    let row = Mat::from_row_slice(1, v.len(), v) * q;
    row.iter().copied().collect()
}

/// Largest `||A - B||_F / ||A||_F` over the sequences.
pub fn max_relative_deviation(a: &ToyNetwork, b: &ToyNetwork, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for ids in sequences {
        let ya = a.forward(ids)?;
        let yb = b.forward(ids)?;
        let denom = ya.norm();
        let dev = (&ya - &yb).norm();
        worst = worst.max(if denom > 0.0 { dev / denom } else { dev });
    }
    Ok(worst)
}

/// `count` random sequences of length `len` over `vocab` tokens.
pub fn random_sequences<R: Rng + ?Sized>(vocab: usize, len: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..count).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect()
}
