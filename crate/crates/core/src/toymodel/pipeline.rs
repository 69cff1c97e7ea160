//! Calibration collection and per-position compression of a toy network.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{max_relative_deviation, Activation, ToyBlock, ToyNetwork};
use crate::als::{als_frobenius, als_weighted, compute_lambda_in, AlsOptions, LayerProblem, SolveReport};
use crate::calib::{correlation_root, count_tokens, embedding_weight, CorrelationAccumulator, EmbeddingWeighting, TokenFrequency};
use crate::config::{JobConfig, LambdaMode, Role};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{random_orthogonal, Mat, Vector};
use crate::par::{self, Exec};
use crate::procrustes::{OrthogonalFactor, WoppOptions};
use crate::structured::{project, StructureSpec, Structured};
use crate::tensorfile::{read_matrix, write_matrix};
use crate::weighted::WeightedOptions;

/// Correlation statistics of a network on calibration sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub tokens: TokenFrequency,
    /// Normalized stream at positions `0..=L`.
    pub stream: Vec<CorrelationAccumulator>,
    /// Activation outputs of blocks `1..=L`.
    pub activations: Vec<CorrelationAccumulator>,
}

impl Calibration {
    fn empty(net: &ToyNetwork) -> Self {
        Self {
            tokens: TokenFrequency { counts: vec![0; net.vocab()] },
            stream: (0..=net.depth()).map(|_| CorrelationAccumulator::new(net.hidden())).collect(),
            activations: net.blocks.iter().map(|b| CorrelationAccumulator::new(b.activation_width())).collect(),
        }
    }

    fn merge(&mut self, other: &Self) -> Result<()> {
        if other.tokens.vocab() != self.tokens.vocab()
            || other.stream.len() != self.stream.len()
            || other.activations.len() != self.activations.len()
        {
            return Err(shape_err("calibration statistics come from different networks"));
        }
        for (a, b) in self.tokens.counts.iter_mut().zip(&other.tokens.counts) {
            *a += b;
        }
        for (a, b) in self.stream.iter_mut().zip(&other.stream) {
            a.merge(b)?;
        }
        for (a, b) in self.activations.iter_mut().zip(&other.activations) {
            a.merge(b)?;
        }
        Ok(())
    }

    /// Correlation of the one-hot embedding inputs: the token histogram on
    /// the diagonal.
    pub fn embedding_correlation(&self) -> Mat {
        Mat::from_diagonal(&Vector::from_iterator(
            self.tokens.vocab(),
            self.tokens.counts.iter().map(|&c| c as f64),
        ))
    }

    /// Writes `tokens.json` plus the sum `S` and root `R` of every
    /// accumulator as `stream_<p>_{sum,root}.pkt` and
    /// `act_<l>_{sum,root}.pkt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("tokens.json"), serde_json::to_vec(&self.tokens)?)?;
        let groups = [("stream", &self.stream, 0usize), ("act", &self.activations, 1)];
        for (name, accs, first) in groups {
            for (i, acc) in accs.iter().enumerate() {
                let stem = format!("{}_{}", name, i + first);
                write_matrix(&dir.join(format!("{}_sum.pkt", stem)), acc.sum())?;
                write_matrix(&dir.join(format!("{}_root.pkt", stem)), &correlation_root(acc.sum())?)?;
            }
        }
        fs::write(dir.join("counts.json"), serde_json::to_vec(&self.row_counts())?)?;
        Ok(())
    }

    fn row_counts(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.stream.iter().map(CorrelationAccumulator::count).collect(),
            self.activations.iter().map(CorrelationAccumulator::count).collect(),
        )
    }

    pub fn load(dir: &Path, net: &ToyNetwork) -> Result<Self> {
        let tokens: TokenFrequency = serde_json::from_slice(&fs::read(dir.join("tokens.json"))?)?;
        let (stream_rows, act_rows): (Vec<usize>, Vec<usize>) =
            serde_json::from_slice(&fs::read(dir.join("counts.json"))?)?;
        let mut out = Self::empty(net);
        if tokens.vocab() != net.vocab() || stream_rows.len() != out.stream.len() || act_rows.len() != out.activations.len() {
            return Err(shape_err("calibration does not match the network"));
        }
        out.tokens = tokens;
        let groups = [("stream", &mut out.stream, &stream_rows, 0usize), ("act", &mut out.activations, &act_rows, 1)];
        for (name, accs, rows, first) in groups {
            for (i, acc) in accs.iter_mut().enumerate() {
                let sum = read_matrix(&dir.join(format!("{}_{}_sum.pkt", name, i + first)))?;
                *acc = CorrelationAccumulator::from_sum(sum, rows[i])?;
                if acc.dim() != if name == "stream" { net.hidden() } else { net.blocks[i].activation_width() } {
                    return Err(shape_err("calibration dimension does not match the network"));
                }
            }
        }
        Ok(out)
    }
}

/// Runs every sequence through `net` and accumulates the correlations of
/// the inputs of each weight matrix. Sequences are processed in parallel
/// and merged in sequence order.
pub fn collect_calibration(net: &ToyNetwork, sequences: &[Vec<usize>], exec: Exec) -> Result<Calibration> {
    net.validate()?;
    let parts = par::map(exec, sequences, |_, ids| -> Result<Calibration> {
        let trace = net.forward_trace(ids)?;
        let mut part = Calibration::empty(net);
        part.tokens = count_tokens(ids, net.vocab())?;
        for (acc, x) in part.stream.iter_mut().zip(&trace.normalized) {
            acc.accumulate(x)?;
        }
        for (acc, x) in part.activations.iter_mut().zip(&trace.activations) {
            acc.accumulate(x)?;
        }
        Ok(part)
    });
    let mut total = Calibration::empty(net);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

/// Structures and `lambda_in` for one stream position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionPlan {
    pub spec_out: StructureSpec,
    pub spec_in: StructureSpec,
    /// Fixed `lambda_in`; computed from the plan's mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_in: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    /// One entry per stream position `0..=L`.
    pub positions: Vec<PositionPlan>,
    pub lambda_mode: LambdaMode,
    pub options: AlsOptions,
    pub embedding_weighting: EmbeddingWeighting,
    pub exclude_values: bool,
}

impl CompressionPlan {
    /// Resolves the per-role structures of `cfg` against the shapes of
    /// `net`.
    pub fn from_config(cfg: &JobConfig, net: &ToyNetwork) -> Result<Self> {
        cfg.validate()?;
        let positions = (0..=net.depth())
            .map(|p| {
                let (out_role, w_out) = writer(net, p);
                let (in_role, w_in, _) = reader(net, p, cfg.exclude_values);
                Ok(PositionPlan {
                    spec_out: cfg.structure.get(out_role).resolve(out_role, w_out.nrows(), w_out.ncols())?,
                    spec_in: cfg.structure.get(in_role).resolve(in_role, w_in.nrows(), w_in.ncols())?,
                    lambda_in: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            positions,
            lambda_mode: cfg.lambda_in,
            options: AlsOptions {
                frobenius_iters: cfg.frobenius_iters,
                weighted_iters: cfg.weighted_iters,
                projection: WeightedOptions { iters: cfg.proj_iters, ..Default::default() },
                wopp: WoppOptions { cg_iters: cfg.cg_iters, ..Default::default() },
            },
            embedding_weighting: cfg.embedding_weighting,
            exclude_values: cfg.exclude_values,
        })
    }

    /// The same structure everywhere, with default budgets.
    pub fn uniform(net: &ToyNetwork, spec_out: StructureSpec, spec_in: StructureSpec) -> Self {
        Self {
            positions: (0..=net.depth())
                .map(|_| PositionPlan { spec_out: spec_out.clone(), spec_in: spec_in.clone(), lambda_in: None })
                .collect(),
            lambda_mode: LambdaMode::One,
            options: AlsOptions::default(),
            embedding_weighting: EmbeddingWeighting::SqrtD1,
            exclude_values: true,
        }
    }

    fn validate(&self, net: &ToyNetwork) -> Result<()> {
        if self.positions.len() != net.depth() + 1 {
            return Err(shape_err(format!(
                "plan has {} positions, network has {}",
                self.positions.len(),
                net.depth() + 1
            )));
        }
        for (p, plan) in self.positions.iter().enumerate() {
            let (_, w_out) = writer(net, p);
            let (_, w_in, _) = reader(net, p, self.exclude_values);
            plan.spec_out.validate(w_out.nrows(), w_out.ncols())?;
            plan.spec_in.validate(w_in.nrows(), w_in.ncols())?;
            if plan.lambda_in.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
                return Err(Error::InvalidConfig(format!("position {}: lambda_in must be non-negative", p)));
            }
        }
        Ok(())
    }
}

/// The matrix writing stream position `p`.
fn writer(net: &ToyNetwork, p: usize) -> (Role, Mat) {
    if p == 0 {
        (Role::Embedding, net.embedding.materialize())
    } else {
        (Role::Out, net.blocks[p - 1].w_out.materialize())
    }
}

/// The projected part of the matrix reading position `p` and the columns
/// kept dense.
fn reader(net: &ToyNetwork, p: usize, exclude_values: bool) -> (Role, Mat, Mat) {
    if p == net.depth() {
        return (Role::Head, net.head.materialize(), Mat::zeros(net.hidden(), 0));
    }
    let b = &net.blocks[p];
    let full = b.input_map();
    let width = full.ncols();
    let keep = if exclude_values && b.activation == Activation::Attention {
        width / 3
    } else {
        b.w_kept.ncols()
    };
    (
        Role::In,
        full.columns(0, width - keep).into_owned(),
        full.columns(width - keep, keep).into_owned(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub position: usize,
    pub out_role: Role,
    pub in_role: Role,
    pub spec_out: StructureSpec,
    pub spec_in: StructureSpec,
    pub lambda_in: f64,
    pub frobenius: Option<SolveReport>,
    pub weighted: Option<SolveReport>,
    pub params_out: usize,
    pub params_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PositionReport {
    /// A solve failed or a rotation update's line search gave up early.
    pub fn flagged(&self) -> bool {
        self.error.is_some() || self.weighted.as_ref().is_some_and(|w| w.line_search_failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub positions: Vec<PositionReport>,
    pub original_params: usize,
    /// Structured factors, dense kept columns and skew skip factors.
    pub compressed_params: usize,
    pub skip_params: usize,
    /// `compressed_params / original_params`.
    pub param_fraction: f64,
    /// Largest relative logit deviation from the input network on the
    /// held-out sequences.
    pub holdout_deviation: Option<f64>,
    /// Composed rotation of every stream position.
    #[serde(skip)]
    pub rotations: Vec<Mat>,
}

impl CompressionReport {
    pub fn flagged(&self) -> bool {
        self.positions.iter().any(PositionReport::flagged)
    }
}

struct Outcome {
    q: Mat,
    w_out_hat: Structured,
    w_in_hat: Structured,
    report: PositionReport,
}

fn diag_of(v: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(v))
}

fn solve_position(
    p: usize,
    net: &ToyNetwork,
    plan: &CompressionPlan,
    calib: &Calibration,
    diag: &[f64],
) -> Outcome {
    let pp = &plan.positions[p];
    let (out_role, w_out) = writer(net, p);
    let (in_role, w_in, _) = reader(net, p, plan.exclude_values);
    let n = net.hidden();
    let mut report = PositionReport {
        position: p,
        out_role,
        in_role,
        spec_out: pp.spec_out.clone(),
        spec_in: pp.spec_in.clone(),
        lambda_in: 0.0,
        frobenius: None,
        weighted: None,
        params_out: 0,
        params_in: 0,
        error: None,
    };
    let mut outcome = Outcome {
        q: Mat::identity(n, n),
        w_out_hat: Structured::Dense(w_out.clone()),
        w_in_hat: Structured::Dense(w_in.clone()),
        report: report.clone(),
    };

    let mut run = || -> Result<()> {
        let depth = net.depth();
        let frob_problem = LayerProblem::unweighted(w_out.clone(), w_in.clone(), pp.spec_out.clone(), pp.spec_in.clone())?
            .with_diagonal_weights((p == 0).then(|| diag.to_vec()), (p == depth).then(|| diag.to_vec()))?;
        let frob = als_frobenius(&frob_problem, plan.options.frobenius_iters, &plan.options.projection)?;
        report.frobenius = Some(frob.report.clone());
        outcome.q = frob.q.clone();
        outcome.w_out_hat = frob.w_out_hat.clone();
        outcome.w_in_hat = frob.w_in_hat.clone();

        let q = &frob.q;
        let x_out = if p == 0 { diag_of(diag) } else { correlation_root(calib.activations[p - 1].sum())? };
        let x_in = correlation_root(calib.stream[p].sum())?;
        let x_in_rot = q.transpose() * &x_in * q;
        let mut problem = LayerProblem::new(
            &w_out * q,
            q.transpose() * &w_in,
            x_out,
            (&x_in_rot + x_in_rot.transpose()) * 0.5,
            1.0,
            pp.spec_out.clone(),
            pp.spec_in.clone(),
        )?;
        problem.lambda_in = match pp.lambda_in {
            Some(l) => l,
            None => compute_lambda_in(&problem, plan.lambda_mode)?,
        };
        report.lambda_in = problem.lambda_in;
        let weighted = als_weighted(
            &problem,
            plan.options.weighted_iters,
            &plan.options,
            Some((&frob.w_out_hat, &frob.w_in_hat)),
        )?;
        report.weighted = Some(weighted.report.clone());
        outcome.q = q * &weighted.q;
        outcome.w_out_hat = weighted.w_out_hat;
        outcome.w_in_hat = weighted.w_in_hat;
        Ok(())
    };
    if let Err(e) = run() {
        log::warn!("position {}: {}", p, e);
        report.error = Some(e.to_string());
    }
    report.params_out = outcome.w_out_hat.param_count();
    report.params_in = outcome.w_in_hat.param_count();
    outcome.report = report;
    outcome
}

/// Compresses every stream position independently: Frobenius ALS from the
/// identity, then weighted ALS on the rotated weights with the rotated
/// calibration statistics. The returned network holds the structured
/// factors, the rotated dense kept columns and skip matrices in skew form.
/// A position whose solve fails keeps its last good rotation and weights
/// and is reported with an error.
pub fn compress_network(
    net: &ToyNetwork,
    plan: &CompressionPlan,
    calib: &Calibration,
    holdout: &[Vec<usize>],
    exec: Exec,
) -> Result<(ToyNetwork, CompressionReport)> {
    net.validate()?;
    plan.validate(net)?;
    if calib.tokens.vocab() != net.vocab() || calib.stream.len() != net.depth() + 1 {
        return Err(shape_err("calibration does not match the network"));
    }
    let diag = embedding_weight(&calib.tokens, plan.embedding_weighting);
    let positions: Vec<usize> = (0..=net.depth()).collect();
    let outcomes = par::map(exec, &positions, |_, &p| solve_position(p, net, plan, calib, &diag));

    let qs: Vec<&Mat> = outcomes.iter().map(|o| &o.q).collect();
    let mut blocks = Vec::with_capacity(net.depth());
    let mut skip_params = 0;
    for (i, b) in net.blocks.iter().enumerate() {
        let (before, after) = (qs[i], qs[i + 1]);
        let (_, _, kept) = reader(net, i, plan.exclude_values);
        let skip = match &b.skip {
            Some(s) => before.transpose() * s.to_dense()? * after,
            None => before.transpose() * after,
        };
        let skip = OrthogonalFactor::skew_from_dense(&skip)?;
        skip_params += skip.param_count();
        blocks.push(ToyBlock {
            activation: b.activation,
            w_in: outcomes[i].w_in_hat.clone(),
            w_kept: before.transpose() * kept,
            b_in: b.b_in.clone(),
            w_out: outcomes[i + 1].w_out_hat.clone(),
            b_out: b.b_out.as_ref().map(|v| super::rotate_row(v, after)),
            skip: Some(skip),
        });
    }
    let compressed = ToyNetwork {
        embedding: outcomes[0].w_out_hat.clone(),
        blocks,
        head: outcomes[net.depth()].w_in_hat.clone(),
    };
    compressed.validate()?;
    let holdout_deviation = if holdout.is_empty() {
        None
    } else {
        Some(max_relative_deviation(net, &compressed, holdout)?)
    };
    let original_params = net.param_count();
    let compressed_params = compressed.param_count();
    let rotations = outcomes.iter().map(|o| o.q.clone()).collect();
    let report = CompressionReport {
        positions: outcomes.into_iter().map(|o| o.report).collect(),
        original_params,
        compressed_params,
        skip_params,
        param_fraction: compressed_params as f64 / original_params as f64,
        holdout_deviation,
        rotations,
    };
    Ok((compressed, report))
}

/// A network whose weights at every position are structured matrices
/// composed with a random rotation, so that the plan's classes fit them
/// exactly after rotation.
pub fn planted_network<R: Rng + ?Sized>(net: &ToyNetwork, plan: &CompressionPlan, rng: &mut R) -> Result<ToyNetwork> {
    plan.validate(net)?;
    let n = net.hidden();
    let qs: Vec<Mat> = (0..=net.depth()).map(|_| random_orthogonal(n, rng)).collect();
    let mut out = net.clone();
    for (p, pp) in plan.positions.iter().enumerate() {
        let (_, w_out) = writer(net, p);
        let planted_out = project(&w_out, &pp.spec_out)?.materialize() * qs[p].transpose();
        if p == 0 {
            out.embedding = Structured::Dense(planted_out);
        } else {
            out.blocks[p - 1].w_out = Structured::Dense(planted_out);
        }
        let (_, w_in, kept) = reader(net, p, plan.exclude_values);
        let planted_in = &qs[p] * project(&w_in, &pp.spec_in)?.materialize();
        if p == net.depth() {
            out.head = Structured::Dense(planted_in);
        } else {
            let b = &mut out.blocks[p];
            b.w_in = Structured::Dense(crate::linalg::hstack(&[&planted_in, &kept]));
            b.w_kept = Mat::zeros(n, 0);
        }
    }
    out.validate()?;
    Ok(out)
}
