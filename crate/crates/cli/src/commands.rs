use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pkit::als::{als_frobenius, slicegpt_equivalence_check, AlsOptions, LayerProblem};
use pkit::calib::{read_batches, read_token_stream};
use pkit::config::{JobConfig, Role};
use pkit::linalg::{random_normal, random_orthogonal};
use pkit::par::{self, Exec};
use pkit::report::to_json_bytes;
use pkit::structured::{project, BlockZeroShape, StructureSpec, ZeroPattern};
use pkit::toymodel::{
    choose_gs_shape, choose_kron_shape, collect_calibration, compress_network, default_gs_blocks,
    kron_param_fraction, load_network, max_relative_deviation, random_sequences, save_network, Calibration,
    CompressionPlan, CompressionReport, NetShape, ToyNetwork,
};
use pkit::{Error, Mat};

use crate::output::{emit, write_dir};
use crate::{CalibrateArgs, Class, CompareRotatedArgs, CompressArgs, GenNetArgs, ReportArgs, SliceEquivArgs, VerifyArgs};

pub enum Status {
    Ok,
    /// The command ran but a numerical check failed.
    Flagged(String),
}

/// 2 for numerical failures inside the library, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::NotOrthogonal(_)
            | Error::MinusOneEigenvalue
            | Error::NotPsd(_)
            | Error::NonFinite(_)
            | Error::DivisionByZero(_)
            | Error::ZeroVector,
        ) => 2,
        _ => 1,
    }
}

const REPORT_FILE: &str = "report.json";

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn load_net(dir: &Path) -> Result<ToyNetwork> {
    load_network(dir).with_context(|| format!("loading network from {}", dir.display()))
}

pub fn gen_net(a: &GenNetArgs) -> Result<Status> {
    if a.vocab == 0 || a.hidden == 0 || a.inner == 0 {
        bail!("--vocab, --hidden and --inner must be positive");
    }
    let mut shape = NetShape::alternating(a.vocab, a.hidden, a.inner, a.pairs);
    shape.biases = !a.no_biases;
    let net = ToyNetwork::random(&shape, &mut rng(a.seed));
    write_dir(&a.out, |dir| Ok(save_network(dir, &net)?))?;
    info!("wrote {} blocks to {}", net.depth(), a.out.display());
    Ok(Status::Ok)
}

fn token_rows(m: &Mat) -> Result<Vec<Vec<usize>>> {
    m.row_iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                        Ok(v as usize)
                    } else {
                        bail!("batch entry {} is not a token id", v)
                    }
                })
                .collect()
        })
        .collect()
}

fn calibration_sequences(a: &CalibrateArgs, vocab: usize) -> Result<Vec<Vec<usize>>> {
    if a.len == 0 {
        bail!("--len must be positive");
    }
    if let Some(path) = &a.tokens {
        let ids = read_token_stream(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(ids.chunks(a.len).map(<[usize]>::to_vec).collect());
    }
    if let Some(dir) = &a.batches {
        let mut seqs = Vec::new();
        for m in read_batches(dir).with_context(|| format!("reading batches from {}", dir.display()))? {
            seqs.extend(token_rows(&m)?);
        }
        return Ok(seqs);
    }
    Ok(random_sequences(vocab, a.len, a.samples, &mut rng(a.seed)))
}

pub fn calibrate(a: &CalibrateArgs) -> Result<Status> {
    let net = load_net(&a.net)?;
    let seqs = calibration_sequences(a, net.vocab())?;
    if seqs.is_empty() {
        bail!("no calibration sequences");
    }
    let calib = collect_calibration(&net, &seqs, Exec::default())?;
    write_dir(&a.out, |dir| Ok(calib.save(dir)?))?;
    info!("accumulated {} sequences into {}", seqs.len(), a.out.display());
    Ok(Status::Ok)
}

pub fn compress(a: &CompressArgs) -> Result<Status> {
    let mut cfg = JobConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.fast {
        cfg = cfg.fast();
    }
    let net = load_net(&a.net)?;
    let plan = CompressionPlan::from_config(&cfg, &net)?;
    let mut g = rng(cfg.seed);
    let calib = match &a.calib {
        Some(dir) => Calibration::load(dir, &net).with_context(|| format!("loading {}", dir.display()))?,
        None => {
            let seqs = random_sequences(net.vocab(), a.len, a.samples, &mut g);
            collect_calibration(&net, &seqs, Exec::default())?
        }
    };
    let holdout = random_sequences(net.vocab(), a.len, a.holdout, &mut g);
    let (compressed, report) =
        par::with_jobs(a.jobs, || compress_network(&net, &plan, &calib, &holdout, Exec::default()))?;
    let json = to_json_bytes(&report)?;
    write_dir(&a.out, |dir| {
        save_network(dir, &compressed)?;
        std::fs::write(dir.join(REPORT_FILE), &json)?;
        Ok(())
    })?;
    info!("parameter fraction {:.4}", report.param_fraction);
    if report.flagged() {
        let bad: Vec<String> = report.positions.iter().filter(|p| p.flagged()).map(|p| p.position.to_string()).collect();
        return Ok(Status::Flagged(format!("flagged positions: {}", bad.join(", "))));
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct InvarianceReport {
    max_relative_deviation: f64,
    tol: f64,
    sequences: usize,
    pass: bool,
}

pub fn verify_invariance(a: &VerifyArgs) -> Result<Status> {
    let net = load_net(&a.net)?;
    let mut g = rng(a.seed);
    let other = match &a.against {
        Some(dir) => load_net(dir)?,
        None => {
            let qs: Vec<Mat> = (0..=net.depth()).map(|_| random_orthogonal(net.hidden(), &mut g)).collect();
            net.rotate(&qs)?
        }
    };
    if other.vocab() != net.vocab() {
        bail!("networks have different vocabularies");
    }
    let seqs = random_sequences(net.vocab(), a.len, a.samples, &mut g);
    let dev = max_relative_deviation(&net, &other, &seqs)?;
    let pass = dev <= a.tol;
    let r = InvarianceReport { max_relative_deviation: dev, tol: a.tol, sequences: seqs.len(), pass };
    emit(None, &to_json_bytes(&r)?)?;
    if pass {
        Ok(Status::Ok)
    } else {
        Ok(Status::Flagged(format!("deviation {:e} exceeds {:e}", dev, a.tol)))
    }
}

/// Closest Kronecker split `(r, q)` with `r < q` to the kept fraction.
fn kron_spec(n: usize, keep: f64) -> Result<StructureSpec> {
    let mut best: Option<(f64, usize, usize)> = None;
    for q in (2..=n).filter(|q| n % q == 0) {
        let r = ((keep * q as f64).round() as usize).clamp(1, q - 1);
        let miss = (kron_param_fraction(n, n, r, q) - keep).abs();
        if best.is_none_or(|(m, _, _)| miss < m) {
            best = Some((miss, r, q));
        }
    }
    let (_, r, q) = best.context("no Kronecker split for this size")?;
    Ok(StructureSpec::Kron(choose_kron_shape(n, n, r, q, Role::Out.rotated_on_right())?))
}

fn class_spec(class: Class, n: usize, ratio: f64) -> Result<StructureSpec> {
    if !(0.0..1.0).contains(&ratio) {
        bail!("--ratio must lie in [0, 1)");
    }
    let keep = 1.0 - ratio;
    Ok(match class {
        Class::Kron => kron_spec(n, keep)?,
        Class::Gs => {
            let (kl, kr) = default_gs_blocks(Role::Out, n, n);
            StructureSpec::Gs(choose_gs_shape(n, n, kl, kr, keep)?)
        }
        Class::Blockzero => {
            let d = ((keep * n as f64).round() as usize).clamp(1, n - 1);
            StructureSpec::Blockzero(BlockZeroShape { d, pattern: ZeroPattern::ZeroCols })
        }
    })
}

#[derive(Serialize)]
struct CompareRow {
    layer: usize,
    err_direct: String,
    err_rotated: String,
}

pub fn compare_rotated(a: &CompareRotatedArgs) -> Result<Status> {
    if a.n < 2 {
        bail!("--n must be at least 2");
    }
    let spec = class_spec(a.class, a.n, a.ratio)?;
    let mut g = rng(a.seed);
    let planted: Vec<Mat> = (0..a.layers)
        .map(|_| -> Result<Mat> {
            let s = project(&random_normal(a.n, a.n, &mut g), &spec)?.materialize();
            Ok(s * random_orthogonal(a.n, &mut g).transpose())
        })
        .collect::<Result<_>>()?;
    let opts = AlsOptions::default();
    let rows = par::map(Exec::default(), &planted, |_, w| -> Result<(f64, f64)> {
        let direct = (w - project(w, &spec)?.materialize()).norm() / w.norm();
        let p = LayerProblem::unweighted(w.clone(), Mat::zeros(a.n, 0), spec.clone(), StructureSpec::None)?;
        let sol = als_frobenius(&p, a.iters, &opts.projection)?;
        Ok((direct, sol.report.relative_residual))
    });
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut worse = Vec::new();
    for (layer, row) in rows.into_iter().enumerate() {
        let (direct, rotated) = row?;
        if rotated >= direct {
            worse.push(layer.to_string());
        }
        csv.serialize(CompareRow {
            layer,
            err_direct: format!("{:.16e}", direct),
            err_rotated: format!("{:.16e}", rotated),
        })?;
    }
    emit(a.out.as_deref(), &csv.into_inner()?)?;
    if worse.is_empty() {
        Ok(Status::Ok)
    } else {
        Ok(Status::Flagged(format!("rotation did not help on layers {}", worse.join(", "))))
    }
}

pub fn slice_equiv(a: &SliceEquivArgs) -> Result<Status> {
    if a.d > a.n {
        bail!("--d must not exceed --n");
    }
    let mut g = rng(a.seed);
    let x_out = random_normal(a.n, a.n, &mut g);
    let w_out = random_normal(a.n, a.n, &mut g);
    let x_skip = random_normal(a.n, a.n, &mut g);
    let r = slicegpt_equivalence_check(&x_out, &w_out, &x_skip, a.d, a.iters, &AlsOptions::default())?;
    emit(a.out.as_deref(), &to_json_bytes(&r)?)?;
    if r.gap <= a.tol {
        Ok(Status::Ok)
    } else {
        Ok(Status::Flagged(format!("gap {:e} exceeds {:e}", r.gap, a.tol)))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.3e}", x))
}

pub fn report(a: &ReportArgs) -> Result<Status> {
    let path = a.out.join(REPORT_FILE);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let r: CompressionReport = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if a.json {
        emit(None, &to_json_bytes(&r)?)?;
    } else {
        let mut text = String::from("position  out        in         frobenius  weighted   params      status\n");
        for p in &r.positions {
            let status = match (&p.error, p.flagged()) {
                (Some(e), _) => format!("error: {}", e),
                (None, true) => "flagged".into(),
                _ => "ok".into(),
            };
            text += &format!(
                "{:<9} {:<10} {:<10} {:<10} {:<10} {:<11} {}\n",
                p.position,
                format!("{:?}", p.out_role).to_lowercase(),
                format!("{:?}", p.in_role).to_lowercase(),
                fmt_opt(p.frobenius.as_ref().map(|s| s.relative_residual)),
                fmt_opt(p.weighted.as_ref().map(|s| s.relative_residual)),
                p.params_out + p.params_in,
                status
            );
        }
        text += &format!(
            "parameters {} -> {} (skip {}), fraction {:.4}, held-out deviation {}\n",
            r.original_params,
            r.compressed_params,
            r.skip_params,
            r.param_fraction,
            fmt_opt(r.holdout_deviation)
        );
        emit(None, text.as_bytes())?;
    }
    if r.flagged() {
        return Ok(Status::Flagged("report contains flagged positions".into()));
    }
    Ok(Status::Ok)
}
