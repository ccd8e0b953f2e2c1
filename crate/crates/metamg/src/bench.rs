//! Benchmark harness: run a solver repeatedly on sampled right-hand sides
//! and report iteration and timing statistics as CSV rows.

use crate::discretize::PdeSpec;
use crate::error::{Error, Result};
use crate::mgnet::{ConvSmootherBank, MetaDirectBank, MetaDirectConfig, MetaNnConfig, MetaScBank};
use crate::multigrid::{solve, Hierarchy, MgConfig, SmootherBank, UniformBank};
use crate::params::{Param, ParamSet};
use crate::smoother::SmootherSpec;
use crate::train::{sample_rhs, ModelKind};
use std::path::PathBuf;
use std::time::Instant;

/// Which solver a benchmark case runs: a classical smoother inside the
/// multigrid cycle, or a trained model loaded from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverSpec {
    Classic(SmootherSpec),
    Model { kind: ModelKind, path: PathBuf },
}

impl std::str::FromStr for SolverSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        for (prefix, kind) in [
            ("pde-mgnet:", ModelKind::PdeMgnet),
            ("meta-sc:", ModelKind::MetaSc),
            ("meta-direct:", ModelKind::MetaDirect),
        ] {
            if let Some(path) = s.strip_prefix(prefix) {
                if path.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "solver '{}' needs a checkpoint path",
                        s
                    )));
                }
                return Ok(SolverSpec::Model {
                    kind,
                    path: PathBuf::from(path),
                });
            }
        }
        Ok(SolverSpec::Classic(s.parse()?))
    }
}

impl std::fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverSpec::Classic(SmootherSpec::Jacobi { omega }) => write!(f, "jacobi:{}", omega),
            SolverSpec::Classic(SmootherSpec::GaussSeidel) => write!(f, "gs"),
            SolverSpec::Classic(SmootherSpec::LineGs { axis }) => write!(f, "line-gs:{}", axis),
            SolverSpec::Classic(SmootherSpec::KrylovSc { k }) => write!(f, "krylov:{}", k),
            SolverSpec::Model { kind, path } => {
                let name = match kind {
                    ModelKind::PdeMgnet => "pde-mgnet",
                    ModelKind::MetaSc => "meta-sc",
                    ModelKind::MetaDirect => "meta-direct",
                };
                write!(f, "{}:{}", name, path.display())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint metadata
// ---------------------------------------------------------------------------

const META_NAME: &str = "model.meta";

/// Embed the model architecture into the parameter set so a checkpoint is
/// self-describing. Layouts (all f64-encoded):
///   pde-mgnet:   [0, dim, taps]
///   meta-sc:     [1, dim, taps, hidden, layers, growth, stencil_len]
///   meta-direct: [2, dim, taps, hidden, stencil_len, bins...]
pub fn attach_model_meta(
    params: &mut ParamSet,
    kind: ModelKind,
    dim: usize,
    taps: usize,
    meta_sc: Option<&MetaNnConfig>,
    meta_direct: Option<&MetaDirectConfig>,
) -> Result<()> {
    let data: Vec<f64> = match kind {
        ModelKind::PdeMgnet => vec![0.0, dim as f64, taps as f64],
        ModelKind::MetaSc => {
            let c = meta_sc.ok_or_else(|| {
                Error::InvalidArgument("meta-sc metadata requires its architecture".into())
            })?;
            vec![
                1.0,
                c.dim as f64,
                c.taps as f64,
                c.hidden as f64,
                c.layers as f64,
                c.growth as f64,
                c.stencil_len as f64,
            ]
        }
        ModelKind::MetaDirect => {
            let c = meta_direct.ok_or_else(|| {
                Error::InvalidArgument("meta-direct metadata requires its architecture".into())
            })?;
            let mut v = vec![
                2.0,
                c.dim as f64,
                c.taps as f64,
                c.hidden as f64,
                c.stencil_len as f64,
            ];
            v.extend(c.pool_bins.iter().map(|&b| b as f64));
            v
        }
    };
    let n = data.len();
    params.push(Param::new(META_NAME, &[n], data)?)?;
    Ok(())
}

fn meta_values(params: &ParamSet) -> Result<Vec<usize>> {
    let p = params
        .get(META_NAME)
        .map_err(|_| Error::Checkpoint("checkpoint lacks model metadata".into()))?;
    Ok(p.data.iter().map(|&x| x as usize).collect())
}

/// Reconstruct the smoother bank for a checkpointed model on a hierarchy.
pub fn bank_from_checkpoint(
    params: &ParamSet,
    h: &Hierarchy,
    nu: &[usize],
) -> Result<Box<dyn SmootherBank>> {
    let meta = meta_values(params)?;
    match meta.first() {
        Some(0) => {
            let (dim, taps) = (meta[1], meta[2]);
            let mut weights = ParamSet::new();
            for p in &params.params {
                if p.name != META_NAME {
                    weights.push(p.clone())?;
                }
            }
            Ok(Box::new(ConvSmootherBank::from_params(weights, dim, taps, nu)))
        }
        Some(1) => {
            let cfg = MetaNnConfig {
                dim: meta[1],
                taps: meta[2],
                hidden: meta[3],
                layers: meta[4],
                growth: meta[5],
                stencil_len: meta[6],
            };
            Ok(Box::new(MetaScBank::new(cfg, params.clone(), h)?))
        }
        Some(2) => {
            let cfg = MetaDirectConfig {
                dim: meta[1],
                taps: meta[2],
                hidden: meta[3],
                stencil_len: meta[4],
                pool_bins: meta[5..].to_vec(),
            };
            Ok(Box::new(MetaDirectBank {
                cfg,
                params: params.clone(),
            }))
        }
        _ => Err(Error::Checkpoint("unknown model code in metadata".into())),
    }
}

/// Checkpoint kind code, for validating a `kind:path` solver string.
pub fn checkpoint_kind(params: &ParamSet) -> Result<ModelKind> {
    match meta_values(params)?.first() {
        Some(0) => Ok(ModelKind::PdeMgnet),
        Some(1) => Ok(ModelKind::MetaSc),
        Some(2) => Ok(ModelKind::MetaDirect),
        _ => Err(Error::Checkpoint("unknown model code in metadata".into())),
    }
}

// ---------------------------------------------------------------------------
// Cases and rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchCase {
    pub spec: PdeSpec,
    pub solver: SolverSpec,
    pub levels: usize,
    pub nu: Vec<usize>,
    pub repeats: usize,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub family: String,
    pub eps: f64,
    pub theta: f64,
    pub n: usize,
    pub solver: String,
    pub iters_mean: f64,
    pub iters_std: f64,
    pub time_mean: f64,
    pub time_std: f64,
    pub converged: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run one case: `repeats` solves on distinct sampled right-hand sides.
/// Non-convergence (iteration cap or residual blow-up) is recorded at the
/// iteration cap with `converged = false`, never dropped.
pub fn run_case(case: &BenchCase, seed: u64) -> Result<BenchRow> {
    case.spec.validate()?;
    let h = Hierarchy::build(&case.spec, case.levels)?;
    let bank: Box<dyn SmootherBank> = match &case.solver {
        SolverSpec::Classic(s) => Box::new(UniformBank(s.build()?)),
        SolverSpec::Model { kind, path } => {
            let params = crate::checkpoint::load(path)?;
            let found = checkpoint_kind(&params)?;
            if found != *kind {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} holds a different model kind",
                    path.display()
                )));
            }
            bank_from_checkpoint(&params, &h, &case.nu)?
        }
    };
    let cfg = MgConfig {
        nu: case.nu.clone(),
        tol: case.tol,
        max_iters: case.max_iters,
    };
    let extent = case.spec.fine_extent();
    let mut iters = Vec::with_capacity(case.repeats);
    let mut times = Vec::with_capacity(case.repeats);
    let mut all_converged = true;
    for rep in 0..case.repeats {
        let f = sample_rhs(&extent, seed, u64::MAX - 1, rep as u64);
        let start = Instant::now();
        match solve(&h, bank.as_ref(), &cfg, &f) {
            Ok((_, rep_out)) => {
                times.push(start.elapsed().as_secs_f64());
                iters.push(rep_out.iters as f64);
                if !rep_out.converged {
                    all_converged = false;
                }
            }
            Err(Error::Diverged(_)) | Err(Error::SingularSubspace) => {
                times.push(start.elapsed().as_secs_f64());
                iters.push(case.max_iters as f64);
                all_converged = false;
            }
            Err(e) => return Err(e),
        }
    }
    let (iters_mean, iters_std) = mean_std(&iters);
    let (time_mean, time_std) = mean_std(&times);
    let (family, eps, theta) = match &case.spec {
        PdeSpec::Aniso2d { eps, theta, .. } => ("aniso2d".to_string(), *eps, *theta),
        // 3D rows reuse the eps/theta columns for (eps1, eps2) with eps0 = 1
        PdeSpec::Aniso3d { eps, .. } => ("aniso3d".to_string(), eps[1] / eps[0], eps[2] / eps[0]),
    };
    Ok(BenchRow {
        family,
        eps,
        theta,
        n: case.spec.cells(),
        solver: case.solver.to_string(),
        iters_mean,
        iters_std,
        time_mean,
        time_std,
        converged: all_converged,
    })
}

pub const CSV_HEADER: &str =
    "family,eps,theta,n,solver,iters_mean,iters_std,time_mean,time_std,converged";

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], out: &mut W) -> Result<()> {
    writeln!(out, "{}", CSV_HEADER)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{}",
            r.family,
            r.eps,
            r.theta,
            r.n,
            r.solver,
            r.iters_mean,
            r.iters_std,
            r.time_mean,
            r.time_std,
            r.converged
        )?;
    }
    Ok(())
}
