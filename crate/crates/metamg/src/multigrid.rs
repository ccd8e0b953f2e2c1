//! The multigrid \-cycle and the outer residual-correction iteration.
//!
//! A cycle smooths on the way down, solves the coarsest level exactly, and
//! prolongates corrections back up without post-smoothing. The outer solver
//! applies the cycle to the current residual until the relative residual
//! drops below tolerance.

use crate::discretize::{
    assemble_matrix, galerkin_coarse, transfer_stencils, DenseLu, LevelOperator, PdeSpec,
};
use crate::error::{Error, Result};
use crate::grid::{conv, prolong_vc, restrict_vc, GridField, StencilKernel};
use crate::smoother::Smoother;

/// Grid hierarchy with Galerkin coarse operators and a factored coarsest level.
pub struct Hierarchy {
    /// Level operators, finest first.
    pub levels: Vec<LevelOperator>,
    /// Interior extents per level.
    pub extents: Vec<Vec<usize>>,
    pub prolong: StencilKernel,
    pub restrict: StencilKernel,
    pub coarse_lu: DenseLu,
}

impl Hierarchy {
    /// Build `num_levels` grids from a problem description.
    pub fn build(spec: &PdeSpec, num_levels: usize) -> Result<Hierarchy> {
        spec.validate()?;
        Self::from_fine(spec.fine_stencil()?, &spec.fine_extent(), num_levels)
    }

    /// Build from an explicit fine-level stencil on the given interior extent.
    pub fn from_fine(
        fine: StencilKernel,
        fine_extent: &[usize],
        num_levels: usize,
    ) -> Result<Hierarchy> {
        if num_levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "hierarchy needs at least 2 levels, got {}",
                num_levels
            )));
        }
        let dim = fine_extent.len();
        let (prolong, restrict) = transfer_stencils(dim)?;
        let mut levels = vec![LevelOperator::new(fine, 0)];
        let mut extents = vec![fine_extent.to_vec()];
        for _ in 1..num_levels {
            let prev = extents.last().unwrap();
            if prev.iter().any(|&n| n % 2 == 0 || n < 3) {
                return Err(Error::InvalidArgument(format!(
                    "cannot coarsen extent {:?}; too many levels for this mesh",
                    prev
                )));
            }
            let next: Vec<usize> = prev.iter().map(|&n| (n - 1) / 2).collect();
            let coarse = galerkin_coarse(levels.last().unwrap(), &prolong, &restrict)?;
            levels.push(coarse);
            extents.push(next);
        }
        let coarsest = levels.last().unwrap();
        let matrix = assemble_matrix(coarsest, extents.last().unwrap());
        let coarse_lu = DenseLu::factor(&matrix)?;
        Ok(Hierarchy {
            levels,
            extents,
            prolong,
            restrict,
            coarse_lu,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn fine(&self) -> &LevelOperator {
        &self.levels[0]
    }

    /// Exact solve on the coarsest level.
    pub fn coarse_solve(&self, f: &GridField) -> GridField {
        let x = self.coarse_lu.solve(&f.data);
        GridField {
            channels: 1,
            extent: f.extent.clone(),
            data: x,
        }
    }

    /// Transpose of the coarsest-level solve (for reverse-mode gradients).
    pub fn coarse_solve_transpose(&self, f: &GridField) -> GridField {
        let x = self.coarse_lu.solve_transpose(&f.data);
        GridField {
            channels: 1,
            extent: f.extent.clone(),
            data: x,
        }
    }
}

/// Supplies the smoother for each (level, step) slot of a cycle.
pub trait SmootherBank {
    fn smooth(
        &self,
        level: usize,
        step: usize,
        a: &LevelOperator,
        r: &GridField,
    ) -> Result<GridField>;
}

/// One smoother shared across all levels and steps.
pub struct UniformBank(pub Box<dyn Smoother>);

impl SmootherBank for UniformBank {
    fn smooth(
        &self,
        _level: usize,
        _step: usize,
        a: &LevelOperator,
        r: &GridField,
    ) -> Result<GridField> {
        self.0.apply(a, r)
    }
}

/// Outer-iteration configuration.
#[derive(Debug, Clone)]
pub struct MgConfig {
    /// Smoothing steps per level, finest first; the coarsest level is solved
    /// exactly and takes no entry. Missing entries repeat the last value.
    pub nu: Vec<usize>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MgConfig {
    fn default() -> Self {
        MgConfig {
            nu: vec![2, 1],
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

impl MgConfig {
    pub fn steps_at(&self, level: usize) -> usize {
        *self
            .nu
            .get(level)
            .or(self.nu.last())
            .expect("nu must be non-empty")
    }
}

/// One \-cycle: `u = Mg(f)` starting from zero on every level.
pub fn mg_cycle(
    h: &Hierarchy,
    bank: &dyn SmootherBank,
    cfg: &MgConfig,
    f: &GridField,
) -> Result<GridField> {
    cycle_level(h, bank, cfg, f, 0)
}

fn cycle_level(
    h: &Hierarchy,
    bank: &dyn SmootherBank,
    cfg: &MgConfig,
    f: &GridField,
    level: usize,
) -> Result<GridField> {
    if level == h.num_levels() - 1 {
        return Ok(h.coarse_solve(f));
    }
    let a = &h.levels[level];
    let mut u = GridField::zeros(1, &f.extent);
    for step in 0..cfg.steps_at(level) {
        let r = f.sub(&a.apply(&u)?);
        let e = bank.smooth(level, step, a, &r)?;
        u = u.add(&e);
    }
    let r = f.sub(&a.apply(&u)?);
    let f_coarse = restrict_vc(&h.restrict, &r)?;
    let e_coarse = cycle_level(h, bank, cfg, &f_coarse, level + 1)?;
    let e = prolong_vc(&h.prolong, &e_coarse)?;
    Ok(u.add(&e))
}

/// Outcome of an outer solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iters: usize,
    pub rel_residual: f64,
    pub converged: bool,
    /// Relative residual before each iteration (history[0] = 1 for f != 0).
    pub history: Vec<f64>,
}

/// Residual-correction iteration `u <- u + Mg(f - A u)` from `u = 0`.
///
/// Stops when `|f - A u| / |f|` drops below `cfg.tol`, runs at most
/// `cfg.max_iters` cycles (reported as not converged), and errors out if the
/// relative residual exceeds 1e6 or turns non-finite.
pub fn solve(
    h: &Hierarchy,
    bank: &dyn SmootherBank,
    cfg: &MgConfig,
    f: &GridField,
) -> Result<(GridField, SolveReport)> {
    let fnorm = f.norm2();
    let mut u = GridField::zeros(1, &f.extent);
    if fnorm == 0.0 {
        return Ok((
            u,
            SolveReport {
                iters: 0,
                rel_residual: 0.0,
                converged: true,
                history: vec![],
            },
        ));
    }
    let mut history = Vec::new();
    for t in 0..cfg.max_iters {
        let r = f.sub(&conv(&h.fine().stencil, &u)?);
        let rel = r.norm2() / fnorm;
        history.push(rel);
        if !rel.is_finite() || rel > 1e6 {
            return Err(Error::Diverged(rel));
        }
        if rel < cfg.tol {
            return Ok((
                u,
                SolveReport {
                    iters: t,
                    rel_residual: rel,
                    converged: true,
                    history,
                },
            ));
        }
        let e = mg_cycle(h, bank, cfg, &r)?;
        u = u.add(&e);
    }
    let r = f.sub(&conv(&h.fine().stencil, &u)?);
    let rel = r.norm2() / fnorm;
    history.push(rel);
    Ok((
        u,
        SolveReport {
            iters: cfg.max_iters,
            rel_residual: rel,
            converged: rel < cfg.tol,
            history,
        },
    ))
}
