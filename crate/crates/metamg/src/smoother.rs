//! Smoothers: damped Jacobi, stencil-based Gauss-Seidel, line Gauss-Seidel,
//! and subspace-correction smoothers built from explicit basis fields.
//!
//! Every smoother maps a residual to an error correction, `e ≈ A^{-1} r`,
//! using only stencil applications and small dense solves.

use crate::discretize::LevelOperator;
use crate::error::{Error, Result};
use crate::grid::{GridField, StencilKernel};

/// Smoother selection for solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum SmootherSpec {
    Jacobi { omega: f64 },
    GaussSeidel,
    LineGs { axis: usize },
    KrylovSc { k: usize },
}

impl SmootherSpec {
    pub fn build(&self) -> Result<Box<dyn Smoother>> {
        Ok(match self {
            SmootherSpec::Jacobi { omega } => {
                if !(*omega > 0.0 && *omega <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "jacobi damping must be in (0,1], got {}",
                        omega
                    )));
                }
                Box::new(JacobiSmoother { omega: *omega })
            }
            SmootherSpec::GaussSeidel => Box::new(GaussSeidelSmoother),
            SmootherSpec::LineGs { axis } => Box::new(LineGsSmoother { axis: *axis }),
            SmootherSpec::KrylovSc { k } => {
                if *k == 0 {
                    return Err(Error::InvalidArgument("krylov order must be >= 1".into()));
                }
                Box::new(KrylovScSmoother { k: *k })
            }
        })
    }
}

impl std::str::FromStr for SmootherSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        // forms: jacobi | jacobi:0.8 | gs | line-gs | line-gs:0 | krylov | krylov:9
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        Ok(match name {
            "jacobi" => SmootherSpec::Jacobi {
                omega: match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad damping '{}'", a)))?,
                    None => 2.0 / 3.0,
                },
            },
            "gs" => SmootherSpec::GaussSeidel,
            "line-gs" => SmootherSpec::LineGs {
                axis: match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad axis '{}'", a)))?,
                    None => 0,
                },
            },
            "krylov" => SmootherSpec::KrylovSc {
                k: match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad order '{}'", a)))?,
                    None => 9,
                },
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown smoother '{}' (expected jacobi|gs|line-gs|krylov)",
                    s
                )))
            }
        })
    }
}

/// A residual-to-correction map tied to a level operator.
pub trait Smoother {
    fn apply(&self, a: &LevelOperator, r: &GridField) -> Result<GridField>;
}

pub struct JacobiSmoother {
    pub omega: f64,
}

pub struct GaussSeidelSmoother;

pub struct LineGsSmoother {
    pub axis: usize,
}

pub struct KrylovScSmoother {
    pub k: usize,
}

impl Smoother for JacobiSmoother {
    fn apply(&self, a: &LevelOperator, r: &GridField) -> Result<GridField> {
        Ok(jacobi_apply(&a.stencil, r, self.omega))
    }
}

impl Smoother for GaussSeidelSmoother {
    fn apply(&self, a: &LevelOperator, r: &GridField) -> Result<GridField> {
        gs_apply(&a.stencil, r)
    }
}

impl Smoother for LineGsSmoother {
    fn apply(&self, a: &LevelOperator, r: &GridField) -> Result<GridField> {
        line_gs_apply(&a.stencil, r, self.axis)
    }
}

impl Smoother for KrylovScSmoother {
    fn apply(&self, a: &LevelOperator, r: &GridField) -> Result<GridField> {
        krylov_sc_apply(a, r, self.k)
    }
}

/// Damped Jacobi: `e = omega * r / K[0]` (pointwise division by the center tap).
pub fn jacobi_apply(a: &StencilKernel, r: &GridField, omega: f64) -> GridField {
    r.scaled(omega / a.center())
}

fn decode_tap(flat: usize, taps: &[usize], out: &mut [i64]) {
    let mut rem = flat;
    for ax in (0..taps.len()).rev() {
        out[ax] = (rem % taps[ax]) as i64 - (taps[ax] / 2) as i64;
        rem /= taps[ax];
    }
}

/// Gauss-Seidel sweep as a direct triangular solve: `(D + L) e = r` with `L`
/// the strictly lower-triangular taps in lexicographic node order, done by
/// forward substitution over nodes.
pub fn gs_apply(a: &StencilKernel, r: &GridField) -> Result<GridField> {
    if a.out_channels != 1 || a.in_channels != 1 || r.channels != 1 {
        return Err(Error::ShapeMismatch("gauss-seidel needs single-channel operands".into()));
    }
    if a.dim() != r.dim() {
        return Err(Error::ShapeMismatch("kernel/field dimension mismatch".into()));
    }
    let d = r.dim();
    let center = a.center();
    if center == 0.0 {
        return Err(Error::Singular("zero center tap".into()));
    }
    // collect strictly-lower taps: offset < 0 in lexicographic axis order
    let mut lower: Vec<(Vec<i64>, f64)> = Vec::new();
    let mut tap = vec![0i64; d];
    for (t, &kv) in a.data.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        decode_tap(t, &a.taps, &mut tap);
        if tap.iter().find(|&&o| o != 0).is_some_and(|&o| o < 0) {
            lower.push((tap.clone(), kv));
        }
    }
    let n = r.len_per_channel();
    let mut e = vec![0.0; n];
    let mut idx = vec![0usize; d];
    for flat in 0..n {
        let mut rem = flat;
        for ax in (0..d).rev() {
            idx[ax] = rem % r.extent[ax];
            rem /= r.extent[ax];
        }
        let mut acc = r.data[flat];
        'taps: for (off, kv) in &lower {
            let mut sflat = 0usize;
            for ax in 0..d {
                let s = idx[ax] as i64 + off[ax];
                if s < 0 || s >= r.extent[ax] as i64 {
                    continue 'taps;
                }
                sflat = sflat * r.extent[ax] + s as usize;
            }
            acc -= kv * e[sflat];
        }
        e[flat] = acc / center;
    }
    GridField::from_vec(1, &r.extent, e)
}

/// Line Gauss-Seidel: exact tridiagonal solves along lines parallel to `axis`,
/// with blocks (lines) visited in lexicographic order and earlier lines
/// substituted forward.
pub fn line_gs_apply(a: &StencilKernel, r: &GridField, axis: usize) -> Result<GridField> {
    if a.out_channels != 1 || a.in_channels != 1 || r.channels != 1 {
        return Err(Error::ShapeMismatch("line-gs needs single-channel operands".into()));
    }
    let d = r.dim();
    if axis >= d {
        return Err(Error::InvalidArgument(format!(
            "line axis {} out of range for dimension {}",
            axis, d
        )));
    }
    if a.taps[axis] > 3 {
        return Err(Error::InvalidArgument(
            "line-gs requires at most 3 taps along the line axis".into(),
        ));
    }
    let outer: Vec<usize> = (0..d).filter(|&ax| ax != axis).collect();
    let line_len = r.extent[axis];
    let nblocks: usize = outer.iter().map(|&ax| r.extent[ax]).product();

    // per-line tridiagonal from taps with zero outer offset
    let mut diag_c = 0.0;
    let mut sub_c = 0.0;
    let mut sup_c = 0.0;
    // taps with nonzero outer offset, split by lex sign of the outer part
    let mut lower: Vec<(Vec<i64>, f64)> = Vec::new();
    let mut tap = vec![0i64; d];
    for (t, &kv) in a.data.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        decode_tap(t, &a.taps, &mut tap);
        let outer_sign = outer
            .iter()
            .map(|&ax| tap[ax])
            .find(|&o| o != 0);
        match outer_sign {
            None => match tap[axis] {
                0 => diag_c = kv,
                -1 => sub_c = kv,
                1 => sup_c = kv,
                _ => unreachable!(),
            },
            Some(o) if o < 0 => lower.push((tap.clone(), kv)),
            Some(_) => {} // upper block, dropped by the splitting
        }
    }
    if diag_c == 0.0 {
        return Err(Error::Singular("zero center tap".into()));
    }

    let n = r.len_per_channel();
    let mut e = vec![0.0; n];
    let mut bidx = vec![0usize; outer.len()];
    let mut idx = vec![0usize; d];
    let mut rhs = vec![0.0; line_len];
    for b in 0..nblocks {
        let mut rem = b;
        for oi in (0..outer.len()).rev() {
            bidx[oi] = rem % r.extent[outer[oi]];
            rem /= r.extent[outer[oi]];
        }
        for (oi, &ax) in outer.iter().enumerate() {
            idx[ax] = bidx[oi];
        }
        // rhs = r - (lower-block contributions from already-solved lines)
        for li in 0..line_len {
            idx[axis] = li;
            let mut flat = 0usize;
            for ax in 0..d {
                flat = flat * r.extent[ax] + idx[ax];
            }
            let mut acc = r.data[flat];
            'taps: for (off, kv) in &lower {
                let mut sflat = 0usize;
                for ax in 0..d {
                    let s = idx[ax] as i64 + off[ax];
                    if s < 0 || s >= r.extent[ax] as i64 {
                        continue 'taps;
                    }
                    sflat = sflat * r.extent[ax] + s as usize;
                }
                acc -= kv * e[sflat];
            }
            rhs[li] = acc;
        }
        // Thomas algorithm on the constant-coefficient tridiagonal
        let mut cp = vec![0.0; line_len];
        let mut dp = vec![0.0; line_len];
        let mut denom = diag_c;
        cp[0] = sup_c / denom;
        dp[0] = rhs[0] / denom;
        for i in 1..line_len {
            denom = diag_c - sub_c * cp[i - 1];
            if denom == 0.0 {
                return Err(Error::Singular("tridiagonal breakdown in line-gs".into()));
            }
            cp[i] = sup_c / denom;
            dp[i] = (rhs[i] - sub_c * dp[i - 1]) / denom;
        }
        let mut x = dp[line_len - 1];
        idx[axis] = line_len - 1;
        let mut flat = 0usize;
        for ax in 0..d {
            flat = flat * r.extent[ax] + idx[ax];
        }
        e[flat] = x;
        for i in (0..line_len - 1).rev() {
            x = dp[i] - cp[i] * x;
            idx[axis] = i;
            let mut flat = 0usize;
            for ax in 0..d {
                flat = flat * r.extent[ax] + idx[ax];
            }
            e[flat] = x;
        }
    }
    GridField::from_vec(1, &r.extent, e)
}

/// Cholesky factorization of a small dense SPD matrix, with a single retry
/// adding diagonal jitter `1e-12 * trace / n` when the plain factorization
/// breaks down.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    l: Vec<f64>,
}

impl SpdFactor {
    pub fn new(m: &[f64], n: usize) -> Result<SpdFactor> {
        debug_assert_eq!(m.len(), n * n);
        if let Some(f) = Self::try_factor(m, n, 0.0) {
            return Ok(f);
        }
        let trace: f64 = (0..n).map(|i| m[i * n + i]).sum();
        let jitter = 1e-12 * trace / n as f64;
        Self::try_factor(m, n, jitter).ok_or(Error::SingularSubspace)
    }

    fn try_factor(m: &[f64], n: usize, jitter: f64) -> Option<SpdFactor> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = m[i * n + j];
                if i == j {
                    acc += jitter;
                }
                for k in 0..j {
                    acc -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if acc <= 0.0 || !acc.is_finite() {
                        return None;
                    }
                    l[i * n + j] = acc.sqrt();
                } else {
                    l[i * n + j] = acc / l[j * n + j];
                }
            }
        }
        Some(SpdFactor { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[i * n + k] * y[k];
            }
            y[i] = acc / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n {
                acc -= self.l[k * n + i] * x[k];
            }
            x[i] = acc / self.l[i * n + i];
        }
        x
    }
}

/// An explicit subspace basis: a list of single-channel fields of one extent.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub columns: Vec<GridField>,
}

impl SubspaceBasis {
    pub fn from_channels(g: &GridField) -> SubspaceBasis {
        SubspaceBasis {
            columns: (0..g.channels).map(|c| g.channel_field(c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Precomputed data for a subspace correction with a fixed basis: the images
/// `A g_a` and the Cholesky factor of the Gram matrix `M = G^T A G`.
pub struct ScContext {
    pub basis: SubspaceBasis,
    pub a_cols: Vec<GridField>,
    pub factor: SpdFactor,
}

impl ScContext {
    pub fn new(a: &LevelOperator, basis: SubspaceBasis) -> Result<ScContext> {
        let l = basis.len();
        if l == 0 {
            return Err(Error::InvalidArgument("empty subspace basis".into()));
        }
        let mut a_cols = Vec::with_capacity(l);
        for g in &basis.columns {
            a_cols.push(a.apply(g)?);
        }
        let mut m = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..=i {
                let v = basis.columns[i].dot(&a_cols[j]);
                m[i * l + j] = v;
                m[j * l + i] = v;
            }
        }
        let factor = SpdFactor::new(&m, l)?;
        Ok(ScContext {
            basis,
            a_cols,
            factor,
        })
    }

    /// `M^{-1} G^T v` for a field `v`.
    pub fn solve_coeffs(&self, v: &GridField) -> Vec<f64> {
        let b: Vec<f64> = self.basis.columns.iter().map(|g| g.dot(v)).collect();
        self.factor.solve(&b)
    }

    /// `G y`
    pub fn expand(&self, y: &[f64]) -> GridField {
        let mut out = GridField::zeros(1, &self.basis.columns[0].extent);
        for (g, &c) in self.basis.columns.iter().zip(y) {
            out.axpy(c, g);
        }
        out
    }

    /// `A G y` via the cached operator images.
    pub fn expand_a(&self, y: &[f64]) -> GridField {
        let mut out = GridField::zeros(1, &self.a_cols[0].extent);
        for (ag, &c) in self.a_cols.iter().zip(y) {
            out.axpy(c, ag);
        }
        out
    }

    /// The full correction `e = G (G^T A G)^{-1} G^T r`.
    pub fn apply(&self, r: &GridField) -> GridField {
        self.expand(&self.solve_coeffs(r))
    }
}

/// One-shot subspace correction `e = G (G^T A G)^{-1} G^T r`.
pub fn sc_apply(a: &LevelOperator, basis: &SubspaceBasis, r: &GridField) -> Result<GridField> {
    Ok(ScContext::new(a, basis.clone())?.apply(r))
}

/// Krylov basis `{r, Ar, ..., A^k r}` with each column normalized to unit
/// 2-norm. Columns that vanish numerically truncate the basis.
pub fn krylov_basis(a: &LevelOperator, r: &GridField, k: usize) -> Result<SubspaceBasis> {
    let mut columns = Vec::with_capacity(k + 1);
    let mut cur = r.clone();
    for _ in 0..=k {
        let norm = cur.norm2();
        if norm < 1e-300 {
            break;
        }
        let col = cur.scaled(1.0 / norm);
        cur = a.apply(&col)?;
        columns.push(col);
    }
    Ok(SubspaceBasis { columns })
}

/// Subspace correction over the order-`k` Krylov space of the residual.
/// Returns zero for a zero residual.
pub fn krylov_sc_apply(a: &LevelOperator, r: &GridField, k: usize) -> Result<GridField> {
    let basis = krylov_basis(a, r, k)?;
    if basis.is_empty() {
        return Ok(GridField::zeros(1, &r.extent));
    }
    sc_apply(a, &basis, r)
}
