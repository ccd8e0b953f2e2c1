//! Trainable smoothers: per-level convolution smoothers, and two
//! hypernetwork smoothers that map the level's stencil to either a set of
//! subspace-generating convolution kernels or directly to a smoothing kernel.

use crate::discretize::LevelOperator;
use crate::error::{Error, Result};
use crate::grid::{conv, GridField, StencilKernel};
use crate::multigrid::{Hierarchy, SmootherBank};
use crate::params::{Param, ParamSet};
use crate::smoother::{sc_apply, SubspaceBasis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `y = W x + b` for a row-major `W` of shape `[rows, cols]`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let rows = b.len();
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    let mut y = b.to_vec();
    for r in 0..rows {
        let wrow = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in wrow.iter().zip(x) {
            acc += wv * xv;
        }
        y[r] += acc;
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Stencil coefficients normalized by their maximum magnitude; the input
/// features of both hypernetworks.
pub fn stencil_features(k: &StencilKernel) -> Vec<f64> {
    let maxabs = k.data.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if maxabs == 0.0 {
        return k.data.clone();
    }
    k.data.iter().map(|&x| x / maxabs).collect()
}

/// Adaptive average pooling of a single-channel field into `bins` cells per
/// axis (bin b covers indices [floor(b n / bins), floor((b+1) n / bins))).
pub fn avgpool(v: &GridField, bins: &[usize]) -> Vec<f64> {
    let d = v.dim();
    debug_assert_eq!(bins.len(), d);
    let nbins: usize = bins.iter().product();
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let n = v.len_per_channel();
    let mut idx = vec![0usize; d];
    for flat in 0..n {
        let mut rem = flat;
        for ax in (0..d).rev() {
            idx[ax] = rem % v.extent[ax];
            rem /= v.extent[ax];
        }
        let mut b = 0usize;
        for ax in 0..d {
            let bin = (idx[ax] * bins[ax]) / v.extent[ax];
            b = b * bins[ax] + bin.min(bins[ax] - 1);
        }
        sums[b] += v.data[flat];
        counts[b] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            *s /= c as f64;
        }
    }
    sums
}

fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ---------------------------------------------------------------------------
// Per-level convolution smoothers
// ---------------------------------------------------------------------------

/// One trainable convolution kernel per (level, step) slot, applied as
/// `e = B ⋆ r`.
pub struct ConvSmootherBank {
    pub params: ParamSet,
    dim: usize,
    taps: usize,
    nu: Vec<usize>,
}

pub fn conv_slot_name(level: usize, step: usize) -> String {
    format!("b.l{}.s{}", level, step)
}

impl ConvSmootherBank {
    /// Initialize every slot to the damped-Jacobi equivalent: a centered
    /// delta scaled by `omega / center` of that level's stencil.
    pub fn init_jacobi(h: &Hierarchy, nu: &[usize], taps: usize, omega: f64) -> Result<ConvSmootherBank> {
        if taps % 2 == 0 {
            return Err(Error::InvalidArgument("kernel taps must be odd".into()));
        }
        let dim = h.extents[0].len();
        let shape = vec![taps; dim];
        let n: usize = shape.iter().product();
        let mut params = ParamSet::new();
        for level in 0..h.num_levels() - 1 {
            let steps = *nu.get(level).or(nu.last()).unwrap();
            let center = h.levels[level].stencil.center();
            for step in 0..steps {
                let mut data = vec![0.0; n];
                data[n / 2] = omega / center;
                params.push(Param::new(conv_slot_name(level, step), &shape, data)?)?;
            }
        }
        Ok(ConvSmootherBank {
            params,
            dim,
            taps,
            nu: nu.to_vec(),
        })
    }

    pub fn from_params(params: ParamSet, dim: usize, taps: usize, nu: &[usize]) -> ConvSmootherBank {
        ConvSmootherBank {
            params,
            dim,
            taps,
            nu: nu.to_vec(),
        }
    }

    pub fn steps_at(&self, level: usize) -> usize {
        *self.nu.get(level).or(self.nu.last()).unwrap()
    }

    pub fn kernel(&self, level: usize, step: usize) -> Result<StencilKernel> {
        let p = self.params.get(&conv_slot_name(level, step))?;
        StencilKernel::new(1, 1, &vec![self.taps; self.dim], p.data.clone())
    }
}

impl SmootherBank for ConvSmootherBank {
    fn smooth(
        &self,
        level: usize,
        step: usize,
        _a: &LevelOperator,
        r: &GridField,
    ) -> Result<GridField> {
        conv(&self.kernel(level, step)?, r)
    }
}

// ---------------------------------------------------------------------------
// Hypernetwork subspace smoother
// ---------------------------------------------------------------------------

/// Architecture of the subspace-generating dense block and its hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNnConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub growth: usize,
    pub taps: usize,
    /// Flattened stencil length fed to the hypernetwork (9 in 2D, 27 in 3D).
    pub stencil_len: usize,
}

impl MetaNnConfig {
    pub fn default_2d() -> MetaNnConfig {
        MetaNnConfig {
            dim: 2,
            hidden: 100,
            layers: 3,
            growth: 3,
            taps: 7,
            stencil_len: 9,
        }
    }

    /// 3D default: a single linear convolution layer producing all channels.
    pub fn default_3d() -> MetaNnConfig {
        MetaNnConfig {
            dim: 3,
            hidden: 100,
            layers: 1,
            growth: 9,
            taps: 3,
            stencil_len: 27,
        }
    }

    /// Basis size: the residual plus every produced channel.
    pub fn subspace_dim(&self) -> usize {
        1 + self.layers * self.growth
    }

    fn taps_per_kernel(&self) -> usize {
        self.taps.pow(self.dim as u32)
    }

    /// Per-layer (out_channels, in_channels) of the dense block.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| (self.growth, 1 + i * self.growth))
            .collect()
    }

    /// Total generated-weight count across all dense-block kernels.
    pub fn gamma_len(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(o, i)| o * i * self.taps_per_kernel())
            .sum()
    }

    /// Initialize hypernetwork parameters (two dense layers).
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let g = self.gamma_len();
        p.push(
            Param::new(
                "meta.fc1.w",
                &[self.hidden, self.stencil_len],
                glorot_uniform(&mut rng, self.hidden, self.stencil_len),
            )
            .unwrap(),
        )
        .unwrap();
        p.push(Param::new("meta.fc1.b", &[self.hidden], vec![0.0; self.hidden]).unwrap())
            .unwrap();
        p.push(
            Param::new(
                "meta.fc2.w",
                &[g, self.hidden],
                glorot_uniform(&mut rng, g, self.hidden),
            )
            .unwrap(),
        )
        .unwrap();
        p.push(Param::new("meta.fc2.b", &[g], vec![0.0; g]).unwrap()).unwrap();
        p
    }
}

/// Run the hypernetwork: normalized stencil -> generated weights.
pub fn meta_gamma(cfg: &MetaNnConfig, params: &ParamSet, stencil: &StencilKernel) -> Result<Vec<f64>> {
    let x = stencil_features(stencil);
    if x.len() != cfg.stencil_len {
        return Err(Error::ShapeMismatch(format!(
            "stencil length {} != configured {}",
            x.len(),
            cfg.stencil_len
        )));
    }
    let h = relu(&dense_forward(
        &params.get("meta.fc1.w")?.data,
        &params.get("meta.fc1.b")?.data,
        &x,
    ));
    Ok(dense_forward(
        &params.get("meta.fc2.w")?.data,
        &params.get("meta.fc2.b")?.data,
        &h,
    ))
}

/// Slice generated weights into the dense-block kernels.
pub fn gamma_kernels(cfg: &MetaNnConfig, gamma: &[f64]) -> Result<Vec<StencilKernel>> {
    if gamma.len() != cfg.gamma_len() {
        return Err(Error::ShapeMismatch(format!(
            "gamma length {} != expected {}",
            gamma.len(),
            cfg.gamma_len()
        )));
    }
    let taps = vec![cfg.taps; cfg.dim];
    let mut kernels = Vec::with_capacity(cfg.layers);
    let mut off = 0;
    for (o, i) in cfg.layer_shapes() {
        let n = o * i * cfg.taps_per_kernel();
        kernels.push(StencilKernel::new(o, i, &taps, gamma[off..off + n].to_vec())?);
        off += n;
    }
    Ok(kernels)
}

/// Linear dense block: starting from the residual channel, each layer
/// convolves the concatenation of everything produced so far (no
/// activations). Returns the full channel stack, residual first.
pub fn dense_block_channels(kernels: &[StencilKernel], r: &GridField) -> Result<GridField> {
    let mut stack = r.clone();
    for k in kernels {
        let y = conv(k, &stack)?;
        stack = GridField::concat_channels(&[&stack, &y])?;
    }
    Ok(stack)
}

/// Hypernetwork subspace-correction smoother: generated kernels are fixed per
/// level (they depend only on the level stencil); the basis is rebuilt from
/// each residual with a mandatory residual passthrough column.
pub struct MetaScBank {
    pub cfg: MetaNnConfig,
    pub params: ParamSet,
    level_kernels: Vec<Vec<StencilKernel>>,
}

impl MetaScBank {
    pub fn new(cfg: MetaNnConfig, params: ParamSet, h: &Hierarchy) -> Result<MetaScBank> {
        let mut level_kernels = Vec::new();
        for level in 0..h.num_levels() - 1 {
            let gamma = meta_gamma(&cfg, &params, &h.levels[level].stencil)?;
            level_kernels.push(gamma_kernels(&cfg, &gamma)?);
        }
        Ok(MetaScBank {
            cfg,
            params,
            level_kernels,
        })
    }
}

impl SmootherBank for MetaScBank {
    fn smooth(
        &self,
        level: usize,
        _step: usize,
        a: &LevelOperator,
        r: &GridField,
    ) -> Result<GridField> {
        if r.norm2() == 0.0 {
            return Ok(GridField::zeros(1, &r.extent));
        }
        let stack = dense_block_channels(&self.level_kernels[level], r)?;
        let basis = SubspaceBasis::from_channels(&stack);
        sc_apply(a, &basis, r)
    }
}

// ---------------------------------------------------------------------------
// Direct hypernetwork smoother
// ---------------------------------------------------------------------------

/// Architecture of the direct kernel-predicting hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDirectConfig {
    pub dim: usize,
    pub hidden: usize,
    pub taps: usize,
    pub stencil_len: usize,
    /// Pooling bins per axis for the residual summary.
    pub pool_bins: Vec<usize>,
}

impl MetaDirectConfig {
    pub fn default_2d() -> MetaDirectConfig {
        MetaDirectConfig {
            dim: 2,
            hidden: 100,
            taps: 7,
            stencil_len: 9,
            pool_bins: vec![8, 8],
        }
    }

    pub fn input_len(&self) -> usize {
        self.stencil_len + self.pool_bins.iter().product::<usize>()
    }

    pub fn kernel_len(&self) -> usize {
        self.taps.pow(self.dim as u32)
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (h, i, o) = (self.hidden, self.input_len(), self.kernel_len());
        p.push(Param::new("direct.fc1.w", &[h, i], glorot_uniform(&mut rng, h, i)).unwrap())
            .unwrap();
        p.push(Param::new("direct.fc1.b", &[h], vec![0.0; h]).unwrap()).unwrap();
        p.push(Param::new("direct.fc2.w", &[h, h], glorot_uniform(&mut rng, h, h)).unwrap())
            .unwrap();
        p.push(Param::new("direct.fc2.b", &[h], vec![0.0; h]).unwrap()).unwrap();
        p.push(Param::new("direct.fc3.w", &[o, h], glorot_uniform(&mut rng, o, h)).unwrap())
            .unwrap();
        p.push(Param::new("direct.fc3.b", &[o], vec![0.0; o]).unwrap()).unwrap();
        p
    }
}

/// Hypernetwork input: normalized stencil features plus the pooled summary of
/// the unit-normalized residual.
pub fn direct_features(cfg: &MetaDirectConfig, stencil: &StencilKernel, r: &GridField) -> Vec<f64> {
    let mut x = stencil_features(stencil);
    let norm = r.norm2();
    let rn = if norm == 0.0 { r.clone() } else { r.scaled(1.0 / norm) };
    x.extend(avgpool(&rn, &cfg.pool_bins));
    x
}

/// Predict the smoothing kernel from features.
pub fn direct_kernel(cfg: &MetaDirectConfig, params: &ParamSet, x: &[f64]) -> Result<StencilKernel> {
    let h1 = relu(&dense_forward(
        &params.get("direct.fc1.w")?.data,
        &params.get("direct.fc1.b")?.data,
        x,
    ));
    let h2 = relu(&dense_forward(
        &params.get("direct.fc2.w")?.data,
        &params.get("direct.fc2.b")?.data,
        &h1,
    ));
    let k = dense_forward(
        &params.get("direct.fc3.w")?.data,
        &params.get("direct.fc3.b")?.data,
        &h2,
    );
    StencilKernel::new(1, 1, &vec![cfg.taps; cfg.dim], k)
}

/// Direct hypernetwork smoother: `e = B(stencil, r) ⋆ r`.
pub struct MetaDirectBank {
    pub cfg: MetaDirectConfig,
    pub params: ParamSet,
}

impl SmootherBank for MetaDirectBank {
    fn smooth(
        &self,
        _level: usize,
        _step: usize,
        a: &LevelOperator,
        r: &GridField,
    ) -> Result<GridField> {
        let x = direct_features(&self.cfg, &a.stencil, r);
        let k = direct_kernel(&self.cfg, &self.params, &x)?;
        conv(&k, r)
    }
}
