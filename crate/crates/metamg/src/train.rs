//! Training engine: task sampling over problem parameters and right-hand
//! sides, a taped multigrid cycle for each trainable model, the unsupervised
//! residual loss, and ADAM.

use crate::discretize::{DenseLu, LevelOperator, PdeSpec};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::mgnet::{
    conv_slot_name, stencil_features, ConvSmootherBank, MetaDirectConfig, MetaNnConfig,
};
use crate::multigrid::Hierarchy;
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Adam {
        Adam {
            cfg,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_structure(grads) {
            return Err(Error::ShapeMismatch("gradient structure mismatch".into()));
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .params
            .iter_mut()
            .zip(&grads.params)
            .zip(self.m.params.iter_mut().zip(&mut self.v.params))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.cfg.beta1 * m.data[i] + (1.0 - self.cfg.beta1) * gi;
                v.data[i] = self.cfg.beta2 * v.data[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task sampling
// ---------------------------------------------------------------------------

/// Deterministic per-(draw, rhs) random streams derived from one master seed.
pub fn task_stream(master: u64, draw: u64, item: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&draw.to_le_bytes());
    seed[16..24].copy_from_slice(&item.to_le_bytes());
    seed[24..32].copy_from_slice(&0xA5A5_5A5A_u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Standard-normal right-hand side for task `(draw, item)`.
pub fn sample_rhs(extent: &[usize], master: u64, draw: u64, item: u64) -> GridField {
    let mut rng = task_stream(master, draw, item);
    let n: usize = extent.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    GridField::from_vec(1, extent, data).unwrap()
}

/// Problem-parameter draws: `lg(1/eps) ~ U[lo, hi]` with a fixed rotation.
pub fn sample_etas(master: u64, m_p: usize, lg_inv_eps: (f64, f64), theta: f64, n: usize) -> Vec<PdeSpec> {
    let mut rng = task_stream(master, u64::MAX, 0);
    (0..m_p)
        .map(|_| {
            let lg = rng.gen_range(lg_inv_eps.0..lg_inv_eps.1);
            PdeSpec::Aniso2d {
                eps: 10f64.powf(-lg),
                theta,
                n,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Taped cycle
// ---------------------------------------------------------------------------

/// Supplies taped smoothing corrections per (level, step) slot.
pub trait TapeBank {
    fn smooth(
        &mut self,
        tape: &mut Tape,
        level: usize,
        step: usize,
        a: &LevelOperator,
        r: NodeId,
    ) -> Result<NodeId>;
}

/// One \-cycle recorded on the tape; mirrors the inference cycle exactly.
pub fn tape_cycle(
    tape: &mut Tape,
    h: &Hierarchy,
    lu: &Rc<DenseLu>,
    bank: &mut dyn TapeBank,
    nu: &[usize],
    f: NodeId,
    level: usize,
) -> Result<NodeId> {
    if level == h.num_levels() - 1 {
        return Ok(tape.coarse_solve(lu, f));
    }
    let a = &h.levels[level];
    let steps = *nu.get(level).or(nu.last()).unwrap();
    let mut u: Option<NodeId> = None;
    for step in 0..steps {
        let r = match u {
            None => f,
            Some(un) => {
                let au = tape.conv_fixed(&a.stencil, un)?;
                tape.sub(f, au)
            }
        };
        let e = bank.smooth(tape, level, step, a, r)?;
        u = Some(match u {
            None => e,
            Some(un) => tape.add(un, e),
        });
    }
    let un = u.expect("at least one smoothing step per non-coarsest level");
    let au = tape.conv_fixed(&a.stencil, un)?;
    let r = tape.sub(f, au);
    let rc = tape.restrict(&h.restrict, r)?;
    let ec = tape_cycle(tape, h, lu, bank, nu, rc, level + 1)?;
    let e = tape.prolong(&h.prolong, ec)?;
    Ok(tape.add(un, e))
}

/// Loss of one sample: relative squared residual after a single cycle from
/// zero, `|f - A u_1|^2 / |f|^2`.
pub fn sample_loss(
    tape: &mut Tape,
    h: &Hierarchy,
    lu: &Rc<DenseLu>,
    bank: &mut dyn TapeBank,
    nu: &[usize],
    f: &GridField,
) -> Result<NodeId> {
    let fnode = tape.constant_field(f.clone());
    let u = tape_cycle(tape, h, lu, bank, nu, fnode, 0)?;
    let au = tape.conv_fixed(&h.levels[0].stencil, u)?;
    let r = tape.sub(fnode, au);
    let l = tape.norm_sq(r);
    Ok(tape.mul_scalar_const(l, 1.0 / f.dot(f)))
}

// ---------------------------------------------------------------------------
// Per-model tape banks
// ---------------------------------------------------------------------------

/// Trainable per-(level, step) convolution kernels.
pub struct TapePdeMgnet<'a> {
    pub params: &'a ParamSet,
    pub dim: usize,
    pub taps: usize,
    nodes: Vec<Option<NodeId>>,
    slots: Vec<(usize, usize)>,
}

impl<'a> TapePdeMgnet<'a> {
    pub fn new(params: &'a ParamSet, dim: usize, taps: usize) -> TapePdeMgnet<'a> {
        TapePdeMgnet {
            params,
            dim,
            taps,
            nodes: Vec::new(),
            slots: Vec::new(),
        }
    }
}

impl TapeBank for TapePdeMgnet<'_> {
    fn smooth(
        &mut self,
        tape: &mut Tape,
        level: usize,
        step: usize,
        _a: &LevelOperator,
        r: NodeId,
    ) -> Result<NodeId> {
        let slot = (level, step);
        let pos = match self.slots.iter().position(|&s| s == slot) {
            Some(p) => p,
            None => {
                self.slots.push(slot);
                self.nodes.push(None);
                self.slots.len() - 1
            }
        };
        let node = match self.nodes[pos] {
            Some(n) => n,
            None => {
                let n = tape.param(self.params, &conv_slot_name(level, step))?;
                self.nodes[pos] = Some(n);
                n
            }
        };
        tape.conv_var(node, 1, 1, &vec![self.taps; self.dim], r)
    }
}

/// Hypernetwork subspace smoother: per-level generated kernels are computed
/// once per tape from the level stencils, then reused across steps.
pub struct TapeMetaSc {
    cfg: MetaNnConfig,
    /// Per level, per dense-block layer: the kernel slice node.
    layer_nodes: Vec<Vec<NodeId>>,
}

impl TapeMetaSc {
    pub fn new(
        tape: &mut Tape,
        params: &ParamSet,
        cfg: &MetaNnConfig,
        h: &Hierarchy,
    ) -> Result<TapeMetaSc> {
        let w1 = tape.param(params, "meta.fc1.w")?;
        let b1 = tape.param(params, "meta.fc1.b")?;
        let w2 = tape.param(params, "meta.fc2.w")?;
        let b2 = tape.param(params, "meta.fc2.b")?;
        let mut layer_nodes = Vec::new();
        for level in 0..h.num_levels() - 1 {
            let x = tape.constant_vec(stencil_features(&h.levels[level].stencil));
            let hdn = tape.dense(w1, b1, x);
            let hdn = tape.relu(hdn);
            let gamma = tape.dense(w2, b2, hdn);
            let mut slices = Vec::new();
            let mut off = 0;
            for (o, i) in cfg.layer_shapes() {
                let n = o * i * cfg.taps.pow(cfg.dim as u32);
                slices.push(tape.slice_vec(gamma, off, n));
                off += n;
            }
            layer_nodes.push(slices);
        }
        Ok(TapeMetaSc {
            cfg: cfg.clone(),
            layer_nodes,
        })
    }
}

impl TapeBank for TapeMetaSc {
    fn smooth(
        &mut self,
        tape: &mut Tape,
        level: usize,
        _step: usize,
        a: &LevelOperator,
        r: NodeId,
    ) -> Result<NodeId> {
        let taps = vec![self.cfg.taps; self.cfg.dim];
        let mut stack = r;
        for (slice, (o, i)) in self.layer_nodes[level].iter().zip(self.cfg.layer_shapes()) {
            let y = tape.conv_var(*slice, o, i, &taps, stack)?;
            stack = tape.concat_channels(&[stack, y])?;
        }
        tape.sc_apply(a, stack, r)
    }
}

/// Direct hypernetwork smoother on the tape.
pub struct TapeMetaDirect {
    cfg: MetaDirectConfig,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    w3: NodeId,
    b3: NodeId,
    /// Per-level constant stencil features.
    stencil_nodes: Vec<NodeId>,
}

impl TapeMetaDirect {
    pub fn new(
        tape: &mut Tape,
        params: &ParamSet,
        cfg: &MetaDirectConfig,
        h: &Hierarchy,
    ) -> Result<TapeMetaDirect> {
        let w1 = tape.param(params, "direct.fc1.w")?;
        let b1 = tape.param(params, "direct.fc1.b")?;
        let w2 = tape.param(params, "direct.fc2.w")?;
        let b2 = tape.param(params, "direct.fc2.b")?;
        let w3 = tape.param(params, "direct.fc3.w")?;
        let b3 = tape.param(params, "direct.fc3.b")?;
        let stencil_nodes = (0..h.num_levels() - 1)
            .map(|l| tape.constant_vec(stencil_features(&h.levels[l].stencil)))
            .collect();
        Ok(TapeMetaDirect {
            cfg: cfg.clone(),
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            stencil_nodes,
        })
    }
}

impl TapeBank for TapeMetaDirect {
    fn smooth(
        &mut self,
        tape: &mut Tape,
        level: usize,
        _step: usize,
        _a: &LevelOperator,
        r: NodeId,
    ) -> Result<NodeId> {
        let rn = tape.normalize_field(r);
        let pooled = tape.avgpool(rn, &self.cfg.pool_bins);
        let x = tape.concat_vec(&[self.stencil_nodes[level], pooled]);
        let h1 = tape.dense(self.w1, self.b1, x);
        let h1 = tape.relu(h1);
        let h2 = tape.dense(self.w2, self.b2, h1);
        let h2 = tape.relu(h2);
        let k = tape.dense(self.w3, self.b3, h2);
        tape.conv_var(k, 1, 1, &vec![self.cfg.taps; self.cfg.dim], r)
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PdeMgnet,
    MetaSc,
    MetaDirect,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pde-mgnet" => ModelKind::PdeMgnet,
            "meta-sc" => ModelKind::MetaSc,
            "meta-direct" => ModelKind::MetaDirect,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model '{}' (expected pde-mgnet|meta-sc|meta-direct)",
                    s
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub n: usize,
    pub levels: usize,
    pub nu: Vec<usize>,
    /// Range of `lg(1/eps)` for problem-parameter draws.
    pub lg_inv_eps: (f64, f64),
    pub theta: f64,
    /// Problem-parameter draws per training set.
    pub m_p: usize,
    /// Right-hand sides per draw.
    pub m_m: usize,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub taps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::MetaSc,
            n: 64,
            levels: 4,
            nu: vec![2, 1, 1],
            lg_inv_eps: (0.0, 5.0),
            theta: 0.0,
            m_p: 20,
            m_m: 100,
            epochs: 20,
            batch: 64,
            adam: AdamConfig::default(),
            seed: 0,
            taps: 7,
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamSet,
    /// Mean batch loss per optimizer step.
    pub loss_history: Vec<f64>,
}

/// Initialize parameters for a model. The convolution bank is seeded at the
/// damped-Jacobi equivalent of a mid-range problem instance.
pub fn init_model_params(cfg: &TrainConfig) -> Result<ParamSet> {
    match cfg.model {
        ModelKind::PdeMgnet => {
            let mid = 10f64.powf(-(cfg.lg_inv_eps.0 + cfg.lg_inv_eps.1) / 2.0);
            let spec = PdeSpec::Aniso2d {
                eps: mid,
                theta: cfg.theta,
                n: cfg.n,
            };
            let h = Hierarchy::build(&spec, cfg.levels)?;
            let bank = ConvSmootherBank::init_jacobi(&h, &cfg.nu, cfg.taps, 2.0 / 3.0)?;
            Ok(bank.params)
        }
        ModelKind::MetaSc => Ok(meta_nn_config(cfg).init_params(cfg.seed ^ 0x5EED)),
        ModelKind::MetaDirect => Ok(meta_direct_config(cfg).init_params(cfg.seed ^ 0x5EED)),
    }
}

pub fn meta_nn_config(cfg: &TrainConfig) -> MetaNnConfig {
    MetaNnConfig {
        taps: cfg.taps,
        ..MetaNnConfig::default_2d()
    }
}

pub fn meta_direct_config(cfg: &TrainConfig) -> MetaDirectConfig {
    MetaDirectConfig {
        taps: cfg.taps,
        ..MetaDirectConfig::default_2d()
    }
}

struct TaskSet {
    hierarchies: Vec<Hierarchy>,
    lus: Vec<Rc<DenseLu>>,
    extent: Vec<usize>,
}

fn build_tasks(cfg: &TrainConfig) -> Result<TaskSet> {
    let specs = sample_etas(cfg.seed, cfg.m_p, cfg.lg_inv_eps, cfg.theta, cfg.n);
    let mut hierarchies = Vec::with_capacity(specs.len());
    for s in &specs {
        hierarchies.push(Hierarchy::build(s, cfg.levels)?);
    }
    let lus = hierarchies
        .iter()
        .map(|h| Rc::new(h.coarse_lu.clone()))
        .collect();
    let extent = specs[0].fine_extent();
    Ok(TaskSet {
        hierarchies,
        lus,
        extent,
    })
}

fn batch_loss_and_grads(
    cfg: &TrainConfig,
    params: &ParamSet,
    tasks: &TaskSet,
    batch: &[(usize, usize)],
) -> Result<(f64, ParamSet)> {
    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &(p, m) in batch {
        let h = &tasks.hierarchies[p];
        let lu = &tasks.lus[p];
        let f = sample_rhs(&tasks.extent, cfg.seed, p as u64, m as u64);
        let mut tape = Tape::new();
        let loss = match cfg.model {
            ModelKind::PdeMgnet => {
                let mut bank = TapePdeMgnet::new(params, 2, cfg.taps);
                sample_loss(&mut tape, h, lu, &mut bank, &cfg.nu, &f)?
            }
            ModelKind::MetaSc => {
                let mcfg = meta_nn_config(cfg);
                let mut bank = TapeMetaSc::new(&mut tape, params, &mcfg, h)?;
                sample_loss(&mut tape, h, lu, &mut bank, &cfg.nu, &f)?
            }
            ModelKind::MetaDirect => {
                let mcfg = meta_direct_config(cfg);
                let mut bank = TapeMetaDirect::new(&mut tape, params, &mcfg, h)?;
                sample_loss(&mut tape, h, lu, &mut bank, &cfg.nu, &f)?
            }
        };
        let lv = tape.value(loss).scalar();
        if !lv.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        loss_sum += lv;
        let g = tape.backward(loss, params)?;
        for (acc, gi) in grads.params.iter_mut().zip(&g.params) {
            for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                *a += scale * b;
            }
        }
    }
    Ok((loss_sum * scale, grads))
}

/// Full training run; deterministic for a fixed config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = init_model_params(cfg)?;
    let history = train_loop(cfg, &mut params)?;
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

fn train_loop(cfg: &TrainConfig, params: &mut ParamSet) -> Result<Vec<f64>> {
    let tasks = build_tasks(cfg)?;
    let mut adam = Adam::new(cfg.adam.clone(), params);
    let mut history = Vec::new();
    let all: Vec<(usize, usize)> = (0..cfg.m_p)
        .flat_map(|p| (0..cfg.m_m).map(move |m| (p, m)))
        .collect();
    for epoch in 0..cfg.epochs {
        let mut order = all.clone();
        let mut rng = task_stream(cfg.seed, u64::MAX, 1 + epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let (loss, grads) = batch_loss_and_grads(cfg, params, &tasks, batch)?;
            adam.step(params, &grads)?;
            history.push(loss);
        }
    }
    Ok(history)
}

/// Continue training existing parameters (e.g. adapting to a narrower
/// problem-parameter range).
pub fn fine_tune(cfg: &TrainConfig, params: &mut ParamSet) -> Result<Vec<f64>> {
    train_loop(cfg, params)
}

/// Write the per-step loss history as CSV (`step,loss`).
pub fn save_loss_csv(history: &[f64], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{},{:.17e}", i, l)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgnet::{MetaDirectBank, MetaScBank};
    use crate::multigrid::{mg_cycle, MgConfig};
    use crate::params::Param;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = ParamSet::new();
        params
            .push(Param::new("w", &[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut grads = params.zeros_like();
        grads.params[0].data = vec![0.3, -0.7, 1e-3];
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg.clone(), &params);
        adam.step(&mut params, &grads).unwrap();
        // first ADAM step: mhat/sqrt(vhat) = sign(g) up to eps regularization
        for (i, &g) in [0.3f64, -0.7, 1e-3].iter().enumerate() {
            let expect = [1.0, -2.0, 0.5][i] - cfg.lr * g.signum() * (g.abs() / (g.abs() + cfg.eps));
            assert!((params.params[0].data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_two_steps_match_hand_unrolled() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut params = ParamSet::new();
        params.push(Param::new("w", &[1], vec![0.5]).unwrap()).unwrap();
        let mut g1 = params.zeros_like();
        g1.params[0].data = vec![0.4];
        let mut g2 = params.zeros_like();
        g2.params[0].data = vec![-0.2];
        let mut adam = Adam::new(cfg.clone(), &params);
        adam.step(&mut params, &g1).unwrap();
        adam.step(&mut params, &g2).unwrap();

        // hand unroll
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut w = 0.5;
        for (t, g) in [(1u32, 0.4), (2, -0.2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        assert!((params.params[0].data[0] - w).abs() < 1e-15);
    }

    #[test]
    fn rhs_sampling_deterministic_and_distinct() {
        let a = sample_rhs(&[7, 7], 42, 1, 2);
        let b = sample_rhs(&[7, 7], 42, 1, 2);
        let c = sample_rhs(&[7, 7], 42, 1, 3);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        // roughly standard normal
        let mean: f64 = a.data.iter().sum::<f64>() / 49.0;
        assert!(mean.abs() < 0.5);
    }

    #[test]
    fn eta_sampling_in_range() {
        let specs = sample_etas(7, 50, (0.0, 5.0), 0.3, 32);
        for s in &specs {
            let PdeSpec::Aniso2d { eps, theta, n } = s else { panic!() };
            assert!(*eps <= 1.0 && *eps >= 1e-5);
            assert_eq!(*theta, 0.3);
            assert_eq!(*n, 32);
        }
    }

    fn small_cfg(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            n: 16,
            levels: 2,
            nu: vec![2],
            m_p: 2,
            m_m: 2,
            epochs: 1,
            batch: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn taped_cycle_matches_inference_pde_mgnet() {
        let cfg = small_cfg(ModelKind::PdeMgnet);
        let params = init_model_params(&cfg).unwrap();
        let tasks = build_tasks(&cfg).unwrap();
        let h = &tasks.hierarchies[0];
        let f = sample_rhs(&tasks.extent, cfg.seed, 0, 0);

        let mut tape = Tape::new();
        let fnode = tape.constant_field(f.clone());
        let mut bank = TapePdeMgnet::new(&params, 2, cfg.taps);
        let u = tape_cycle(&mut tape, h, &tasks.lus[0], &mut bank, &cfg.nu, fnode, 0).unwrap();

        let inf_bank = ConvSmootherBank::from_params(params.clone(), 2, cfg.taps, &cfg.nu);
        let mg = MgConfig {
            nu: cfg.nu.clone(),
            ..Default::default()
        };
        let want = mg_cycle(h, &inf_bank, &mg, &f).unwrap();
        let scale = want.norm2().max(1.0);
        for (x, y) in tape.field(u).data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-13 * scale);
        }
    }

    #[test]
    fn taped_cycle_matches_inference_meta_sc() {
        let cfg = small_cfg(ModelKind::MetaSc);
        let params = init_model_params(&cfg).unwrap();
        let tasks = build_tasks(&cfg).unwrap();
        let h = &tasks.hierarchies[1];
        let f = sample_rhs(&tasks.extent, cfg.seed, 1, 0);

        let mut tape = Tape::new();
        let mcfg = meta_nn_config(&cfg);
        let mut bank = TapeMetaSc::new(&mut tape, &params, &mcfg, h).unwrap();
        let fnode = tape.constant_field(f.clone());
        let u = tape_cycle(&mut tape, h, &tasks.lus[1], &mut bank, &cfg.nu, fnode, 0).unwrap();

        let inf_bank = MetaScBank::new(mcfg, params.clone(), h).unwrap();
        let mg = MgConfig {
            nu: cfg.nu.clone(),
            ..Default::default()
        };
        let want = mg_cycle(h, &inf_bank, &mg, &f).unwrap();
        let scale = want.norm2().max(1.0);
        for (x, y) in tape.field(u).data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12 * scale, "{} vs {}", x, y);
        }
    }

    #[test]
    fn taped_cycle_matches_inference_meta_direct() {
        let cfg = small_cfg(ModelKind::MetaDirect);
        let params = init_model_params(&cfg).unwrap();
        let tasks = build_tasks(&cfg).unwrap();
        let h = &tasks.hierarchies[0];
        let f = sample_rhs(&tasks.extent, cfg.seed, 0, 1);

        let mut tape = Tape::new();
        let mcfg = meta_direct_config(&cfg);
        let mut bank = TapeMetaDirect::new(&mut tape, &params, &mcfg, h).unwrap();
        let fnode = tape.constant_field(f.clone());
        let u = tape_cycle(&mut tape, h, &tasks.lus[0], &mut bank, &cfg.nu, fnode, 0).unwrap();

        let inf_bank = MetaDirectBank {
            cfg: mcfg,
            params: params.clone(),
        };
        let mg = MgConfig {
            nu: cfg.nu.clone(),
            ..Default::default()
        };
        let want = mg_cycle(h, &inf_bank, &mg, &f).unwrap();
        let scale = want.norm2().max(1.0);
        for (x, y) in tape.field(u).data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-13 * scale);
        }
    }

    /// Spot-check full-loss gradients against finite differences on a small
    /// mesh for each model.
    fn fd_spot_check(model: ModelKind, entries: &[(usize, usize)], tol: f64) {
        let cfg = TrainConfig {
            n: 8,
            levels: 2,
            nu: vec![2],
            m_p: 1,
            m_m: 1,
            seed: 11,
            ..small_cfg(model)
        };
        let params = init_model_params(&cfg).unwrap();
        let tasks = build_tasks(&cfg).unwrap();
        let f = sample_rhs(&tasks.extent, cfg.seed, 0, 0);

        let eval = |p: &ParamSet| -> (f64, Option<ParamSet>) {
            let mut tape = Tape::new();
            let loss = match cfg.model {
                ModelKind::PdeMgnet => {
                    let mut bank = TapePdeMgnet::new(p, 2, cfg.taps);
                    sample_loss(&mut tape, &tasks.hierarchies[0], &tasks.lus[0], &mut bank, &cfg.nu, &f)
                        .unwrap()
                }
                ModelKind::MetaSc => {
                    let mcfg = meta_nn_config(&cfg);
                    let mut bank = TapeMetaSc::new(&mut tape, p, &mcfg, &tasks.hierarchies[0]).unwrap();
                    sample_loss(&mut tape, &tasks.hierarchies[0], &tasks.lus[0], &mut bank, &cfg.nu, &f)
                        .unwrap()
                }
                ModelKind::MetaDirect => {
                    let mcfg = meta_direct_config(&cfg);
                    let mut bank =
                        TapeMetaDirect::new(&mut tape, p, &mcfg, &tasks.hierarchies[0]).unwrap();
                    sample_loss(&mut tape, &tasks.hierarchies[0], &tasks.lus[0], &mut bank, &cfg.nu, &f)
                        .unwrap()
                }
            };
            let lv = tape.value(loss).scalar();
            let g = tape.backward(loss, p).unwrap();
            (lv, Some(g))
        };

        let (_, grads) = eval(&params);
        let grads = grads.unwrap();
        let eps = 1e-6;
        for &(pi, vi) in entries {
            let mut plus = params.clone();
            plus.params[pi].data[vi] += eps;
            let mut minus = params.clone();
            minus.params[pi].data[vi] -= eps;
            let (fp, _) = eval(&plus);
            let (fm, _) = eval(&minus);
            let fd = (fp - fm) / (2.0 * eps);
            let an = grads.params[pi].data[vi];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "param {} idx {}: fd {} vs analytic {}",
                pi,
                vi,
                fd,
                an
            );
        }
    }

    #[test]
    fn full_loss_gradients_pde_mgnet() {
        fd_spot_check(ModelKind::PdeMgnet, &[(0, 0), (0, 24), (1, 10)], 1e-5);
    }

    #[test]
    fn full_loss_gradients_meta_sc() {
        fd_spot_check(
            ModelKind::MetaSc,
            &[(0, 3), (1, 5), (2, 100), (3, 7), (3, 500)],
            1e-4,
        );
    }

    #[test]
    fn full_loss_gradients_meta_direct() {
        fd_spot_check(
            ModelKind::MetaDirect,
            &[(0, 0), (1, 2), (2, 50), (4, 10), (5, 3)],
            1e-4,
        );
    }

    #[test]
    fn training_reduces_loss_pde_mgnet() {
        let cfg = TrainConfig {
            epochs: 6,
            ..small_cfg(ModelKind::PdeMgnet)
        };
        let out = train(&cfg).unwrap();
        assert!(!out.loss_history.is_empty());
        let first = out.loss_history[0];
        let last = *out.loss_history.last().unwrap();
        assert!(last < first, "loss went from {} to {}", first, last);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            ..small_cfg(ModelKind::MetaDirect)
        };
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
    }
}
