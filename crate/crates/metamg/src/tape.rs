//! Tape-based reverse-mode differentiation over the closed set of primitives
//! used by the trainable solvers: convolutions (fixed and generated kernels),
//! grid transfers, the coarsest-level solve, dense layers, pooling, and the
//! subspace correction as one fused op with an analytic backward.
//!
//! Forward evaluation delegates to the same routines the plain solvers use,
//! so a recorded forward pass reproduces the un-taped computation exactly.

use crate::discretize::{DenseLu, LevelOperator};
use crate::error::{Error, Result};
use crate::grid::{conv, prolong_vc, restrict_vc, GridField, StencilKernel};
use crate::mgnet::{avgpool, dense_forward, relu};
use crate::params::ParamSet;
use crate::smoother::{ScContext, SubspaceBasis};
use std::rc::Rc;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Value {
    Field(GridField),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Value {
    pub fn field(&self) -> &GridField {
        match self {
            Value::Field(f) => f,
            _ => panic!("expected field value"),
        }
    }

    pub fn vector(&self) -> &[f64] {
        match self {
            Value::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }

    pub fn scalar(&self) -> f64 {
        match self {
            Value::Scalar(s) => *s,
            _ => panic!("expected scalar value"),
        }
    }
}

enum Op {
    ConstField,
    ConstVec,
    /// Leaf bound to `params.params[idx]`; gradients accumulate there.
    Param { idx: usize },
    ConvFixed { kernel: StencilKernel, input: NodeId },
    /// Convolution whose kernel coefficients are a vector node.
    ConvVar {
        kernel: NodeId,
        input: NodeId,
        out_channels: usize,
        in_channels: usize,
        taps: Vec<usize>,
    },
    RestrictVc { kernel: StencilKernel, input: NodeId },
    ProlongVc { kernel: StencilKernel, input: NodeId },
    CoarseSolve { lu: Rc<DenseLu>, input: NodeId },
    AddField { a: NodeId, b: NodeId },
    SubField { a: NodeId, b: NodeId },
    ScaleField { a: NodeId, c: f64 },
    ConcatChannels { inputs: Vec<NodeId> },
    Dense { w: NodeId, b: NodeId, x: NodeId },
    Relu { x: NodeId },
    SliceVec { x: NodeId, start: usize, len: usize },
    ConcatVec { inputs: Vec<NodeId> },
    /// `v / |v|_2` (field), with the zero field passed through unchanged.
    NormalizeField { input: NodeId },
    AvgPool { input: NodeId, bins: Vec<usize> },
    /// Fused subspace correction `e = G (G^T A G)^{-1} G^T r` where `G` is a
    /// multi-channel field node. Stores the factorization and coefficients
    /// for the analytic backward.
    ScApply {
        g: NodeId,
        r: NodeId,
        ctx: ScContext,
        y: Vec<f64>,
    },
    /// Reinterpret a vector node as a single-channel field (pure reshape).
    VecAsField { x: NodeId },
    /// Reinterpret a field node as a flat vector (pure reshape).
    FieldAsVec { x: NodeId },
    NormSq { field: NodeId },
    MulScalarConst { x: NodeId, c: f64 },
}

struct Node {
    value: Value,
    op: Op,
}

/// A Wengert list: values are computed eagerly as operations are recorded,
/// and `backward` replays the list in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

enum Adjoint {
    Field(GridField),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    pub fn field(&self, id: NodeId) -> &GridField {
        self.nodes[id].value.field()
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant_field(&mut self, f: GridField) -> NodeId {
        self.push(Value::Field(f), Op::ConstField)
    }

    pub fn constant_vec(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Value::Vector(v), Op::ConstVec)
    }

    /// Register a parameter leaf; `params` supplies the current value.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named '{}'", name)))?;
        Ok(self.push(
            Value::Vector(params.params[idx].data.clone()),
            Op::Param { idx },
        ))
    }

    pub fn conv_fixed(&mut self, kernel: &StencilKernel, input: NodeId) -> Result<NodeId> {
        let out = conv(kernel, self.field(input))?;
        Ok(self.push(
            Value::Field(out),
            Op::ConvFixed {
                kernel: kernel.clone(),
                input,
            },
        ))
    }

    pub fn conv_var(
        &mut self,
        kernel: NodeId,
        out_channels: usize,
        in_channels: usize,
        taps: &[usize],
        input: NodeId,
    ) -> Result<NodeId> {
        let k = StencilKernel::new(
            out_channels,
            in_channels,
            taps,
            self.nodes[kernel].value.vector().to_vec(),
        )?;
        let out = conv(&k, self.field(input))?;
        Ok(self.push(
            Value::Field(out),
            Op::ConvVar {
                kernel,
                input,
                out_channels,
                in_channels,
                taps: taps.to_vec(),
            },
        ))
    }

    pub fn restrict(&mut self, kernel: &StencilKernel, input: NodeId) -> Result<NodeId> {
        let out = restrict_vc(kernel, self.field(input))?;
        Ok(self.push(
            Value::Field(out),
            Op::RestrictVc {
                kernel: kernel.clone(),
                input,
            },
        ))
    }

    pub fn prolong(&mut self, kernel: &StencilKernel, input: NodeId) -> Result<NodeId> {
        let out = prolong_vc(kernel, self.field(input))?;
        Ok(self.push(
            Value::Field(out),
            Op::ProlongVc {
                kernel: kernel.clone(),
                input,
            },
        ))
    }

    pub fn coarse_solve(&mut self, lu: &Rc<DenseLu>, input: NodeId) -> NodeId {
        let f = self.field(input);
        let x = lu.solve(&f.data);
        let out = GridField {
            channels: 1,
            extent: f.extent.clone(),
            data: x,
        };
        self.push(
            Value::Field(out),
            Op::CoarseSolve {
                lu: Rc::clone(lu),
                input,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.field(a).add(self.field(b));
        self.push(Value::Field(out), Op::AddField { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.field(a).sub(self.field(b));
        self.push(Value::Field(out), Op::SubField { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.field(a).scaled(c);
        self.push(Value::Field(out), Op::ScaleField { a, c })
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let fields: Vec<&GridField> = inputs.iter().map(|&i| self.field(i)).collect();
        let out = GridField::concat_channels(&fields)?;
        Ok(self.push(
            Value::Field(out),
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn dense(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let out = dense_forward(
            self.nodes[w].value.vector(),
            self.nodes[b].value.vector(),
            self.nodes[x].value.vector(),
        );
        self.push(Value::Vector(out), Op::Dense { w, b, x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = relu(self.nodes[x].value.vector());
        self.push(Value::Vector(out), Op::Relu { x })
    }

    pub fn slice_vec(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.nodes[x].value.vector()[start..start + len].to_vec();
        self.push(Value::Vector(out), Op::SliceVec { x, start, len })
    }

    pub fn concat_vec(&mut self, inputs: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &i in inputs {
            out.extend_from_slice(self.nodes[i].value.vector());
        }
        self.push(
            Value::Vector(out),
            Op::ConcatVec {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn normalize_field(&mut self, input: NodeId) -> NodeId {
        let f = self.field(input);
        let n = f.norm2();
        let out = if n == 0.0 { f.clone() } else { f.scaled(1.0 / n) };
        self.push(Value::Field(out), Op::NormalizeField { input })
    }

    pub fn avgpool(&mut self, input: NodeId, bins: &[usize]) -> NodeId {
        let out = avgpool(self.field(input), bins);
        self.push(
            Value::Vector(out),
            Op::AvgPool {
                input,
                bins: bins.to_vec(),
            },
        )
    }

    /// Fused subspace correction. `g` must be a multi-channel field node
    /// whose channels form the basis; `r` a single-channel residual node.
    pub fn sc_apply(&mut self, a: &LevelOperator, g: NodeId, r: NodeId) -> Result<NodeId> {
        let basis = SubspaceBasis::from_channels(self.field(g));
        let ctx = ScContext::new(a, basis)?;
        let y = ctx.solve_coeffs(self.field(r));
        let e = ctx.expand(&y);
        Ok(self.push(Value::Field(e), Op::ScApply { g, r, ctx, y }))
    }

    pub fn vec_as_field(&mut self, x: NodeId, extent: &[usize]) -> Result<NodeId> {
        let field = GridField::from_vec(1, extent, self.nodes[x].value.vector().to_vec())?;
        Ok(self.push(Value::Field(field), Op::VecAsField { x }))
    }

    pub fn field_as_vec(&mut self, x: NodeId) -> NodeId {
        let v = self.field(x).data.clone();
        self.push(Value::Vector(v), Op::FieldAsVec { x })
    }

    pub fn norm_sq(&mut self, field: NodeId) -> NodeId {
        let f = self.field(field);
        let out = f.dot(f);
        self.push(Value::Scalar(out), Op::NormSq { field })
    }

    pub fn mul_scalar_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x].value.scalar() * c;
        self.push(Value::Scalar(out), Op::MulScalarConst { x, c })
    }

    /// Reverse sweep from a scalar output node; returns gradients with the
    /// structure of `params`.
    pub fn backward(&mut self, output: NodeId, params: &ParamSet) -> Result<ParamSet> {
        if !matches!(self.nodes[output].value, Value::Scalar(_)) {
            return Err(Error::InvalidArgument("backward needs a scalar output".into()));
        }
        let mut adj: Vec<Option<Adjoint>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output] = Some(Adjoint::Scalar(1.0));
        let mut grads = params.zeros_like();

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::ConstField | Op::ConstVec => {}
                Op::Param { idx } => {
                    let gv = as_vec(g);
                    for (a, b) in grads.params[*idx].data.iter_mut().zip(&gv) {
                        *a += b;
                    }
                }
                Op::ConvFixed { kernel, input } => {
                    let gout = as_field(g);
                    let gin = conv(&kernel.adjoint(), &gout)?;
                    add_field(&mut adj, *input, gin);
                }
                Op::ConvVar {
                    kernel,
                    input,
                    out_channels,
                    in_channels,
                    taps,
                } => {
                    let gout = as_field(g);
                    let kvals = self.nodes[*kernel].value.vector();
                    let k = StencilKernel::new(*out_channels, *in_channels, taps, kvals.to_vec())?;
                    let gin = conv(&k.adjoint(), &gout)?;
                    let gk = conv_kernel_grad(&k, self.field(*input), &gout);
                    add_field(&mut adj, *input, gin);
                    add_vec(&mut adj, *kernel, gk);
                }
                Op::RestrictVc { kernel, input } => {
                    let gout = as_field(g);
                    let gin = prolong_vc(&kernel.adjoint(), &gout)?;
                    add_field(&mut adj, *input, gin);
                }
                Op::ProlongVc { kernel, input } => {
                    let gout = as_field(g);
                    let gin = restrict_vc(&kernel.adjoint(), &gout)?;
                    add_field(&mut adj, *input, gin);
                }
                Op::CoarseSolve { lu, input } => {
                    let gout = as_field(g);
                    let gin = GridField {
                        channels: 1,
                        extent: gout.extent.clone(),
                        data: lu.solve_transpose(&gout.data),
                    };
                    add_field(&mut adj, *input, gin);
                }
                Op::AddField { a, b } => {
                    let gout = as_field(g);
                    add_field(&mut adj, *a, gout.clone());
                    add_field(&mut adj, *b, gout);
                }
                Op::SubField { a, b } => {
                    let gout = as_field(g);
                    add_field(&mut adj, *a, gout.clone());
                    add_field(&mut adj, *b, gout.scaled(-1.0));
                }
                Op::ScaleField { a, c } => {
                    let gout = as_field(g);
                    add_field(&mut adj, *a, gout.scaled(*c));
                }
                Op::ConcatChannels { inputs } => {
                    let gout = as_field(g);
                    let mut ch = 0;
                    for &i in inputs {
                        let nch = self.field(i).channels;
                        let n = gout.len_per_channel();
                        let part = GridField {
                            channels: nch,
                            extent: gout.extent.clone(),
                            data: gout.data[ch * n..(ch + nch) * n].to_vec(),
                        };
                        add_field(&mut adj, i, part);
                        ch += nch;
                    }
                }
                Op::Dense { w, b, x } => {
                    let gy = as_vec(g);
                    let wv = self.nodes[*w].value.vector();
                    let xv = self.nodes[*x].value.vector();
                    let (rows, cols) = (gy.len(), xv.len());
                    let mut gw = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; cols];
                    for r in 0..rows {
                        let gyr = gy[r];
                        if gyr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            gw[r * cols + c] += gyr * xv[c];
                            gx[c] += wv[r * cols + c] * gyr;
                        }
                    }
                    add_vec(&mut adj, *w, gw);
                    add_vec(&mut adj, *b, gy);
                    add_vec(&mut adj, *x, gx);
                }
                Op::Relu { x } => {
                    let gy = as_vec(g);
                    let xv = self.nodes[*x].value.vector();
                    let gx: Vec<f64> = gy
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_vec(&mut adj, *x, gx);
                }
                Op::SliceVec { x, start, len } => {
                    let gy = as_vec(g);
                    let mut gx = vec![0.0; self.nodes[*x].value.vector().len()];
                    gx[*start..*start + *len].copy_from_slice(&gy);
                    add_vec(&mut adj, *x, gx);
                }
                Op::ConcatVec { inputs } => {
                    let gy = as_vec(g);
                    let mut off = 0;
                    for &i in inputs {
                        let n = self.nodes[i].value.vector().len();
                        add_vec(&mut adj, i, gy[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::NormalizeField { input } => {
                    let gy = as_field(g);
                    let v = self.field(*input);
                    let n = v.norm2();
                    if n == 0.0 {
                        add_field(&mut adj, *input, gy);
                    } else {
                        // d(v/|v|) = g/|v| - v (v.g)/|v|^3
                        let mut gin = gy.scaled(1.0 / n);
                        gin.axpy(-v.dot(&gy) / (n * n * n), v);
                        add_field(&mut adj, *input, gin);
                    }
                }
                Op::AvgPool { input, bins } => {
                    let gy = as_vec(g);
                    let v = self.field(*input);
                    let gin = avgpool_backward(v, bins, &gy);
                    add_field(&mut adj, *input, gin);
                }
                Op::ScApply { g: gn, r, ctx, y } => {
                    let ge = as_field(g);
                    // w = M^{-1} G^T ge
                    let w = ctx.solve_coeffs(&ge);
                    // dr: G w
                    add_field(&mut adj, *r, ctx.expand(&w));
                    // dG_a = y_a ge + w_a r - w_a (A G y) - y_a (A G w)
                    let rfield = self.field(*r);
                    let agy = ctx.expand_a(y);
                    let agw = ctx.expand_a(&w);
                    let l = ctx.basis.len();
                    let n = ge.len_per_channel();
                    let mut gg = GridField::zeros(l, &ge.extent);
                    for a in 0..l {
                        let col = &mut gg.data[a * n..(a + 1) * n];
                        for i in 0..n {
                            col[i] = y[a] * ge.data[i] + w[a] * rfield.data[i]
                                - w[a] * agy.data[i]
                                - y[a] * agw.data[i];
                        }
                    }
                    add_field(&mut adj, *gn, gg);
                }
                Op::VecAsField { x } => {
                    let gout = as_field(g);
                    add_vec(&mut adj, *x, gout.data);
                }
                Op::FieldAsVec { x } => {
                    let gout = as_vec(g);
                    let f = self.field(*x);
                    let gin = GridField {
                        channels: f.channels,
                        extent: f.extent.clone(),
                        data: gout,
                    };
                    add_field(&mut adj, *x, gin);
                }
                Op::NormSq { field } => {
                    let gs = as_scalar(g);
                    let f = self.field(*field);
                    add_field(&mut adj, *field, f.scaled(2.0 * gs));
                }
                Op::MulScalarConst { x, c } => {
                    let gs = as_scalar(g);
                    let gx = gs * c;
                    match &mut adj[*x] {
                        Some(Adjoint::Scalar(s)) => *s += gx,
                        None => adj[*x] = Some(Adjoint::Scalar(gx)),
                        _ => panic!("adjoint kind mismatch"),
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn as_field(a: Adjoint) -> GridField {
    match a {
        Adjoint::Field(f) => f,
        _ => panic!("expected field adjoint"),
    }
}

fn as_vec(a: Adjoint) -> Vec<f64> {
    match a {
        Adjoint::Vector(v) => v,
        _ => panic!("expected vector adjoint"),
    }
}

fn as_scalar(a: Adjoint) -> f64 {
    match a {
        Adjoint::Scalar(s) => s,
        _ => panic!("expected scalar adjoint"),
    }
}

fn add_field(adj: &mut [Option<Adjoint>], id: NodeId, g: GridField) {
    match &mut adj[id] {
        Some(Adjoint::Field(f)) => f.axpy(1.0, &g),
        None => adj[id] = Some(Adjoint::Field(g)),
        _ => panic!("adjoint kind mismatch"),
    }
}

fn add_vec(adj: &mut [Option<Adjoint>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id] {
        Some(Adjoint::Vector(v)) => {
            for (a, b) in v.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => adj[id] = Some(Adjoint::Vector(g)),
        _ => panic!("adjoint kind mismatch"),
    }
}

/// Gradient of `conv(K, v)` with respect to the kernel coefficients:
/// `gK[l,k,tap] = sum_x gout[l,x] * v[k, x+tap]` over in-range positions.
fn conv_kernel_grad(k: &StencilKernel, v: &GridField, gout: &GridField) -> Vec<f64> {
    let d = v.dim();
    let npc = v.len_per_channel();
    let ktaps = k.taps_per_pair();
    let radius: Vec<i64> = k.taps.iter().map(|&t| (t / 2) as i64).collect();
    let mut gk = vec![0.0; k.data.len()];
    let mut tap = vec![0i64; d];
    let mut idx = vec![0usize; d];
    for l in 0..k.out_channels {
        let gdata = &gout.data[l * npc..(l + 1) * npc];
        for kc in 0..k.in_channels {
            let vdata = &v.data[kc * npc..(kc + 1) * npc];
            let gslot = &mut gk[(l * k.in_channels + kc) * ktaps..][..ktaps];
            for (t, slot) in gslot.iter_mut().enumerate() {
                let mut rem = t;
                for ax in (0..d).rev() {
                    tap[ax] = (rem % k.taps[ax]) as i64 - radius[ax];
                    rem /= k.taps[ax];
                }
                let mut acc = 0.0;
                'pos: for (flat, &gv) in gdata.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let mut rem = flat;
                    for ax in (0..d).rev() {
                        idx[ax] = rem % v.extent[ax];
                        rem /= v.extent[ax];
                    }
                    let mut sflat = 0usize;
                    for ax in 0..d {
                        let s = idx[ax] as i64 + tap[ax];
                        if s < 0 || s >= v.extent[ax] as i64 {
                            continue 'pos;
                        }
                        sflat = sflat * v.extent[ax] + s as usize;
                    }
                    acc += gv * vdata[sflat];
                }
                *slot = acc;
            }
        }
    }
    gk
}

/// Distribute pooled-cell gradients back uniformly over their members.
fn avgpool_backward(v: &GridField, bins: &[usize], gy: &[f64]) -> GridField {
    let d = v.dim();
    let n = v.len_per_channel();
    let mut counts = vec![0usize; gy.len()];
    let mut binof = vec![0usize; n];
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
        binof[flat] = b;
        counts[b] += 1;
    }
    let mut out = GridField::zeros(1, &v.extent);
    for flat in 0..n {
        let b = binof[flat];
        if counts[b] > 0 {
            out.data[flat] = gy[b] / counts[b] as f64;
        }
    }
    out
}
