//! Exact derivatives for functions composed from a closed set of smooth
//! primitives.
//!
//! A [`DifferentiableFn`] is a straight-line program over tensors built with
//! [`FnBuilder`]. Every primitive carries two derivative rules: a tangent
//! rule used by [`DifferentiableFn::jvp`] (forward mode, values and tangents
//! travel together like dual numbers) and an adjoint rule used by
//! [`DifferentiableFn::vjp`] (reverse mode over the recorded forward pass).
//!
//! The primitive set is small on purpose: matrix products, same-padded 2-D
//! convolution, per-channel bias, elementwise add/sub/Hadamard product,
//! scalar affine maps, `tanh`, `softplus`, full sums, reshape and
//! concatenation. Nothing here is non-smooth, so finite differences are a
//! valid oracle for every composite.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Const(Arc<Tensor>),
    /// `[m, k] x [k]` or `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    /// `[cin, h, w]` input with `[cout, cin, kh, kw]` kernel, zero "same" padding.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
    },
    /// Adds `bias[c]` to every pixel of channel `c` of a `[c, h, w]` tensor.
    ChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Tanh(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Incrementally records primitives; every method validates shapes eagerly so
/// a malformed composite is rejected at construction with the primitive named.
#[derive(Default)]
pub struct FnBuilder {
    nodes: Vec<Node>,
    input_shapes: Vec<Vec<usize>>,
}

impl FnBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let index = self.input_shapes.len();
        self.input_shapes.push(shape.to_vec());
        self.push(Op::Input(index), shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2]) if k == k2 => vec![*m],
            ([m, k], [k2, n]) if k == k2 => vec![*m, *n],
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `w·x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        match (si.as_slice(), sk.as_slice()) {
            ([cin, h, w], [cout, cin2, kh, kw]) if cin == cin2 && kh % 2 == 1 && kw % 2 == 1 => {
                let out = vec![*cout, *h, *w];
                Ok(self.push(Op::Conv2d { input, kernel }, out))
            }
            _ => Err(Error::shape("conv2d", &si, &sk)),
        }
    }

    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sb = self.shape(bias).to_vec();
        match (si.as_slice(), sb.as_slice()) {
            ([c, _, _], [c2]) if c == c2 => Ok(self.push(Op::ChannelBias { input, bias }, si)),
            _ => Err(Error::shape("channel_bias", &si, &sb)),
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::shape(op.name(), &sa, self.shape(b)));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape)
    }

    pub fn shift(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Shift(a, s), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softplus(a), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    /// Sum of `a ⊙ mask`.
    pub fn masked_sum(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let m = self.constant(mask);
        let prod = self.mul(a, m)?;
        Ok(self.sum(prod))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let sq = self.push(Op::Mul(a, a), self.shape(a).to_vec());
        self.sum(sq)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let n = numel(self.shape(a));
        self.push(Op::Reshape(a), vec![n])
    }

    /// Concatenates the flattened operands into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero operands"));
        }
        let n = parts.iter().map(|&p| numel(self.shape(p))).sum();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![n]))
    }

    /// Inlines `f` with its inputs bound to `args`, returning the node holding
    /// `f`'s output.
    pub fn call(&mut self, f: &DifferentiableFn, args: &[NodeId]) -> Result<NodeId> {
        if args.len() != f.input_shapes.len() {
            return Err(Error::invalid(format!(
                "call expects {} arguments, got {}",
                f.input_shapes.len(),
                args.len()
            )));
        }
        for (i, (&a, s)) in args.iter().zip(&f.input_shapes).enumerate() {
            if self.shape(a) != s.as_slice() {
                return Err(Error::shape(format!("call argument #{i}"), s, self.shape(a)));
            }
        }
        let mut remap = Vec::with_capacity(f.nodes.len());
        for node in f.nodes.iter() {
            let r = |id: &NodeId| remap[*id];
            let id = match &node.op {
                Op::Input(i) => args[*i],
                other => {
                    let op = match other {
                        Op::Input(_) => unreachable!(),
                        Op::Const(c) => Op::Const(Arc::clone(c)),
                        Op::MatMul(a, b) => Op::MatMul(r(a), r(b)),
                        Op::Conv2d { input, kernel } => Op::Conv2d {
                            input: r(input),
                            kernel: r(kernel),
                        },
                        Op::ChannelBias { input, bias } => Op::ChannelBias {
                            input: r(input),
                            bias: r(bias),
                        },
                        Op::Add(a, b) => Op::Add(r(a), r(b)),
                        Op::Sub(a, b) => Op::Sub(r(a), r(b)),
                        Op::Mul(a, b) => Op::Mul(r(a), r(b)),
                        Op::Scale(a, s) => Op::Scale(r(a), *s),
                        Op::Shift(a, s) => Op::Shift(r(a), *s),
                        Op::Tanh(a) => Op::Tanh(r(a)),
                        Op::Softplus(a) => Op::Softplus(r(a)),
                        Op::Sum(a) => Op::Sum(r(a)),
                        Op::Reshape(a) => Op::Reshape(r(a)),
                        Op::Concat(ps) => Op::Concat(ps.iter().map(r).collect()),
                    };
                    self.push(op, node.shape.clone())
                }
            };
            remap.push(id);
        }
        Ok(remap[f.output])
    }

    pub fn build(self, output: NodeId) -> Result<DifferentiableFn> {
        if output >= self.nodes.len() {
            return Err(Error::invalid(format!("output node {output} does not exist")));
        }
        Ok(DifferentiableFn {
            nodes: Arc::new(self.nodes),
            input_shapes: self.input_shapes,
            output,
        })
    }
}

/// An immutable composite of primitives with exact `evaluate`, `jvp`, `vjp`
/// and `grad`. Cheap to clone and safe to share between threads.
#[derive(Clone, Debug)]
pub struct DifferentiableFn {
    nodes: Arc<Vec<Node>>,
    input_shapes: Vec<Vec<usize>>,
    output: NodeId,
}

type Value<'a> = Cow<'a, Tensor>;

impl DifferentiableFn {
    pub fn identity(shape: &[usize]) -> Self {
        let mut b = FnBuilder::new();
        let x = b.input(shape);
        b.build(x).expect("identity graph")
    }

    /// `x ↦ A·x` for a `[m, n]` matrix.
    pub fn linear(a: Tensor) -> Result<Self> {
        let (_, n) = a.as_matrix_dims("linear")?;
        let mut b = FnBuilder::new();
        let x = b.input(&[n]);
        let w = b.constant(a);
        let y = b.matmul(w, x)?;
        b.build(y)
    }

    /// `x ↦ Σ x²`.
    pub fn sum_of_squares(shape: &[usize]) -> Self {
        let mut b = FnBuilder::new();
        let x = b.input(shape);
        let y = b.sum_squares(x);
        b.build(y).expect("sum of squares graph")
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn is_scalar(&self) -> bool {
        numel(self.output_shape()) == 1
    }

    fn check_inputs(&self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::invalid(format!(
                "function takes {} inputs, got {}",
                self.input_shapes.len(),
                inputs.len()
            )));
        }
        for (i, (x, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if x.shape() != s.as_slice() {
                return Err(Error::shape(format!("input #{i}"), s, x.shape()));
            }
        }
        Ok(())
    }

    fn forward<'a>(&'a self, inputs: &[&'a Tensor]) -> Result<Vec<Value<'a>>> {
        self.check_inputs(inputs)?;
        let mut vals: Vec<Value<'a>> = Vec::with_capacity(self.nodes.len());
        for node in self.nodes.iter() {
            let v: Value<'a> = match &node.op {
                Op::Input(i) => Cow::Borrowed(inputs[*i]),
                Op::Const(c) => Cow::Borrowed(c.as_ref()),
                Op::MatMul(a, b) => Cow::Owned(kernels::matmul(&vals[*a], &vals[*b])),
                Op::Conv2d { input, kernel } => {
                    Cow::Owned(kernels::conv2d(&vals[*input], &vals[*kernel]))
                }
                Op::ChannelBias { input, bias } => {
                    Cow::Owned(kernels::channel_bias(&vals[*input], &vals[*bias]))
                }
                Op::Add(a, b) => Cow::Owned(kernels::zip(&vals[*a], &vals[*b], |x, y| x + y)),
                Op::Sub(a, b) => Cow::Owned(kernels::zip(&vals[*a], &vals[*b], |x, y| x - y)),
                Op::Mul(a, b) => Cow::Owned(kernels::zip(&vals[*a], &vals[*b], |x, y| x * y)),
                Op::Scale(a, s) => Cow::Owned(vals[*a].scale(*s)),
                Op::Shift(a, s) => Cow::Owned(vals[*a].map(|x| x + s)),
                Op::Tanh(a) => Cow::Owned(vals[*a].map(f64::tanh)),
                Op::Softplus(a) => Cow::Owned(vals[*a].map(softplus)),
                Op::Sum(a) => Cow::Owned(Tensor::scalar(vals[*a].sum())),
                Op::Reshape(a) => Cow::Owned(kernels::reshaped(&vals[*a], &node.shape)),
                Op::Concat(ps) => Cow::Owned(kernels::concat(ps.iter().map(|p| &*vals[*p]))),
            };
            vals.push(v);
        }
        Ok(vals)
    }

    pub fn evaluate(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut vals = self.forward(inputs)?;
        Ok(vals.swap_remove(self.output).into_owned())
    }

    /// Forward-mode derivative with respect to input `wrt` along `v`;
    /// returns `(f(inputs), J·v)`.
    pub fn jvp_wrt(&self, inputs: &[&Tensor], wrt: usize, v: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_inputs(inputs)?;
        if wrt >= inputs.len() {
            return Err(Error::invalid(format!("no input #{wrt}")));
        }
        if v.shape() != inputs[wrt].shape() {
            return Err(Error::shape("jvp tangent", inputs[wrt].shape(), v.shape()));
        }
        let vals = self.forward(inputs)?;
        let mut tans: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let t = |n: &NodeId| tans[*n].as_ref();
            let tan = match &node.op {
                Op::Input(i) => (*i == wrt).then(|| v.clone()),
                Op::Const(_) => None,
                Op::MatMul(a, b) => bilinear(t(a), t(b), |ta| kernels::matmul(ta, &vals[*b]), |tb| {
                    kernels::matmul(&vals[*a], tb)
                }),
                Op::Conv2d { input, kernel } => bilinear(
                    t(input),
                    t(kernel),
                    |ti| kernels::conv2d(ti, &vals[*kernel]),
                    |tk| kernels::conv2d(&vals[*input], tk),
                ),
                Op::ChannelBias { input, bias } => match (t(input), t(bias)) {
                    (None, None) => None,
                    (ti, tb) => {
                        let base = ti
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(&node.shape));
                        Some(match tb {
                            Some(tb) => kernels::channel_bias(&base, tb),
                            None => base,
                        })
                    }
                },
                Op::Add(a, b) => sum_opt(t(a).cloned(), t(b), 1.0),
                Op::Sub(a, b) => sum_opt(t(a).cloned(), t(b), -1.0),
                Op::Mul(a, b) => bilinear(
                    t(a),
                    t(b),
                    |ta| kernels::zip(ta, &vals[*b], |x, y| x * y),
                    |tb| kernels::zip(&vals[*a], tb, |x, y| x * y),
                ),
                Op::Scale(a, s) => t(a).map(|ta| ta.scale(*s)),
                Op::Shift(a, _) => t(a).cloned(),
                Op::Tanh(a) => t(a).map(|ta| {
                    kernels::zip(ta, &vals[id], |d, y| d * (1.0 - y * y))
                }),
                Op::Softplus(a) => t(a).map(|ta| {
                    kernels::zip(ta, &vals[*a], |d, x| d * sigmoid(x))
                }),
                Op::Sum(a) => t(a).map(|ta| Tensor::scalar(ta.sum())),
                Op::Reshape(a) => t(a).map(|ta| kernels::reshaped(ta, &node.shape)),
                Op::Concat(ps) => {
                    if ps.iter().all(|p| tans[*p].is_none()) {
                        None
                    } else {
                        let zeros: Vec<Tensor> = ps
                            .iter()
                            .map(|p| Tensor::zeros(&self.nodes[*p].shape))
                            .collect();
                        Some(kernels::concat(
                            ps.iter()
                                .zip(&zeros)
                                .map(|(p, z)| tans[*p].as_ref().unwrap_or(z)),
                        ))
                    }
                }
            };
            tans.push(tan);
        }
        let value = vals[self.output].clone().into_owned();
        let tangent = tans[self.output]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.output_shape()));
        Ok((value, tangent))
    }

    /// `J_f(x)·v` for a single-input function.
    pub fn jvp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.single_input("jvp")?;
        Ok(self.jvp_wrt(&[x], 0, v)?.1)
    }

    /// Reverse-mode pass: returns `f(inputs)` and `J_iᵀ·w` for every input `i`.
    pub fn vjp_all(&self, inputs: &[&Tensor], w: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if w.shape() != self.output_shape() {
            return Err(Error::shape("vjp cotangent", self.output_shape(), w.shape()));
        }
        let vals = self.forward(inputs)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[self.output] = Some(w.clone());
        let mut grads: Vec<Option<Tensor>> = vec![None; self.input_shapes.len()];

        for id in (0..=self.output).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input(i) => accumulate(&mut grads[*i], g),
                Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_adjoint(&vals[*a], &vals[*b], &g);
                    accumulate(&mut adj[*a], ga);
                    accumulate(&mut adj[*b], gb);
                }
                Op::Conv2d { input, kernel } => {
                    let (gi, gk) = kernels::conv2d_adjoint(&vals[*input], &vals[*kernel], &g);
                    accumulate(&mut adj[*input], gi);
                    accumulate(&mut adj[*kernel], gk);
                }
                Op::ChannelBias { input, bias } => {
                    let gb = kernels::channel_sums(&g);
                    accumulate(&mut adj[*bias], gb);
                    accumulate(&mut adj[*input], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[*b], g.clone());
                    accumulate(&mut adj[*a], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[*b], g.scale(-1.0));
                    accumulate(&mut adj[*a], g);
                }
                Op::Mul(a, b) => {
                    let ga = kernels::zip(&g, &vals[*b], |x, y| x * y);
                    let gb = kernels::zip(&g, &vals[*a], |x, y| x * y);
                    accumulate(&mut adj[*a], ga);
                    accumulate(&mut adj[*b], gb);
                }
                Op::Scale(a, s) => accumulate(&mut adj[*a], g.scale(*s)),
                Op::Shift(a, _) => accumulate(&mut adj[*a], g),
                Op::Tanh(a) => {
                    let ga = kernels::zip(&g, &vals[id], |d, y| d * (1.0 - y * y));
                    accumulate(&mut adj[*a], ga);
                }
                Op::Softplus(a) => {
                    let ga = kernels::zip(&g, &vals[*a], |d, x| d * sigmoid(x));
                    accumulate(&mut adj[*a], ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut adj[*a], Tensor::full(&self.nodes[*a].shape, s));
                }
                Op::Reshape(a) => {
                    let ga = kernels::reshaped(&g, &self.nodes[*a].shape);
                    accumulate(&mut adj[*a], ga);
                }
                Op::Concat(ps) => {
                    let mut offset = 0;
                    for p in ps {
                        let shape = &self.nodes[*p].shape;
                        let n = numel(shape);
                        let part = Tensor::new(shape, g.data()[offset..offset + n].to_vec())
                            .expect("concat slice");
                        offset += n;
                        accumulate(&mut adj[*p], part);
                    }
                }
            }
        }
        let value = vals[self.output].clone().into_owned();
        let grads = grads
            .into_iter()
            .zip(&self.input_shapes)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(s)))
            .collect();
        Ok((value, grads))
    }

    /// `J_f(x)ᵀ·w` for a single-input function.
    pub fn vjp(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.single_input("vjp")?;
        let (_, mut grads) = self.vjp_all(&[x], w)?;
        Ok(grads.swap_remove(0))
    }

    /// Gradient of a scalar-valued single-input function; identical to
    /// `vjp(x, 1)`.
    pub fn grad(&self, x: &Tensor) -> Result<Tensor> {
        if !self.is_scalar() {
            return Err(Error::invalid(format!(
                "grad needs a scalar-valued function, output shape is {:?}",
                self.output_shape()
            )));
        }
        let one = Tensor::full(self.output_shape(), 1.0);
        self.vjp(x, &one)
    }

    /// `(f(x), ∇f(x))` from one reverse pass.
    pub fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        if !self.is_scalar() {
            return Err(Error::invalid("value_and_grad needs a scalar-valued function"));
        }
        self.single_input("value_and_grad")?;
        let one = Tensor::full(self.output_shape(), 1.0);
        let (value, mut grads) = self.vjp_all(&[x], &one)?;
        Ok((value.data()[0], grads.swap_remove(0)))
    }

    fn single_input(&self, op: &str) -> Result<()> {
        if self.input_shapes.len() != 1 {
            return Err(Error::invalid(format!(
                "`{op}` needs a single-input function; this one takes {}",
                self.input_shapes.len()
            )));
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("adjoint shapes agree"),
        None => *slot = Some(g),
    }
}

fn sum_opt(a: Option<Tensor>, b: Option<&Tensor>, sign: f64) -> Option<Tensor> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b.scale(sign)),
        (Some(a), Some(b)) => Some(a.axpy(sign, b).expect("tangent shapes agree")),
    }
}

fn bilinear(
    ta: Option<&Tensor>,
    tb: Option<&Tensor>,
    left: impl FnOnce(&Tensor) -> Tensor,
    right: impl FnOnce(&Tensor) -> Tensor,
) -> Option<Tensor> {
    sum_opt(ta.map(left), tb.map(right).as_ref(), 1.0)
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

mod kernels {
    use crate::tensor::Tensor;

    pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        a.zip_map(b, "zip", f).expect("shapes checked at build time")
    }

    pub fn reshaped(a: &Tensor, shape: &[usize]) -> Tensor {
        a.reshape(shape).expect("reshape checked at build time")
    }

    pub fn concat<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Tensor {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::vector(data)
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let bd = b.data();
        if b.shape().len() == 1 {
            let out = (0..m)
                .map(|i| ad[i * k..(i + 1) * k].iter().zip(bd).map(|(x, y)| x * y).sum())
                .collect();
            Tensor::vector(out)
        } else {
            let n = b.shape()[1];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let row = &bd[p * n..(p + 1) * n];
                    for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(&[m, n], out).expect("matmul shape")
        }
    }

    pub fn matmul_adjoint(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let bd = b.data();
        let gd = g.data();
        if b.shape().len() == 1 {
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k];
            for i in 0..m {
                let gi = gd[i];
                let row = &ad[i * k..(i + 1) * k];
                for p in 0..k {
                    ga[i * k + p] = gi * bd[p];
                    gb[p] += row[p] * gi;
                }
            }
            (
                Tensor::new(&[m, k], ga).expect("matmul adjoint"),
                Tensor::vector(gb),
            )
        } else {
            let n = b.shape()[1];
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += gd[i * n + j] * bd[p * n + j];
                        gb[p * n + j] += ad[i * k + p] * gd[i * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            (
                Tensor::new(&[m, k], ga).expect("matmul adjoint"),
                Tensor::new(&[k, n], gb).expect("matmul adjoint"),
            )
        }
    }

    struct ConvDims {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    }

    fn conv_dims(input: &Tensor, kernel: &Tensor) -> ConvDims {
        let (si, sk) = (input.shape(), kernel.shape());
        ConvDims {
            cin: si[0],
            h: si[1],
            w: si[2],
            cout: sk[0],
            kh: sk[2],
            kw: sk[3],
        }
    }

    /// Visits every (out index, input index, kernel index) triple that
    /// contributes to a same-padded convolution.
    fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (d.kh / 2, d.kw / 2);
        for co in 0..d.cout {
            for y in 0..d.h {
                for x in 0..d.w {
                    let o = (co * d.h + y) * d.w + x;
                    for ci in 0..d.cin {
                        for ky in 0..d.kh {
                            let yy = y + ky;
                            if yy < ph || yy - ph >= d.h {
                                continue;
                            }
                            let yy = yy - ph;
                            for kx in 0..d.kw {
                                let xx = x + kx;
                                if xx < pw || xx - pw >= d.w {
                                    continue;
                                }
                                let xx = xx - pw;
                                let i = (ci * d.h + yy) * d.w + xx;
                                let k = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
                                f(o, i, k);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Tensor {
        let d = conv_dims(input, kernel);
        let (id, kd) = (input.data(), kernel.data());
        let mut out = vec![0.0; d.cout * d.h * d.w];
        for_each_tap(&d, |o, i, k| out[o] += kd[k] * id[i]);
        Tensor::new(&[d.cout, d.h, d.w], out).expect("conv shape")
    }

    pub fn conv2d_adjoint(input: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
        let d = conv_dims(input, kernel);
        let (id, kd, gd) = (input.data(), kernel.data(), g.data());
        let mut gi = vec![0.0; id.len()];
        let mut gk = vec![0.0; kd.len()];
        for_each_tap(&d, |o, i, k| {
            gi[i] += kd[k] * gd[o];
            gk[k] += id[i] * gd[o];
        });
        (
            Tensor::new(input.shape(), gi).expect("conv adjoint"),
            Tensor::new(kernel.shape(), gk).expect("conv adjoint"),
        )
    }

    pub fn channel_bias(input: &Tensor, bias: &Tensor) -> Tensor {
        let plane = input.shape()[1] * input.shape()[2];
        let mut out = input.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bias.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        out
    }

    pub fn channel_sums(g: &Tensor) -> Tensor {
        let plane = g.shape()[1] * g.shape()[2];
        Tensor::vector(g.data().chunks(plane).map(|c| c.iter().sum()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relative_error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct TwoLayer {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    }

    fn seeded_weights(seed: u64, n_in: usize, hidden: usize, n_out: usize) -> TwoLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 1.0 / (n_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        TwoLayer {
            w1: Tensor::randn(&[hidden, n_in], &mut rng).scale(s1),
            b1: Tensor::randn(&[hidden], &mut rng).scale(0.1),
            w2: Tensor::randn(&[n_out, hidden], &mut rng).scale(s2),
            b2: Tensor::randn(&[n_out], &mut rng).scale(0.1),
        }
    }

    /// `softplus(W2·tanh(W1·x + b1) + b2)`.
    fn two_layer_net(w: &TwoLayer) -> DifferentiableFn {
        let mut b = FnBuilder::new();
        let x = b.input(&[w.w1.shape()[1]]);
        let w1 = b.constant(w.w1.clone());
        let b1 = b.constant(w.b1.clone());
        let w2 = b.constant(w.w2.clone());
        let b2 = b.constant(w.b2.clone());
        let h = b.affine(w1, x, b1).unwrap();
        let h = b.tanh(h);
        let o = b.affine(w2, h, b2).unwrap();
        let o = b.softplus(o);
        b.build(o).unwrap()
    }

    fn hand_eval(w: &TwoLayer, x: &[f64]) -> Vec<f64> {
        let (hidden, n_in) = (w.w1.shape()[0], w.w1.shape()[1]);
        let mut h = vec![0.0; hidden];
        for i in 0..hidden {
            let mut acc = w.b1.data()[i];
            for j in 0..n_in {
                acc += w.w1.data()[i * n_in + j] * x[j];
            }
            h[i] = acc.tanh();
        }
        let n_out = w.w2.shape()[0];
        (0..n_out)
            .map(|i| {
                let mut acc = w.b2.data()[i];
                for j in 0..hidden {
                    acc += w.w2.data()[i * hidden + j] * h[j];
                }
                (1.0 + acc.exp()).ln()
            })
            .collect()
    }

    fn fd_jvp(f: &DifferentiableFn, x: &Tensor, v: &Tensor, eps: f64) -> Tensor {
        let plus = f.evaluate(&[&x.axpy(eps, v).unwrap()]).unwrap();
        let minus = f.evaluate(&[&x.axpy(-eps, v).unwrap()]).unwrap();
        plus.sub(&minus).unwrap().scale(0.5 / eps)
    }

    #[test]
    fn identity_returns_input() {
        let f = DifferentiableFn::identity(&[3]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(f.evaluate(&[&x]).unwrap(), x);
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let f = DifferentiableFn::sum_of_squares(&[2]);
        let x = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(f.evaluate(&[&x]).unwrap().item().unwrap(), 25.0);
        assert_eq!(f.grad(&x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut b = FnBuilder::new();
        let _x = b.input(&[4]);
        let c = b.constant(Tensor::scalar(7.0));
        let f = b.build(c).unwrap();
        let g = f.grad(&Tensor::vector(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        assert_eq!(g, Tensor::zeros(&[4]));
    }

    #[test]
    fn two_layer_net_matches_hand_evaluation() {
        let w = seeded_weights(42, 5, 8, 3);
        let f = two_layer_net(&w);
        let x = Tensor::zeros(&[5]);
        let got = f.evaluate(&[&x]).unwrap();
        let want = hand_eval(&w, x.data());
        for (g, h) in got.data().iter().zip(&want) {
            assert!((g - h).abs() < 1e-14, "{g} vs {h}");
        }
        let x = Tensor::vector(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
        let got = f.evaluate(&[&x]).unwrap();
        let want = hand_eval(&w, x.data());
        for (g, h) in got.data().iter().zip(&want) {
            assert!((g - h).abs() < 1e-14, "{g} vs {h}");
        }
    }

    #[test]
    fn grad_of_net_sum_matches_finite_differences() {
        let w = seeded_weights(42, 6, 10, 4);
        let mut b = FnBuilder::new();
        let x = b.input(&[6]);
        let net = two_layer_net(&w);
        let y = b.call(&net, &[x]).unwrap();
        let s = b.sum(y);
        let f = b.build(s).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(&[6], &mut rng);
        let g = f.grad(&x0).unwrap();
        let fd: Vec<f64> = (0..6)
            .map(|i| fd_jvp(&f, &x0, &Tensor::basis(&[6], i), 1e-5).item().unwrap())
            .collect();
        let fd = Tensor::vector(fd);
        assert!(relative_error(&g, &fd, 1e-12).unwrap() < 1e-6);
    }

    #[test]
    fn jvp_and_vjp_of_linear_map() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = DifferentiableFn::linear(a).unwrap();
        let x = Tensor::vector(vec![-0.3, 5.0]);
        let jv = f.jvp(&x, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(jv.data(), &[1.0, 3.0]);
        let jtw = f.vjp(&x, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(jtw.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let w = seeded_weights(3, 4, 6, 4);
        let f = two_layer_net(&w);
        let x = Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]);
        assert!(f.jvp(&x, &Tensor::zeros(&[4])).unwrap().is_zero());
        assert!(f.vjp(&x, &Tensor::zeros(&[4])).unwrap().is_zero());
    }

    #[test]
    fn jvp_of_net_matches_finite_differences() {
        let w = seeded_weights(42, 7, 12, 5);
        let f = two_layer_net(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[7], &mut rng);
        let v = Tensor::randn(&[7], &mut rng);
        let jv = f.jvp(&x, &v).unwrap();
        let fd = fd_jvp(&f, &x, &v, 1e-5);
        assert!(relative_error(&jv, &fd, 1e-12).unwrap() < 1e-6);
    }

    #[test]
    fn conv_net_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k1 = Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.3);
        let bias = Tensor::randn(&[3], &mut rng).scale(0.1);
        let k2 = Tensor::randn(&[1, 3, 5, 5], &mut rng).scale(0.2);
        let mut b = FnBuilder::new();
        let x = b.input(&[2, 6, 5]);
        let k1n = b.constant(k1);
        let bn = b.constant(bias);
        let k2n = b.constant(k2);
        let h = b.conv2d(x, k1n).unwrap();
        let h = b.channel_bias(h, bn).unwrap();
        let h = b.tanh(h);
        let o = b.conv2d(h, k2n).unwrap();
        let o = b.softplus(o);
        let f = b.build(o).unwrap();

        let x0 = Tensor::randn(&[2, 6, 5], &mut rng);
        let v = Tensor::randn(&[2, 6, 5], &mut rng);
        let jv = f.jvp(&x0, &v).unwrap();
        assert!(relative_error(&jv, &fd_jvp(&f, &x0, &v, 1e-5), 1e-12).unwrap() < 1e-6);

        let wv = Tensor::randn(f.output_shape(), &mut rng);
        let jtw = f.vjp(&x0, &wv).unwrap();
        let lhs = wv.dot(&jv).unwrap();
        let rhs = jtw.dot(&v).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn derivatives_with_respect_to_weights() {
        // Kernel and matrix operands as inputs exercise the second adjoint slot.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = FnBuilder::new();
        let x = b.input(&[1, 4, 4]);
        let k = b.input(&[2, 1, 3, 3]);
        let w = b.input(&[3, 32]);
        let m = b.input(&[3, 2]);
        let h = b.conv2d(x, k).unwrap();
        let h = b.flatten(h);
        let y = b.matmul(w, h).unwrap();
        let y = b.tanh(y);
        let yy = b.reshape(y, &[1, 3]).unwrap();
        let z = b.matmul(yy, m).unwrap();
        let s = b.sum_squares(z);
        let f = b.build(s).unwrap();

        let xs: Vec<Tensor> = f
            .input_shapes()
            .iter()
            .map(|s| Tensor::randn(s, &mut rng).scale(0.5))
            .collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (_, grads) = f.vjp_all(&refs, &Tensor::scalar(1.0)).unwrap();
        for wrt in 0..xs.len() {
            let v = Tensor::randn(xs[wrt].shape(), &mut rng);
            let (_, jv) = f.jvp_wrt(&refs, wrt, &v).unwrap();
            let eps = 1e-5;
            let mut plus = xs.clone();
            plus[wrt] = xs[wrt].axpy(eps, &v).unwrap();
            let mut minus = xs.clone();
            minus[wrt] = xs[wrt].axpy(-eps, &v).unwrap();
            let fp = f.evaluate(&plus.iter().collect::<Vec<_>>()).unwrap().item().unwrap();
            let fm = f.evaluate(&minus.iter().collect::<Vec<_>>()).unwrap().item().unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let jv = jv.item().unwrap();
            assert!((jv - fd).abs() < 1e-6 * fd.abs().max(1e-3), "input {wrt}: {jv} vs {fd}");
            let adj = grads[wrt].dot(&v).unwrap();
            assert!((adj - jv).abs() < 1e-10 * jv.abs().max(1.0));
        }
    }

    #[test]
    fn concat_routes_tangents_and_adjoints() {
        let mut b = FnBuilder::new();
        let x = b.input(&[2]);
        let c = b.constant(Tensor::vector(vec![5.0]));
        let xx = b.scale(x, 3.0);
        let cat = b.concat(&[x, c, xx]).unwrap();
        let f = b.build(cat).unwrap();
        let x0 = Tensor::vector(vec![1.0, 2.0]);
        let jv = f.jvp(&x0, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(jv.data(), &[1.0, -1.0, 0.0, 3.0, -3.0]);
        let w = Tensor::vector(vec![1.0, 1.0, 9.0, 1.0, 2.0]);
        assert_eq!(f.vjp(&x0, &w).unwrap().data(), &[4.0, 7.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut b = FnBuilder::new();
        let x = b.input(&[3]);
        let w = b.constant(Tensor::zeros(&[2, 4]));
        let err = b.matmul(w, x).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");

        let y = b.input(&[2]);
        let err = b.add(x, y).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");

        let f = DifferentiableFn::identity(&[3]);
        let err = f.evaluate(&[&Tensor::zeros(&[4])]).unwrap_err().to_string();
        assert!(err.contains("input #0"), "{err}");
        assert!(f.jvp(&Tensor::zeros(&[3]), &Tensor::zeros(&[2])).is_err());
        assert!(f.vjp(&Tensor::zeros(&[3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_rejects_non_scalar_output() {
        let f = DifferentiableFn::identity(&[3]);
        assert!(f.grad(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    fn arb_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #[test]
        fn jvp_is_linear_in_direction(
            x in arb_vec(6), v1 in arb_vec(6), v2 in arb_vec(6),
            a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..50,
        ) {
            let f = two_layer_net(&seeded_weights(seed, 6, 9, 4));
            let x = Tensor::vector(x);
            let v1 = Tensor::vector(v1);
            let v2 = Tensor::vector(v2);
            let combo = v1.scale(a).axpy(c, &v2).unwrap();
            let lhs = f.jvp(&x, &combo).unwrap();
            let rhs = f.jvp(&x, &v1).unwrap().scale(a).axpy(c, &f.jvp(&x, &v2).unwrap()).unwrap();
            prop_assert!(crate::tensor::max_abs_diff(&lhs, &rhs).unwrap() < 1e-10);
        }

        #[test]
        fn adjoint_identity_holds(
            x in arb_vec(6), v in arb_vec(6), w in arb_vec(4), seed in 0u64..50,
        ) {
            let f = two_layer_net(&seeded_weights(seed, 6, 9, 4));
            let x = Tensor::vector(x);
            let v = Tensor::vector(v);
            let w = Tensor::vector(w);
            let lhs = w.dot(&f.jvp(&x, &v).unwrap()).unwrap();
            let rhs = f.vjp(&x, &w).unwrap().dot(&v).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn grad_equals_vjp_of_one_bitwise(x in arb_vec(5), seed in 0u64..50) {
            let net = two_layer_net(&seeded_weights(seed, 5, 7, 3));
            let mut b = FnBuilder::new();
            let xi = b.input(&[5]);
            let y = b.call(&net, &[xi]).unwrap();
            let s = b.sum_squares(y);
            let f = b.build(s).unwrap();
            let x = Tensor::vector(x);
            let g = f.grad(&x).unwrap();
            let v = f.vjp(&x, &Tensor::scalar(1.0)).unwrap();
            prop_assert_eq!(g.data(), v.data());
            // Determinism.
            let again = f.grad(&x).unwrap();
            prop_assert_eq!(again.data(), g.data());
            prop_assert_eq!(f.evaluate(&[&x]).unwrap(), f.evaluate(&[&x]).unwrap());
        }
    }
}
