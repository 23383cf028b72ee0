use super::conv::{Conv2dOpts, ConvGeom};
use super::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Prelu { x: Var, alpha: Var },
    Sum { x: Var, keep_shape: Vec<usize> },
    Reshape(Var),
    MatMul(Var, Var),
    Conv { x: Var, kernel: Var, geom: ConvGeom },
    LogSoftmax(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Unary(_, a) | Op::Scale(a, _) | Op::AddScalar(a) | Op::Reshape(a) | Op::LogSoftmax(a) => {
                vec![a]
            }
            Op::Sum { x, .. } => vec![x],
            Op::Binary(_, a, b) | Op::Maximum(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Prelu { x, alpha } => vec![x, alpha],
            Op::Conv { x, kernel, .. } => vec![x, kernel],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended as they are
/// computed, so every node comes after all of its inputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

/// Result of [`Tape::backward`]: one gradient buffer per node that
/// requires grad, plus the named parameter bindings of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a named parameter, summed over every binding of that name.
    pub fn param(&self, name: &str) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for (_, var) in self.bindings.iter().filter(|(n, _)| n == name) {
            if let Some(g) = self.get(*var) {
                match acc.as_mut() {
                    Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                    None => acc = Some(g.to_vec()),
                }
            }
        }
        acc
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.bindings.iter().map(|(n, _)| n.as_str())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor {
            shape,
            data,
            grad_tracked: requires_grad,
            grad: None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` onto the tape; gradients flow to it iff `t` is grad-tracked.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let requires_grad = value.grad_tracked;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad_tracked = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf registered under `name`, retrievable via [`Gradients::param`].
    pub fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad_tracked = true;
        let v = self.leaf(&value);
        self.bindings.push((name.to_string(), v));
        v
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.data(a);
        let data: Vec<f64> = match kind {
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if x.iter().any(|&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain("log of non-positive value".into()));
                }
                x.iter().map(|v| v.ln()).collect()
            }
            Unary::Sqrt => {
                if x.iter().any(|&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::Domain("sqrt of negative value".into()));
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            Unary::Softplus => x.iter().map(|&v| softplus(v)).collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Unary(kind, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let ma = broadcast_index_map(self.shape(a), &out_shape);
        let mb = broadcast_index_map(self.shape(b), &out_shape);
        let (xa, xb) = (self.data(a), self.data(b));
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        if let Binary::Div = kind {
            if xb.contains(&0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(xa[i], xb[j])).collect();
        Ok(self.push(out_shape, data, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum of two same-shape tensors. Ties route the
    /// gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "maximum of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Maximum(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v + c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::AddScalar(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `max(0, x) + alpha * min(0, x)` with one learnable slope per channel
    /// (axis 1 of `x`).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(alpha) != [xs[1]] {
            return Err(Error::shape(format!(
                "prelu slope {:?} does not match channels of {:?}",
                self.shape(alpha),
                xs
            )));
        }
        let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let al = self.data(alpha);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { al[(i / inner) % c] * v })
            .collect();
        let shape = xs.to_vec();
        Ok(self.push(shape, data, Op::Prelu { x, alpha }))
    }

    // ---- reductions -------------------------------------------------------

    fn reduced_shape(&self, x: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        let mut keep = shape.to_vec();
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= shape.len() || axes[..i].contains(&ax) {
                return Err(Error::shape(format!("invalid axes {axes:?} for {shape:?}")));
            }
            keep[ax] = 1;
        }
        Ok(keep)
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as extent 1,
    /// otherwise they are dropped (a full reduction yields shape `[1]`).
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        if axes.is_empty() {
            return Err(Error::Domain("empty reduction axes".into()));
        }
        let keep = self.reduced_shape(x, axes)?;
        let map = broadcast_index_map(&keep, self.shape(x));
        let mut out = vec![0.0; keep.iter().product()];
        for (v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        let summed = self.push(
            keep.clone(),
            out,
            Op::Sum {
                x,
                keep_shape: keep.clone(),
            },
        );
        if keepdim {
            return Ok(summed);
        }
        let mut squeezed: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        if squeezed.is_empty() {
            squeezed.push(1);
        }
        self.reshape(summed, &squeezed)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().filter_map(|&a| self.shape(x).get(a)).product();
        let s = self.sum(x, axes, keepdim)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Population variance (divides by n).
    pub fn var(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let mu = self.mean(x, axes, true)?;
        let centered = self.sub(x, mu)?;
        let sq = self.square(centered)?;
        self.mean(sq, axes, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    fn conv(&mut self, x: Var, kernel: Var, opts: Conv2dOpts, depthwise: bool) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), opts, depthwise)?;
        let out = geom.forward(self.data(x), self.data(kernel));
        Ok(self.push(geom.out_shape(), out, Op::Conv { x, kernel, geom }))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `kernel: [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, opts: Conv2dOpts) -> Result<Var> {
        self.conv(x, kernel, opts, false)
    }

    /// Per-channel cross-correlation with `kernel: [C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, opts: Conv2dOpts) -> Result<Var> {
        self.conv(x, kernel, opts, true)
    }

    /// Log-softmax over the last axis of a 2-d tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("log_softmax expects 2-d input, got {s:?}")));
        }
        let cols = s[1];
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = s.to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(x)))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.data(a);
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => y.iter().zip(g).map(|(s, g)| g * s * (1.0 - s)).collect(),
                    Unary::Tanh => y.iter().zip(g).map(|(t, g)| g * (1.0 - t * t)).collect(),
                    Unary::Relu => x.iter().zip(g).map(|(&x, g)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Exp => y.iter().zip(g).map(|(e, g)| g * e).collect(),
                    Unary::Log => x.iter().zip(g).map(|(x, g)| g / x).collect(),
                    Unary::Sqrt => y.iter().zip(g).map(|(r, g)| g * 0.5 / r).collect(),
                    Unary::Softplus => x.iter().zip(g).map(|(&x, g)| g * sigmoid(x)).collect(),
                };
                self.accumulate(grads, a, &d);
            }
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let ma = broadcast_index_map(self.shape(a), out_shape);
                let mb = broadcast_index_map(self.shape(b), out_shape);
                let (xa, xb) = (self.data(a), self.data(b));
                if self.requires_grad(a) {
                    let mut da = vec![0.0; xa.len()];
                    for (k, gk) in g.iter().enumerate() {
                        da[ma[k]] += match kind {
                            Binary::Add | Binary::Sub => *gk,
                            Binary::Mul => gk * xb[mb[k]],
                            Binary::Div => gk / xb[mb[k]],
                        };
                    }
                    self.accumulate(grads, a, &da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; xb.len()];
                    for (k, gk) in g.iter().enumerate() {
                        db[mb[k]] += match kind {
                            Binary::Add => *gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * xa[ma[k]],
                            Binary::Div => -gk * xa[ma[k]] / (xb[mb[k]] * xb[mb[k]]),
                        };
                    }
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Maximum(a, b) => {
                let (xa, xb) = (self.data(a), self.data(b));
                let a_wins: Vec<bool> = xa.iter().zip(xb).map(|(x, y)| x >= y).collect();
                if self.requires_grad(a) {
                    let d: Vec<f64> = g.iter().zip(&a_wins).map(|(g, &w)| if w { *g } else { 0.0 }).collect();
                    self.accumulate(grads, a, &d);
                }
                if self.requires_grad(b) {
                    let d: Vec<f64> = g.iter().zip(&a_wins).map(|(g, &w)| if w { 0.0 } else { *g }).collect();
                    self.accumulate(grads, b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accumulate(grads, a, &d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, a, g),
            Op::Prelu { x, alpha } => {
                let xs = self.shape(x);
                let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
                let xv = self.data(x);
                let al = self.data(alpha);
                if self.requires_grad(x) {
                    let d: Vec<f64> = xv
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, g))| if v > 0.0 { *g } else { g * al[(i / inner) % c] })
                        .collect();
                    self.accumulate(grads, x, &d);
                }
                if self.requires_grad(alpha) {
                    let mut d = vec![0.0; c];
                    for (i, (&v, g)) in xv.iter().zip(g).enumerate() {
                        if v <= 0.0 {
                            d[(i / inner) % c] += g * v;
                        }
                    }
                    self.accumulate(grads, alpha, &d);
                }
            }
            Op::Sum { x, ref keep_shape } => {
                let map = broadcast_index_map(keep_shape, self.shape(x));
                let d: Vec<f64> = map.iter().map(|&o| g[o]).collect();
                self.accumulate(grads, x, &d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(a) {
                    // dA = G · Bᵀ
                    let bt = transpose(self.data(b), k, n);
                    let d = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, a, &d);
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · G
                    let at = transpose(self.data(a), m, k);
                    let d = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, b, &d);
                }
            }
            Op::Conv { x, kernel, geom } => {
                let (dx, dk) = geom.backward(self.data(x), self.data(kernel), g);
                if self.requires_grad(x) {
                    self.accumulate(grads, x, &dx);
                }
                if self.requires_grad(kernel) {
                    self.accumulate(grads, kernel, &dk);
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let gs: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * gs));
                }
                self.accumulate(grads, a, &d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, d)| *a += d),
            None => grads[v.0] = Some(d.to_vec()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn brute_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut tp = Tape::new();
        let id = tp.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tp.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let r = tp.matmul(id, m).unwrap();
        assert_eq!(tp.data(r), &[1., 2., 3., 4.]);

        let b = tp.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
        let r = tp.matmul(m, b).unwrap();
        let expected = brute_matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(expected, vec![19., 22., 43., 50.]);
        assert_eq!(tp.data(r), expected.as_slice());

        let x = tp.constant(&Tensor::zeros(&[2, 3]));
        let y = tp.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tp.matmul(x, y), Err(Error::Shape(_))));
    }

    /// Sliding-window oracle written directly from the definition.
    fn brute_conv(
        input: &[f64],
        (c, h, w): (usize, usize, usize),
        kernel: &[f64],
        (f, kh, kw): (usize, usize, usize),
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let at = |ch: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                input[(ch * h + y as usize) * w + x as usize]
            }
        };
        let mut out = vec![0.0; f * oh * ow];
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * s + ky) as isize - p as isize;
                                let x = (ox * s + kx) as isize - p as isize;
                                acc += at(ci, y, x) * kernel[((fo * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(fo * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_examples() {
        let mut tp = Tape::new();
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tp.constant(&t(&[1, 1, 3, 3], &input));
        let k = tp.constant(&t(&[1, 1, 2, 2], &[1.; 4]));
        let y = tp.conv2d(x, k, Conv2dOpts::new(1, 0)).unwrap();
        let oracle = brute_conv(&input, (1, 3, 3), &[1.; 4], (1, 2, 2), 1, 0);
        // 1+2+4+5, 2+3+5+6, 4+5+7+8, 5+6+8+9
        assert_eq!(oracle, vec![12., 16., 24., 28.]);
        assert_eq!(tp.data(y), oracle.as_slice());

        let one = tp.constant(&t(&[1, 1, 1, 1], &[1.]));
        let y = tp.conv2d(x, one, Conv2dOpts::new(1, 0)).unwrap();
        assert_eq!(tp.data(y), input.as_slice());

        let x4 = tp.constant(&Tensor::zeros(&[1, 1, 4, 4]));
        let k3 = tp.constant(&Tensor::zeros(&[1, 1, 3, 3]));
        let y = tp.conv2d(x4, k3, Conv2dOpts::new(2, 1)).unwrap();
        assert_eq!(tp.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        let input: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 * 0.5 - 1.0).collect();
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let mut tp = Tape::new();
            let x = tp.constant(&t(&[1, 2, 5, 6], &input));
            let k = tp.constant(&t(&[3, 2, 3, 3], &kernel));
            let y = tp.conv2d(x, k, Conv2dOpts::new(s, p)).unwrap();
            let oracle = brute_conv(&input, (2, 5, 6), &kernel, (3, 3, 3), s, p);
            assert_eq!(tp.data(y), oracle.as_slice(), "s={s} p={p}");
        }
    }

    #[test]
    fn depthwise_examples() {
        let mut tp = Tape::new();
        let input = [1., 2., 3., 4., 5., 6., 7., 8.];
        let x = tp.constant(&t(&[1, 2, 2, 2], &input));
        let ones = tp.constant(&t(&[2, 1, 1, 1], &[1., 1.]));
        let y = tp.depthwise_conv2d(x, ones, Conv2dOpts::new(1, 0)).unwrap();
        assert_eq!(tp.data(y), &input);

        let k = tp.constant(&t(&[2, 1, 2, 2], &[1., 0., 0., 0., 0., 0., 0., 1.]));
        let y = tp.depthwise_conv2d(x, k, Conv2dOpts::new(1, 0)).unwrap();
        // channel 0 top-left, channel 1 bottom-right
        assert_eq!(tp.shape(y), &[1, 2, 1, 1]);
        assert_eq!(tp.data(y), &[1., 8.]);

        let bad = tp.constant(&Tensor::zeros(&[3, 1, 1, 1]));
        assert!(tp.depthwise_conv2d(x, bad, Conv2dOpts::new(1, 0)).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tp = Tape::new();
        let z = tp.constant(&Tensor::scalar(0.0));
        let s = tp.sigmoid(z).unwrap();
        assert_eq!(tp.data(s), &[0.5]);

        let x = tp.constant(&t(&[1, 1], &[-2.0]));
        let a = tp.constant(&t(&[1], &[0.25]));
        let p = tp.prelu(x, a).unwrap();
        assert_eq!(tp.data(p), &[-0.5]);

        let u = tp.constant(&t(&[2], &[1., 2.]));
        let v = tp.constant(&t(&[1], &[10.]));
        let w = tp.add(u, v).unwrap();
        assert_eq!(tp.data(w), &[11., 12.]);

        let bad = tp.constant(&t(&[3], &[1., 2., 3.]));
        assert!(matches!(tp.add(u, bad), Err(Error::Shape(_))));

        let neg = tp.constant(&t(&[1], &[-1.0]));
        assert!(matches!(tp.log(neg), Err(Error::Domain(_))));
    }

    #[test]
    fn reduction_examples() {
        let mut tp = Tape::new();
        let x = tp.constant(&t(&[3], &[1., 2., 3.]));
        let m = tp.mean(x, &[0], false).unwrap();
        assert_eq!(tp.data(m), &[2.0]);
        let v = tp.var(x, &[0], false).unwrap();
        // population variance: ((1-2)^2 + 0 + (3-2)^2) / 3
        assert!((tp.data(v)[0] - 2.0 / 3.0).abs() < 1e-15);

        let y = tp.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let s = tp.sum(y, &[0], false).unwrap();
        assert_eq!(tp.shape(s), &[2]);
        assert_eq!(tp.data(s), &[4., 6.]);
        let s = tp.sum(y, &[1], true).unwrap();
        assert_eq!(tp.shape(s), &[2, 1]);
        assert_eq!(tp.data(s), &[3., 7.]);

        assert!(tp.sum(y, &[2], false).is_err());
        assert!(matches!(tp.sum(y, &[], false), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tp = Tape::new();
        let x = tp.leaf(&Tensor::scalar(3.0).tracked());
        let y = tp.mul(x, x).unwrap();
        let g = tp.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut tp = Tape::new();
        let x = tp.leaf(&Tensor::scalar(0.0).tracked());
        let y = tp.sigmoid(x).unwrap();
        let g = tp.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);

        let mut tp = Tape::new();
        let x = tp.leaf(&t(&[4], &[1., 5., -2., 0.5]).tracked());
        let y = tp.mean_all(x).unwrap();
        let g = tp.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);

        let mut tp = Tape::new();
        let x = tp.leaf(&t(&[2], &[1., 2.]).tracked());
        assert!(matches!(tp.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tp = Tape::new();
        let x = tp.leaf(&t(&[2, 3], &[0.3, -1., 2., 7., 1e3, -4.]).tracked());
        let s = tp.sum_all(x).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tp = Tape::new();
        let c = tp.constant(&t(&[1], &[2.0]));
        let x = tp.leaf(&t(&[1], &[3.0]).tracked());
        let y = tp.mul(c, x).unwrap();
        let g = tp.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn named_bindings_sum_over_reuse() {
        let mut tp = Tape::new();
        let w = t(&[1], &[2.0]);
        let a = tp.bind("w", &w);
        let b = tp.bind("w", &w);
        let y = tp.mul(a, b).unwrap();
        let g = tp.backward(y).unwrap();
        assert_eq!(g.param("w").unwrap(), vec![4.0]);
        assert!(g.param("missing").is_none());
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
