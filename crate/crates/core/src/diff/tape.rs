use std::sync::Arc;

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use super::Param;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom op: given the gradient of the output
/// and which inputs need a gradient, returns one gradient per input.
pub type Vjp = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    SumLastAxis,
    Relu,
    Tanh,
    Abs,
    Sqrt,
    Sin,
    Cos,
    Neg,
    Scale,
    MaxConst,
    SmoothL1,
    Gather,
    ScatterAdd,
    Reshape,
    Concat,
    StopGradient,
    Custom(&'static str),
}

enum BMap {
    Same,
    Maps(Vec<usize>, Vec<usize>),
}

enum Op {
    Leaf,
    Binary(Bin, BMap),
    MatMul,
    Sum,
    Mean,
    SumLastAxis,
    Unary(Un),
    Scale(f64),
    MaxConst(f64),
    Gather(Arc<[usize]>),
    ScatterAdd(Arc<[usize]>),
    Reshape,
    Concat,
    StopGradient,
    Custom(&'static str, Vjp),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Un {
    Relu,
    Tanh,
    Abs,
    Sqrt,
    Sin,
    Cos,
    Neg,
    SmoothL1,
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of a computation, differentiated in reverse.
///
/// Inputs of every node are strictly earlier nodes, so the node list is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient at `v`, or zeros of `shape` when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(Bin::Add, _) => OpKind::Add,
            Op::Binary(Bin::Sub, _) => OpKind::Sub,
            Op::Binary(Bin::Mul, _) => OpKind::Mul,
            Op::Binary(Bin::Div, _) => OpKind::Div,
            Op::MatMul => OpKind::MatMul,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumLastAxis => OpKind::SumLastAxis,
            Op::Unary(Un::Relu) => OpKind::Relu,
            Op::Unary(Un::Tanh) => OpKind::Tanh,
            Op::Unary(Un::Abs) => OpKind::Abs,
            Op::Unary(Un::Sqrt) => OpKind::Sqrt,
            Op::Unary(Un::Sin) => OpKind::Sin,
            Op::Unary(Un::Cos) => OpKind::Cos,
            Op::Unary(Un::Neg) => OpKind::Neg,
            Op::Unary(Un::SmoothL1) => OpKind::SmoothL1,
            Op::Scale(_) => OpKind::Scale,
            Op::MaxConst(_) => OpKind::MaxConst,
            Op::Gather(_) => OpKind::Gather,
            Op::ScatterAdd(_) => OpKind::ScatterAdd,
            Op::Reshape => OpKind::Reshape,
            Op::Concat => OpKind::Concat,
            Op::StopGradient => OpKind::StopGradient,
            Op::Custom(name, _) => OpKind::Custom(name),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::StopGradient | Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.push_with(op, inputs, Arc::new(value), requires_grad)
    }

    fn push_with(&mut self, op: Op, inputs: Vec<Var>, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(Op::Leaf, Vec::new(), Arc::new(t), false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_with(Op::Leaf, Vec::new(), Arc::new(t), true)
    }

    /// Leaf bound to a parameter's current value; the value is shared, not copied.
    pub fn param(&mut self, p: &Param) -> Var {
        self.push_with(Op::Leaf, Vec::new(), p.shared_value(), p.requires_grad)
    }

    fn check_inputs(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("{op}: input node {} not on tape", v.0)));
            }
        }
        Ok(())
    }

    fn binary(&mut self, kind: Bin, name: &'static str, a: Var, b: Var) -> Result<Var> {
        self.check_inputs(name, &[a, b])?;
        let va = self.value(a);
        let vb = self.value(b);
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let f = |x: f64, y: f64| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let (data, map) = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            (data, BMap::Same)
        } else {
            let ma = broadcast_index_map(va.shape(), &out_shape);
            let mb = broadcast_index_map(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            (data, BMap::Maps(ma, mb))
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Binary(kind, map), vec![a, b], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, "div", a, b)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_inputs("matmul", &[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_inputs("sum", &[x])?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_inputs("mean", &[x])?;
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Op::Mean, vec![x], Tensor::scalar(s)))
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check_inputs("sum_last_axis", &[x])?;
        let v = self.value(x);
        let Some((&n, rest)) = v.shape().split_last() else {
            return Err(Error::shape("sum_last_axis", "scalar input"));
        };
        let data = if n == 0 {
            vec![0.0; rest.iter().product()]
        } else {
            v.data().chunks_exact(n).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::new(rest.to_vec(), data)?;
        Ok(self.push(Op::SumLastAxis, vec![x], value))
    }

    fn unary(&mut self, kind: Un, x: Var) -> Result<Var> {
        self.check_inputs("unary", &[x])?;
        let v = self.value(x);
        let data = v.data().iter().map(|&a| unary_value(kind, a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::Unary(kind), vec![x], value))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Abs, x)
    }

    /// Square root. The gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Sqrt, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Cos, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::Neg, x)
    }

    /// Elementwise Smooth-L1 with its knee at 1.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.unary(Un::SmoothL1, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_inputs("scale", &[x])?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        Ok(self.push(Op::Scale(c), vec![x], value))
    }

    /// `max(x, c)` elementwise; ties pass no gradient.
    pub fn max_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_inputs("max_const", &[x])?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(c)).collect())?;
        Ok(self.push(Op::MaxConst(c), vec![x], value))
    }

    /// `out.flat[i] = x.flat[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_inputs("gather", &[x])?;
        let shape = shape.into();
        let v = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", format!("{} indices into shape {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {:?}", v.shape())));
        }
        let src = v.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather(indices), vec![x], value))
    }

    /// `out.flat[indices[i]] += x.flat[i]`, `out` zero-initialized with `shape`.
    pub fn scatter_add(&mut self, x: Var, indices: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_inputs("scatter_add", &[x])?;
        let shape = shape.into();
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if indices.len() != v.numel() {
            return Err(Error::shape(
                "scatter_add",
                format!("{} indices for {} values", indices.len(), v.numel()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(Error::shape("scatter_add", format!("index {bad} out of range for {shape:?}")));
        }
        let mut data = vec![0.0; numel];
        for (&i, &a) in indices.iter().zip(v.data()) {
            data[i] += a;
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::ScatterAdd(indices), vec![x], value))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_inputs("reshape", &[x])?;
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Concatenate the flattened inputs and view the result as `shape`.
    pub fn concat(&mut self, xs: &[Var], shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_inputs("concat", xs)?;
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let shape = shape.into();
        let value = Tensor::new(shape, data).map_err(|_| Error::shape("concat", "element count mismatch"))?;
        Ok(self.push(Op::Concat, xs.to_vec(), value))
    }

    /// Passes the value through and blocks the gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.check_inputs("stop_gradient", &[x])?;
        let value = Arc::clone(&self.nodes[x.0].value);
        Ok(self.push_with(Op::StopGradient, vec![x], value, false))
    }

    /// Records an op whose value was computed by the caller, with its
    /// vector-Jacobian product.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor, vjp: Vjp) -> Result<Var> {
        self.check_inputs(name, inputs)?;
        Ok(self.push(Op::Custom(name, vjp), inputs.to_vec(), value))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_inputs("backward", &[root])?;
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::StopGradient) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = self.local_backward(node, &g, &needs);
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let input = |k: usize| -> &Tensor { &self.nodes[node.inputs[k].0].value };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Binary(kind, map) => {
                let (a, b) = (input(0), input(1));
                let (ad, bd) = (a.data(), b.data());
                let mut ga = needs[0].then(|| vec![0.0; a.numel()]);
                let mut gb = needs[1].then(|| vec![0.0; b.numel()]);
                let mut step = |o: usize, i: usize, j: usize| {
                    let (da, db) = match kind {
                        Bin::Add => (1.0, 1.0),
                        Bin::Sub => (1.0, -1.0),
                        Bin::Mul => (bd[j], ad[i]),
                        Bin::Div => (1.0 / bd[j], -ad[i] / (bd[j] * bd[j])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += gd[o] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += gd[o] * db;
                    }
                };
                match map {
                    BMap::Same => (0..gd.len()).for_each(|o| step(o, o, o)),
                    BMap::Maps(ma, mb) => (0..gd.len()).for_each(|o| step(o, ma[o], mb[o])),
                }
                vec![
                    ga.map(|d| Tensor::new(a.shape().to_vec(), d).unwrap()),
                    gb.map(|d| Tensor::new(b.shape().to_vec(), d).unwrap()),
                ]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs[0].then(|| {
                    // g [m,n] * b^T [n,k]
                    let mut out = vec![0.0; m * k];
                    let bd = b.data();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::new(vec![m, k], out).unwrap()
                });
                let gb = needs[1].then(|| {
                    // a^T [k,m] * g [m,n]
                    let mut out = vec![0.0; k * n];
                    let ad = a.data();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            let orow = &mut out[p * n..(p + 1) * n];
                            for (o, gv) in orow.iter_mut().zip(grow) {
                                *o += s * gv;
                            }
                        }
                    }
                    Tensor::new(vec![k, n], out).unwrap()
                });
                vec![ga, gb]
            }
            Op::Sum => {
                let a = input(0);
                vec![Some(Tensor::full(a.shape().to_vec(), gd[0]))]
            }
            Op::Mean => {
                let a = input(0);
                vec![Some(Tensor::full(a.shape().to_vec(), gd[0] / a.numel() as f64))]
            }
            Op::SumLastAxis => {
                let a = input(0);
                let n = *a.shape().last().unwrap();
                let data = gd.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data).unwrap())]
            }
            Op::Unary(kind) => {
                let a = input(0);
                let y = node.value.data();
                let data = a
                    .data()
                    .iter()
                    .zip(y)
                    .zip(gd)
                    .map(|((&x, &y), &g)| g * unary_derivative(*kind, x, y))
                    .collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data).unwrap())]
            }
            Op::Scale(c) => {
                let data = gd.iter().map(|g| g * c).collect();
                vec![Some(Tensor::new(input(0).shape().to_vec(), data).unwrap())]
            }
            Op::MaxConst(c) => {
                let a = input(0);
                let data = a
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| if x > *c { g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data).unwrap())]
            }
            Op::Gather(idx) => {
                let a = input(0);
                let mut data = vec![0.0; a.numel()];
                for (&i, &g) in idx.iter().zip(gd) {
                    data[i] += g;
                }
                vec![Some(Tensor::new(a.shape().to_vec(), data).unwrap())]
            }
            Op::ScatterAdd(idx) => {
                let a = input(0);
                let data = idx.iter().map(|&i| gd[i]).collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data).unwrap())]
            }
            Op::Reshape => vec![Some(Tensor::new(input(0).shape().to_vec(), gd.to_vec()).unwrap())],
            Op::Concat => {
                let mut off = 0;
                (0..node.inputs.len())
                    .map(|k| {
                        let a = input(k);
                        let part = &gd[off..off + a.numel()];
                        off += a.numel();
                        needs[k].then(|| Tensor::new(a.shape().to_vec(), part.to_vec()).unwrap())
                    })
                    .collect()
            }
            Op::Custom(_, vjp) => vjp(g, needs),
        }
    }
}

fn unary_value(kind: Un, x: f64) -> f64 {
    match kind {
        Un::Relu => x.max(0.0),
        Un::Tanh => x.tanh(),
        Un::Abs => x.abs(),
        Un::Sqrt => x.sqrt(),
        Un::Sin => x.sin(),
        Un::Cos => x.cos(),
        Un::Neg => -x,
        Un::SmoothL1 => crate::losses::smooth_l1(x),
    }
}

fn unary_derivative(kind: Un, x: f64, y: f64) -> f64 {
    match kind {
        Un::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Un::Tanh => 1.0 - y * y,
        Un::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Un::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Un::Sin => x.cos(),
        Un::Cos => -x.sin(),
        Un::Neg => -1.0,
        Un::SmoothL1 => {
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Gradient of `f` at `x` by reverse mode and by central differences.
    fn both_routes(x: &[f64], f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> (Vec<f64>, Vec<f64>) {
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::from_vec(x.to_vec()));
            let r = f(&mut t, v).unwrap();
            t.scalar(r)
        };
        let mut t = Tape::new();
        let v = t.variable(Tensor::from_vec(x.to_vec()));
        let r = f(&mut t, v).unwrap();
        let g = t.backward(r).unwrap().get_or_zeros(v, &[x.len()]).into_data();
        let h = 1e-5;
        let fd = (0..x.len())
            .map(|i| {
                let (mut p, mut m) = (x.to_vec(), x.to_vec());
                p[i] += h;
                m[i] -= h;
                (eval(&p) - eval(&m)) / (2.0 * h)
            })
            .collect();
        (g, fd)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn product_value_and_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(3.0));
        let y = t.variable(Tensor::scalar(4.0));
        let l = t.mul(x, y).unwrap();
        assert_eq!(t.scalar(l), 12.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn tanh_of_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.tanh(x).unwrap();
        assert_eq!(t.scalar(y), 0.0);
    }

    #[test]
    fn matmul_matches_loops() {
        let a = [0.3, -1.2, 2.5, 0.7, 1.1, -0.4];
        let b = [1.5, -0.25, 0.8];
        let mut t = Tape::new();
        let va = t.constant(Tensor::new(vec![2, 3], a.to_vec()).unwrap());
        let vb = t.constant(Tensor::new(vec![3, 1], b.to_vec()).unwrap());
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        for i in 0..2 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a[i * 3 + k] * b[k];
            }
            assert!((t.value(c).data()[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_blocks_only_its_input() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(3.0));
        let y = t.variable(Tensor::scalar(4.0));
        let sx = t.stop_gradient(x).unwrap();
        let l = t.mul(sx, y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get_or_zeros(x, &[]).item(), 0.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let e = t.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul"), "{e}");
        let c = t.constant(Tensor::zeros(vec![4]));
        let e = t.add(a, c).unwrap_err().to_string();
        assert!(e.contains("add"), "{e}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let m = t.reshape(x, vec![2, 3])?;
            let w = t.constant(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7])?);
            let p = t.matmul(m, w)?;
            let s = t.sum_last_axis(p)?;
            let g = t.gather(x, Arc::from(vec![5, 0, 2, 2]), vec![4])?;
            let sc = t.scatter_add(g, Arc::from(vec![1, 1, 0, 2]), vec![3])?;
            let c = t.concat(&[s, sc], vec![5])?;
            let c2 = t.mul(c, c)?;
            let q = t.sin(c2)?;
            let r = t.cos(x)?;
            let r = t.mean(r)?;
            let q = t.mean(q)?;
            let d = t.div(q, r)?;
            let e = t.smooth_l1(d)?;
            t.scale(e, 3.0)
        };
        let (g, fd) = both_routes(&x, &f);
        assert_close(&g, &fd, 1e-6);
    }

    #[test]
    fn gradients_of_a_sum_add() {
        let x = vec![0.4, -0.9, 1.3];
        let f1 = |t: &mut Tape, x: Var| -> Result<Var> {
            let y = t.tanh(x)?;
            t.sum(y)
        };
        let f2 = |t: &mut Tape, x: Var| -> Result<Var> {
            let y = t.mul(x, x)?;
            t.mean(y)
        };
        let both = |t: &mut Tape, x: Var| -> Result<Var> {
            let a = f1(t, x)?;
            let b = f2(t, x)?;
            t.add(a, b)
        };
        let (g1, _) = both_routes(&x, &f1);
        let (g2, _) = both_routes(&x, &f2);
        let (g, _) = both_routes(&x, &both);
        for i in 0..3 {
            assert!((g[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_backward_passes_double_param_grad() {
        let mut p = Param::new("p", Tensor::from_vec(vec![1.0, -2.0]));
        let mut t = Tape::new();
        let v = t.param(&p);
        let s = t.mul(v, v).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        p.accumulate_from(&g, v).unwrap();
        let once = p.grad().clone();
        p.accumulate_from(&g, v).unwrap();
        assert_eq!(p.grad().data(), &[2.0 * once.data()[0], 2.0 * once.data()[1]]);
    }

    /// One step of a random expression over `[4]` vectors. Binary steps
    /// combine the newest node with an older one.
    #[derive(Clone, Debug)]
    enum Step {
        Unary(u8),
        Binary(u8, usize),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![(0u8..8).prop_map(Step::Unary), (0u8..4, 0usize..8).prop_map(|(k, o)| Step::Binary(k, o))]
    }

    /// The input followed by each step's output.
    fn build_nodes(t: &mut Tape, x: Var, steps: &[Step]) -> Result<Vec<Var>> {
        let mut nodes = vec![x];
        for s in steps {
            let last = *nodes.last().unwrap();
            let y = match *s {
                Step::Unary(0) => t.tanh(last)?,
                Step::Unary(1) => t.sin(last)?,
                Step::Unary(2) => t.cos(last)?,
                Step::Unary(3) => t.scale(last, -1.7)?,
                Step::Unary(4) => {
                    let sq = t.mul(last, last)?;
                    let one = t.constant(Tensor::scalar(1.0));
                    let sh = t.add(sq, one)?;
                    t.sqrt(sh)?
                }
                Step::Unary(5) => t.abs(last)?,
                Step::Unary(6) => t.relu(last)?,
                Step::Unary(_) => t.max_const(last, 0.1)?,
                Step::Binary(k, o) => {
                    let other = nodes[o % nodes.len()];
                    match k {
                        0 => t.add(last, other)?,
                        1 => t.sub(last, other)?,
                        2 => t.mul(last, other)?,
                        _ => {
                            // Denominator bounded away from zero.
                            let sq = t.mul(other, other)?;
                            let one = t.constant(Tensor::scalar(1.0));
                            let d = t.add(sq, one)?;
                            t.div(last, d)?
                        }
                    }
                }
            };
            nodes.push(y);
        }
        Ok(nodes)
    }

    fn build(t: &mut Tape, x: Var, steps: &[Step]) -> Result<Var> {
        let last = *build_nodes(t, x, steps)?.last().unwrap();
        t.sum(last)
    }

    /// Smallest distance of any kinked op's input from its kink.
    fn kink_margin(x: &[f64], steps: &[Step]) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(x.to_vec()));
        let nodes = build_nodes(&mut t, v, steps).unwrap();
        let mut margin = f64::INFINITY;
        for (i, s) in steps.iter().enumerate() {
            if let Step::Unary(k @ 5..) = s {
                let kink = if *k == 7 { 0.1 } else { 0.0 };
                for &z in t.value(nodes[i]).data() {
                    margin = margin.min((z - kink).abs());
                }
            }
        }
        margin
    }

    proptest! {
        #[test]
        fn random_five_op_expressions_match_finite_differences(
            x in prop::collection::vec(-2.0f64..2.0, 4),
            steps in prop::collection::vec(step(), 5),
        ) {
            prop_assume!(kink_margin(&x, &steps) > 1e-3);
            let f = |t: &mut Tape, v: Var| build(t, v, &steps);
            let (g, fd) = both_routes(&x, &f);
            for (a, n) in g.iter().zip(&fd) {
                let scale = a.abs().max(n.abs());
                if scale > 1e-7 {
                    prop_assert!((a - n).abs() / scale < 1e-4, "{a} vs {n}");
                }
            }
        }
    }
}
