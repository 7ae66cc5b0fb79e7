//! Corrective heads and assembly of the refined model.
//!
//! Each head is `x -> relu(x W1 + b1) W2 + b2`. The skeleton, identity-vertex
//! and skinning heads read the identity code; the pose-vertex head reads the
//! active pose angles through a stop-gradient, so it never moves the pose.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kinematics::PoseVector;
use crate::model::HandModel;

/// Fixed random subject code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCode {
    pub beta: Vec<f64>,
}

impl IdentityCode {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        IdentityCode {
            beta: (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

/// Tape leaves bound to one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars([Var; 4]);

impl HeadVars {
    /// Leaves in `w1, b1, w2, b2` order.
    pub fn vars(&self) -> [Var; 4] {
        self.0
    }
}

impl DenseHead {
    /// Gaussian weights with standard deviation `sigma`, zero biases.
    pub fn new<R: Rng + ?Sized>(name: &str, n_in: usize, hidden: usize, n_out: usize, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let w1 = Tensor::new(vec![n_in, hidden], sample(n_in * hidden)).unwrap();
        let w2 = Tensor::new(vec![hidden, n_out], sample(hidden * n_out)).unwrap();
        Self::from_tensors(name, w1, Tensor::zeros(vec![hidden]), w2, Tensor::zeros(vec![n_out]))
    }

    pub fn zeros(name: &str, n_in: usize, hidden: usize, n_out: usize) -> Self {
        Self::from_tensors(
            name,
            Tensor::zeros(vec![n_in, hidden]),
            Tensor::zeros(vec![hidden]),
            Tensor::zeros(vec![hidden, n_out]),
            Tensor::zeros(vec![n_out]),
        )
    }

    pub fn from_tensors(name: &str, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Self {
        DenseHead {
            w1: Param::new(format!("{name}.w1"), w1),
            b1: Param::new(format!("{name}.b1"), b1),
            w2: Param::new(format!("{name}.w2"), w2),
            b2: Param::new(format!("{name}.b2"), b2),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.value().shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.value().shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w2.value().shape()[1]
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::Contract(format!("head {} expects {} inputs, got {}", self.w1.name, self.n_in(), x.len())));
        }
        let (h, o) = (self.hidden(), self.n_out());
        let w1 = self.w1.value().data();
        let mut hid = self.b1.value().data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (hk, w) in hid.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                *hk += xi * w;
            }
        }
        let w2 = self.w2.value().data();
        let mut out = self.b2.value().data().to_vec();
        for (k, hk) in hid.iter().enumerate() {
            let a = hk.max(0.0);
            if a == 0.0 {
                continue;
            }
            for (oj, w) in out.iter_mut().zip(&w2[k * o..(k + 1) * o]) {
                *oj += a * w;
            }
        }
        Ok(out)
    }

    /// `[B, n_in]` to `[B, n_out]` on the tape.
    pub fn forward_graph(&self, tape: &mut Tape, x: Var) -> Result<(Var, HeadVars)> {
        let vars = [
            tape.param(&self.w1),
            tape.param(&self.b1),
            tape.param(&self.w2),
            tape.param(&self.b2),
        ];
        let z = tape.matmul(x, vars[0])?;
        let z = tape.add(z, vars[1])?;
        let a = tape.relu(z)?;
        let y = tape.matmul(a, vars[2])?;
        let y = tape.add(y, vars[3])?;
        Ok((y, HeadVars(vars)))
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &HeadVars) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(vars.0) {
            p.accumulate_from(grads, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectiveConfig {
    pub skeleton: bool,
    pub identity_vertices: bool,
    pub pose_vertices: bool,
    pub skinning: bool,
    pub hidden: usize,
    pub init_sigma: f64,
    pub identity_dim: usize,
}

impl Default for CorrectiveConfig {
    fn default() -> Self {
        CorrectiveConfig {
            skeleton: true,
            identity_vertices: true,
            pose_vertices: true,
            skinning: false,
            hidden: 256,
            init_sigma: 0.01,
            identity_dim: 32,
        }
    }
}

/// The four heads; `None` disables a head (its corrective is zero).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectiveNets {
    pub skeleton: Option<DenseHead>,
    pub identity_vertices: Option<DenseHead>,
    pub pose_vertices: Option<DenseHead>,
    pub skinning: Option<DenseHead>,
}

pub const HEAD_NAMES: [&str; 4] = ["skel", "idvert", "posevert", "skinw"];

impl CorrectiveNets {
    fn build(model: &HandModel, cfg: &CorrectiveConfig, mut make: impl FnMut(&str, usize, usize) -> DenseHead) -> Self {
        let (nv, nj, np) = (model.num_vertices(), model.num_joints(), model.num_dofs());
        let nb = cfg.identity_dim;
        CorrectiveNets {
            skeleton: cfg.skeleton.then(|| make("skel", nb, nj * 3)),
            identity_vertices: cfg.identity_vertices.then(|| make("idvert", nb, nv * 3)),
            pose_vertices: cfg.pose_vertices.then(|| make("posevert", np, nv * 3)),
            skinning: cfg.skinning.then(|| make("skinw", nb, nv * nj)),
        }
    }

    pub fn new<R: Rng + ?Sized>(model: &HandModel, cfg: &CorrectiveConfig, rng: &mut R) -> Self {
        Self::build(model, cfg, |name, i, o| DenseHead::new(name, i, cfg.hidden, o, cfg.init_sigma, rng))
    }

    /// All weights and biases zero: every corrective is exactly zero.
    pub fn zeros(model: &HandModel, cfg: &CorrectiveConfig) -> Self {
        Self::build(model, cfg, |name, i, o| DenseHead::zeros(name, i, cfg.hidden, o))
    }

    pub fn heads(&self) -> [(&'static str, Option<&DenseHead>); 4] {
        [
            (HEAD_NAMES[0], self.skeleton.as_ref()),
            (HEAD_NAMES[1], self.identity_vertices.as_ref()),
            (HEAD_NAMES[2], self.pose_vertices.as_ref()),
            (HEAD_NAMES[3], self.skinning.as_ref()),
        ]
    }

    pub fn heads_mut(&mut self) -> [(&'static str, Option<&mut DenseHead>); 4] {
        [
            (HEAD_NAMES[0], self.skeleton.as_mut()),
            (HEAD_NAMES[1], self.identity_vertices.as_mut()),
            (HEAD_NAMES[2], self.pose_vertices.as_mut()),
            (HEAD_NAMES[3], self.skinning.as_mut()),
        ]
    }

    /// Parameters in a fixed order (head order, then w1, b1, w2, b2).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.heads_mut()
            .into_iter()
            .filter_map(|(_, h)| h)
            .flat_map(|h| h.params_mut())
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.heads().into_iter().filter_map(|(_, h)| h).flat_map(|h| h.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn check_shapes(&self, model: &HandModel, identity_dim: usize) -> Result<()> {
        let (nv, nj, np) = (model.num_vertices(), model.num_joints(), model.num_dofs());
        let expect = [(identity_dim, nj * 3), (identity_dim, nv * 3), (np, nv * 3), (identity_dim, nv * nj)];
        for ((name, head), (i, o)) in self.heads().into_iter().zip(expect) {
            if let Some(h) = head {
                if h.n_in() != i || h.n_out() != o {
                    return Err(Error::Contract(format!(
                        "head {name} maps {} -> {}, model needs {i} -> {o}",
                        h.n_in(),
                        h.n_out()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Refined template, offsets and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedModel {
    pub vertices: Vec<Vec3>,
    pub offsets: Vec<Vec3>,
    /// Row-major `V x J`.
    pub weights: Vec<f64>,
}

fn rows3(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// `max(w + d, 0)` renormalized per row.
pub fn refine_skinning(weights: &[f64], delta: &[f64], num_joints: usize) -> Result<Vec<f64>> {
    if weights.len() != delta.len() || num_joints == 0 || weights.len() % num_joints != 0 {
        return Err(Error::shape("refine_skinning", format!("{} weights vs {} deltas", weights.len(), delta.len())));
    }
    let mut out = Vec::with_capacity(weights.len());
    for (v, (w, d)) in weights.chunks_exact(num_joints).zip(delta.chunks_exact(num_joints)).enumerate() {
        let row: Vec<f64> = w.iter().zip(d).map(|(a, b)| (a + b).max(0.0)).collect();
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Degenerate(format!("skinning row of vertex {v} clamps to zero")));
        }
        out.extend(row.iter().map(|x| x / s));
    }
    Ok(out)
}

/// Corrective values for one pose.
pub fn apply_correctives(
    model: &HandModel,
    nets: &CorrectiveNets,
    beta: &IdentityCode,
    pose: &PoseVector,
) -> Result<RefinedModel> {
    nets.check_shapes(model, beta.beta.len())?;
    let mut vertices = model.template_vertices.clone();
    let mut offsets = model.skeleton_offsets.clone();
    let mut weights = model.skinning_weights.clone();
    let add = |dst: &mut Vec<Vec3>, d: Vec<f64>| {
        for (p, q) in dst.iter_mut().zip(rows3(&d)) {
            *p = [p[0] + q[0], p[1] + q[1], p[2] + q[2]];
        }
    };
    if let Some(h) = &nets.skeleton {
        add(&mut offsets, h.forward(&beta.beta)?);
    }
    if let Some(h) = &nets.identity_vertices {
        add(&mut vertices, h.forward(&beta.beta)?);
    }
    if let Some(h) = &nets.pose_vertices {
        add(&mut vertices, h.forward(&pose.theta())?);
    }
    if let Some(h) = &nets.skinning {
        let mut d = h.forward(&beta.beta)?;
        for (dk, w) in d.iter_mut().zip(&model.skinning_weights) {
            if *w == 0.0 {
                *dk = 0.0;
            }
        }
        weights = refine_skinning(&model.skinning_weights, &d, model.num_joints())?;
    }
    Ok(RefinedModel {
        vertices,
        offsets,
        weights,
    })
}

/// Head outputs on a tape, reshaped: skel `[J, 3]`, idvert and posevert
/// `[V, 3]`, skinw `[V, J]` (not yet masked).
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadOutputs {
    pub skeleton: Option<Var>,
    pub identity_vertices: Option<Var>,
    pub pose_vertices: Option<Var>,
    pub skinning: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct RefinedGraph {
    pub vertices: Var,
    pub offsets: Var,
    pub weights: Var,
}

/// Parameter leaves of each enabled head, for moving gradients back.
#[derive(Clone, Debug, Default)]
pub struct NetBindings {
    heads: [Option<HeadVars>; 4],
}

impl NetBindings {
    pub fn accumulate(&self, nets: &mut CorrectiveNets, grads: &Gradients) -> Result<()> {
        for ((_, head), vars) in nets.heads_mut().into_iter().zip(&self.heads) {
            if let (Some(h), Some(v)) = (head, vars) {
                h.accumulate(grads, v)?;
            }
        }
        Ok(())
    }
}

/// Evaluates the identity heads once on `beta`.
pub fn identity_heads_graph(
    tape: &mut Tape,
    model: &HandModel,
    nets: &CorrectiveNets,
    beta: &IdentityCode,
    bindings: &mut NetBindings,
) -> Result<HeadOutputs> {
    nets.check_shapes(model, beta.beta.len())?;
    let (nv, nj) = (model.num_vertices(), model.num_joints());
    let b = tape.constant(Tensor::new(vec![1, beta.beta.len()], beta.beta.clone())?);
    let mut out = HeadOutputs::default();
    let mut run = |tape: &mut Tape, head: &Option<DenseHead>, slot: usize, shape: [usize; 2]| -> Result<Option<Var>> {
        let Some(h) = head else { return Ok(None) };
        let (y, vars) = h.forward_graph(tape, b)?;
        bindings.heads[slot] = Some(vars);
        Ok(Some(tape.reshape(y, shape.to_vec())?))
    };
    out.skeleton = run(tape, &nets.skeleton, 0, [nj, 3])?;
    out.identity_vertices = run(tape, &nets.identity_vertices, 1, [nv, 3])?;
    out.skinning = run(tape, &nets.skinning, 3, [nv, nj])?;
    Ok(out)
}

/// Pose-vertex head on a `[B, N_P]` batch of angles; returns `[B, 3V]`.
/// The input is wrapped in a stop-gradient when `stop_gradient` is set.
pub fn pose_head_graph(
    tape: &mut Tape,
    nets: &CorrectiveNets,
    theta: Var,
    stop_gradient: bool,
    bindings: &mut NetBindings,
) -> Result<Option<Var>> {
    let Some(h) = &nets.pose_vertices else { return Ok(None) };
    let x = if stop_gradient { tape.stop_gradient(theta)? } else { theta };
    let (y, vars) = h.forward_graph(tape, x)?;
    bindings.heads[2] = Some(vars);
    Ok(Some(y))
}

/// `M* = M + dM_beta + dM_theta`, `S* = S + dS_beta`, `W*` from the
/// masked skinning delta.
pub fn assemble_refined_graph(tape: &mut Tape, model: &HandModel, heads: &HeadOutputs) -> Result<RefinedGraph> {
    let (nv, nj) = (model.num_vertices(), model.num_joints());
    let mut vertices = tape.constant(Tensor::from_rows3(&model.template_vertices));
    let mut offsets = tape.constant(Tensor::from_rows3(&model.skeleton_offsets));
    let base_w = tape.constant(Tensor::from_rows(nv, nj, model.skinning_weights.clone())?);
    if let Some(d) = heads.skeleton {
        offsets = tape.add(offsets, d)?;
    }
    if let Some(d) = heads.identity_vertices {
        vertices = tape.add(vertices, d)?;
    }
    if let Some(d) = heads.pose_vertices {
        let d = tape.reshape(d, vec![nv, 3])?;
        vertices = tape.add(vertices, d)?;
    }
    let weights = match heads.skinning {
        None => base_w,
        Some(d) => {
            let mask: Vec<f64> = model.skinning_weights.iter().map(|&w| if w != 0.0 { 1.0 } else { 0.0 }).collect();
            let mask = tape.constant(Tensor::from_rows(nv, nj, mask)?);
            let d = tape.mul(d, mask)?;
            // Validates the rows before building the differentiable version.
            refine_skinning(&model.skinning_weights, tape.value(d).data(), nj)?;
            let s = tape.add(base_w, d)?;
            let c = tape.max_const(s, 0.0)?;
            let rows = tape.sum_last_axis(c)?;
            let rows = tape.reshape(rows, vec![nv, 1])?;
            tape.div(c, rows)?
        }
    };
    Ok(RefinedGraph {
        vertices,
        offsets,
        weights,
    })
}

/// All heads and the assembly on a single tape. `theta` is the `[N_P]`
/// active angle node.
pub fn apply_correctives_graph(
    tape: &mut Tape,
    model: &HandModel,
    nets: &CorrectiveNets,
    beta: &IdentityCode,
    theta: Var,
    stop_pose_gradient: bool,
) -> Result<(RefinedGraph, NetBindings)> {
    let mut bindings = NetBindings::default();
    let mut heads = identity_heads_graph(tape, model, nets, beta, &mut bindings)?;
    let np = tape.shape(theta).iter().product::<usize>();
    let row = tape.reshape(theta, vec![1, np])?;
    heads.pose_vertices = pose_head_graph(tape, nets, row, stop_pose_gradient, &mut bindings)?;
    let refined = assemble_refined_graph(tape, model, &heads)?;
    Ok((refined, bindings))
}
