//! Weakly supervised fitting: per-frame raw poses and shared corrective
//! heads, optimized against 3D joints and multi-view depth.
//!
//! Each frame is evaluated on its own tape. The identity heads depend only
//! on the fixed identity code, so they are evaluated once per iteration on
//! a separate tape; their outputs enter the frame tapes as leaves and the
//! summed leaf gradients are pushed back through the heads afterwards.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{self, PalmVertexSet, SphereChain};
use crate::correctives::{
    apply_correctives, assemble_refined_graph, identity_heads_graph, pose_head_graph, CorrectiveConfig, CorrectiveNets, HeadOutputs,
    IdentityCode, NetBindings,
};
use crate::diff::{AdamSlot, AdamState, Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::kinematics::{
    expand_theta_graph, forward_kinematics_graph, rest_joint_positions, rigid_align, theta_graph, EulerOrder,
    PoseVector, RigidAlignment,
};
use crate::losses::{self, LaplacianReduction, LossBreakdown, LossTerms, LossWeights};
use crate::model::HandModel;
use crate::render::{self, Camera};
use crate::skinning::{self, Adjacency};
use crate::synth::{CaptureFrame, Dataset};

/// Which loss terms take part; switching one off removes it from both the
/// value and the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub pose: bool,
    pub depth: bool,
    pub penetration: bool,
    pub laplacian: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            pose: true,
            depth: true,
            penetration: true,
            laplacian: true,
        }
    }
}

impl LossToggles {
    pub fn none() -> Self {
        LossToggles {
            pose: false,
            depth: false,
            penetration: false,
            laplacian: false,
        }
    }

    pub fn pose_only() -> Self {
        LossToggles {
            pose: true,
            ..Self::none()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Step size of the corrective heads.
    pub lr: f64,
    /// Step size of the per-frame raw poses. They stand in for an image
    /// encoder's output, so they get their own rate.
    pub pose_lr: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    /// Views sampled per frame per iteration (`C_out`).
    pub views_per_frame: usize,
    pub lambda_nr: f64,
    pub lambda_lap: f64,
    pub laplacian: LaplacianReduction,
    pub losses: LossToggles,
    pub correctives: CorrectiveConfig,
    /// Block the pose-vertex corrective's gradient into the pose.
    pub stop_pose_gradient: bool,
    pub spheres_per_bone: usize,
    pub euler_order: EulerOrder,
    pub seed: u64,
    /// Pose refit iterations per test frame in [`evaluate`], nets frozen.
    pub eval_iterations: usize,
    pub eval_lr: f64,
    /// Pose-loss-only iterations per frame that initialize the raw poses
    /// before training and before each test refit. Zero disables.
    pub warmup_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 1e-4,
            pose_lr: 1e-2,
            epochs: 35,
            lr_drop_epochs: vec![30, 32],
            lr_drop_factor: 10.0,
            batch_size: 32,
            views_per_frame: 6,
            lambda_nr: 5.0,
            lambda_lap: 5.0,
            laplacian: LaplacianReduction::L2,
            losses: LossToggles::default(),
            correctives: CorrectiveConfig::default(),
            stop_pose_gradient: true,
            spheres_per_bone: collision::DEFAULT_SPHERES_PER_BONE,
            euler_order: EulerOrder::Xyz,
            seed: 0,
            eval_iterations: 150,
            eval_lr: 2e-2,
            warmup_iterations: 0,
        }
    }
}

impl FitConfig {
    /// Settings that converge on a laptop-sized synthetic dataset in
    /// minutes: larger steps, more epochs with the same drop pattern, and
    /// a pose-only warm start.
    pub fn desk_scale() -> Self {
        FitConfig {
            lr: 3e-4,
            pose_lr: 2e-2,
            epochs: 150,
            lr_drop_epochs: vec![110, 135],
            warmup_iterations: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr", self.lr), ("pose_lr", self.pose_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("lr drop epoch {e} is not below epochs {}", self.epochs));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return bad("lr_drop_factor must be at least 1".into());
        }
        if self.batch_size == 0 || self.views_per_frame == 0 {
            return bad("batch_size and views_per_frame must be positive".into());
        }
        if self.spheres_per_bone == 0 {
            return bad("spheres_per_bone must be positive".into());
        }
        if !(self.eval_lr > 0.0) {
            return bad("eval_lr must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_nr: self.lambda_nr,
            lambda_lap: self.lambda_lap,
        }
    }

    pub fn iterations_per_epoch(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.batch_size).max(1)
    }

    pub fn total_iterations(&self, n_frames: usize) -> u64 {
        (self.epochs * self.iterations_per_epoch(n_frames)) as u64
    }

    /// Factor applied to both step sizes at `epoch`.
    pub fn decay_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr_drop_factor.powi(-(drops as i32))
    }
}

/// Everything that changes during a fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub config: FitConfig,
    /// Raw pose per training frame.
    pub poses: Vec<Param>,
    pub nets: CorrectiveNets,
    pub beta: IdentityCode,
    /// Moments of the net parameters, in `CorrectiveNets::params` order.
    pub adam_nets: AdamState,
    /// Moments of the frame poses, one slot per frame.
    pub adam_poses: AdamState,
    pub iteration: u64,
    pub history: Vec<LossBreakdown>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream tags keep the fitter's draws apart from each other.
const STREAM_INIT: u64 = 1 << 60;
const STREAM_SHUFFLE: u64 = 2 << 60;
const STREAM_VIEWS: u64 = 3 << 60;

impl FitState {
    pub fn new(model: &HandModel, n_frames: usize, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, STREAM_INIT);
        let beta = IdentityCode::sample(config.correctives.identity_dim, &mut rng);
        let nets = CorrectiveNets::new(model, &config.correctives, &mut rng);
        let np = model.num_dofs();
        let poses = (0..n_frames)
            .map(|f| Param::new(format!("u/{f}"), Tensor::zeros(vec![np])))
            .collect();
        Ok(FitState {
            config: config.clone(),
            poses,
            nets,
            beta,
            adam_nets: AdamState::new(config.lr),
            adam_poses: AdamState::new(config.pose_lr),
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        (self.iteration / self.config.iterations_per_epoch(self.poses.len()) as u64) as usize
    }

    pub fn pose(&self, frame: usize, model: &HandModel) -> Result<PoseVector> {
        PoseVector::new(self.poses[frame].value().data().to_vec(), model.dof_mask.clone())
    }
}

/// Frames of the batch used at `iteration`: a seeded shuffle per epoch,
/// cut into consecutive batches.
pub fn batch_frames(config: &FitConfig, n_frames: usize, iteration: u64) -> Vec<usize> {
    let ipe = config.iterations_per_epoch(n_frames) as u64;
    let (epoch, k) = (iteration / ipe, (iteration % ipe) as usize);
    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(&mut rng_for(config.seed, STREAM_SHUFFLE + epoch));
    order.into_iter().skip(k * config.batch_size).take(config.batch_size).collect()
}

/// Views of `frame` at `iteration`, sampled without replacement.
pub fn sample_views(config: &FitConfig, n_cameras: usize, iteration: u64, frame: usize) -> Vec<usize> {
    let n = config.views_per_frame.min(n_cameras);
    let mut rng = rng_for(config.seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_VIEWS + frame as u64);
    let mut v = index::sample(&mut rng, n_cameras, n).into_vec();
    v.sort_unstable();
    v
}

/// Values shared by all frames of one iteration.
pub struct IterationContext<'a> {
    pub model: &'a HandModel,
    pub nets: &'a CorrectiveNets,
    pub cameras: &'a [Camera],
    pub config: &'a FitConfig,
    /// Identity head outputs: skeleton `[J, 3]`, identity vertices `[V, 3]`,
    /// skinning `[V, J]`.
    pub identity: [Option<Tensor>; 3],
    pub chains: Vec<SphereChain>,
    pub fingertips: Vec<usize>,
    pub palm: PalmVertexSet,
    pub adjacency: Arc<Adjacency>,
}

impl<'a> IterationContext<'a> {
    pub fn new(
        model: &'a HandModel,
        nets: &'a CorrectiveNets,
        beta: &IdentityCode,
        cameras: &'a [Camera],
        config: &'a FitConfig,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let mut bindings = NetBindings::default();
        let heads = identity_heads_graph(&mut tape, model, nets, beta, &mut bindings)?;
        let identity = [heads.skeleton, heads.identity_vertices, heads.skinning].map(|v| v.map(|v| tape.value(v).clone()));
        let rest = apply_correctives(model, nets, beta, &PoseVector::zero(model.dof_mask.clone()))?;
        let chains = collision::build_sphere_chains(&rest, &model.hierarchy, config.spheres_per_bone)?;
        let fingertips = collision::fingertip_chains(&chains, &model.hierarchy);
        let palm = PalmVertexSet::from_weights(&rest.weights, model.num_joints(), model.hierarchy.palm_joint);
        Ok(IterationContext {
            model,
            nets,
            cameras,
            config,
            identity,
            chains,
            fingertips,
            palm,
            adjacency: Arc::new(Adjacency::from_faces(model.num_vertices(), &model.faces)),
        })
    }
}

/// Gradients and values from one frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub breakdown: LossBreakdown,
    pub grad_pose: Vec<f64>,
    /// Gradients of the identity head outputs, same layout as
    /// [`IterationContext::identity`].
    pub grad_identity: [Option<Tensor>; 3],
    /// Pose angles fed to the pose-vertex head.
    pub pose_input: Vec<f64>,
    /// Gradient of the pose-vertex head output `[1, 3V]`, when the head
    /// sits behind a stop-gradient and is replayed batch-wide.
    pub grad_pose_output: Option<Tensor>,
    /// Gradients of the pose-vertex head parameters, when the head was
    /// evaluated on the frame tape.
    pub grad_pose_head: Option<[Tensor; 4]>,
    /// Posed joints and vertices in dataset space.
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
    pub alignment: RigidAlignment,
}

/// What a frame pass should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wants {
    pub pose: bool,
    pub nets: bool,
}

/// Which scalar a frame pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Pose,
    Depth,
    RigidPenetration,
    NonrigidPenetration,
    Laplacian,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Pose,
        LossTerm::Depth,
        LossTerm::RigidPenetration,
        LossTerm::NonrigidPenetration,
        LossTerm::Laplacian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Pose => "pose",
            LossTerm::Depth => "depth",
            LossTerm::RigidPenetration => "penet_rigid",
            LossTerm::NonrigidPenetration => "penet_nonrigid",
            LossTerm::Laplacian => "laplacian",
        }
    }

    /// Unweighted value of this term in a breakdown.
    pub fn value(self, b: &LossBreakdown) -> f64 {
        match self {
            LossTerm::Pose => b.pose,
            LossTerm::Depth => b.depth,
            LossTerm::RigidPenetration => b.penet_rigid,
            LossTerm::NonrigidPenetration => b.penet_nonrigid,
            LossTerm::Laplacian => b.laplacian,
        }
    }
}

/// Overrides for diagnostic passes.
#[derive(Clone, Debug, Default)]
pub struct PassOptions {
    /// Differentiate one unweighted term instead of the total.
    pub term: Option<LossTerm>,
    /// Use this alignment instead of solving for it.
    pub alignment: Option<RigidAlignment>,
}

/// Forward and backward pass of one frame.
pub fn frame_pass(
    ctx: &IterationContext,
    frame: &CaptureFrame,
    raw_pose: &[f64],
    views: &[usize],
    wants: Wants,
) -> Result<FrameOutput> {
    frame_pass_with(ctx, frame, raw_pose, views, wants, &PassOptions::default())
}

/// [`frame_pass`] with diagnostic overrides.
pub fn frame_pass_with(
    ctx: &IterationContext,
    frame: &CaptureFrame,
    raw_pose: &[f64],
    views: &[usize],
    wants: Wants,
    opts: &PassOptions,
) -> Result<FrameOutput> {
    let model = ctx.model;
    let cfg = ctx.config;
    let (nv, nj, np) = (model.num_vertices(), model.num_joints(), model.num_dofs());
    if raw_pose.len() != np {
        return Err(Error::Contract(format!("pose has {} values, model has {np} DOFs", raw_pose.len())));
    }
    if frame.joints.len() != nj {
        return Err(Error::Data(format!("frame {}: {} joints for {nj}", frame.id, frame.joints.len())));
    }
    let mut tape = Tape::new();
    let u = if wants.pose {
        tape.variable(Tensor::from_vec(raw_pose.to_vec()))
    } else {
        tape.constant(Tensor::from_vec(raw_pose.to_vec()))
    };
    let leaves: [Option<Var>; 3] = std::array::from_fn(|i| {
        ctx.identity[i].as_ref().map(|t| {
            if wants.nets {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    });
    let theta = theta_graph(&mut tape, u)?;

    let mut pose_head_vars = None;
    let mut pose_leaf = None;
    let mut heads = HeadOutputs {
        skeleton: leaves[0],
        identity_vertices: leaves[1],
        pose_vertices: None,
        skinning: leaves[2],
    };
    if let Some(h) = &ctx.nets.pose_vertices {
        let row = tape.reshape(theta, vec![1, np])?;
        let y = if cfg.stop_pose_gradient || !wants.pose {
            // No gradient reaches the pose through the head, so its output
            // is a leaf and the head itself is replayed once per batch.
            let out = Tensor::new(vec![1, 3 * nv], h.forward(tape.value(row).data())?)?;
            if wants.nets {
                let y = tape.variable(out);
                pose_leaf = Some(y);
                y
            } else {
                tape.constant(out)
            }
        } else if wants.nets {
            let (y, vars) = h.forward_graph(&mut tape, row)?;
            pose_head_vars = Some(vars);
            y
        } else {
            let mut frozen = h.clone();
            for p in frozen.params_mut() {
                p.requires_grad = false;
            }
            frozen.forward_graph(&mut tape, row)?.0
        };
        heads.pose_vertices = Some(y);
    }
    let refined = assemble_refined_graph(&mut tape, model, &heads)?;
    let angles = expand_theta_graph(&mut tape, theta, &model.dof_mask)?;
    let fk = forward_kinematics_graph(&mut tape, angles, refined.offsets, &model.hierarchy, cfg.euler_order)?;

    let align_idx = model.hierarchy.alignment_joints();
    let rest = rest_joint_positions(&tape.value(refined.offsets).rows3(), &model.hierarchy);
    let src: Vec<Vec3> = align_idx.iter().map(|&j| rest[j]).collect();
    let dst: Vec<Vec3> = align_idx.iter().map(|&j| frame.joints[j]).collect();
    let alignment = match &opts.alignment {
        Some(a) => a.clone(),
        None => rigid_align(&src, &dst)?,
    };

    let local = skinning::lbs_graph(&mut tape, refined.vertices, refined.weights, fk.transforms)?;
    let verts = skinning::align_graph(&mut tape, local, &alignment)?;
    let joints = skinning::align_graph(&mut tape, fk.positions, &alignment)?;

    let mut terms = LossTerms::default();
    if cfg.losses.pose {
        terms.pose = Some(losses::pose_loss_graph(&mut tape, joints, &frame.joints)?);
    }
    if cfg.losses.depth && !views.is_empty() {
        let faces = &model.faces;
        let mut renders = Vec::with_capacity(views.len());
        let mut targets = Vec::with_capacity(views.len());
        for &c in views {
            let cam = ctx.cameras.get(c).ok_or_else(|| Error::Data(format!("no camera {c}")))?;
            let target = frame
                .depth
                .get(c)
                .ok_or_else(|| Error::Data(format!("frame {}: no depth for view {c}", frame.id)))?;
            renders.push(render::render_depth_graph(&mut tape, verts, faces, cam)?);
            targets.push(target);
        }
        terms.depth = Some(losses::depth_loss_graph(&mut tape, &renders, &targets)?);
    }
    if cfg.losses.penetration {
        let centers = collision::sphere_centers_graph(&mut tape, fk.positions, &ctx.chains)?;
        terms.penet_rigid = Some(collision::rigid_penetration_graph(&mut tape, centers, &ctx.chains)?);
        terms.penet_nonrigid = Some(collision::nonrigid_penetration_graph(
            &mut tape,
            centers,
            &ctx.chains,
            &ctx.fingertips,
            &ctx.palm,
            local,
        )?);
    }
    if cfg.losses.laplacian {
        let r = skinning::laplacian_graph(&mut tape, verts, &ctx.adjacency)?;
        terms.laplacian = Some(losses::laplacian_loss_graph(&mut tape, r, cfg.laplacian)?);
    }
    let (total, breakdown) = losses::total_loss_graph(&mut tape, &terms, cfg.weights())?;
    let objective = match opts.term {
        None => Some(total),
        Some(LossTerm::Pose) => terms.pose,
        Some(LossTerm::Depth) => terms.depth,
        Some(LossTerm::RigidPenetration) => terms.penet_rigid,
        Some(LossTerm::NonrigidPenetration) => terms.penet_nonrigid,
        Some(LossTerm::Laplacian) => terms.laplacian,
    };

    let mut out = FrameOutput {
        breakdown,
        grad_pose: vec![0.0; np],
        grad_identity: [None, None, None],
        pose_input: tape.value(theta).data().to_vec(),
        grad_pose_output: None,
        grad_pose_head: None,
        joints: tape.value(joints).rows3(),
        vertices: tape.value(verts).rows3(),
        alignment,
    };
    let Some(objective) = objective else {
        return Ok(out);
    };
    if !(wants.pose || wants.nets) || !breakdown.is_finite() {
        return Ok(out);
    }
    let grads = tape.backward(objective)?;
    if wants.pose {
        out.grad_pose = grads.get_or_zeros(u, &[np]).into_data();
    }
    if wants.nets {
        for (g, leaf) in out.grad_identity.iter_mut().zip(leaves) {
            if let Some(v) = leaf {
                *g = Some(grads.get_or_zeros(v, tape.shape(v)));
            }
        }
        if let Some(v) = pose_leaf {
            out.grad_pose_output = Some(grads.get_or_zeros(v, tape.shape(v)));
        }
        if let Some(vars) = pose_head_vars {
            out.grad_pose_head = Some(vars.vars().map(|v| grads.get_or_zeros(v, tape.shape(v))));
        }
    }
    Ok(out)
}

/// Pushes summed head-output gradients back into the heads: identity
/// outputs once, pose-vertex outputs as one `[B, 3V]` batch.
pub fn backprop_heads(
    model: &HandModel,
    nets: &mut CorrectiveNets,
    beta: &IdentityCode,
    identity: &[Option<Tensor>; 3],
    pose: Option<(Tensor, Tensor)>,
) -> Result<()> {
    if identity.iter().all(Option::is_none) && pose.is_none() {
        return Ok(());
    }
    let mut tape = Tape::new();
    let mut bindings = NetBindings::default();
    let mut heads = identity_heads_graph(&mut tape, model, nets, beta, &mut bindings)?;
    let mut pose_grad = None;
    if let Some((x, g)) = pose {
        let x = tape.constant(x);
        heads.pose_vertices = pose_head_graph(&mut tape, nets, x, false, &mut bindings)?;
        pose_grad = Some(g);
    }
    let mut parts = Vec::new();
    let outs = [heads.skeleton, heads.identity_vertices, heads.skinning, heads.pose_vertices];
    let gs = [&identity[0], &identity[1], &identity[2], &pose_grad];
    for (out, g) in outs.into_iter().zip(gs) {
        if let (Some(out), Some(g)) = (out, g) {
            let gv = tape.constant(g.clone());
            let p = tape.mul(out, gv)?;
            parts.push(tape.sum(p)?);
        }
    }
    if parts.is_empty() {
        return Ok(());
    }
    let n = parts.len();
    let stacked = tape.concat(&parts, vec![n])?;
    let s = tape.sum(stacked)?;
    let g = tape.backward(s)?;
    bindings.accumulate(nets, &g)
}

fn add_into(dst: &mut Option<Tensor>, src: &Option<Tensor>) {
    if let Some(s) = src {
        match dst {
            Some(d) => d.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b),
            None => *dst = Some(s.clone()),
        }
    }
}

fn check_dataset(model: &HandModel, ds: &Dataset) -> Result<()> {
    if ds.train.is_empty() {
        return Err(Error::Data("dataset has no training frames".into()));
    }
    if ds.cameras.is_empty() {
        return Err(Error::Data("dataset has no cameras".into()));
    }
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(())
}

/// One optimization step on the batch chosen for `state.iteration`.
/// Returns the mean loss breakdown of the batch.
pub fn fit_step(state: &mut FitState, model: &HandModel, ds: &Dataset) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let n = state.poses.len();
    if n != ds.train.len() {
        return Err(Error::Contract(format!("state has {n} poses for {} training frames", ds.train.len())));
    }
    let it = state.iteration;
    let batch = batch_frames(&cfg, n, it);
    let outputs: Vec<FrameOutput> = {
        let ctx = IterationContext::new(model, &state.nets, &state.beta, &ds.cameras, &cfg)?;
        let poses = &state.poses;
        batch
            .par_iter()
            .map(|&f| {
                let views = sample_views(&cfg, ds.cameras.len(), it, f);
                frame_pass(&ctx, &ds.train[f], poses[f].value().data(), &views, Wants { pose: true, nets: true })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let inv = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    for o in &outputs {
        mean.accumulate(&o.breakdown);
    }
    let mean = mean.scaled(inv);
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            iteration: it,
            breakdown: mean,
        });
    }

    state.nets.zero_grad();
    for p in &mut state.poses {
        p.zero_grad();
    }
    let mut identity: [Option<Tensor>; 3] = [None, None, None];
    for (o, &f) in outputs.iter().zip(&batch) {
        let g: Vec<f64> = o.grad_pose.iter().map(|x| x * inv).collect();
        state.poses[f].accumulate(&Tensor::from_vec(g))?;
        for (d, s) in identity.iter_mut().zip(&o.grad_identity) {
            add_into(d, s);
        }
        if let (Some(head), Some(gs)) = (state.nets.pose_vertices.as_mut(), &o.grad_pose_head) {
            for (p, g) in head.params_mut().into_iter().zip(gs) {
                let scaled = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * inv).collect())?;
                p.accumulate(&scaled)?;
            }
        }
    }
    for t in identity.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    let replay: Vec<&FrameOutput> = outputs.iter().filter(|o| o.grad_pose_output.is_some()).collect();
    let pose_batch = if replay.is_empty() {
        None
    } else {
        let (b, np) = (replay.len(), replay[0].pose_input.len());
        let x: Vec<f64> = replay.iter().flat_map(|o| o.pose_input.iter().copied()).collect();
        let g: Vec<f64> = replay
            .iter()
            .flat_map(|o| o.grad_pose_output.as_ref().unwrap().data().iter().map(|v| v * inv))
            .collect();
        let width = g.len() / b;
        Some((Tensor::new(vec![b, np], x)?, Tensor::new(vec![b, width], g)?))
    };
    backprop_heads(model, &mut state.nets, &state.beta, &identity, pose_batch)?;

    let decay = cfg.decay_at_epoch(state.epoch());
    state.adam_nets.lr = cfg.lr * decay;
    state.adam_poses.lr = cfg.pose_lr * decay;
    state.adam_nets.step(&mut state.nets.params_mut())?;
    let in_batch: Vec<bool> = (0..n).map(|f| batch.contains(&f)).collect();
    let mut poses: Vec<&mut Param> = state.poses.iter_mut().collect();
    state.adam_poses.step_masked(&mut poses, &in_batch)?;
    state.iteration += 1;
    state.history.push(mean);
    Ok(mean)
}

/// Checkpoint hook for [`fit_with`]: file path and period in iterations.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy<'a> {
    pub path: &'a Path,
    pub every: u64,
}

/// Runs until the configured number of epochs has elapsed. On a
/// non-finite loss the state from before the failing iteration is written
/// to the checkpoint (if any) and the error is returned.
pub fn fit_with(
    state: &mut FitState,
    model: &HandModel,
    ds: &Dataset,
    checkpoint: Option<CheckpointPolicy>,
    mut on_iteration: impl FnMut(&FitState, &LossBreakdown),
) -> Result<()> {
    check_dataset(model, ds)?;
    if state.iteration == 0 && state.config.warmup_iterations > 0 {
        let init = warm_start_poses(model, &state.nets, &state.beta, &ds.cameras, &state.config, &ds.train)?;
        for (p, u) in state.poses.iter_mut().zip(init) {
            p.set_value(Tensor::from_vec(u))?;
        }
    }
    let total = state.config.total_iterations(state.poses.len());
    while state.iteration < total {
        let before = checkpoint.as_ref().map(|_| state.clone());
        match fit_step(state, model, ds) {
            Ok(b) => on_iteration(state, &b),
            Err(e @ Error::NonFinite { .. }) => {
                if let (Some(cp), Some(prev)) = (&checkpoint, before) {
                    save_checkpoint(&prev, cp.path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if let Some(cp) = &checkpoint {
            if cp.every > 0 && (state.iteration % cp.every == 0 || state.iteration == total) {
                save_checkpoint(state, cp.path)?;
            }
        }
    }
    Ok(())
}

pub fn fit(ds: &Dataset, model: &HandModel, config: &FitConfig) -> Result<FitState> {
    let mut state = FitState::new(model, ds.train.len(), config)?;
    fit_with(&mut state, model, ds, None, |s, b| log::debug!("iter {}: {b}", s.iteration))?;
    Ok(state)
}

/// Mean Euclidean distance between corresponding joints.
pub fn p_err(pred: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("p_err", format!("{} vs {} joints", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| geometry::dist(*a, *b)).sum::<f64>() / pred.len() as f64)
}

/// Mean distance from each predicted vertex to the reference surface.
pub fn m_err(pred: &[Vec3], reference: &[Vec3], faces: &[[usize; 3]]) -> Result<f64> {
    if faces.is_empty() || pred.is_empty() {
        return Err(Error::Contract("m_err needs predicted vertices and a reference triangle".into()));
    }
    let total: f64 = pred
        .par_iter()
        .map(|&p| geometry::point_mesh_distance(p, reference, faces))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub p_err: f64,
    pub m_err: Option<f64>,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pick = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Some(Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: pick(0.5),
            p90: pick(0.9),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub p_err: Option<Summary>,
    pub m_err: Option<Summary>,
}

impl MetricsReport {
    fn new(frames: Vec<FrameMetrics>) -> Self {
        let p: Vec<f64> = frames.iter().map(|f| f.p_err).collect();
        let m: Vec<f64> = frames.iter().filter_map(|f| f.m_err).collect();
        MetricsReport {
            p_err: Summary::of(&p),
            m_err: Summary::of(&m),
            frames,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,p_err,m_err,total_loss\n");
        for f in &self.frames {
            let m = f.m_err.map_or(String::new(), |m| m.to_string());
            s.push_str(&format!("{},{},{},{}\n", f.frame, f.p_err, m, f.loss.total));
        }
        s
    }
}

fn frame_metrics(ctx: &IterationContext, frame: &CaptureFrame, raw: &[f64]) -> Result<FrameMetrics> {
    let views: Vec<usize> = (0..ctx.cameras.len()).collect();
    let out = frame_pass(ctx, frame, raw, &views, Wants { pose: false, nets: false })?;
    let m = match &frame.gt_vertices {
        Some(gt) => Some(m_err(&out.vertices, gt, &ctx.model.faces)?),
        None => None,
    };
    Ok(FrameMetrics {
        frame: frame.id,
        p_err: p_err(&out.joints, &frame.joints)?,
        m_err: m,
        loss: out.breakdown,
    })
}

/// Metrics of the training frames at their fitted poses.
pub fn training_metrics(state: &FitState, model: &HandModel, ds: &Dataset) -> Result<MetricsReport> {
    let ctx = IterationContext::new(model, &state.nets, &state.beta, &ds.cameras, &state.config)?;
    let frames = ds
        .train
        .iter()
        .zip(&state.poses)
        .map(|(f, u)| frame_metrics(&ctx, f, u.value().data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(frames))
}

/// Fits a raw pose for one frame with the nets frozen, at step size
/// `lr` decayed like the training schedule.
pub fn fit_frame_pose(
    ctx: &IterationContext,
    frame: &CaptureFrame,
    init: &[f64],
    iterations: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let cfg = ctx.config;
    let mut u = Param::new("u", Tensor::from_vec(init.to_vec()));
    let mut adam = AdamState::new(lr);
    for it in 0..iterations {
        let frac = it as f64 / iterations as f64;
        let drops = [0.75, 0.9].iter().filter(|&&d| frac >= d).count();
        adam.lr = lr / cfg.lr_drop_factor.powi(drops as i32);
        let views = sample_views(cfg, ctx.cameras.len(), it as u64, frame.id);
        let out = frame_pass(ctx, frame, u.value().data(), &views, Wants { pose: true, nets: false })?;
        if !out.breakdown.is_finite() {
            return Err(Error::NonFinite {
                iteration: it as u64,
                breakdown: out.breakdown,
            });
        }
        u.zero_grad();
        u.accumulate(&Tensor::from_vec(out.grad_pose))?;
        adam.step(&mut [&mut u])?;
    }
    Ok(u.value().data().to_vec())
}

/// Pose-only initialization of raw poses for `frames`, starting at zero.
pub fn warm_start_poses(
    model: &HandModel,
    nets: &CorrectiveNets,
    beta: &IdentityCode,
    cameras: &[Camera],
    config: &FitConfig,
    frames: &[CaptureFrame],
) -> Result<Vec<Vec<f64>>> {
    let zero = vec![0.0; model.num_dofs()];
    if config.warmup_iterations == 0 {
        return Ok(vec![zero; frames.len()]);
    }
    let pose_only = FitConfig {
        losses: LossToggles::pose_only(),
        ..config.clone()
    };
    let ctx = IterationContext::new(model, nets, beta, cameras, &pose_only)?;
    frames
        .par_iter()
        .map(|f| fit_frame_pose(&ctx, f, &zero, config.warmup_iterations, config.eval_lr))
        .collect()
}

/// Re-fits the pose of every test frame with frozen nets and reports
/// joint and surface errors against the ground truth.
pub fn evaluate(state: &FitState, model: &HandModel, ds: &Dataset, frames: &[CaptureFrame]) -> Result<MetricsReport> {
    let cfg = &state.config;
    let init = warm_start_poses(model, &state.nets, &state.beta, &ds.cameras, cfg, frames)?;
    let ctx = IterationContext::new(model, &state.nets, &state.beta, &ds.cameras, cfg)?;
    let out = frames
        .par_iter()
        .zip(&init)
        .map(|(f, init)| {
            let u = fit_frame_pose(&ctx, f, init, cfg.eval_iterations, cfg.eval_lr)?;
            frame_metrics(&ctx, f, &u)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(out))
}

const MAGIC: &[u8; 8] = b"HFITCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    slot_steps: Vec<u64>,
}

impl AdamHeader {
    fn of(a: &AdamState) -> Self {
        AdamHeader {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step_count: a.step_count,
            slot_steps: a.slots.iter().map(|s| s.steps).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: FitConfig,
    iteration: u64,
    beta: IdentityCode,
    heads: [bool; 4],
    frames: usize,
    adam: [AdamHeader; 2],
    history: Vec<LossBreakdown>,
    arrays: Vec<ArrayHeader>,
}

/// Serializes the state: magic, little-endian `u32` version and `u64`
/// header length, a JSON header, then every array as little-endian `f64`
/// in header order.
pub fn encode_checkpoint(state: &FitState) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    for p in state.nets.params() {
        arrays.push((p.name.clone(), p.value()));
    }
    for p in &state.poses {
        arrays.push((p.name.clone(), p.value()));
    }
    for (tag, adam) in [("nets", &state.adam_nets), ("poses", &state.adam_poses)] {
        for (i, s) in adam.slots.iter().enumerate() {
            arrays.push((format!("adam.{tag}.m/{i}"), &s.m));
            arrays.push((format!("adam.{tag}.v/{i}"), &s.v));
        }
    }
    let heads = state.nets.heads().map(|(_, h)| h.is_some());
    let header = CheckpointHeader {
        config: state.config.clone(),
        iteration: state.iteration,
        beta: state.beta.clone(),
        heads,
        frames: state.poses.len(),
        adam: [&state.adam_nets, &state.adam_poses].map(AdamHeader::of),
        history: state.history.clone(),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayHeader {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], model: &HandModel, origin: &Path) -> Result<FitState> {
    let fail = |loc: &str, msg: String| Error::format(origin, loc.to_string(), msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("offset 0", "not a fit checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail("offset 8", format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| fail("offset 12", "truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fail("header", format!("line {} column {}: {e}", e.line(), e.column())))?;
    let mut cursor = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let end = cursor + 8 * n;
        let raw = bytes
            .get(cursor..end)
            .ok_or_else(|| fail(&format!("offset {cursor}"), format!("array {} is truncated", a.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(a.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(fail(&format!("offset {cursor}"), "trailing bytes".into()));
    }

    let mut nets = CorrectiveNets::zeros(model, &header.config.correctives);
    let mut it = tensors.into_iter().zip(&header.arrays);
    let mut next = |expect: &str| -> Result<Tensor> {
        let (t, a) = it.next().ok_or_else(|| fail("arrays", format!("missing array {expect}")))?;
        if a.name != expect {
            return Err(fail("arrays", format!("expected array {expect}, found {}", a.name)));
        }
        Ok(t)
    };
    let present = nets.heads().map(|(_, h)| h.is_some());
    if present != header.heads {
        return Err(fail("heads", "enabled heads disagree with the stored config".into()));
    }
    for p in nets.params_mut() {
        let t = next(&p.name.clone())?;
        if t.shape() != p.value().shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{}: stored {:?}, model needs {:?}", p.name, t.shape(), p.value().shape()),
            ));
        }
        p.set_value(t)?;
    }
    let mut poses = Vec::with_capacity(header.frames);
    for f in 0..header.frames {
        let name = format!("u/{f}");
        let t = next(&name)?;
        if t.shape() != [model.num_dofs()] {
            return Err(Error::shape("checkpoint", format!("{name} has shape {:?}", t.shape())));
        }
        poses.push(Param::new(name, t));
    }
    let mut adams = Vec::with_capacity(2);
    for (tag, h) in ["nets", "poses"].iter().zip(&header.adam) {
        let mut adam = AdamState::new(h.lr);
        adam.beta1 = h.beta1;
        adam.beta2 = h.beta2;
        adam.eps = h.eps;
        adam.step_count = h.step_count;
        for (i, &steps) in h.slot_steps.iter().enumerate() {
            let m = next(&format!("adam.{tag}.m/{i}"))?;
            let v = next(&format!("adam.{tag}.v/{i}"))?;
            adam.slots.push(AdamSlot { m, v, steps });
        }
        adams.push(adam);
    }
    let adam_poses = adams.pop().unwrap();
    let adam_nets = adams.pop().unwrap();
    Ok(FitState {
        config: header.config,
        poses,
        nets,
        beta: header.beta,
        adam_nets,
        adam_poses,
        iteration: header.iteration,
        history: header.history,
    })
}

pub fn save_checkpoint(state: &FitState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &HandModel) -> Result<FitState> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, model, path)
}

/// Loss history as CSV.
pub fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = format!("{}\n", LossBreakdown::CSV_HEADER);
    for (i, b) in history.iter().enumerate() {
        s.push_str(&b.csv_row(i as u64));
        s.push('\n');
    }
    s
}
