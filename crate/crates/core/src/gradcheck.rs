//! Central finite-difference checks of every loss term's gradient with
//! respect to the raw pose and the corrective net weights.
//!
//! Each check compares a directional derivative: the reverse-mode gradient
//! dotted with a random direction against `(L(x + h d) - L(x - h d)) / 2h`.
//! Quantities the fit treats as per-iteration constants (rigid alignment,
//! sphere radii, palm vertex set) are held fixed on both routes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collision::{bones_excluded, interpolate_centers};
use crate::correctives::{CorrectiveConfig, CorrectiveNets, IdentityCode};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::fit::{
    backprop_heads, frame_pass_with, sample_views, FitConfig, IterationContext, LossTerm, LossToggles, PassOptions,
    Wants,
};
use crate::geometry::{self, Vec3};
use crate::model::HandModel;
use crate::render::{self, Camera};
use crate::synth::{fist_theta, sample_theta, CaptureFrame, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Checked configurations required per term.
    pub configs: usize,
    pub step: f64,
    pub smooth_tolerance: f64,
    pub kinked_tolerance: f64,
    pub seed: u64,
    /// Weight scale of the random nets the checks run on.
    pub init_sigma: f64,
    /// Hidden width of those nets. Narrower than a fit's heads to keep the
    /// suite fast; the code paths are the same.
    pub hidden: usize,
    /// Sampling attempts per term before giving up.
    pub max_attempts: usize,
    pub views: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            configs: 20,
            step: 1e-5,
            smooth_tolerance: 1e-4,
            kinked_tolerance: 1e-3,
            seed: 0,
            init_sigma: 0.1,
            hidden: 32,
            max_attempts: 200,
            views: 3,
        }
    }
}

impl GradcheckConfig {
    /// Pose and Laplacian are smooth away from measure-zero sets; the rest
    /// contain min/max selections or raster boundaries.
    pub fn tolerance(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Pose | LossTerm::Laplacian => self.smooth_tolerance,
            _ => self.kinked_tolerance,
        }
    }
}

/// Variables a check perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrt {
    Pose,
    Nets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub term: LossTerm,
    pub wrt: Wrt,
    pub frame: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: LossTerm,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub terms: Vec<TermReport>,
    pub records: Vec<CheckRecord>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>8} {:>8} {:>12} {:>10}  result\n",
            "term", "checked", "skipped", "max_rel_err", "tolerance"
        );
        for t in &self.terms {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}",
                t.term.name(),
                t.checked,
                t.skipped,
                t.max_rel_err,
                t.tolerance,
                if t.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    (scale > 1e-9).then(|| (analytic - numeric).abs() / scale)
}

/// Runs the suite on random nets against the frames of `ds`.
pub fn run_gradcheck(model: &HandModel, ds: &Dataset, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if ds.train.is_empty() {
        return Err(Error::Data("gradcheck needs at least one frame".into()));
    }
    if cfg.configs == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs configs > 0 and step > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let correctives = CorrectiveConfig {
        skinning: true,
        init_sigma: cfg.init_sigma,
        hidden: cfg.hidden,
        ..CorrectiveConfig::default()
    };
    let nets = CorrectiveNets::new(model, &correctives, &mut rng);
    let beta = IdentityCode::sample(correctives.identity_dim, &mut rng);
    let mut report = GradcheckReport {
        terms: Vec::new(),
        records: Vec::new(),
    };
    for term in LossTerm::ALL {
        let fit_cfg = FitConfig {
            correctives: correctives.clone(),
            losses: toggles_for(term),
            stop_pose_gradient: false,
            views_per_frame: cfg.views.min(ds.cameras.len()),
            seed: cfg.seed,
            ..FitConfig::default()
        };
        let ctx = IterationContext::new(model, &nets, &beta, &ds.cameras, &fit_cfg)?;
        let tol = cfg.tolerance(term);
        let mut tr = TermReport {
            term,
            tolerance: tol,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            passed: false,
        };
        let mut attempt = 0;
        while tr.checked < cfg.configs && attempt < cfg.max_attempts {
            attempt += 1;
            let f = rng.random_range(0..ds.train.len());
            let u = sample_raw_pose(&mut rng, model, term);
            let views = sample_views(&fit_cfg, ds.cameras.len(), attempt as u64, f);
            let views = if term == LossTerm::Depth { &views[..1] } else { &views[..] };
            match check_one(&ctx, &beta, &ds.cameras, &ds.train[f], term, &u, views, cfg, &mut rng)? {
                Some(recs) => {
                    tr.checked += 1;
                    for r in recs {
                        tr.max_rel_err = tr.max_rel_err.max(r.rel_err);
                        report.records.push(r);
                    }
                }
                None => tr.skipped += 1,
            }
        }
        tr.passed = tr.checked >= cfg.configs && tr.max_rel_err < tol;
        report.terms.push(tr);
    }
    Ok(report)
}

fn toggles_for(term: LossTerm) -> LossToggles {
    let mut t = LossToggles::none();
    match term {
        LossTerm::Pose => t.pose = true,
        LossTerm::Depth => t.depth = true,
        LossTerm::RigidPenetration | LossTerm::NonrigidPenetration => t.penetration = true,
        LossTerm::Laplacian => t.laplacian = true,
    }
    t
}

/// Penetration terms are checked on curled hands, where contact is
/// likely; other terms on random hands. Fingertips reach the palm only in
/// tight fists.
fn sample_raw_pose(rng: &mut ChaCha8Rng, model: &HandModel, term: LossTerm) -> Vec<f64> {
    let curl = match term {
        LossTerm::NonrigidPenetration => Some(0.9..1.15),
        LossTerm::RigidPenetration if rng.random_bool(0.5) => Some(0.6..1.0),
        _ => None,
    };
    let theta = match curl {
        Some(range) => fist_theta(&model.dof_mask, rng.random_range(range))
            .into_iter()
            .map(|t| t + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        None => sample_theta(rng, &model.dof_mask),
    };
    theta.into_iter().map(|t| (t / std::f64::consts::PI).clamp(-0.99, 0.99).atanh()).collect()
}

#[allow(clippy::too_many_arguments)]
fn check_one(
    ctx: &IterationContext,
    beta: &IdentityCode,
    cameras: &[Camera],
    frame: &CaptureFrame,
    term: LossTerm,
    u: &[f64],
    views: &[usize],
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<CheckRecord>>> {
    let h = cfg.step;
    let opts = PassOptions {
        term: Some(term),
        alignment: None,
    };
    let out = frame_pass_with(ctx, frame, u, views, Wants { pose: true, nets: true }, &opts)?;
    if term.value(&out.breakdown) <= 0.0 {
        return Ok(None);
    }
    let fixed = PassOptions {
        term: Some(term),
        alignment: Some(out.alignment.clone()),
    };
    // Loss and the discrete state its kinks depend on.
    let probe = |ctx: &IterationContext, u: &[f64]| -> Result<(f64, Vec<usize>)> {
        let o = frame_pass_with(ctx, frame, u, views, Wants { pose: false, nets: false }, &fixed)?;
        let sig = signature(term, ctx, cameras, views, &o.joints, &o.vertices)?;
        Ok((term.value(&o.breakdown), sig))
    };
    let sparse = term == LossTerm::Depth;
    let mut records = Vec::new();

    // Pose direction.
    let d = pose_direction(rng, u.len(), sparse);
    let analytic: f64 = out.grad_pose.iter().zip(&d).map(|(g, d)| g * d).sum();
    let shifted = |s: f64| -> Vec<f64> { u.iter().zip(&d).map(|(x, d)| x + s * h * d).collect() };
    let (lp, sp) = probe(ctx, &shifted(1.0))?;
    let (lm, sm) = probe(ctx, &shifted(-1.0))?;
    if sp != sm {
        return Ok(None);
    }
    records.push(record(term, Wrt::Pose, frame.id, analytic, (lp - lm) / (2.0 * h)));

    // Net-weight direction.
    let mut grads = ctx.nets.clone();
    grads.zero_grad();
    backprop_heads(ctx.model, &mut grads, beta, &out.grad_identity, None)?;
    if let (Some(head), Some(gs)) = (grads.pose_vertices.as_mut(), &out.grad_pose_head) {
        for (p, g) in head.params_mut().into_iter().zip(gs) {
            p.accumulate(g)?;
        }
    }
    let dirs = net_direction(rng, ctx.nets, ctx.model, sparse);
    let analytic: f64 = grads
        .params()
        .iter()
        .zip(&dirs)
        .map(|(p, d)| p.grad().data().iter().zip(d).map(|(g, d)| g * d).sum::<f64>())
        .sum();
    let mut probes = Vec::with_capacity(2);
    for s in [1.0, -1.0] {
        let mut nets = ctx.nets.clone();
        for (p, d) in nets.params_mut().into_iter().zip(&dirs) {
            let v: Vec<f64> = p.value().data().iter().zip(d).map(|(x, d)| x + s * h * d).collect();
            p.set_value(Tensor::new(p.value().shape().to_vec(), v)?)?;
        }
        let mut c = IterationContext::new(ctx.model, &nets, beta, cameras, ctx.config)?;
        c.chains = ctx.chains.clone();
        c.fingertips = ctx.fingertips.clone();
        c.palm = ctx.palm.clone();
        probes.push(probe(&c, u)?);
    }
    if probes[0].1 != probes[1].1 {
        return Ok(None);
    }
    records.push(record(term, Wrt::Nets, frame.id, analytic, (probes[0].0 - probes[1].0) / (2.0 * h)));

    if records.iter().any(|r| !r.rel_err.is_finite()) {
        return Ok(None);
    }
    Ok(Some(records))
}

/// Unit direction over the raw pose. Sparse directions move one channel.
fn pose_direction(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut d = vec![0.0; n];
    if sparse {
        d[rng.random_range(0..n)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        return d;
    }
    d.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
    normalize(&mut d);
    d
}

/// Unit direction over every net parameter, in `CorrectiveNets::params`
/// order. Sparse directions touch only the output weights of one vertex
/// in the per-vertex heads, so few pixels change their covering face.
fn net_direction(rng: &mut ChaCha8Rng, nets: &CorrectiveNets, model: &HandModel, sparse: bool) -> Vec<Vec<f64>> {
    let v = rng.random_range(0..model.num_vertices());
    let nj = model.num_joints();
    let mut dirs = Vec::new();
    for (name, head) in nets.heads() {
        let Some(head) = head else { continue };
        let outputs: Vec<usize> = match name {
            "idvert" | "posevert" => (3 * v..3 * v + 3).collect(),
            "skinw" => (v * nj..(v + 1) * nj).collect(),
            _ => Vec::new(),
        };
        let (o, hid) = (head.n_out(), head.hidden());
        for (k, p) in head.params().into_iter().enumerate() {
            let n = p.value().numel();
            let mut d = vec![0.0; n];
            if !sparse {
                d.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            } else if k == 2 {
                for r in 0..hid {
                    for &c in &outputs {
                        d[r * o + c] = rng.sample(StandardNormal);
                    }
                }
            } else if k == 3 {
                for &c in &outputs {
                    d[c] = rng.sample(StandardNormal);
                }
            }
            dirs.push(d);
        }
    }
    let norm = dirs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        dirs.iter_mut().flatten().for_each(|x| *x /= norm);
    }
    dirs
}

fn normalize(d: &mut [f64]) {
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        d.iter_mut().for_each(|x| *x /= n);
    }
}

/// Discrete choices a term makes on values: overlapping sphere pairs,
/// nearest palm vertices and the sign of each fingertip residual, or the
/// covering face of every pixel. A check whose two samples disagree
/// straddles a kink and is skipped.
fn signature(
    term: LossTerm,
    ctx: &IterationContext,
    cameras: &[Camera],
    views: &[usize],
    joints: &[Vec3],
    vertices: &[Vec3],
) -> Result<Vec<usize>> {
    let centers = || -> Vec<Vec<Vec3>> {
        ctx.chains
            .iter()
            .map(|c| interpolate_centers(joints[c.bone.0], joints[c.bone.1], c.centers_rest.len()))
            .collect()
    };
    let mut sig = Vec::new();
    match term {
        LossTerm::RigidPenetration => {
            let posed = centers();
            for (a, ca) in ctx.chains.iter().enumerate() {
                for (b, cb) in ctx.chains.iter().enumerate().skip(a + 1) {
                    if bones_excluded(ca.bone, cb.bone) {
                        continue;
                    }
                    for (i, (pa, ra)) in posed[a].iter().zip(&ca.radii).enumerate() {
                        for (j, (pb, rb)) in posed[b].iter().zip(&cb.radii).enumerate() {
                            if ra + rb > geometry::dist(*pa, *pb) {
                                sig.extend([a, i, b, j]);
                            }
                        }
                    }
                }
            }
        }
        LossTerm::NonrigidPenetration => {
            let posed = centers();
            for &t in &ctx.fingertips {
                let near: Vec<(usize, f64)> = posed[t]
                    .iter()
                    .map(|&c| {
                        ctx.palm
                            .indices
                            .iter()
                            .map(|&i| (i, geometry::dist(c, vertices[i])))
                            .fold((usize::MAX, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
                    })
                    .collect();
                let r = &ctx.chains[t].radii;
                let d: Vec<f64> = near.iter().map(|x| x.1).collect();
                let start = d.iter().zip(r).position(|(d, r)| d < r);
                sig.push(start.unwrap_or(usize::MAX));
                for k in start.unwrap_or(d.len())..d.len() {
                    sig.extend([near[k].0, (d[k] > r[k]) as usize]);
                }
            }
        }
        LossTerm::Depth => {
            for &c in views {
                let r = render::rasterize(vertices, &ctx.model.faces, &cameras[c], false)?;
                sig.push(usize::MAX);
                sig.extend(r.pixels.iter().zip(&r.faces).flat_map(|(&p, &f)| [p as usize, f as usize]));
            }
        }
        LossTerm::Pose | LossTerm::Laplacian => {}
    }
    Ok(sig)
}

fn record(term: LossTerm, wrt: Wrt, frame: usize, analytic: f64, numeric: f64) -> CheckRecord {
    CheckRecord {
        term,
        wrt,
        frame,
        analytic,
        numeric,
        rel_err: relative_error(analytic, numeric).unwrap_or(f64::NAN),
    }
}
