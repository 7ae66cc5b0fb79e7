//! Training losses: joint L1, masked Smooth-L1 depth, penetration (see
//! [`crate::collision`]), mesh Laplacian, and their weighted total.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::render::{foreground_mask, DepthMap, DepthRender};

/// Smooth-L1 with its knee at 1.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_nr: f64,
    pub lambda_lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_nr: 5.0,
            lambda_lap: 5.0,
        }
    }
}

/// Per-vertex reduction of Laplacian residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianReduction {
    #[default]
    L2,
    SquaredL2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pose: f64,
    pub depth: f64,
    pub penet_rigid: f64,
    pub penet_nonrigid: f64,
    pub laplacian: f64,
    pub total: f64,
    pub lambda_nr: f64,
    pub lambda_lap: f64,
}

impl LossBreakdown {
    pub fn new(pose: f64, depth: f64, penet_rigid: f64, penet_nonrigid: f64, laplacian: f64, w: LossWeights) -> Self {
        LossBreakdown {
            pose,
            depth,
            penet_rigid,
            penet_nonrigid,
            laplacian,
            total: pose + depth + penetration_loss(penet_rigid, penet_nonrigid, w.lambda_nr) + w.lambda_lap * laplacian,
            lambda_nr: w.lambda_nr,
            lambda_lap: w.lambda_lap,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.pose, self.depth, self.penet_rigid, self.penet_nonrigid, self.laplacian, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise sum; the weights of `self` are kept.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.pose += other.pose;
        self.depth += other.depth;
        self.penet_rigid += other.penet_rigid;
        self.penet_nonrigid += other.penet_nonrigid;
        self.laplacian += other.laplacian;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            pose: self.pose * s,
            depth: self.depth * s,
            penet_rigid: self.penet_rigid * s,
            penet_nonrigid: self.penet_nonrigid * s,
            laplacian: self.laplacian * s,
            total: self.total * s,
            ..*self
        }
    }

    pub const CSV_HEADER: &'static str = "iter,pose,depth,penet_r,penet_nr,lap,total";

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{iter},{},{},{},{},{},{}",
            self.pose, self.depth, self.penet_rigid, self.penet_nonrigid, self.laplacian, self.total
        )
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pose={} depth={} penet_r={} penet_nr={} lap={} total={}",
            self.pose, self.depth, self.penet_rigid, self.penet_nonrigid, self.laplacian, self.total
        )
    }
}

/// `rigid + lambda_nr * nonrigid`.
pub fn penetration_loss(rigid: f64, nonrigid: f64, lambda_nr: f64) -> f64 {
    rigid + lambda_nr * nonrigid
}

/// Weighted total; fails with the breakdown if any part is not finite.
pub fn total_loss(
    pose: f64,
    depth: f64,
    penet_rigid: f64,
    penet_nonrigid: f64,
    laplacian: f64,
    w: LossWeights,
) -> Result<LossBreakdown> {
    let b = LossBreakdown::new(pose, depth, penet_rigid, penet_nonrigid, laplacian, w);
    if b.is_finite() {
        Ok(b)
    } else {
        Err(Error::NonFinite { iteration: 0, breakdown: b })
    }
}

fn check_target(target: &[Vec3]) -> Result<()> {
    if let Some(j) = target.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::Data(format!("target joint {j} is not finite")));
    }
    Ok(())
}

/// Mean over joints of the per-joint L1 distance.
pub fn pose_loss(pred: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("pose_loss", format!("{} vs {} joints", pred.len(), target.len())));
    }
    check_target(target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).abs()).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn pose_loss_graph(tape: &mut Tape, pred: Var, target: &[Vec3]) -> Result<Var> {
    if tape.shape(pred) != [target.len(), 3] || target.is_empty() {
        return Err(Error::shape("pose_loss", format!("{:?} vs {} joints", tape.shape(pred), target.len())));
    }
    check_target(target)?;
    let t = tape.constant(Tensor::from_rows3(target));
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / target.len() as f64)
}

/// Mean over the views of the masked mean Smooth-L1 depth residual. A view
/// with an empty mask contributes 0.
pub fn depth_loss(rendered: &[DepthMap], targets: &[&DepthMap]) -> Result<f64> {
    if rendered.len() != targets.len() || rendered.is_empty() {
        return Err(Error::Contract(format!("{} rendered vs {} target views", rendered.len(), targets.len())));
    }
    let mut total = 0.0;
    for (c, (r, t)) in rendered.iter().zip(targets).enumerate() {
        let mask = foreground_mask(r, t)?;
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                s += smooth_l1(r.data[i] - t.data[i]);
                n += 1;
            }
        }
        if n == 0 {
            log::warn!("depth view {c}: empty foreground intersection");
        } else {
            total += s / n as f64;
        }
    }
    Ok(total / rendered.len() as f64)
}

pub fn depth_loss_graph(tape: &mut Tape, rendered: &[DepthRender], targets: &[&DepthMap]) -> Result<Var> {
    if rendered.len() != targets.len() || rendered.is_empty() {
        return Err(Error::Contract(format!("{} rendered vs {} target views", rendered.len(), targets.len())));
    }
    let mut terms = Vec::with_capacity(rendered.len());
    for (c, (r, t)) in rendered.iter().zip(targets).enumerate() {
        foreground_mask(&r.raster.map, t)?;
        let mut idx = Vec::new();
        let mut tv = Vec::new();
        for (k, &p) in r.raster.pixels.iter().enumerate() {
            let d = t.data[p as usize];
            if d.is_finite() {
                idx.push(k);
                tv.push(d);
            }
        }
        if idx.is_empty() {
            log::warn!("depth view {c}: empty foreground intersection");
            continue;
        }
        let n = idx.len();
        let idx: Arc<[usize]> = idx.into();
        let picked = tape.gather(r.depths, idx, vec![n])?;
        let tgt = tape.constant(Tensor::from_vec(tv));
        let res = tape.sub(picked, tgt)?;
        let sl = tape.smooth_l1(res)?;
        terms.push(tape.mean(sl)?);
    }
    let c = rendered.len() as f64;
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = terms.len();
    let stacked = tape.concat(&terms, vec![n])?;
    let s = tape.sum(stacked)?;
    tape.scale(s, 1.0 / c)
}

pub fn laplacian_loss(residuals: &[Vec3], reduction: LaplacianReduction) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let s: f64 = residuals
        .iter()
        .map(|r| match reduction {
            LaplacianReduction::L2 => geometry::norm(*r),
            LaplacianReduction::SquaredL2 => geometry::dot(*r, *r),
        })
        .sum();
    s / residuals.len() as f64
}

pub fn laplacian_loss_graph(tape: &mut Tape, residuals: Var, reduction: LaplacianReduction) -> Result<Var> {
    let sq = tape.mul(residuals, residuals)?;
    let per_vertex = tape.sum_last_axis(sq)?;
    let per_vertex = match reduction {
        LaplacianReduction::L2 => tape.sqrt(per_vertex)?,
        LaplacianReduction::SquaredL2 => per_vertex,
    };
    tape.mean(per_vertex)
}

/// Graph nodes of the individual terms; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub pose: Option<Var>,
    pub depth: Option<Var>,
    pub penet_rigid: Option<Var>,
    pub penet_nonrigid: Option<Var>,
    pub laplacian: Option<Var>,
}

/// Builds the weighted total on the tape and reports the breakdown.
pub fn total_loss_graph(tape: &mut Tape, terms: &LossTerms, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let weighted = [
        (terms.pose, 1.0),
        (terms.depth, 1.0),
        (terms.penet_rigid, 1.0),
        (terms.penet_nonrigid, w.lambda_nr),
        (terms.laplacian, w.lambda_lap),
    ];
    let mut parts = Vec::new();
    for (v, c) in weighted.into_iter() {
        if let Some(v) = v {
            parts.push(if c == 1.0 { v } else { tape.scale(v, c)? });
        }
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let breakdown = LossBreakdown::new(
        val(terms.pose),
        val(terms.depth),
        val(terms.penet_rigid),
        val(terms.penet_nonrigid),
        val(terms.laplacian),
        w,
    );
    let total = if parts.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let n = parts.len();
        let stacked = tape.concat(&parts, vec![n])?;
        tape.sum(stacked)?
    };
    Ok((total, breakdown))
}
