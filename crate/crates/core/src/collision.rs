//! Sphere chains along bones and the two penetration penalties.
//!
//! Each bone `(p, j)` carries `K` spheres spaced evenly from the rest
//! position of `p` to that of `j`. A sphere's radius is the distance from its
//! rest center to the nearest vertex of the refined zero-pose mesh. Spheres
//! ride on the parent joint's transform: that frame carries the whole
//! segment `p -> j`, so posed centers are the same interpolation between the
//! posed joint positions.
//!
//! All quantities here live in model space; distances are unchanged by the
//! rigid alignment to dataset space.

use std::sync::Arc;

use serde::Serialize;

use crate::correctives::RefinedModel;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::kinematics::{rest_joint_positions, JointTransforms};
use crate::model::JointHierarchy;

pub const DEFAULT_SPHERES_PER_BONE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SphereChain {
    /// `(parent, child)` joints.
    pub bone: (usize, usize),
    pub centers_rest: Vec<Vec3>,
    pub radii: Vec<f64>,
}

/// `k` points from `a` to `b` inclusive, evenly spaced.
pub fn interpolate_centers(a: Vec3, b: Vec3, k: usize) -> Vec<Vec3> {
    if k == 1 {
        return vec![geometry::lerp(a, b, 0.5)];
    }
    (0..k).map(|i| geometry::lerp(a, b, i as f64 / (k - 1) as f64)).collect()
}

/// Index and distance of the nearest point; ties keep the lowest index.
pub fn nearest_point(p: Vec3, points: &[Vec3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, q) in points.iter().enumerate() {
        let d = geometry::sub(p, *q);
        let d2 = geometry::dot(d, d);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

fn nearest_in(p: Vec3, vertices: &[Vec3], subset: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &i in subset {
        let d = geometry::sub(p, vertices[i]);
        let d2 = geometry::dot(d, d);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

/// One chain per bone, in bone (child) order.
pub fn build_sphere_chains(refined: &RefinedModel, hierarchy: &JointHierarchy, k: usize) -> Result<Vec<SphereChain>> {
    if k == 0 {
        return Err(Error::Config("spheres per bone must be positive".into()));
    }
    // At zero pose every transform is the identity, so the refined template
    // is the zero-pose mesh.
    let rest = rest_joint_positions(&refined.offsets, hierarchy);
    hierarchy
        .bones()
        .into_iter()
        .map(|(p, j)| {
            let centers_rest = interpolate_centers(rest[p], rest[j], k);
            let radii = centers_rest
                .iter()
                .map(|&c| {
                    let (_, r) = nearest_point(c, &refined.vertices)
                        .ok_or_else(|| Error::Degenerate("mesh has no vertices".into()))?;
                    if r > 0.0 {
                        Ok(r)
                    } else {
                        Err(Error::Degenerate(format!("sphere on bone ({p}, {j}) has zero radius")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SphereChain {
                bone: (p, j),
                centers_rest,
                radii,
            })
        })
        .collect()
}

/// Rest centers carried by the parent joint's transform.
pub fn pose_sphere_chains(chains: &[SphereChain], transforms: &JointTransforms) -> Vec<Vec<Vec3>> {
    chains
        .iter()
        .map(|c| c.centers_rest.iter().map(|&x| transforms.apply(c.bone.0, x)).collect())
        .collect()
}

/// Bones that share a joint never penalize each other.
pub fn bones_excluded(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 == b.0 || a.0 == b.1 || a.1 == b.0 || a.1 == b.1
}

/// `max(r + r' - |c - c'|, 0)` summed over unordered sphere pairs on
/// non-excluded bones.
pub fn rigid_penetration(chains: &[SphereChain], posed: &[Vec<Vec3>]) -> f64 {
    let mut total = 0.0;
    for (a, ca) in chains.iter().enumerate() {
        for (b, cb) in chains.iter().enumerate().skip(a + 1) {
            if bones_excluded(ca.bone, cb.bone) {
                continue;
            }
            for (pa, ra) in posed[a].iter().zip(&ca.radii) {
                for (pb, rb) in posed[b].iter().zip(&cb.radii) {
                    let o = ra + rb - geometry::dist(*pa, *pb);
                    if o > 0.0 {
                        total += o;
                    }
                }
            }
        }
    }
    total
}

/// Vertices whose largest skinning weight belongs to the palm joint (first
/// maximum on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct PalmVertexSet {
    pub indices: Vec<usize>,
}

impl PalmVertexSet {
    pub fn from_weights(weights: &[f64], num_joints: usize, palm_joint: usize) -> Self {
        let indices = weights
            .chunks_exact(num_joints)
            .enumerate()
            .filter(|(_, row)| {
                let mut best = 0;
                for (j, w) in row.iter().enumerate() {
                    if *w > row[best] {
                        best = j;
                    }
                }
                best == palm_joint
            })
            .map(|(v, _)| v)
            .collect();
        PalmVertexSet { indices }
    }
}

/// Chains whose child joint is a fingertip.
pub fn fingertip_chains(chains: &[SphereChain], hierarchy: &JointHierarchy) -> Vec<usize> {
    chains
        .iter()
        .enumerate()
        .filter(|(_, c)| hierarchy.fingertips.contains(&c.bone.1))
        .map(|(i, _)| i)
        .collect()
}

/// One fingertip's term: the first sphere (from the parent end) whose
/// center is closer to the palm than its radius starts the sum of
/// `|d_k - r_k|` to the tip. Returns that start index and the term.
pub fn fingertip_term(d: &[f64], r: &[f64]) -> (Option<usize>, f64) {
    match d.iter().zip(r).position(|(d, r)| d < r) {
        None => (None, 0.0),
        Some(l) => (Some(l), d[l..].iter().zip(&r[l..]).map(|(d, r)| (d - r).abs()).sum()),
    }
}

pub fn nonrigid_penetration(
    chains: &[SphereChain],
    posed: &[Vec<Vec3>],
    fingertips: &[usize],
    palm: &PalmVertexSet,
    vertices: &[Vec3],
) -> Result<f64> {
    if palm.indices.is_empty() {
        return Err(Error::Config("palm vertex set is empty".into()));
    }
    let mut total = 0.0;
    for &t in fingertips {
        let d: Vec<f64> = posed[t]
            .iter()
            .map(|&c| nearest_in(c, vertices, &palm.indices).unwrap().1)
            .collect();
        total += fingertip_term(&d, &chains[t].radii).1;
    }
    Ok(total)
}

/// Posed centers on the tape, `[n_chains * K, 3]`, from `[J, 3]` posed
/// joint positions.
pub fn sphere_centers_graph(tape: &mut Tape, positions: Var, chains: &[SphereChain]) -> Result<Var> {
    let nj = tape.shape(positions)[0];
    let rows: usize = chains.iter().map(|c| c.centers_rest.len()).sum();
    let mut coef = vec![0.0; rows * nj];
    let mut row = 0;
    for c in chains {
        let k = c.centers_rest.len();
        for i in 0..k {
            let t = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
            coef[row * nj + c.bone.0] += 1.0 - t;
            coef[row * nj + c.bone.1] += t;
            row += 1;
        }
    }
    let coef = tape.constant(Tensor::new(vec![rows, nj], coef)?);
    tape.matmul(coef, positions)
}

fn flat_radii(chains: &[SphereChain]) -> Vec<f64> {
    chains.iter().flat_map(|c| c.radii.iter().copied()).collect()
}

fn chain_offsets(chains: &[SphereChain]) -> Vec<usize> {
    let mut off = Vec::with_capacity(chains.len());
    let mut acc = 0;
    for c in chains {
        off.push(acc);
        acc += c.centers_rest.len();
    }
    off
}

/// Distances between rows `ia[k]` and `ib[k]` of two `[N, 3]` nodes.
fn row_distances(tape: &mut Tape, a: Var, ia: &[usize], b: Var, ib: &[usize]) -> Result<Var> {
    let n = ia.len();
    let expand = |idx: &[usize]| -> Arc<[usize]> { idx.iter().flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2]).collect() };
    let ga = tape.gather(a, expand(ia), vec![n, 3])?;
    let gb = tape.gather(b, expand(ib), vec![n, 3])?;
    let d = tape.sub(ga, gb)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_last_axis(sq)?;
    tape.sqrt(s)
}

/// Rigid term on the tape. Only overlapping pairs are recorded; the rest
/// contribute neither value nor gradient.
pub fn rigid_penetration_graph(tape: &mut Tape, centers: Var, chains: &[SphereChain]) -> Result<Var> {
    let c = tape.value(centers).rows3();
    let radii = flat_radii(chains);
    let off = chain_offsets(chains);
    let (mut ia, mut ib, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    for (a, ca) in chains.iter().enumerate() {
        for (b, cb) in chains.iter().enumerate().skip(a + 1) {
            if bones_excluded(ca.bone, cb.bone) {
                continue;
            }
            for i in off[a]..off[a] + ca.radii.len() {
                for j in off[b]..off[b] + cb.radii.len() {
                    let r = radii[i] + radii[j];
                    if r - geometry::dist(c[i], c[j]) > 0.0 {
                        ia.push(i);
                        ib.push(j);
                        rs.push(r);
                    }
                }
            }
        }
    }
    if ia.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = row_distances(tape, centers, &ia, centers, &ib)?;
    let r = tape.constant(Tensor::from_vec(rs));
    let o = tape.sub(r, d)?;
    let o = tape.max_const(o, 0.0)?;
    tape.sum(o)
}

/// Non-rigid term on the tape; `vertices` are the posed model-space
/// vertices. Nearest palm vertices are chosen on values.
pub fn nonrigid_penetration_graph(
    tape: &mut Tape,
    centers: Var,
    chains: &[SphereChain],
    fingertips: &[usize],
    palm: &PalmVertexSet,
    vertices: Var,
) -> Result<Var> {
    if palm.indices.is_empty() {
        return Err(Error::Config("palm vertex set is empty".into()));
    }
    let c = tape.value(centers).rows3();
    let v = tape.value(vertices).rows3();
    let off = chain_offsets(chains);
    let (mut ic, mut iv, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    for &t in fingertips {
        let range = off[t]..off[t] + chains[t].radii.len();
        let near: Vec<(usize, f64)> = range
            .clone()
            .map(|i| nearest_in(c[i], &v, &palm.indices).unwrap())
            .collect();
        let d: Vec<f64> = near.iter().map(|x| x.1).collect();
        if let (Some(l), _) = fingertip_term(&d, &chains[t].radii) {
            for k in l..d.len() {
                ic.push(off[t] + k);
                iv.push(near[k].0);
                rs.push(chains[t].radii[k]);
            }
        }
    }
    if ic.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = row_distances(tape, centers, &ic, vertices, &iv)?;
    let r = tape.constant(Tensor::from_vec(rs));
    let e = tape.sub(d, r)?;
    let e = tape.abs(e)?;
    tape.sum(e)
}

/// Chains and posed centers as JSON, for external viewers.
pub fn chains_json(chains: &[SphereChain], posed: Option<&[Vec<Vec3>]>) -> serde_json::Value {
    let items: Vec<serde_json::Value> = chains
        .iter()
        .enumerate()
        .map(|(i, c)| {
            serde_json::json!({
                "bone": [c.bone.0, c.bone.1],
                "radii": c.radii,
                "centers_rest": c.centers_rest,
                "centers_posed": posed.map(|p| p[i].clone()),
            })
        })
        .collect();
    serde_json::Value::Array(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_interpolate_bone() {
        let c = interpolate_centers([0.0; 3], [0.0, 9.0, 0.0], 10);
        for (k, p) in c.iter().enumerate() {
            assert_eq!(*p, [0.0, k as f64, 0.0]);
        }
    }

    #[test]
    fn radius_is_nearest_vertex_distance() {
        let h = JointHierarchy {
            parents: vec![None, Some(0)],
            names: vec!["a".into(), "b".into()],
            fingertips: vec![1],
            palm_joint: 0,
        };
        let refined = RefinedModel {
            vertices: vec![[0.4, 0.0, 0.0], [5.0, 9.0, 0.0]],
            offsets: vec![[0.0; 3], [0.0, 9.0, 0.0]],
            weights: vec![1.0, 0.0, 0.0, 1.0],
        };
        let chains = build_sphere_chains(&refined, &h, 10).unwrap();
        assert_eq!(chains.len(), 1);
        assert!((chains[0].radii[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pair_overlap_arithmetic() {
        let chain = |bone, c: Vec3| SphereChain {
            bone,
            centers_rest: vec![c],
            radii: vec![1.0],
        };
        let chains = vec![chain((0, 1), [0.0; 3]), chain((2, 3), [1.5, 0.0, 0.0])];
        let posed: Vec<Vec<Vec3>> = chains.iter().map(|c| c.centers_rest.clone()).collect();
        assert!((rigid_penetration(&chains, &posed) - 0.5).abs() < 1e-15);
        let far = vec![vec![[0.0; 3]], vec![[3.0, 0.0, 0.0]]];
        assert_eq!(rigid_penetration(&chains, &far), 0.0);
        // Bones sharing joint 1 are excluded however deep the overlap.
        let adjacent = vec![chain((0, 1), [0.0; 3]), chain((1, 2), [0.1, 0.0, 0.0])];
        let posed: Vec<Vec<Vec3>> = adjacent.iter().map(|c| c.centers_rest.clone()).collect();
        assert_eq!(rigid_penetration(&adjacent, &posed), 0.0);
        let siblings = vec![chain((0, 1), [0.0; 3]), chain((0, 2), [0.1, 0.0, 0.0])];
        assert_eq!(rigid_penetration(&siblings, &posed), 0.0);
    }

    #[test]
    fn fingertip_term_examples() {
        let r = [2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.5, 0.5, 0.4, 0.4];
        let d = [9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 0.2, 0.1, 0.1, 0.3];
        let (l, v) = fingertip_term(&d, &r);
        assert_eq!(l, Some(6));
        assert!((v - 1.1).abs() < 1e-12);
        assert_eq!(fingertip_term(&[3.0, 3.0], &[1.0, 1.0]), (None, 0.0));
        let mut d2 = [9.0; 10];
        d2[2] = 0.5;
        d2[5] = 0.5;
        assert_eq!(fingertip_term(&d2, &[1.0; 10]).0, Some(2));
    }

    #[test]
    fn palm_set_uses_first_argmax() {
        let w = [0.6, 0.4, 0.5, 0.5, 0.2, 0.8];
        assert_eq!(PalmVertexSet::from_weights(&w, 2, 0).indices, vec![0, 1]);
        assert_eq!(PalmVertexSet::from_weights(&w, 2, 1).indices, vec![2]);
    }

    #[test]
    fn nearest_point_tie_keeps_lowest_index() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(nearest_point([0.0; 3], &pts).unwrap().0, 0);
    }

    #[test]
    fn empty_palm_is_configuration_error() {
        let palm = PalmVertexSet { indices: vec![] };
        let err = nonrigid_penetration(&[], &[], &[], &palm, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
