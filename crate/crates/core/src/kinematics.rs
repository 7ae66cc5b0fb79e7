//! Pose vectors, Euler rotations, forward kinematics and rigid alignment.
//!
//! A joint's global frame is `G_j = G_parent(j) * [R(theta_j) | S_j]`, with
//! frames axis-aligned at rest. The skinning transform of joint `j` is
//! `T_j = G_j * G_j(rest)^-1 = [Rg_j | p_j - Rg_j * p_rest_j]`, which is the
//! identity at zero pose.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::model::JointHierarchy;

/// Composition order of the three axis rotations: `Xyz` means
/// `R = Rx(a) * Ry(b) * Rz(c)` (intrinsic x, then y, then z).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerOrder {
    #[default]
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl EulerOrder {
    pub fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Xyz => [0, 1, 2],
            EulerOrder::Xzy => [0, 2, 1],
            EulerOrder::Yxz => [1, 0, 2],
            EulerOrder::Yzx => [1, 2, 0],
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
        }
    }
}

pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn axis_rotation_derivative(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
        1 => [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
        _ => [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    }
}

/// Rotation for `angles = (x, y, z)` radians composed in `order`.
pub fn euler_to_rotation(angles: Vec3, order: EulerOrder) -> Mat3 {
    let [a0, a1, a2] = order.axes();
    let r0 = axis_rotation(a0, angles[a0]);
    let r1 = axis_rotation(a1, angles[a1]);
    let r2 = axis_rotation(a2, angles[a2]);
    geometry::mat_mul(&geometry::mat_mul(&r0, &r1), &r2)
}

/// Euler rotation on the tape: `[3]` angles to a row-major `[3, 3]` matrix.
pub fn euler_rotation_graph(tape: &mut Tape, angles: Var, order: EulerOrder) -> Result<Var> {
    let a = tape.value(angles);
    if a.shape() != [3] {
        return Err(Error::shape("euler_rotation", format!("{:?}", a.shape())));
    }
    let ang = [a.data()[0], a.data()[1], a.data()[2]];
    let axes = order.axes();
    let mats: Vec<Mat3> = axes.iter().map(|&ax| axis_rotation(ax, ang[ax])).collect();
    let ders: Vec<Mat3> = axes.iter().map(|&ax| axis_rotation_derivative(ax, ang[ax])).collect();
    let r = geometry::mat_mul(&geometry::mat_mul(&mats[0], &mats[1]), &mats[2]);
    // dR / d angle[axes[k]]
    let mut partials = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        let mut f = mats.clone();
        f[k] = ders[k];
        partials[axes[k]] = geometry::mat_mul(&geometry::mat_mul(&f[0], &f[1]), &f[2]);
    }
    let value = Tensor::new(vec![3, 3], r.iter().flatten().copied().collect())?;
    tape.custom(
        "euler_rotation",
        &[angles],
        value,
        Box::new(move |g, _| {
            let gd = g.data();
            let grad: Vec<f64> = partials
                .iter()
                .map(|p| p.iter().flatten().zip(gd).map(|(a, b)| a * b).sum())
                .collect();
            vec![Some(Tensor::from_vec(grad))]
        }),
    )
}

/// Active Euler-angle DOFs with their channel mask.
///
/// The optimized quantity is the unconstrained `raw` vector; angles are
/// `theta = pi * tanh(raw)`, so each lies in `(-pi, pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseVector {
    raw: Vec<f64>,
    mask: Vec<bool>,
}

impl PoseVector {
    pub fn new(raw: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let active = mask.iter().filter(|&&b| b).count();
        if active != raw.len() {
            return Err(Error::Contract(format!(
                "pose has {} values but mask enables {active} channels",
                raw.len()
            )));
        }
        if mask.len() % 3 != 0 {
            return Err(Error::Contract(format!("mask length {} is not 3J", mask.len())));
        }
        Ok(PoseVector { raw, mask })
    }

    pub fn zero(mask: Vec<bool>) -> Self {
        let n = mask.iter().filter(|&&b| b).count();
        PoseVector { raw: vec![0.0; n], mask }
    }

    /// From angles in `(-pi, pi)`.
    pub fn from_theta(theta: &[f64], mask: Vec<bool>) -> Result<Self> {
        if let Some(t) = theta.iter().find(|t| !(t.abs() < PI)) {
            return Err(Error::Contract(format!("angle {t} outside (-pi, pi)")));
        }
        let raw = theta.iter().map(|t| (t / PI).atanh()).collect();
        Self::new(raw, mask)
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn num_dofs(&self) -> usize {
        self.raw.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.raw.iter().map(|u| PI * u.tanh()).collect()
    }

    /// Per-joint `(x, y, z)` angles with disabled channels at zero.
    pub fn joint_angles(&self) -> Vec<Vec3> {
        expand_angles(&self.theta(), &self.mask)
    }
}

pub fn expand_angles(theta: &[f64], mask: &[bool]) -> Vec<Vec3> {
    let mut full = vec![[0.0; 3]; mask.len() / 3];
    let mut it = theta.iter();
    for (c, &on) in mask.iter().enumerate() {
        if on {
            full[c / 3][c % 3] = *it.next().expect("theta shorter than mask");
        }
    }
    full
}

/// `theta = pi * tanh(raw)` on the tape.
pub fn theta_graph(tape: &mut Tape, raw: Var) -> Result<Var> {
    let t = tape.tanh(raw)?;
    tape.scale(t, PI)
}

/// Scatter active angles into a `[J, 3]` tensor.
pub fn expand_theta_graph(tape: &mut Tape, theta: Var, mask: &[bool]) -> Result<Var> {
    let idx: Arc<[usize]> = mask
        .iter()
        .enumerate()
        .filter_map(|(c, &on)| on.then_some(c))
        .collect();
    tape.scatter_add(theta, idx, vec![mask.len() / 3, 3])
}

/// Per-joint skinning transforms and posed joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms {
    /// Row-major rotation (9) followed by translation (3).
    pub transforms: Vec<[f64; 12]>,
    pub joint_positions: Vec<Vec3>,
}

impl JointTransforms {
    pub fn rotation(&self, j: usize) -> Mat3 {
        let t = &self.transforms[j];
        [[t[0], t[1], t[2]], [t[3], t[4], t[5]], [t[6], t[7], t[8]]]
    }

    pub fn translation(&self, j: usize) -> Vec3 {
        let t = &self.transforms[j];
        [t[9], t[10], t[11]]
    }

    pub fn apply(&self, j: usize, p: Vec3) -> Vec3 {
        geometry::add(geometry::mat_vec(&self.rotation(j), p), self.translation(j))
    }

    fn from_tensors(transforms: &Tensor, positions: &Tensor) -> Self {
        JointTransforms {
            transforms: transforms
                .data()
                .chunks_exact(12)
                .map(|c| c.try_into().unwrap())
                .collect(),
            joint_positions: positions.rows3(),
        }
    }
}

/// Tape nodes produced by forward kinematics.
#[derive(Clone, Copy, Debug)]
pub struct KinematicsGraph {
    /// `[J, 12]` skinning transforms.
    pub transforms: Var,
    /// `[J, 3]` posed joint positions.
    pub positions: Var,
    /// `[J, 3]` zero-pose joint positions.
    pub rest_positions: Var,
}

/// Forward kinematics on the tape, differentiable in both the `[J, 3]`
/// angles and the `[J, 3]` offsets.
pub fn forward_kinematics_graph(
    tape: &mut Tape,
    angles: Var,
    offsets: Var,
    hierarchy: &JointHierarchy,
    order: EulerOrder,
) -> Result<KinematicsGraph> {
    let nj = hierarchy.len();
    for (name, v) in [("angles", angles), ("offsets", offsets)] {
        if tape.shape(v) != [nj, 3] {
            return Err(Error::shape(
                "forward_kinematics",
                format!("{name} {:?}, expected [{nj}, 3]", tape.shape(v)),
            ));
        }
    }
    let mut rot: Vec<Var> = Vec::with_capacity(nj);
    let mut pos: Vec<Var> = Vec::with_capacity(nj);
    let mut rest: Vec<Var> = Vec::with_capacity(nj);
    let mut pieces = Vec::with_capacity(2 * nj);
    for j in 0..nj {
        let idx: Arc<[usize]> = Arc::from([3 * j, 3 * j + 1, 3 * j + 2]);
        let a = tape.gather(angles, Arc::clone(&idx), vec![3])?;
        let r_local = euler_rotation_graph(tape, a, order)?;
        let s = tape.gather(offsets, idx, vec![3, 1])?;
        let (rg, p, pr) = match hierarchy.parents[j] {
            None => (r_local, s, s),
            Some(pj) => {
                if pj >= j {
                    return Err(Error::Contract(format!("joint {j} precedes its parent {pj}")));
                }
                let rg = tape.matmul(rot[pj], r_local)?;
                let step = tape.matmul(rot[pj], s)?;
                let p = tape.add(pos[pj], step)?;
                let pr = tape.add(rest[pj], s)?;
                (rg, p, pr)
            }
        };
        let moved_rest = tape.matmul(rg, pr)?;
        let t = tape.sub(p, moved_rest)?;
        pieces.push(rg);
        pieces.push(t);
        rot.push(rg);
        pos.push(p);
        rest.push(pr);
    }
    let transforms = tape.concat(&pieces, vec![nj, 12])?;
    let positions = tape.concat(&pos, vec![nj, 3])?;
    let rest_positions = tape.concat(&rest, vec![nj, 3])?;
    Ok(KinematicsGraph {
        transforms,
        positions,
        rest_positions,
    })
}

pub fn forward_kinematics_angles(
    angles: &[Vec3],
    offsets: &[Vec3],
    hierarchy: &JointHierarchy,
    order: EulerOrder,
) -> Result<JointTransforms> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows3(angles));
    let s = tape.constant(Tensor::from_rows3(offsets));
    let g = forward_kinematics_graph(&mut tape, a, s, hierarchy, order)?;
    Ok(JointTransforms::from_tensors(tape.value(g.transforms), tape.value(g.positions)))
}

pub fn forward_kinematics(
    pose: &PoseVector,
    offsets: &[Vec3],
    hierarchy: &JointHierarchy,
    order: EulerOrder,
) -> Result<JointTransforms> {
    if pose.mask().len() != 3 * hierarchy.len() {
        return Err(Error::Contract(format!(
            "pose mask has {} channels for {} joints",
            pose.mask().len(),
            hierarchy.len()
        )));
    }
    forward_kinematics_angles(&pose.joint_angles(), offsets, hierarchy, order)
}

/// Zero-pose joint positions: offsets accumulated from the root.
pub fn rest_joint_positions(offsets: &[Vec3], hierarchy: &JointHierarchy) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::with_capacity(offsets.len());
    for (j, s) in offsets.iter().enumerate() {
        let p = match hierarchy.parents[j] {
            Some(p) => geometry::add(out[p], *s),
            None => *s,
        };
        out.push(p);
    }
    out
}

/// Rigid motion from model space to dataset space, `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidAlignment {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidAlignment {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidAlignment {
    pub fn identity() -> Self {
        RigidAlignment {
            rotation: geometry::IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::mat_vec(&self.rotation, p), self.translation)
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidAlignment) -> RigidAlignment {
        RigidAlignment {
            rotation: geometry::mat_mul(&self.rotation, &first.rotation),
            translation: self.apply(first.translation),
        }
    }
}

/// Least-squares rigid transform (no scale) taking `source` onto `target`.
pub fn rigid_align(source: &[Vec3], target: &[Vec3]) -> Result<RigidAlignment> {
    if source.len() != target.len() {
        return Err(Error::Contract(format!(
            "rigid_align: {} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate(format!("rigid_align needs 3 points, got {}", source.len())));
    }
    let n = source.len() as f64;
    let centroid = |pts: &[Vec3]| {
        let s = pts.iter().fold([0.0; 3], |a, p| geometry::add(a, *p));
        geometry::scale(s, 1.0 / n)
    };
    let (cs, ct) = (centroid(source), centroid(target));
    let mut h = Matrix3::<f64>::zeros();
    let mut cov = Matrix3::<f64>::zeros();
    for (s, t) in source.iter().zip(target) {
        let a = Vector3::from(geometry::sub(*s, cs));
        let b = Vector3::from(geometry::sub(*t, ct));
        h += a * b.transpose();
        cov += a * a.transpose();
    }
    let sv = cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-18 * ev[0] {
        return Err(Error::Degenerate("rigid_align: points are collinear or coincident".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let translation = geometry::sub(ct, geometry::mat_vec(&rotation, cs));
    Ok(RigidAlignment { rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;
    use nalgebra::{Unit, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain() -> JointHierarchy {
        JointHierarchy {
            parents: vec![None, Some(0), Some(1)],
            names: vec!["a".into(), "b".into(), "c".into()],
            fingertips: vec![2],
            palm_joint: 0,
        }
    }

    fn max_abs(a: &Mat3, b: &Mat3) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn euler_identity_and_quarter_turn() {
        assert_eq!(euler_to_rotation([0.0; 3], EulerOrder::Xyz), geometry::IDENTITY3);
        let r = euler_to_rotation([PI / 2.0, 0.0, 0.0], EulerOrder::Xyz);
        let v = geometry::mat_vec(&r, [0.0, 1.0, 0.0]);
        assert!(dist(v, [0.0, 0.0, 1.0]) < 1e-15);
    }

    #[test]
    fn euler_matches_quaternion_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let axes = [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()];
        for order in [EulerOrder::Xyz, EulerOrder::Zyx, EulerOrder::Yzx] {
            for _ in 0..50 {
                let a: Vec3 = [rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
                let q = order.axes().iter().fold(UnitQuaternion::identity(), |q, &ax| {
                    q * UnitQuaternion::from_axis_angle(&Unit::new_unchecked(*axes[ax]), a[ax])
                });
                let m = q.to_rotation_matrix();
                let oracle = [
                    [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                    [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                    [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
                ];
                assert!(max_abs(&euler_to_rotation(a, order), &oracle) < 1e-12);
            }
        }
    }

    #[test]
    fn euler_graph_gradient_matches_finite_differences() {
        let a0 = [0.3, -1.1, 2.0];
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |a: Vec3| -> f64 {
            euler_to_rotation(a, EulerOrder::Xyz)
                .iter()
                .flatten()
                .zip(&w)
                .map(|(x, y)| x * y)
                .sum()
        };
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_vec(a0.to_vec()));
        let r = euler_rotation_graph(&mut tape, a, EulerOrder::Xyz).unwrap();
        let wv = tape.constant(Tensor::new(vec![3, 3], w.clone()).unwrap());
        let p = tape.mul(r, wv).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(a).unwrap().data().to_vec();
        for k in 0..3 {
            let h = 1e-6;
            let mut ap = a0;
            let mut am = a0;
            ap[k] += h;
            am[k] -= h;
            let fd = (f(ap) - f(am)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn zero_pose_chain_accumulates_offsets() {
        let offsets = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let jt = forward_kinematics_angles(&[[0.0; 3]; 3], &offsets, &chain(), EulerOrder::Xyz).unwrap();
        assert_eq!(jt.joint_positions, vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]);
        for t in &jt.transforms {
            assert_eq!(t, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn quarter_turn_at_middle_joint() {
        let offsets = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let angles = [[0.0; 3], [0.0, 0.0, PI / 2.0], [0.0; 3]];
        let jt = forward_kinematics_angles(&angles, &offsets, &chain(), EulerOrder::Xyz).unwrap();
        assert!(dist(jt.joint_positions[2], [-1.0, 1.0, 0.0]) < 1e-15);
        // The skinning transform of joint 1 pivots about joint 1.
        assert!(dist(jt.apply(1, [0.0, 2.0, 0.0]), [-1.0, 1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn pose_vector_contract() {
        assert!(PoseVector::new(vec![0.0; 2], vec![true, false, false]).is_err());
        let p = PoseVector::new(vec![100.0, -100.0], vec![true, true, false]).unwrap();
        assert!(p.theta().iter().all(|t| t.abs() <= PI));
        let q = PoseVector::from_theta(&[0.5, -2.0], vec![true, false, true]).unwrap();
        let t = q.theta();
        assert!((t[0] - 0.5).abs() < 1e-14 && (t[1] + 2.0).abs() < 1e-14);
        assert_eq!(q.joint_angles()[0], [t[0], 0.0, t[1]]);
    }

    #[test]
    fn rigid_align_identity_and_translation() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let a = rigid_align(&pts, &pts).unwrap();
        assert!(max_abs(&a.rotation, &geometry::IDENTITY3) < 1e-12);
        assert!(geometry::norm(a.translation) < 1e-12);
        let moved: Vec<Vec3> = pts.iter().map(|p| geometry::add(*p, [1.0, 2.0, 3.0])).collect();
        let a = rigid_align(&pts, &moved).unwrap();
        assert!(max_abs(&a.rotation, &geometry::IDENTITY3) < 1e-12);
        assert!(dist(a.translation, [1.0, 2.0, 3.0]) < 1e-12);
    }

    #[test]
    fn rigid_align_recovers_random_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..6)
                .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)])
                .collect();
            let r = euler_to_rotation(
                [rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI)],
                EulerOrder::Xyz,
            );
            let t = [rng.random_range(-100.0..100.0), 5.0, -7.0];
            let truth = RigidAlignment { rotation: r, translation: t };
            let moved: Vec<Vec3> = pts.iter().map(|p| truth.apply(*p)).collect();
            let a = rigid_align(&pts, &moved).unwrap();
            let rmsd = (pts
                .iter()
                .zip(&moved)
                .map(|(p, q)| geometry::dot(geometry::sub(a.apply(*p), *q), geometry::sub(a.apply(*p), *q)))
                .sum::<f64>()
                / 6.0)
                .sqrt();
            assert!(rmsd < 1e-9, "rmsd {rmsd}");
            assert!(max_abs(&a.rotation, &r) < 1e-9);
            assert!(geometry::det(&a.rotation) > 0.0);
        }
    }

    #[test]
    fn rigid_align_rejects_collinear() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [5.0, 5.0, 5.0]];
        assert!(matches!(rigid_align(&pts, &pts), Err(Error::Degenerate(_))));
        assert!(matches!(rigid_align(&pts[..2], &pts[..2]), Err(Error::Degenerate(_))));
    }
}
