//! Procedural subject and dataset generator.
//!
//! The template is a rounded-box palm with five capsule digits, skinned by
//! distance falloff to the bones. A subject adds hidden corrective heads
//! (same architecture as the fitted ones) whose outputs are smooth
//! displacement fields; frames pose that subject, move it by a random rigid
//! motion and render depth from a hemispherical camera rig.
//!
//! Every random draw comes from a ChaCha stream derived from the seed: the
//! subject uses stream 0 and frame `i` uses stream `1 + i`, so frames can be
//! generated in any order.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{self, PalmVertexSet};
use crate::correctives::{apply_correctives, CorrectiveNets, DenseHead, IdentityCode, RefinedModel};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::kinematics::{forward_kinematics, rest_joint_positions, EulerOrder, PoseVector, RigidAlignment};
use crate::model::{self, HandModel, JointHierarchy};
use crate::obj;
use crate::render::{self, Camera, DepthMap};
use crate::skinning;

pub const DIGITS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
const THUMB_JOINTS: [&str; 4] = ["cmc", "mcp", "ip", "tip"];
const FINGER_JOINTS: [&str; 4] = ["mcp", "pip", "dip", "tip"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub vertex_budget: usize,
    pub n_cameras: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Relative bone-length change of the subject, drawn uniformly from
    /// `[-p, p]` per bone.
    pub bone_length_perturbation: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_distance: f64,
    pub focal: f64,
    pub identity_dim: usize,
    pub hidden: usize,
    /// RMS of the identity vertex field, millimeters.
    pub identity_vertex_mm: f64,
    /// RMS length of the per-joint skeleton offsets, millimeters.
    pub skeleton_mm: f64,
    /// Pose bulge amplitude per radian of flexion, millimeters.
    pub pose_vertex_mm: f64,
    pub max_retries: usize,
    pub min_coverage: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            vertex_budget: 2000,
            n_cameras: 8,
            n_train: 60,
            n_test: 15,
            bone_length_perturbation: 0.0,
            image_width: 256,
            image_height: 256,
            camera_distance: 1000.0,
            focal: 900.0,
            identity_dim: 32,
            hidden: 256,
            identity_vertex_mm: 2.0,
            skeleton_mm: 2.5,
            pose_vertex_mm: 2.0,
            max_retries: 200,
            min_coverage: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vertex_budget < 200 {
            return bad("vertex_budget must be at least 200");
        }
        if self.n_cameras == 0 {
            return bad("n_cameras must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0) {
            return bad("focal and camera_distance must be positive");
        }
        if !(0.0..1.0).contains(&self.bone_length_perturbation) {
            return bad("bone_length_perturbation must be in [0, 1)");
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Digit {
    /// Rest position of the digit root (CMC or MCP).
    root: Vec3,
    dir: Vec3,
    lengths: [f64; 3],
    radius: f64,
}

fn digits() -> [Digit; 5] {
    let up = [0.0, 1.0, 0.0];
    [
        Digit {
            root: [-36.0, 16.0, 0.0],
            dir: geometry::normalize([-0.6, 0.8, 0.0]),
            lengths: [40.0, 31.0, 25.0],
            radius: 9.5,
        },
        Digit { root: [-30.0, 86.0, 0.0], dir: up, lengths: [40.0, 25.0, 20.0], radius: 8.5 },
        Digit { root: [-10.0, 90.0, 0.0], dir: up, lengths: [45.0, 28.0, 21.0], radius: 9.0 },
        Digit { root: [10.0, 86.0, 0.0], dir: up, lengths: [42.0, 26.0, 20.0], radius: 8.5 },
        Digit { root: [29.0, 78.0, 0.0], dir: up, lengths: [33.0, 20.0, 18.0], radius: 7.5 },
    ]
}

const PALM_MIN: Vec3 = [-42.0, -8.0, -11.0];
const PALM_MAX: Vec3 = [40.0, 92.0, 11.0];
const PALM_ROUND: f64 = 8.0;

/// Wrist root plus four joints per digit, digits in `DIGITS` order.
pub fn hand_hierarchy() -> JointHierarchy {
    let mut parents = vec![None];
    let mut names = vec!["wrist".to_string()];
    let mut fingertips = Vec::new();
    for (d, digit) in DIGITS.iter().enumerate() {
        let joints = if d == 0 { THUMB_JOINTS } else { FINGER_JOINTS };
        for (k, j) in joints.iter().enumerate() {
            let idx = parents.len();
            parents.push(Some(if k == 0 { 0 } else { idx - 1 }));
            names.push(format!("{digit}_{j}"));
            if k == 3 {
                fingertips.push(idx);
            }
        }
    }
    JointHierarchy {
        parents,
        names,
        fingertips,
        palm_joint: 0,
    }
}

/// Joint index of digit `d`, position `k` (0 = root, 3 = tip).
pub fn digit_joint(d: usize, k: usize) -> usize {
    1 + 4 * d + k
}

/// 28 channels: wrist x/y/z, thumb CMC x/y/z, thumb MCP and IP flexion,
/// and per finger MCP x/y/z, PIP and DIP flexion. Flexion is about `x`.
pub fn hand_dof_mask() -> Vec<bool> {
    let mut mask = vec![true, true, true];
    for _ in 0..5 {
        mask.extend([true, true, true]);
        mask.extend([true, false, false]);
        mask.extend([true, false, false]);
        mask.extend([false, false, false]);
    }
    mask
}

fn hand_offsets() -> Vec<Vec3> {
    let mut offsets = vec![[0.0; 3]];
    for dg in digits() {
        offsets.push(dg.root);
        for l in dg.lengths {
            offsets.push(geometry::scale(dg.dir, l));
        }
    }
    offsets
}

struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    /// Component of each vertex: 0 palm, 1 + d for digit d.
    part: Vec<usize>,
}

impl MeshBuilder {
    /// Adds a triangle with its normal facing away from `inside`.
    fn tri(&mut self, a: usize, b: usize, c: usize, inside: Vec3) {
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let n = geometry::cross(geometry::sub(pb, pa), geometry::sub(pc, pa));
        let centroid = geometry::scale(geometry::add(geometry::add(pa, pb), pc), 1.0 / 3.0);
        if geometry::dot(n, geometry::sub(centroid, inside)) >= 0.0 {
            self.faces.push([a, b, c]);
        } else {
            self.faces.push([a, c, b]);
        }
    }

    fn palm(&mut self, spacing: f64) {
        let n: Vec<usize> = (0..3)
            .map(|c| (((PALM_MAX[c] - PALM_MIN[c]) / spacing).round() as usize).max(2))
            .collect();
        let inner_min = PALM_MIN.map(|x| x + PALM_ROUND);
        let inner_max = PALM_MAX.map(|x| x - PALM_ROUND);
        let mut index: HashMap<[usize; 3], usize> = HashMap::new();
        let lattice = |i: [usize; 3]| -> Vec3 {
            let mut p = [0.0; 3];
            for c in 0..3 {
                p[c] = PALM_MIN[c] + (PALM_MAX[c] - PALM_MIN[c]) * i[c] as f64 / n[c] as f64;
            }
            let q = [0, 1, 2].map(|c| p[c].clamp(inner_min[c], inner_max[c]));
            let d = geometry::sub(p, q);
            let len = geometry::norm(d);
            if len > 0.0 {
                geometry::add(q, geometry::scale(d, PALM_ROUND / len))
            } else {
                p
            }
        };
        let center = geometry::scale(geometry::add(PALM_MIN, PALM_MAX), 0.5);
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for side in [0, n[axis]] {
                for a in 0..n[u] {
                    for b in 0..n[v] {
                        let corner = |da: usize, db: usize| {
                            let mut i = [0; 3];
                            i[axis] = side;
                            i[u] = a + da;
                            i[v] = b + db;
                            i
                        };
                        let ids: Vec<usize> = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]
                            .iter()
                            .map(|&i| {
                                *index.entry(i).or_insert_with(|| {
                                    self.vertices.push(lattice(i));
                                    self.part.push(0);
                                    self.vertices.len() - 1
                                })
                            })
                            .collect();
                        self.tri(ids[0], ids[1], ids[2], center);
                        self.tri(ids[0], ids[2], ids[3], center);
                    }
                }
            }
        }
    }

    /// Capsule whose hemispherical caps are centered on `a` and `b`.
    fn capsule(&mut self, a: Vec3, b: Vec3, r: f64, spacing: f64, part: usize) {
        let len = geometry::dist(a, b);
        let e = geometry::normalize(geometry::sub(b, a));
        let helper = if e[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = geometry::normalize(geometry::cross(e, helper));
        let w = geometry::cross(e, u);
        let around = ((2.0 * PI * r / spacing).round() as usize).max(8);
        let cap = ((0.5 * PI * r / spacing).round() as usize).max(2);
        let cyl = ((len / spacing).round() as usize).max(1);
        // (axial position, ring radius) from the `a` pole to the `b` pole.
        let mut rings = Vec::new();
        for i in 1..=cap {
            let phi = -0.5 * PI + 0.5 * PI * i as f64 / cap as f64;
            rings.push((r * phi.sin(), r * phi.cos()));
        }
        for i in 1..=cyl {
            rings.push((len * i as f64 / cyl as f64, r));
        }
        for i in 1..cap {
            let phi = 0.5 * PI * i as f64 / cap as f64;
            rings.push((len + r * phi.sin(), r * phi.cos()));
        }
        let point = |s: f64, rho: f64, k: usize| {
            let t = 2.0 * PI * k as f64 / around as f64;
            let radial = geometry::add(geometry::scale(u, rho * t.cos()), geometry::scale(w, rho * t.sin()));
            geometry::add(geometry::add(a, geometry::scale(e, s)), radial)
        };
        let axis_point = |p: Vec3| {
            let s = geometry::dot(geometry::sub(p, a), e).clamp(0.0, len);
            geometry::add(a, geometry::scale(e, s))
        };
        let base = self.vertices.len();
        self.vertices.push(geometry::sub(a, geometry::scale(e, r)));
        for &(s, rho) in &rings {
            for k in 0..around {
                self.vertices.push(point(s, rho, k));
            }
        }
        self.vertices.push(geometry::add(b, geometry::scale(e, r)));
        let top = self.vertices.len() - 1;
        self.part.resize(self.vertices.len(), part);
        let ring = |i: usize, k: usize| base + 1 + i * around + k % around;
        for k in 0..around {
            let inside = axis_point(self.vertices[ring(0, k)]);
            self.tri(base, ring(0, k), ring(0, k + 1), inside);
        }
        for i in 0..rings.len() - 1 {
            for k in 0..around {
                let (p, q, s, t) = (ring(i, k), ring(i, k + 1), ring(i + 1, k + 1), ring(i + 1, k));
                let inside = axis_point(self.vertices[p]);
                self.tri(p, q, s, inside);
                self.tri(p, s, t, inside);
            }
        }
        let last = rings.len() - 1;
        for k in 0..around {
            let inside = axis_point(self.vertices[ring(last, k)]);
            self.tri(top, ring(last, k + 1), ring(last, k), inside);
        }
    }
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> (f64, f64) {
    let ab = geometry::sub(b, a);
    let t = (geometry::dot(geometry::sub(p, a), ab) / geometry::dot(ab, ab)).clamp(0.0, 1.0);
    (geometry::dist(p, geometry::lerp(a, b, t)), t)
}

const WEIGHT_FALLOFF_MM: f64 = 6.0;

/// Weights from distance to the bones a vertex's part may follow; each bone
/// is owned by its parent joint.
fn skinning_weights(vertices: &[Vec3], part: &[usize], joints: &[Vec3], hierarchy: &JointHierarchy) -> Vec<f64> {
    let nj = hierarchy.len();
    let mut out = vec![0.0; vertices.len() * nj];
    for (v, (&p, &pt)) in vertices.iter().zip(part).enumerate() {
        // Candidate bones as (parent, child).
        let mut bones: Vec<(usize, usize)> = Vec::new();
        if pt == 0 {
            for d in 0..5 {
                bones.push((0, digit_joint(d, 0)));
                bones.push((digit_joint(d, 0), digit_joint(d, 1)));
            }
        } else {
            let d = pt - 1;
            bones.push((0, digit_joint(d, 0)));
            for k in 0..3 {
                bones.push((digit_joint(d, k), digit_joint(d, k + 1)));
            }
        }
        let dists: Vec<f64> = bones.iter().map(|&(a, b)| segment_distance(p, joints[a], joints[b]).0).collect();
        let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let row = &mut out[v * nj..(v + 1) * nj];
        for (&(owner, _), d) in bones.iter().zip(&dists) {
            let x = (d - dmin) / WEIGHT_FALLOFF_MM;
            row[owner] += (-x * x).exp();
        }
        for w in row.iter_mut() {
            if *w < 1e-3 {
                *w = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    out
}

fn mesh_at_spacing(spacing: f64) -> MeshBuilder {
    let mut mb = MeshBuilder {
        vertices: Vec::new(),
        faces: Vec::new(),
        part: Vec::new(),
    };
    mb.palm(spacing);
    let offsets = hand_offsets();
    let h = hand_hierarchy();
    let joints = rest_joint_positions(&offsets, &h);
    for (d, dg) in digits().iter().enumerate() {
        mb.capsule(joints[digit_joint(d, 0)], joints[digit_joint(d, 3)], dg.radius, spacing, d + 1);
    }
    mb
}

/// The zero-pose template hand, with about `vertex_budget` vertices.
pub fn hand_template(vertex_budget: usize) -> Result<(HandModel, Vec<usize>)> {
    let mut spacing = 5.0;
    for _ in 0..3 {
        let n = mesh_at_spacing(spacing).vertices.len() as f64;
        spacing *= (n / vertex_budget as f64).sqrt();
    }
    let mb = mesh_at_spacing(spacing);
    let hierarchy = hand_hierarchy();
    let offsets = hand_offsets();
    let joints = rest_joint_positions(&offsets, &hierarchy);
    let weights = skinning_weights(&mb.vertices, &mb.part, &joints, &hierarchy);
    let model = HandModel {
        template_vertices: mb.vertices,
        faces: mb.faces,
        skeleton_offsets: offsets,
        skinning_weights: weights,
        hierarchy,
        dof_mask: hand_dof_mask(),
    }
    .validated()?;
    Ok((model, mb.part))
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut n = vec![[0.0; 3]; vertices.len()];
    for f in faces {
        let fn_ = geometry::cross(
            geometry::sub(vertices[f[1]], vertices[f[0]]),
            geometry::sub(vertices[f[2]], vertices[f[0]]),
        );
        for &i in f {
            n[i] = geometry::add(n[i], fn_);
        }
    }
    n.into_iter().map(geometry::normalize).collect()
}

/// A ground-truth subject: the template handed to the fitter plus the
/// hidden correctives that shape the real geometry.
#[derive(Clone, Debug)]
pub struct Subject {
    pub model: HandModel,
    pub nets: CorrectiveNets,
    pub beta: IdentityCode,
}

impl Subject {
    pub fn refined(&self, pose: &PoseVector) -> Result<RefinedModel> {
        apply_correctives(&self.model, &self.nets, &self.beta, pose)
    }

    /// Joints and vertices in dataset space.
    pub fn pose_mesh(&self, pose: &PoseVector, global: &RigidAlignment) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let refined = self.refined(pose)?;
        let jt = forward_kinematics(pose, &refined.offsets, &self.model.hierarchy, EulerOrder::Xyz)?;
        let verts = skinning::lbs_deform(&refined.vertices, &refined.weights, &jt, global)?;
        let joints = jt.joint_positions.iter().map(|&p| global.apply(p)).collect();
        Ok((joints, verts))
    }

    /// Rigid and non-rigid penetration of the subject at `pose`.
    pub fn penetration(&self, pose: &PoseVector) -> Result<(f64, f64)> {
        let zero = PoseVector::zero(self.model.dof_mask.clone());
        let rest = self.refined(&zero)?;
        let chains = collision::build_sphere_chains(&rest, &self.model.hierarchy, collision::DEFAULT_SPHERES_PER_BONE)?;
        let refined = self.refined(pose)?;
        let jt = forward_kinematics(pose, &refined.offsets, &self.model.hierarchy, EulerOrder::Xyz)?;
        let posed = collision::pose_sphere_chains(&chains, &jt);
        let verts = skinning::lbs_deform(&refined.vertices, &refined.weights, &jt, &RigidAlignment::identity())?;
        let palm = PalmVertexSet::from_weights(&refined.weights, self.model.num_joints(), self.model.hierarchy.palm_joint);
        let tips = collision::fingertip_chains(&chains, &self.model.hierarchy);
        Ok((
            collision::rigid_penetration(&chains, &posed),
            collision::nonrigid_penetration(&chains, &posed, &tips, &palm, &verts)?,
        ))
    }
}

/// Sum of Gaussian bumps along the normals, scaled to the requested RMS.
fn normal_field<R: Rng + ?Sized>(
    vertices: &[Vec3],
    normals: &[Vec3],
    bumps: usize,
    width: (f64, f64),
    rms: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut amp = vec![0.0; vertices.len()];
    for _ in 0..bumps {
        let c = vertices[rng.random_range(0..vertices.len())];
        let s = rng.random_range(width.0..width.1);
        let a: f64 = StandardNormal.sample(rng);
        for (x, p) in amp.iter_mut().zip(vertices) {
            let d2 = geometry::dot(geometry::sub(*p, c), geometry::sub(*p, c));
            *x += a * (-d2 / (2.0 * s * s)).exp();
        }
    }
    let cur = (amp.iter().map(|a| a * a).sum::<f64>() / amp.len() as f64).sqrt();
    let k = if cur > 0.0 { rms / cur } else { 0.0 };
    amp.iter()
        .zip(normals)
        .flat_map(|(a, n)| geometry::scale(*n, a * k))
        .collect()
}

/// Vertex shifts that keep the surface attached to moved rest joints.
fn skeleton_follow(model: &HandModel, new_offsets: &[Vec3]) -> Vec<f64> {
    let h = &model.hierarchy;
    let old = rest_joint_positions(&model.skeleton_offsets, h);
    let new = rest_joint_positions(new_offsets, h);
    let delta: Vec<Vec3> = old.iter().zip(&new).map(|(a, b)| geometry::sub(*b, *a)).collect();
    let nj = model.num_joints();
    let mut out = Vec::with_capacity(model.num_vertices() * 3);
    for (v, p) in model.template_vertices.iter().enumerate() {
        let mut shift = [0.0; 3];
        for j in 0..nj {
            let w = model.weight(v, j);
            if w == 0.0 {
                continue;
            }
            // The segment this joint carries that is nearest to the vertex.
            let best = h
                .children(j)
                .map(|c| (c, segment_distance(*p, old[j], old[c])))
                .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
            let s = match best {
                Some((c, (_, t))) => geometry::lerp(delta[j], delta[c], t),
                None => delta[j],
            };
            shift = geometry::add(shift, geometry::scale(s, w));
        }
        out.extend(shift);
    }
    out
}

fn constant_head<R: Rng + ?Sized>(name: &str, n_in: usize, hidden: usize, output: Vec<f64>, rng: &mut R) -> DenseHead {
    let mut h = DenseHead::new(name, n_in, hidden, output.len(), 0.01, rng);
    h.w2.value_mut().data_mut().iter_mut().for_each(|w| *w = 0.0);
    let n = output.len();
    h.b2.set_value(Tensor::new(vec![n], output).unwrap()).unwrap();
    h
}

/// Flexion channels (index into the active pose vector) with their joint.
pub fn flexion_channels(model: &HandModel) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut k = 0;
    for (c, &on) in model.dof_mask.iter().enumerate() {
        if on {
            let j = c / 3;
            if c % 3 == 0 && j != 0 {
                out.push((k, j));
            }
            k += 1;
        }
    }
    out
}

pub fn generate_subject(cfg: &SynthConfig) -> Result<Subject> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let (model, _) = hand_template(cfg.vertex_budget)?;
    let (nv, nj, np) = (model.num_vertices(), model.num_joints(), model.num_dofs());
    let beta = IdentityCode::sample(cfg.identity_dim, &mut rng);

    let mut offsets = model.skeleton_offsets.clone();
    let coord_sigma = cfg.skeleton_mm / 3f64.sqrt();
    for (j, o) in offsets.iter_mut().enumerate() {
        if model.hierarchy.parents[j].is_none() {
            continue;
        }
        let scale = 1.0 + rng.random_range(-1.0..=1.0) * cfg.bone_length_perturbation;
        let noise: [f64; 3] = [0, 1, 2].map(|_| { let z: f64 = StandardNormal.sample(&mut rng); coord_sigma * z });
        *o = geometry::add(geometry::scale(*o, scale), noise);
    }
    let skel_delta: Vec<f64> = offsets
        .iter()
        .zip(&model.skeleton_offsets)
        .flat_map(|(a, b)| geometry::sub(*a, *b))
        .collect();

    let normals = vertex_normals(&model.template_vertices, &model.faces);
    let field = normal_field(&model.template_vertices, &normals, 12, (12.0, 30.0), cfg.identity_vertex_mm, &mut rng);
    let follow = skeleton_follow(&model, &offsets);
    let id_delta: Vec<f64> = field.iter().zip(&follow).map(|(a, b)| a + b).collect();

    // One hidden unit per flexion channel: relu(-theta) drives a bulge on
    // the normals around the flexing joint.
    let rest = rest_joint_positions(&offsets, &model.hierarchy);
    let flex = flexion_channels(&model);
    let mut pose_head = DenseHead::zeros("posevert", np, cfg.hidden, nv * 3);
    if flex.len() > cfg.hidden {
        return Err(Error::Config("hidden width too small for the pose corrective".into()));
    }
    {
        let w1 = pose_head.w1.value_mut().data_mut();
        for (unit, &(k, _)) in flex.iter().enumerate() {
            w1[k * cfg.hidden + unit] = -1.0;
        }
    }
    {
        let w2 = pose_head.w2.value_mut().data_mut();
        for (unit, &(_, j)) in flex.iter().enumerate() {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let width = rng.random_range(8.0..14.0);
            for (v, p) in model.template_vertices.iter().enumerate() {
                let d2 = geometry::dot(geometry::sub(*p, rest[j]), geometry::sub(*p, rest[j]));
                let a = sign * cfg.pose_vertex_mm * (-d2 / (2.0 * width * width)).exp();
                for c in 0..3 {
                    w2[unit * nv * 3 + 3 * v + c] = a * normals[v][c];
                }
            }
        }
    }
    let skel = constant_head("skel", cfg.identity_dim, cfg.hidden, skel_delta, &mut rng);
    let idvert = constant_head("idvert", cfg.identity_dim, cfg.hidden, id_delta, &mut rng);
    let nets = CorrectiveNets {
        skeleton: Some(skel),
        identity_vertices: Some(idvert),
        pose_vertices: Some(pose_head),
        skinning: None,
    };
    let subject = Subject { model, nets, beta };
    nets_shape_check(&subject, nj)?;
    Ok(subject)
}

fn nets_shape_check(s: &Subject, nj: usize) -> Result<()> {
    debug_assert_eq!(s.model.num_joints(), nj);
    s.nets.check_shapes(&s.model, s.beta.beta.len())
}

/// Cameras on two rings of a hemisphere around the origin, `+y` up.
pub fn camera_rig(cfg: &SynthConfig) -> Result<Vec<Camera>> {
    let n = cfg.n_cameras;
    let low = n.div_ceil(2);
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let (ring_n, k, elev, phase) = if i < low {
            (low, i, 20f64.to_radians(), 0.0)
        } else {
            (n - low, i - low, 60f64.to_radians(), 0.5)
        };
        let az = 2.0 * PI * (k as f64 + phase) / ring_n as f64;
        let eye = geometry::scale([elev.cos() * az.cos(), elev.sin(), elev.cos() * az.sin()], cfg.camera_distance);
        cams.push(Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], cfg.focal, cfg.image_width, cfg.image_height)?);
    }
    Ok(cams)
}

fn rotation_from_quaternion(q: [f64; 4]) -> Mat3 {
    let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Uniformly random orientation about the hand's rest center plus a small
/// translation.
pub fn sample_global<R: Rng + ?Sized>(rng: &mut R, center: Vec3) -> RigidAlignment {
    let q: [f64; 4] = [0, 1, 2, 3].map(|_| StandardNormal.sample(&mut *rng));
    let rotation = rotation_from_quaternion(q);
    let t: Vec3 = [0, 1, 2].map(|_| rng.random_range(-15.0..15.0));
    RigidAlignment {
        rotation,
        translation: geometry::sub(t, geometry::mat_vec(&rotation, center)),
    }
}

/// Random plausible angles for the active channels of `hand_dof_mask`.
pub fn sample_theta<R: Rng + ?Sized>(rng: &mut R, mask: &[bool]) -> Vec<f64> {
    let mut theta = Vec::new();
    for (c, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let (j, axis) = (c / 3, c % 3);
        let range = if j == 0 {
            (0.0, 0.0)
        } else {
            let (d, k) = ((j - 1) / 4, (j - 1) % 4);
            match (d == 0, k, axis) {
                (true, 0, 0) => (-0.5, 0.3),
                (true, 0, 1) => (-0.3, 0.3),
                (true, 0, _) => (-0.3, 0.4),
                (true, 1, _) => (-0.8, 0.1),
                (true, _, _) => (-1.0, 0.1),
                (false, 0, 0) => (-1.3, 0.3),
                (false, 0, 1) => (-0.15, 0.15),
                (false, 0, _) => (-0.12, 0.12),
                (false, 1, _) => (-1.5, 0.05),
                (false, _, _) => (-1.0, 0.05),
            }
        };
        theta.push(if range.0 == range.1 { range.0 } else { rng.random_range(range.0..range.1) });
    }
    theta
}

/// Curled fingers: `t = 0` is the flat hand, `t = 1` a tight fist.
pub fn fist_theta(mask: &[bool], t: f64) -> Vec<f64> {
    let mut theta = Vec::new();
    for (c, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let (j, axis) = (c / 3, c % 3);
        let v = if j == 0 || axis != 0 {
            0.0
        } else {
            let (d, k) = ((j - 1) / 4, (j - 1) % 4);
            match (d == 0, k) {
                (true, 0) => -0.4,
                (true, 1) => -0.6,
                (true, _) => -0.8,
                (false, 0) => -1.5,
                (false, 1) => -1.8,
                (false, _) => -1.2,
            }
        };
        theta.push(v * t);
    }
    theta
}

/// Ground truth kept beside each frame for evaluation and debugging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub theta: Vec<f64>,
    pub global: RigidAlignment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureFrame {
    pub id: usize,
    pub joints: Vec<Vec3>,
    /// One map per camera, in rig order.
    pub depth: Vec<DepthMap>,
    pub gt_vertices: Option<Vec<Vec3>>,
    pub truth: Option<FrameTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub cameras: Vec<Camera>,
    pub faces: Vec<[usize; 3]>,
    pub train: Vec<CaptureFrame>,
    pub test: Vec<CaptureFrame>,
}

fn in_some_frustum(p: Vec3, cams: &[Camera]) -> bool {
    cams.iter().any(|c| {
        let q = c.to_camera(p);
        if q[2] <= 0.0 {
            return false;
        }
        let px = c.project_camera(q);
        px[0] >= 0.0 && px[1] >= 0.0 && px[0] < c.width as f64 && px[1] < c.height as f64
    })
}

/// Renders a frame for `theta` and `global` if it passes the acceptance
/// checks (no penetration, joints visible, enough coverage).
pub fn render_frame(
    subject: &Subject,
    cameras: &[Camera],
    id: usize,
    theta: &[f64],
    global: RigidAlignment,
    min_coverage: f64,
) -> Result<Option<CaptureFrame>> {
    let pose = PoseVector::from_theta(theta, subject.model.dof_mask.clone())?;
    let (rigid, nonrigid) = subject.penetration(&pose)?;
    if rigid > 0.0 || nonrigid > 0.0 {
        return Ok(None);
    }
    let (joints, verts) = subject.pose_mesh(&pose, &global)?;
    if !joints.iter().all(|&p| in_some_frustum(p, cameras)) {
        return Ok(None);
    }
    let depth = cameras
        .iter()
        .map(|c| Ok(render::render_depth(&verts, &subject.model.faces, c)?.quantized()))
        .collect::<Result<Vec<_>>>()?;
    let covered = depth.iter().filter(|d| d.coverage() >= min_coverage).count();
    if 2 * covered < cameras.len() {
        return Ok(None);
    }
    Ok(Some(CaptureFrame {
        id,
        joints,
        depth,
        gt_vertices: Some(verts),
        truth: Some(FrameTruth {
            theta: theta.to_vec(),
            global,
        }),
    }))
}

fn rest_center(subject: &Subject) -> Result<Vec3> {
    let rest = subject.refined(&PoseVector::zero(subject.model.dof_mask.clone()))?;
    let n = rest.vertices.len() as f64;
    Ok(geometry::scale(rest.vertices.iter().fold([0.0; 3], |a, p| geometry::add(a, *p)), 1.0 / n))
}

pub fn generate_dataset(subject: &Subject, cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let cameras = camera_rig(cfg)?;
    let center = rest_center(subject)?;
    let total = cfg.n_train + cfg.n_test;
    let frames: Vec<CaptureFrame> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, 1 + i as u64);
            for _ in 0..cfg.max_retries {
                let theta = sample_theta(&mut rng, &subject.model.dof_mask);
                let global = sample_global(&mut rng, center);
                if let Some(f) = render_frame(subject, &cameras, i, &theta, global, cfg.min_coverage)? {
                    return Ok(f);
                }
            }
            Err(Error::Data(format!("frame {i}: no acceptable pose in {} tries", cfg.max_retries)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frames = frames;
    let test = frames.split_off(cfg.n_train);
    Ok(Dataset {
        config: cfg.clone(),
        cameras,
        faces: subject.model.faces.clone(),
        train: frames,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: SynthConfig,
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct JointsFile {
    joints: Vec<Vec3>,
}

pub fn frame_dir(root: &Path, id: usize) -> PathBuf {
    root.join("frames").join(format!("{id:04}"))
}

/// Writes the dataset directory: manifest, cameras, the template bundle
/// and one directory per frame.
pub fn write_dataset(dir: &Path, model: &HandModel, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("frames"))?;
    let manifest = Manifest {
        format_version: 1,
        seed: ds.config.seed,
        config: ds.config.clone(),
        train: ds.train.iter().map(|f| f.id).collect(),
        test: ds.test.iter().map(|f| f.id).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    render::write_cameras(&dir.join("cameras.json"), &ds.cameras)?;
    model::save_model(model, &dir.join("model.obj"))?;
    for f in ds.train.iter().chain(&ds.test) {
        let fd = frame_dir(dir, f.id);
        std::fs::create_dir_all(&fd)?;
        let joints = JointsFile { joints: f.joints.clone() };
        std::fs::write(fd.join("joints.json"), serde_json::to_string(&joints)?)?;
        for (c, m) in f.depth.iter().enumerate() {
            render::write_pfm(&fd.join(format!("view_{c}.pfm")), m)?;
        }
        if let Some(v) = &f.gt_vertices {
            obj::write_obj(&fd.join("gt_mesh.obj"), v, &ds.faces)?;
        }
        if let Some(t) = &f.truth {
            std::fs::write(fd.join("truth.json"), serde_json::to_string(t)?)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("line {} column {}", e.line(), e.column()), e))
}

fn read_frame(dir: &Path, id: usize, n_cameras: usize) -> Result<CaptureFrame> {
    let fd = frame_dir(dir, id);
    let joints: JointsFile = read_json(&fd.join("joints.json"))?;
    let depth = (0..n_cameras)
        .map(|c| render::read_pfm(&fd.join(format!("view_{c}.pfm"))))
        .collect::<Result<Vec<_>>>()?;
    let gt = fd.join("gt_mesh.obj");
    let gt_vertices = if gt.exists() { Some(obj::read_obj(&gt)?.vertices) } else { None };
    let truth_path = fd.join("truth.json");
    let truth = if truth_path.exists() { Some(read_json(&truth_path)?) } else { None };
    Ok(CaptureFrame {
        id,
        joints: joints.joints,
        depth,
        gt_vertices,
        truth,
    })
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(HandModel, Dataset)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let cameras = render::read_cameras(&dir.join("cameras.json"))?;
    let model = model::load_model(&dir.join("model.obj"))?;
    let read = |ids: &[usize]| -> Result<Vec<CaptureFrame>> {
        ids.iter().map(|&id| read_frame(dir, id, cameras.len())).collect()
    };
    let train = read(&manifest.train)?;
    let test = read(&manifest.test)?;
    for f in train.iter().chain(&test) {
        if f.joints.len() != model.num_joints() {
            return Err(Error::Data(format!(
                "frame {}: {} joints, model has {}",
                f.id,
                f.joints.len(),
                model.num_joints()
            )));
        }
        for m in &f.depth {
            if (m.width, m.height) != (cameras[0].width, cameras[0].height) {
                return Err(Error::Data(format!("frame {}: depth map size differs from the cameras", f.id)));
            }
        }
    }
    let faces = model.faces.clone();
    Ok((
        model,
        Dataset {
            config: manifest.config,
            cameras,
            faces,
            train,
            test,
        },
    ))
}
