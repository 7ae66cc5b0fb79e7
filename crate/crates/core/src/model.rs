//! The hand model container: template mesh, skeleton offsets, skinning
//! weights and joint hierarchy, with structural validation and the on-disk
//! bundle (OBJ geometry plus a JSON sidecar).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::obj;

const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct JointHierarchy {
    /// Parent of each joint; `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub names: Vec<String>,
    pub fingertips: Vec<usize>,
    pub palm_joint: usize,
}

impl JointHierarchy {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(Option::is_none).unwrap_or(0)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        self.children(j).next().is_none()
    }

    /// The root followed by its children: the wrist and the finger roots.
    pub fn alignment_joints(&self) -> Vec<usize> {
        let root = self.root();
        std::iter::once(root).chain(self.children(root)).collect()
    }

    /// Every `(parent, child)` bone in child order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    /// Zero-pose template vertices, millimeters.
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Translation of each joint from its parent (from the origin for the root), millimeters.
    pub skeleton_offsets: Vec<Vec3>,
    /// Dense row-major `V x J`.
    pub skinning_weights: Vec<f64>,
    pub hierarchy: JointHierarchy,
    /// Enabled rotation channels, `3J` entries in joint-major x, y, z order.
    pub dof_mask: Vec<bool>,
}

/// One failed invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.message, self.invariant)
    }
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

impl HandModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.hierarchy.len()
    }

    pub fn num_dofs(&self) -> usize {
        self.dof_mask.iter().filter(|&&b| b).count()
    }

    pub fn weight(&self, v: usize, j: usize) -> f64 {
        self.skinning_weights[v * self.num_joints() + j]
    }

    /// Every violated invariant; empty iff the model is structurally valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |invariant: &'static str, message: String| out.push(Violation { invariant, message });
        let nv = self.num_vertices();
        let nj = self.num_joints();

        if nv < 4 {
            push("min_vertices", format!("model has {nv} vertices, need at least 4"));
        }
        if nj < 2 {
            push("min_joints", format!("model has {nj} joints, need at least 2"));
        }
        for (v, p) in self.template_vertices.iter().enumerate() {
            if !p.iter().all(|x| x.is_finite()) {
                push("finite_vertices", format!("vertex {v} is not finite: {p:?}"));
            }
        }

        // Faces.
        let mut used = vec![false; nv];
        for (f, face) in self.faces.iter().enumerate() {
            for &i in face {
                if i >= nv {
                    push("face_index", format!("face {f} index {i} out of range (V={nv})"));
                } else {
                    used[i] = true;
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                push("face_degenerate", format!("face {f} repeats a vertex: {face:?}"));
            }
        }
        for (v, u) in used.iter().enumerate() {
            if !u {
                push("isolated_vertex", format!("vertex {v} belongs to no face"));
            }
        }

        // Weights.
        if self.skinning_weights.len() != nv * nj {
            push(
                "weights_shape",
                format!("weights have {} entries, expected {nv}x{nj}", self.skinning_weights.len()),
            );
        } else if nj > 0 {
            for (v, row) in self.skinning_weights.chunks_exact(nj).enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    if !(w >= 0.0) {
                        push("weights_nonnegative", format!("weight (v={v}, j={j}) is {w}"));
                    }
                }
                let s: f64 = row.iter().sum();
                if !((s - 1.0).abs() <= WEIGHT_SUM_TOL) {
                    push("weights_partition", format!("weights row {v} sums to {}", round9(s)));
                }
            }
        }

        // Skeleton.
        if self.skeleton_offsets.len() != nj {
            push(
                "offsets_shape",
                format!("{} skeleton offsets for {nj} joints", self.skeleton_offsets.len()),
            );
        }
        for (j, o) in self.skeleton_offsets.iter().enumerate() {
            if !o.iter().all(|x| x.is_finite()) {
                push("finite_offsets", format!("offset of joint {j} is not finite: {o:?}"));
            }
        }
        let h = &self.hierarchy;
        let roots = h.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            push("single_root", format!("hierarchy has {roots} roots"));
        }
        for (j, p) in h.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= j {
                    push("parent_order", format!("joint {j} has parent {p}, parents must precede children"));
                }
            }
        }
        if h.names.len() != nj {
            push("joint_names", format!("{} joint names for {nj} joints", h.names.len()));
        }
        for &t in &h.fingertips {
            if t >= nj {
                push("fingertip_leaf", format!("fingertip {t} out of range"));
            } else if !h.is_leaf(t) {
                push("fingertip_leaf", format!("fingertip {t} has children"));
            }
        }
        if h.palm_joint >= nj {
            push("palm_joint", format!("palm joint {} out of range", h.palm_joint));
        } else if roots == 1 {
            let root = h.root();
            if h.palm_joint != root && h.parents[h.palm_joint] != Some(root) {
                push(
                    "palm_joint",
                    format!("palm joint {} is neither the root nor a child of it", h.palm_joint),
                );
            }
        }
        if self.dof_mask.len() != 3 * nj {
            push("dof_mask", format!("DOF mask has {} entries, expected {}", self.dof_mask.len(), 3 * nj));
        }
        out
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// JSON sidecar of a model bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub parents: Vec<i64>,
    pub offsets: Vec<Vec3>,
    pub weights: Vec<Vec<f64>>,
    pub fingertips: Vec<usize>,
    pub palm_joint: usize,
    pub dof_mask: Vec<bool>,
    pub joint_names: Vec<String>,
}

/// Paths of the two files in a bundle. Accepts either file's path.
pub fn bundle_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("obj"), path.with_extension("json"))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::format(path, format!("line {} column {}", e.line(), e.column()), e)
}

pub fn load_model(path: &Path) -> Result<HandModel> {
    let (obj_path, json_path) = bundle_paths(path);
    let mesh = obj::read_obj(&obj_path)?;
    let text = std::fs::read_to_string(&json_path)?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| json_error(&json_path, e))?;

    let mut parents = Vec::with_capacity(side.parents.len());
    for (j, &p) in side.parents.iter().enumerate() {
        parents.push(match p {
            -1 => None,
            p if p >= 0 => Some(p as usize),
            p => return Err(Error::format(&json_path, format!("parents[{j}]"), format!("invalid parent {p}"))),
        });
    }
    let nj = parents.len();
    let mut weights = Vec::with_capacity(side.weights.len() * nj);
    for (v, row) in side.weights.iter().enumerate() {
        if row.len() != nj {
            return Err(Error::format(
                &json_path,
                format!("weights[{v}]"),
                format!("row has {} entries, expected {nj}", row.len()),
            ));
        }
        weights.extend_from_slice(row);
    }
    if side.weights.len() != mesh.vertices.len() {
        return Err(Error::format(
            &json_path,
            "weights",
            format!("{} rows for {} vertices", side.weights.len(), mesh.vertices.len()),
        ));
    }
    let model = HandModel {
        template_vertices: mesh.vertices,
        faces: mesh.faces,
        skeleton_offsets: side.offsets,
        skinning_weights: weights,
        hierarchy: JointHierarchy {
            parents,
            names: side.joint_names,
            fingertips: side.fingertips,
            palm_joint: side.palm_joint,
        },
        dof_mask: side.dof_mask,
    };
    model.validated()
}

pub fn sidecar(model: &HandModel) -> Sidecar {
    let nj = model.num_joints().max(1);
    Sidecar {
        parents: model
            .hierarchy
            .parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        offsets: model.skeleton_offsets.clone(),
        weights: model.skinning_weights.chunks(nj).map(<[f64]>::to_vec).collect(),
        fingertips: model.hierarchy.fingertips.clone(),
        palm_joint: model.hierarchy.palm_joint,
        dof_mask: model.dof_mask.clone(),
        joint_names: model.hierarchy.names.clone(),
    }
}

pub fn save_model(model: &HandModel, path: &Path) -> Result<()> {
    let (obj_path, json_path) = bundle_paths(path);
    obj::write_obj(&obj_path, &model.template_vertices, &model.faces)?;
    let text = serde_json::to_string(&sidecar(model))?;
    std::fs::write(json_path, text)?;
    Ok(())
}
