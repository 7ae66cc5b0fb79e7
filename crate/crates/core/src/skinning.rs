//! Linear blend skinning and the uniform mesh Laplacian.

use std::path::Path;
use std::sync::Arc;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::kinematics::{JointTransforms, RigidAlignment};
use crate::obj;

/// Posed mesh in dataset space.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl DeformedMesh {
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        obj::write_obj(path, &self.vertices, &self.faces)
    }
}

/// 1-ring neighbors from shared mesh edges, sorted and deduplicated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_faces(num_vertices: usize, faces: &[[usize; 3]]) -> Self {
        let mut neighbors = vec![Vec::new(); num_vertices];
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Adjacency { neighbors }
    }

    pub fn isolated(&self) -> Option<usize> {
        self.neighbors.iter().position(Vec::is_empty)
    }
}

/// `m_v - mean(neighbors of v)` for every vertex.
pub fn laplacian(vertices: &[Vec3], adj: &Adjacency) -> Vec<Vec3> {
    vertices
        .iter()
        .zip(&adj.neighbors)
        .map(|(&v, nb)| {
            let s = nb.iter().fold([0.0; 3], |a, &n| geometry::add(a, vertices[n]));
            geometry::sub(v, geometry::scale(s, 1.0 / nb.len() as f64))
        })
        .collect()
}

pub fn laplacian_graph(tape: &mut Tape, vertices: Var, adj: &Arc<Adjacency>) -> Result<Var> {
    let shape = tape.shape(vertices).to_vec();
    if shape != [adj.neighbors.len(), 3] {
        return Err(Error::shape("laplacian", format!("{shape:?} for {} vertices", adj.neighbors.len())));
    }
    if let Some(v) = adj.isolated() {
        return Err(Error::Contract(format!("vertex {v} has no neighbors")));
    }
    let value = Tensor::from_rows3(&laplacian(&tape.value(vertices).rows3(), adj));
    let adj = Arc::clone(adj);
    tape.custom(
        "laplacian",
        &[vertices],
        value,
        Box::new(move |g, _| {
            let gd = g.data();
            let mut out = gd.to_vec();
            for (v, nb) in adj.neighbors.iter().enumerate() {
                let inv = 1.0 / nb.len() as f64;
                for &n in nb {
                    for c in 0..3 {
                        out[3 * n + c] -= gd[3 * v + c] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), out).unwrap())]
        }),
    )
}

/// Per-row affine map: `out_v = A_v[..9] (row-major 3x3) * x_v + A_v[9..]`.
fn affine_rows(tape: &mut Tape, a: Var, x: Var) -> Result<Var> {
    let (sa, sx) = (tape.shape(a).to_vec(), tape.shape(x).to_vec());
    if sa.len() != 2 || sa[1] != 12 || sx != [sa[0], 3] {
        return Err(Error::shape("affine_rows", format!("{sa:?} and {sx:?}")));
    }
    let n = sa[0];
    let (ad, xd) = (tape.value(a).data(), tape.value(x).data());
    let mut out = vec![0.0; n * 3];
    for v in 0..n {
        let m = &ad[12 * v..12 * v + 12];
        let p = &xd[3 * v..3 * v + 3];
        for r in 0..3 {
            out[3 * v + r] = m[3 * r] * p[0] + m[3 * r + 1] * p[1] + m[3 * r + 2] * p[2] + m[9 + r];
        }
    }
    let a_val = Arc::new(tape.value(a).clone());
    let x_val = Arc::new(tape.value(x).clone());
    tape.custom(
        "affine_rows",
        &[a, x],
        Tensor::new(vec![n, 3], out)?,
        Box::new(move |g, needs| {
            let gd = g.data();
            let (ad, xd) = (a_val.data(), x_val.data());
            let ga = needs[0].then(|| {
                let mut o = vec![0.0; n * 12];
                for v in 0..n {
                    for r in 0..3 {
                        let gr = gd[3 * v + r];
                        for c in 0..3 {
                            o[12 * v + 3 * r + c] = gr * xd[3 * v + c];
                        }
                        o[12 * v + 9 + r] = gr;
                    }
                }
                Tensor::new(vec![n, 12], o).unwrap()
            });
            let gx = needs[1].then(|| {
                let mut o = vec![0.0; n * 3];
                for v in 0..n {
                    for c in 0..3 {
                        o[3 * v + c] = (0..3).map(|r| gd[3 * v + r] * ad[12 * v + 3 * r + c]).sum();
                    }
                }
                Tensor::new(vec![n, 3], o).unwrap()
            });
            vec![ga, gx]
        }),
    )
}

/// Skinning on the tape: `[V, 3]` rest vertices, `[V, J]` weights and
/// `[J, 12]` transforms to `[V, 3]` posed vertices (model space).
pub fn lbs_graph(tape: &mut Tape, rest: Var, weights: Var, transforms: Var) -> Result<Var> {
    let blended = tape.matmul(weights, transforms)?;
    affine_rows(tape, blended, rest)
}

/// `x -> R x + t` applied to each row of a `[N, 3]` node.
pub fn align_graph(tape: &mut Tape, points: Var, align: &RigidAlignment) -> Result<Var> {
    let rt = geometry::transpose(&align.rotation);
    let rt = tape.constant(Tensor::new(vec![3, 3], rt.iter().flatten().copied().collect())?);
    let t = tape.constant(Tensor::from_vec(align.translation.to_vec()));
    let rotated = tape.matmul(points, rt)?;
    tape.add(rotated, t)
}

/// `m_v = align(sum_j w_vj T_j (m_v, 1))`.
pub fn lbs_deform(
    rest: &[Vec3],
    weights: &[f64],
    transforms: &JointTransforms,
    align: &RigidAlignment,
) -> Result<Vec<Vec3>> {
    let nj = transforms.transforms.len();
    if weights.len() != rest.len() * nj {
        return Err(Error::shape(
            "lbs_deform",
            format!("{} weights for {} vertices x {nj} joints", weights.len(), rest.len()),
        ));
    }
    Ok(rest
        .iter()
        .zip(weights.chunks_exact(nj))
        .map(|(p, w)| {
            let mut m = [0.0; 12];
            for (wj, t) in w.iter().zip(&transforms.transforms) {
                if *wj != 0.0 {
                    for (mk, tk) in m.iter_mut().zip(t) {
                        *mk += wj * tk;
                    }
                }
            }
            let q = [
                m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[9],
                m[3] * p[0] + m[4] * p[1] + m[5] * p[2] + m[10],
                m[6] * p[0] + m[7] * p[1] + m[8] * p[2] + m[11],
            ];
            align.apply(q)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{euler_to_rotation, EulerOrder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transform(r: [[f64; 3]; 3], t: Vec3) -> [f64; 12] {
        let mut m = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                m[3 * i + j] = r[i][j];
            }
            m[9 + i] = t[i];
        }
        m
    }

    fn random_transforms(rng: &mut ChaCha8Rng, nj: usize) -> JointTransforms {
        let transforms = (0..nj)
            .map(|_| {
                let r = euler_to_rotation([rng.random(), rng.random(), rng.random()], EulerOrder::Xyz);
                transform(r, [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0])
            })
            .collect();
        JointTransforms {
            transforms,
            joint_positions: vec![[0.0; 3]; nj],
        }
    }

    #[test]
    fn identity_transforms_return_rest() {
        let rest = vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]];
        let jt = JointTransforms {
            transforms: vec![transform(geometry::IDENTITY3, [0.0; 3]); 2],
            joint_positions: vec![[0.0; 3]; 2],
        };
        let out = lbs_deform(&rest, &[0.3, 0.7, 1.0, 0.0], &jt, &RigidAlignment::identity()).unwrap();
        assert_eq!(out, rest);
    }

    #[test]
    fn single_weight_follows_joint_and_half_weights_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let jt = random_transforms(&mut rng, 2);
        let p = [1.0, -2.0, 0.5];
        let out = lbs_deform(&[p, p], &[1.0, 0.0, 0.5, 0.5], &jt, &RigidAlignment::identity()).unwrap();
        assert!(geometry::dist(out[0], jt.apply(0, p)) < 1e-12);
        let mid = geometry::lerp(jt.apply(0, p), jt.apply(1, p), 0.5);
        assert!(geometry::dist(out[1], mid) < 1e-12);
    }

    #[test]
    fn graph_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (nv, nj) = (9, 4);
        let jt = random_transforms(&mut rng, nj);
        let rest: Vec<Vec3> = (0..nv).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut w: Vec<f64> = (0..nv * nj).map(|_| rng.random::<f64>()).collect();
        for row in w.chunks_mut(nj) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let align = RigidAlignment {
            rotation: euler_to_rotation([0.3, 0.1, -0.2], EulerOrder::Xyz),
            translation: [1.0, 2.0, 3.0],
        };
        let mut tape = Tape::new();
        let rv = tape.constant(Tensor::from_rows3(&rest));
        let wv = tape.constant(Tensor::from_rows(nv, nj, w.clone()).unwrap());
        let tv = tape.constant(Tensor::from_rows(nj, 12, jt.transforms.concat()).unwrap());
        let posed = lbs_graph(&mut tape, rv, wv, tv).unwrap();
        let out = align_graph(&mut tape, posed, &align).unwrap();
        let value = lbs_deform(&rest, &w, &jt, &align).unwrap();
        for (a, b) in tape.value(out).rows3().iter().zip(&value) {
            assert!(geometry::dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn laplacian_of_flat_grid_interior_is_zero() {
        // 3x3 grid, triangulated; the center vertex is 4.
        let mut v = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                v.push([x as f64, y as f64, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                let i = y * 3 + x;
                faces.push([i, i + 1, i + 4]);
                faces.push([i, i + 4, i + 3]);
            }
        }
        let adj = Adjacency::from_faces(9, &faces);
        let r = laplacian(&v, &adj);
        assert!(geometry::norm(r[4]) < 1e-15);
    }

    #[test]
    fn tetrahedron_laplacian_is_four_thirds() {
        let s = 1.0 / 3f64.sqrt();
        let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let faces = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        let adj = Adjacency::from_faces(4, &faces);
        for (r, p) in laplacian(&v, &adj).iter().zip(&v) {
            assert!(geometry::dist(*r, geometry::scale(*p, 4.0 / 3.0)) < 1e-15);
        }
    }

    #[test]
    fn laplacian_graph_gradient_is_transpose() {
        let s = 1.0 / 3f64.sqrt();
        let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s], [0.0, 0.0, 2.0]];
        let faces = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2], [0, 1, 4]];
        let adj = Arc::new(Adjacency::from_faces(5, &faces));
        let weights: Vec<f64> = (0..15).map(|i| (i as f64).cos()).collect();
        let f = |x: &[Vec3]| -> f64 {
            laplacian(x, &adj)
                .iter()
                .flatten()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut tape = Tape::new();
        let xv = tape.variable(Tensor::from_rows3(&v));
        let l = laplacian_graph(&mut tape, xv, &adj).unwrap();
        let wv = tape.constant(Tensor::from_rows(5, 3, weights.clone()).unwrap());
        let p = tape.mul(l, wv).unwrap();
        let root = tape.sum(p).unwrap();
        let g = tape.backward(root).unwrap();
        let g = g.get(xv).unwrap().data().to_vec();
        for k in 0..15 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k / 3][k % 3] += 1e-6;
            vm[k / 3][k % 3] -= 1e-6;
            let fd = (f(&vp) - f(&vm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }
}
