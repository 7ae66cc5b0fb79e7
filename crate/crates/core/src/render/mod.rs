//! Pinhole cameras, a z-buffered depth rasterizer with per-pixel depth
//! gradients, and depth-map files.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. Depth is the
//! camera-space `z` where the pixel ray meets the triangle plane, which is the
//! perspective-correct interpolation of vertex depths. Coverage ties on a
//! shared edge go to exactly one of the two triangles (top-left rule), and on
//! equal depth the lower face index wins.

mod camera;
mod pfm;

use std::sync::Arc;

pub use camera::{read_cameras, write_cameras, Camera};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};

/// Depth in millimeters, row-major from the top row; background is `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn background(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![f64::INFINITY; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.data[i].is_finite()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    pub fn coverage(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len().max(1) as f64
    }

    /// The map as stored on disk: depths rounded to `f32`.
    pub fn quantized(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&d| if d.is_finite() { d as f32 as f64 } else { d }).collect(),
        }
    }
}

/// Pixels where both maps have depth.
pub fn foreground_mask(rendered: &DepthMap, target: &DepthMap) -> Result<Vec<bool>> {
    if (rendered.width, rendered.height) != (target.width, target.height) {
        return Err(Error::Contract(format!(
            "depth maps differ in size: {}x{} vs {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    Ok(rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| a.is_finite() && b.is_finite())
        .collect())
}

/// A rasterized view plus, per foreground pixel, the covering face and
/// the depth gradient with respect to that face's world-space vertices.
#[derive(Clone, Debug)]
pub struct Raster {
    pub map: DepthMap,
    /// Foreground pixel indices, ascending.
    pub pixels: Vec<u32>,
    /// Covering face of each foreground pixel.
    pub faces: Vec<u32>,
    vertex_ids: Vec<[u32; 3]>,
    grads: Vec<[Vec3; 3]>,
}

impl Raster {
    /// `d depth / d vertex` for foreground pixel `k`, as (vertex, gradient) pairs.
    pub fn depth_gradient(&self, k: usize) -> [(usize, Vec3); 3] {
        let ids = self.vertex_ids[k];
        let g = self.grads[k];
        [(ids[0] as usize, g[0]), (ids[1] as usize, g[1]), (ids[2] as usize, g[2])]
    }
}

struct Tri {
    ids: [usize; 3],
    cam: [Vec3; 3],
    /// Plane normal `(b - a) x (c - a)`.
    n: Vec3,
    /// `n . a`.
    na: f64,
}

impl Tri {
    fn new(face: &[usize; 3], cam_vertices: &[Vec3]) -> Tri {
        let mut ids = *face;
        ids.sort_unstable();
        let cam = ids.map(|i| cam_vertices[i]);
        let n = geometry::cross(geometry::sub(cam[1], cam[0]), geometry::sub(cam[2], cam[0]));
        let na = geometry::dot(n, cam[0]);
        Tri { ids, cam, n, na }
    }

    fn depth(&self, ray: Vec3) -> f64 {
        self.na / geometry::dot(self.n, ray)
    }

    /// `d z / d vertex` in camera space: the hit point's barycentric weight
    /// times `n / (n . ray)`.
    fn depth_gradient(&self, ray: Vec3) -> [Vec3; 3] {
        let [a, b, c] = self.cam;
        let nd = geometry::dot(self.n, ray);
        let x = geometry::scale(ray, self.na / nd);
        let nn = geometry::dot(self.n, self.n);
        let la = geometry::dot(geometry::cross(geometry::sub(c, b), geometry::sub(x, b)), self.n) / nn;
        let lb = geometry::dot(geometry::cross(geometry::sub(a, c), geometry::sub(x, c)), self.n) / nn;
        let lc = 1.0 - la - lb;
        let s = geometry::scale(self.n, 1.0 / nd);
        [geometry::scale(s, la), geometry::scale(s, lb), geometry::scale(s, lc)]
    }
}

/// Twice the signed area of `(p, q, r)`; computed from the same inputs in
/// the same order for a shared edge, so neighbors see exact negations.
#[inline]
fn edge(p: [f64; 2], q: [f64; 2], x: f64, y: f64) -> f64 {
    (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])
}

#[inline]
fn top_left(d: [f64; 2]) -> bool {
    d[1] < 0.0 || (d[1] == 0.0 && d[0] > 0.0)
}

#[inline]
fn covers(w: f64, d: [f64; 2]) -> bool {
    w > 0.0 || (w == 0.0 && top_left(d))
}

/// Z-buffered rasterization of world-space `vertices`. Faces with any
/// vertex at or behind the camera plane are skipped.
pub fn rasterize(vertices: &[Vec3], faces: &[[usize; 3]], camera: &Camera, with_gradients: bool) -> Result<Raster> {
    camera.validate()?;
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
        return Err(Error::Contract(format!("face {f:?} indexes past {} vertices", vertices.len())));
    }
    let (w, h) = (camera.width, camera.height);
    let cam: Vec<Vec3> = vertices.iter().map(|&p| camera.to_camera(p)).collect();
    let proj: Vec<[f64; 2]> = cam
        .iter()
        .map(|&p| if p[2] > 0.0 { camera.project_camera(p) } else { [f64::NAN; 2] })
        .collect();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut owner = vec![u32::MAX; w * h];

    for (fi, face) in faces.iter().enumerate() {
        let tri = Tri::new(face, &cam);
        if tri.cam.iter().any(|p| !(p[2] > 0.0)) {
            continue;
        }
        let [pa, pb, pc] = tri.ids.map(|i| proj[i]);
        let area = edge(pa, pb, pc[0], pc[1]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let s = area.signum();
        let dir = |p: [f64; 2], q: [f64; 2]| [s * (q[0] - p[0]), s * (q[1] - p[1])];
        let (d_ab, d_bc, d_ca) = (dir(pa, pb), dir(pb, pc), dir(pc, pa));

        let xmin = pa[0].min(pb[0]).min(pc[0]);
        let xmax = pa[0].max(pb[0]).max(pc[0]);
        let ymin = pa[1].min(pb[1]).min(pc[1]);
        let ymax = pa[1].max(pb[1]).max(pc[1]);
        let x0 = (xmin - 0.5).ceil().max(0.0);
        let x1 = (xmax - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (ymin - 0.5).ceil().max(0.0);
        let y1 = (ymax - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for yi in y0 as usize..=y1 as usize {
            let py = yi as f64 + 0.5;
            for xi in x0 as usize..=x1 as usize {
                let px = xi as f64 + 0.5;
                let w_c = s * edge(pa, pb, px, py);
                let w_a = s * edge(pb, pc, px, py);
                let w_b = -s * edge(pa, pc, px, py);
                if !(covers(w_c, d_ab) && covers(w_a, d_bc) && covers(w_b, d_ca)) {
                    continue;
                }
                let z = tri.depth(camera.ray(px, py));
                let pix = yi * w + xi;
                if z < zbuf[pix] {
                    zbuf[pix] = z;
                    owner[pix] = fi as u32;
                }
            }
        }
    }

    let rt = geometry::transpose(&camera.rotation);
    let mut pixels = Vec::new();
    let mut face_ids = Vec::new();
    let mut vertex_ids = Vec::new();
    let mut grads = Vec::new();
    for (pix, &fi) in owner.iter().enumerate() {
        if fi == u32::MAX {
            continue;
        }
        pixels.push(pix as u32);
        face_ids.push(fi);
        if with_gradients {
            let tri = Tri::new(&faces[fi as usize], &cam);
            let ray = camera.ray((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
            let g = tri.depth_gradient(ray);
            vertex_ids.push(tri.ids.map(|i| i as u32));
            grads.push(g.map(|gc| geometry::mat_vec(&rt, gc)));
        }
    }
    Ok(Raster {
        map: DepthMap {
            width: w,
            height: h,
            data: zbuf,
        },
        pixels,
        faces: face_ids,
        vertex_ids,
        grads,
    })
}

pub fn render_depth(vertices: &[Vec3], faces: &[[usize; 3]], camera: &Camera) -> Result<DepthMap> {
    Ok(rasterize(vertices, faces, camera, false)?.map)
}

/// A rendered view whose foreground depths are a tape node.
pub struct DepthRender {
    pub raster: Raster,
    /// `[n]` depths of `raster.pixels`, differentiable in the vertices.
    pub depths: Var,
}

/// Renders `vertices` (`[V, 3]` world space) and records the foreground
/// depths on the tape. Face assignment is fixed for the pass.
pub fn render_depth_graph(tape: &mut Tape, vertices: Var, faces: &[[usize; 3]], camera: &Camera) -> Result<DepthRender> {
    let shape = tape.shape(vertices).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::shape("render_depth", format!("vertices {shape:?}")));
    }
    let verts = tape.value(vertices).rows3();
    let raster = rasterize(&verts, faces, camera, tape.requires_grad(vertices))?;
    let value = Tensor::new(
        vec![raster.pixels.len()],
        raster.pixels.iter().map(|&p| raster.map.data[p as usize]).collect(),
    )?;
    let ids: Arc<[[u32; 3]]> = raster.vertex_ids.clone().into();
    let grads: Arc<[[Vec3; 3]]> = raster.grads.clone().into();
    let nv = shape[0];
    let depths = tape.custom(
        "render_depth",
        &[vertices],
        value,
        Box::new(move |g, _| {
            let mut out = vec![0.0; nv * 3];
            for ((gp, ids), gr) in g.data().iter().zip(ids.iter()).zip(grads.iter()) {
                if *gp == 0.0 {
                    continue;
                }
                for (&vi, gv) in ids.iter().zip(gr) {
                    let o = &mut out[3 * vi as usize..3 * vi as usize + 3];
                    o[0] += gp * gv[0];
                    o[1] += gp * gv[1];
                    o[2] += gp * gv[2];
                }
            }
            vec![Some(Tensor::new(vec![nv, 3], out).unwrap())]
        }),
    )?;
    Ok(DepthRender { raster, depths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize) -> Camera {
        // Identity extrinsics: world equals camera space.
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            rotation: geometry::IDENTITY3,
            translation: [0.0; 3],
            width: size,
            height: size,
        }
    }

    /// Möller-Trumbore along the camera ray, returning the hit's `z`.
    fn ray_cast(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
        let e1 = geometry::sub(b, a);
        let e2 = geometry::sub(c, a);
        let p = geometry::cross(d, e2);
        let det = geometry::dot(e1, p);
        if det.abs() < 1e-300 {
            return None;
        }
        let inv = 1.0 / det;
        let s = geometry::sub(o, a);
        let u = geometry::dot(s, p) * inv;
        let q = geometry::cross(s, e1);
        let v = geometry::dot(d, q) * inv;
        if u < -1e-9 || v < -1e-9 || u + v > 1.0 + 1e-9 {
            return None;
        }
        let t = geometry::dot(e2, q) * inv;
        Some(t * d[2])
    }

    #[test]
    fn fronto_parallel_triangle_has_constant_depth() {
        let v = vec![[-3.0, -3.0, 500.0], [3.0, -3.0, 500.0], [0.0, 3.0, 500.0]];
        let r = rasterize(&v, &[[0, 1, 2]], &cam(64), false).unwrap();
        assert!(!r.pixels.is_empty());
        for &p in &r.pixels {
            assert_eq!(r.map.data[p as usize], 500.0);
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let tri = |z: f64| vec![[-3.0 * z / 500.0, -3.0 * z / 500.0, z], [3.0 * z / 500.0, -3.0 * z / 500.0, z], [0.0, 3.0 * z / 500.0, z]];
        let mut v = tri(700.0);
        v.extend(tri(300.0));
        let far_only = rasterize(&v[..3], &[[0, 1, 2]], &cam(64), false).unwrap();
        let both = rasterize(&v, &[[0, 1, 2], [3, 4, 5]], &cam(64), false).unwrap();
        let near_only = rasterize(&v, &[[3, 4, 5]], &cam(64), false).unwrap();
        let mut overlap = 0;
        for i in 0..64 * 64 {
            if far_only.map.is_foreground(i) && near_only.map.is_foreground(i) {
                assert_eq!(both.map.data[i], 300.0);
                overlap += 1;
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn slanted_triangle_matches_ray_cast() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let camera = cam(48);
        for _ in 0..20 {
            let v: Vec<Vec3> = (0..3)
                .map(|_| [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(300.0..700.0)])
                .collect();
            let r = rasterize(&v, &[[0, 1, 2]], &camera, false).unwrap();
            for &p in &r.pixels {
                let (x, y) = ((p as usize % 48) as f64 + 0.5, (p as usize / 48) as f64 + 0.5);
                let z = ray_cast([0.0; 3], camera.ray(x, y), v[0], v[1], v[2]).expect("covered pixel must hit");
                assert!((z - r.map.data[p as usize]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vertex_order_does_not_matter() {
        let v = vec![[-20.0, -10.0, 400.0], [25.0, -15.0, 520.0], [5.0, 30.0, 610.0]];
        let base = render_depth(&v, &[[0, 1, 2]], &cam(40)).unwrap();
        for f in [[1, 2, 0], [2, 1, 0], [0, 2, 1]] {
            let other = render_depth(&v, &[f], &cam(40)).unwrap();
            assert_eq!(base, other);
        }
    }

    #[test]
    fn shared_edge_pixels_covered_once() {
        // A square split along its diagonal, with pixel centers on the diagonal.
        let v = vec![[-10.0, -10.0, 100.0], [10.0, -10.0, 100.0], [10.0, 10.0, 100.0], [-10.0, 10.0, 100.0]];
        let camera = cam(32);
        let a = rasterize(&v, &[[0, 1, 2]], &camera, false).unwrap();
        let b = rasterize(&v, &[[0, 2, 3]], &camera, false).unwrap();
        let both = rasterize(&v, &[[0, 1, 2], [0, 2, 3]], &camera, false).unwrap();
        assert_eq!(a.pixels.len() + b.pixels.len(), both.pixels.len());
        let sa: std::collections::HashSet<_> = a.pixels.iter().collect();
        assert!(b.pixels.iter().all(|p| !sa.contains(p)));
    }

    #[test]
    fn behind_camera_is_background() {
        let v = vec![[-3.0, -3.0, -5.0], [3.0, -3.0, -5.0], [0.0, 3.0, -5.0]];
        let r = rasterize(&v, &[[0, 1, 2]], &cam(16), false).unwrap();
        assert!(r.pixels.is_empty());
        assert_eq!(r.map, DepthMap::background(16, 16));
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let camera = Camera::look_at([30.0, -40.0, -500.0], [0.0; 3], [0.0, 1.0, 0.0], 300.0, 32, 32).unwrap();
        let v = vec![[-20.0, -10.0, 4.0], [25.0, -15.0, -20.0], [5.0, 30.0, 11.0]];
        let r = rasterize(&v, &[[0, 1, 2]], &camera, true).unwrap();
        let h = 1e-5;
        for k in (0..r.pixels.len()).step_by(7) {
            let pix = r.pixels[k] as usize;
            for (vi, g) in r.depth_gradient(k) {
                for c in 0..3 {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[vi][c] += h;
                    vm[vi][c] -= h;
                    let zp = render_depth(&vp, &[[0, 1, 2]], &camera).unwrap().data[pix];
                    let zm = render_depth(&vm, &[[0, 1, 2]], &camera).unwrap().data[pix];
                    if !(zp.is_finite() && zm.is_finite()) {
                        continue;
                    }
                    let fd = (zp - zm) / (2.0 * h);
                    assert!((fd - g[c]).abs() <= 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g[c]);
                }
            }
        }
    }

    #[test]
    fn mask_is_logical_and() {
        let inf = f64::INFINITY;
        let a = DepthMap { width: 2, height: 2, data: vec![1.0, 1.0, inf, inf] };
        let b = DepthMap { width: 2, height: 2, data: vec![1.0, inf, 1.0, inf] };
        assert_eq!(foreground_mask(&a, &b).unwrap(), vec![true, false, false, false]);
        assert!(foreground_mask(&a, &DepthMap::background(1, 4)).is_err());
    }
}
