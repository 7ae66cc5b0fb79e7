use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};

/// Pinhole camera. World points map to camera space as `x_c = R x_w + t`;
/// camera space looks down `+z` with image `x` right and `y` down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub rotation: Mat3,
    #[serde(rename = "t")]
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` pointing towards the
    /// top of the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = geometry::normalize(geometry::sub(target, eye));
        let down = geometry::sub(geometry::scale(z, geometry::dot(up, z)), up);
        if geometry::norm(z) == 0.0 || geometry::norm(down) < 1e-9 {
            return Err(Error::Degenerate("look_at: up is parallel to the view direction".into()));
        }
        let y = geometry::normalize(down);
        let x = geometry::cross(y, z);
        let rotation = [x, y, z];
        let translation = geometry::scale(geometry::mat_vec(&rotation, eye), -1.0);
        Ok(Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Data(format!("camera focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("camera image size is zero".into()));
        }
        let rtr = geometry::mat_mul(&geometry::transpose(&self.rotation), &self.rotation);
        let off = rtr
            .iter()
            .flatten()
            .zip(geometry::IDENTITY3.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if off > 1e-9 || geometry::det(&self.rotation) < 0.0 {
            return Err(Error::Data(format!("camera rotation is not a proper rotation (|RtR - I| = {off:e})")));
        }
        let finite = [self.cx, self.cy]
            .iter()
            .chain(&self.translation)
            .chain(self.rotation.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("camera has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera-space point to pixel coordinates.
    pub fn project_camera(&self, pc: Vec3) -> [f64; 2] {
        [self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy]
    }

    /// Camera-space direction through pixel position `(px, py)`, with unit `z`.
    pub fn ray(&self, px: f64, py: f64) -> Vec3 {
        [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0]
    }

    pub fn center(&self) -> Vec3 {
        let rt = geometry::transpose(&self.rotation);
        geometry::scale(geometry::mat_vec(&rt, self.translation), -1.0)
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    let cams: Vec<Camera> = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("line {} column {}", e.line(), e.column()), e))?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cameras)?)?;
    Ok(())
}
