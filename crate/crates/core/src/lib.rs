//! Differentiable parametric hand mesh: kinematics, linear blend skinning,
//! learned correctives, penetration penalties, a depth rasterizer, and a
//! weakly supervised fitting loop driven by 3D joints and depth maps.

pub mod collision;
pub mod correctives;
pub mod diff;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod obj;
pub mod render;
pub mod skinning;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/correctives.md")]
    mod correctives {}
    #[doc = include_str!("../../../book/src/penetration.md")]
    mod penetration {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
