//! Consistent spatio-temporal grids on deforming tubular surface sequences,
//! and the motion analyses built on them.

pub mod error;
pub mod geom;
pub mod io;
pub mod kinematics;
pub mod linalg;
pub mod mesh;
pub mod parameterize;
pub mod pipeline;
pub mod sections;
pub mod shape;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
