//! Gappy POD baseline: POD basis, sensor mapping and GPR in mode space.

mod fuse;
mod gpr;
mod observation;
mod pod;

pub use fuse::*;
pub use gpr::*;
pub use observation::*;
pub use pod::*;
