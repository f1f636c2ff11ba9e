//! Deformable dense blocks, self-paced learning and LUNA16-style FROC scoring
//! for a desk-scale two-stage lung-nodule detector on synthetic phantoms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blocks;
pub mod conv;
pub mod deform;
pub mod error;
pub mod froc;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod spl;
pub mod tensor;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
