//! Layout-conditioned image synthesis with instance-sensitive, layout-aware
//! normalization, on a small self-contained autodiff core.

pub mod data;
pub mod eval;
pub mod isla;
pub mod layout;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod service;
pub mod tensor;
