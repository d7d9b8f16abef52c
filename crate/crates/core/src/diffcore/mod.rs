//! Reverse-mode autodiff: parameter groups, the op tape, Adam, and the
//! finite-difference gradient oracle.

pub mod adam;
pub mod fd;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use fd::{all_coords, finite_difference_check};
pub use params::{GradientBuffer, GroupId, ParamGroup, ParamStore};
pub use tape::{NodeId, Tape};
