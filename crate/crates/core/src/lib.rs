//! Multi-modal navigation instructions.
//!
//! Landmark phrases in a text instruction are grounded to images seen along
//! the path, then interleaved back into the instruction under one of several
//! prompt settings. The crate also evaluates navigation trajectories and
//! phrase extraction against gold annotations.

pub mod alignment;
pub mod dataset_eval;
pub mod instruction;
pub mod io;
pub mod nav;
pub mod pipeline;
