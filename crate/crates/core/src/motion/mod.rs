//! Macroblock motion estimation and hindsight window assembly.

pub mod frame;
pub mod gop;
pub mod search;
pub mod synth;

pub use frame::{Frame, MACROBLOCK};
pub use gop::{build_gop, future_fields, stack_fields, Gop, MotionHistory};
pub use search::{
    diamond_search, estimate_motion_field, exhaustive_block_match, BlockMatch, MotionField,
    MotionVector, SearchMethod, SearchParams, DEFAULT_SEARCH_RANGE,
};
