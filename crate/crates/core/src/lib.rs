//! Deterministic engine that recolors the photo inside a graphic design from a
//! natural-language instruction.

pub mod color;
pub mod design;
pub mod eval;
pub mod instruction;
pub mod palette;
pub mod pipeline;
pub mod predict;
pub mod recolor;
pub mod region;
pub mod synth;
