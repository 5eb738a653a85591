//! Attribute labels, the visible/thermal attribute classifier pair and the
//! prompt table that turns labels into conditioning tokens.

mod classifier;
mod labels;
mod prompt;

pub use classifier::*;
pub use labels::*;
pub use prompt::*;
