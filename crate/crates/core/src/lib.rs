//! Radiance fields decomposed into M soft semantic layers.
//!
//! Every point of space carries one (density, color) pair per semantic class. Rendering
//! sums the class densities and density-weights their colors; the share of absorbed light
//! owned by each class gives soft segmentation masks, and compositing one class on its own
//! gives a layer image. The scene lives on a dense voxel grid with hand-written gradients.

pub mod cli;
pub mod compositing;
pub mod editing;
pub mod error;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
