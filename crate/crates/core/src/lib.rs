//! Prompt-learning toolkit for blind quality assessment of AI-generated images.
//!
//! The toolkit adapts a frozen dual-encoder backbone (vision + text towers
//! projecting into a joint space) to two scoring tasks by injecting learnable
//! prompt tokens into every transformer layer of both towers:
//!
//! - a **perceptual quality** task scored against the antonym text pair
//!   "Good photo." / "Bad photo.", and
//! - an auxiliary **text-to-image alignment** task scored against
//!   "Aligned photo." / "Misaligned photo.".
//!
//! Per-layer affine couplers condition the perceptual task's visual prompts
//! on the alignment task's visual prompts, so consistency knowledge learned
//! by the auxiliary task steers the main task. The backbone itself never
//! trains; only prompts and couplers do.
//!
//! Everything runs at desk scale on a seeded toy backbone, so training,
//! gradient checks, and the full evaluation protocol are reproducible in
//! seconds. Real pretrained weights can be imported through the checkpoint
//! container in [`backbone`].

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod mat;
pub mod metrics;
pub mod prompted;
pub mod scoring;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
