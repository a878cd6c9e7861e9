//! Dense `f32` matrices, a reverse-mode tape over them, AdamW, and the
//! finite-difference oracle used to check the tape.

mod adamw;
mod finite_diff;
mod matrix;
mod tape;

pub use adamw::{AdamW, AdamWConfig};
pub use finite_diff::{finite_diff_at, finite_diff_gradient};
pub use matrix::Matrix;
pub use tape::{Gradients, Segment, Tape, Var};
