//! Contrastive error manifolds for attention heads.
//!
//! Pipeline: learn a low-rank error subspace per head from contrastively
//! labeled activation traces ([`manifold`]), score how far each decode step
//! drifts into it ([`detector`]), and remove the drifted component when a
//! calibrated threshold is crossed ([`steering`]). [`decoder`] provides a
//! small deterministic transformer with planted drift to exercise all of it,
//! and [`harness`] wires the stages together.

pub mod decoder;
pub mod detector;
pub mod error;
pub mod harness;
pub mod manifold;
pub mod steering;
pub mod trace;

pub use error::{Error, Result};
pub use trace::HeadId;
