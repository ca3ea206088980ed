//! Dense-tensor reverse-mode autodiff engine.
//!
//! Layout is always row-major with rank between 1 and [`shape::MAX_RANK`].
//! The canonical activation layout elsewhere in the crate is
//! `[time, batch, token, channel]`, with an optional head axis spliced in by
//! the attention code.

pub mod gradcheck;
pub mod param;
pub mod shape;
pub mod tape;

pub use param::{Init, ParamId, ParamStore, TapeBinding};
pub use shape::Shape;
pub use tape::{BnBatchStats, BnMode, FiringStat, NodeId, OpCount, Precision, Tape};
