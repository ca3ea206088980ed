//! Desk-scale spiking transformer with top-down feedback, plus the numeric
//! toolkit used to audit its statistical and gradient-flow properties.
//!
//! The crate has three layers:
//!
//! * **Engine** — [`tensor`] is a small reverse-mode autodiff tape over dense
//!   row-major tensors, with gradient checking in
//!   [`tensor::gradcheck`]. [`neuron`] adds leaky integrate-and-fire
//!   dynamics with a rectangular surrogate gradient.
//! * **Model** — [`attention`] implements the spiking attention family
//!   (spiking self-attention, spike-driven variants, Q-K token/channel
//!   attention, and the clamped spatial attention map used by the feedback
//!   path). [`topdown`] wires segments of time steps into a feedback chain
//!   (control modules fuse the feedback into attention inputs; processing
//!   modules generate the feedback), and [`model`] assembles the full
//!   network with its multi-stage loss, training loop, synthetic datasets
//!   and checkpointing.
//! * **Analysis** — [`analysis`] verifies variance bounds, moment
//!   approximations, temporal gradient sensitivities, mutual-information
//!   structure and the synaptic-operation energy model, numerically and
//!   independently of the layers above.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! | example | shows |
//! |---|---|
//! | `lif_dynamics` | membrane traces, reset behaviour, surrogate window |
//! | `attention_zoo` | every attention variant on the same spike train |
//! | `feedback_chain` | segment chaining and what feedback changes |
//! | `train_temporal_xor` | end-to-end training where feedback is required |
//! | `variance_bounds` | clamp variance bound vs. Monte Carlo |
//! | `moment_ratios` | spatial-map moment approximations vs. sampling |
//! | `epsilon_probe` | temporal gradient sensitivity, with/without feedback |
//! | `mutual_information` | across-time MI matrices and the SVG heatmap |
//! | `energy_ledger` | synaptic-operation counts and the energy estimate |
//!
//! The thin `tdsnn` binary exposes the same flows as `train`, `analyze` and
//! `compare` subcommands driven by a key-value config file; see
//! `docs/formats.md` for file formats.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod report;
pub mod topdown;

pub mod tensor;

pub use error::{Error, Result};
