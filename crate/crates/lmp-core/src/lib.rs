//! Zero-shot motion transfer for joint-attention diffusion denoisers.
//!
//! The crate runs a desk-scale denoiser with two parallel branches. A
//! reference branch replays a known video on a controlled noise trajectory;
//! a target branch generates a new video while three steering mechanisms
//! move the reference's motion across:
//!
//! * foreground selection ([`fbdm`]): text-video attention quadrants pick
//!   out the reference tokens that belong to the moving subject;
//! * reweighted key/value injection ([`rmtm`]): those tokens' keys and
//!   values are appended to the target's attention, keys scaled by a
//!   reweighting factor;
//! * appearance suppression ([`asm`]): a gradient step on the target's
//!   video hidden states pushes down the attention they pay to the
//!   reference prompt's subject words.
//!
//! Everything is seeded and single-threaded; a run's outputs are
//! byte-reproducible from its config.

pub mod asm;
pub mod config;
pub mod error;
pub mod fbdm;
pub mod heatmap;
pub mod latent;
pub mod lmpt;
pub mod math;
pub mod mmdit;
pub mod pipeline;
pub mod rmtm;
pub mod rng;
pub mod schedule;
pub mod selftest;

pub use error::{Error, Result};
