//! Controllable video restoration with a diffusion transformer, at desk scale.
//!
//! The crate covers the whole pipeline on procedurally generated toy clips:
//! a reverse-mode [`tensor`] engine, the noise [`schedule`] and sampler, a
//! lossless latent [`codec`], the DiT backbone with ControlNet, control
//! feature projector and dual-branch connectors ([`net`]), synthetic
//! [`degrade`]ation, [`data`] generation, concept [`distill`]ation,
//! [`pipeline`] training stages, tiled [`restore`] inference, [`eval`] metrics and the
//! binary/file formats in [`io`].

pub mod codec;
pub mod data;
pub mod degrade;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod net;
pub mod pipeline;
pub mod restore;
pub mod rng;
pub mod schedule;
pub mod selfcheck;
pub mod tensor;

pub use codec::{LatentVideo, Video};
pub use error::{Error, Result};
pub use rng::SeedStream;
pub use schedule::{NoiseSchedule, TimeStep};
pub use tensor::{Graph, Tensor, TensorError, Var};
