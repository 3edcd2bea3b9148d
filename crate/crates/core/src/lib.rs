//! Masked diffusion language model decoding lab.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffusion`]: noise schedules, forward corruption, the reverse posterior and the NELBO.
//! - [`backbone`]: a small bidirectional transformer denoiser with hand-written backprop.
//! - [`decode`]: the reverse-process engine (token allocation, position/token selection,
//!   EOS annealing, semi-autoregressive blocks).
//! - [`planner`]: the first-step position scorer, its offline dataset and trainer.
//! - [`tasks`]: synthetic tasks with exact verifiers.
//! - [`lab`]: trajectory diagnostics, pass@k, bootstrap statistics and experiments.
//! - [`io`]: checkpoint container, run configuration and manifests.
//! - [`pipeline`]: the commands behind the `unmask` binary.

pub mod backbone;
pub mod decode;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod lab;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::Vocabulary;
