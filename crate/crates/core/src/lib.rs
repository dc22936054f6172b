//! Random attention prior kernels (RAPK) for untrained self-attention.
//!
//! The crate treats a randomly initialized Transformer encoder as a sequence
//! smoother. It provides the closed-form expected kernel `C0·11ᵀ + C1·XXᵀ`,
//! Monte Carlo validation of that kernel, the smoothers it is compared against,
//! transition diagnostics (WTE, LSII) and a synthetic hypnogram test-bed.
//!
//! Data-parallel loops (Monte Carlo trials, windows, seeds, sweep points) run on
//! rayon when the `parallel` feature is enabled and fall back to plain
//! iterators otherwise. Every reduction has a fixed order, so results do not
//! depend on the worker count.

pub mod attention;
pub mod error;
pub mod harness;
pub mod init;
pub mod kernel_lab;
pub mod metrics;
pub mod par;
pub mod rapk;
pub mod rng;
pub mod smoothers;
pub mod synth;

mod sum;

pub use attention::{AttentionMatrix, Encoder, EncoderConfig, FeatureSequence};
pub use error::{Error, Result};
pub use init::{InitKind, InitScheme, ProjectionSet};
pub use rapk::RapkResult;
pub use smoothers::{ProbSequence, SmootherKind, StageSequence};
