//! Learning with mixed closed-set and open-set label noise.
//!
//! Open-set examples are folded into one extra "meta" class, so noise is
//! described by an extended `(c+1)×c` transition matrix. The pipeline:
//! synthesize a Gaussian mixture and corrupt its labels ([`synthdata`]), train a
//! warmup classifier ([`netcore`]), cluster its representations and pick
//! anchor points ([`clusterkit`]), estimate one or more extended matrices
//! ([`transition`]), train a robust `(c+1)`-output classifier with the
//! importance-reweighted loss ([`robusttrain`]) and score it ([`evalstats`]).

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clusterkit;
pub mod error;
pub mod evalstats;
pub mod io;
pub mod netcore;
pub mod objective;
pub mod rng;
pub mod robusttrain;
pub mod synthdata;
pub mod transition;

pub use error::{Checkpoint, Error, Result};
pub use netcore::{ClassifierParams, TrainConfig};
pub use objective::LossKind;
pub use synthdata::{Dataset, MixtureSpec, NoiseSpec, Split};
pub use transition::{ExtendedTransitionMatrix, Origin, TransitionBundle};
