//! Variational inference for nonlinear latent dynamics.
//!
//! The posterior over a latent path is a Laplace approximation around the
//! fixed point of a structured parent density that shares the generative
//! evolution term. Every linear-algebra step runs on block-tridiagonal
//! precisions, so inference is linear in the sequence length.

pub mod blocktri;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod generative;
pub mod intractability;
pub mod io;
pub mod lorenz;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod posterior;
pub mod recognition;
pub mod training;

pub use blocktri::{BlockCholesky, BlockTriSym};
pub use dynamics::{EvolutionInit, EvolutionModel};
pub use error::{Result, VindError};
pub use posterior::{FpiDiagnostics, FpiMode, LaplacePosterior};
pub use recognition::{Encoding, RecognitionNet};
pub use generative::{ObservationKind, ObservationModel};
pub use model::{ModelConfig, ParamSection, VindModel};
pub use dataset::{split, TrialSet, TrialSetMeta};
pub use metrics::{evaluate, EvalReport, EvalRow, EvalSettings};
