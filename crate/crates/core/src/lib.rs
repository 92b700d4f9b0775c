//! Character-level language modeling lab.
//!
//! Recurrent models (vanilla RNN, LSTM, GRU) trained with truncated BPTT and
//! RMSProp, finite-horizon baselines (interpolated modified Kneser-Ney n-grams
//! and a windowed feed-forward network), and the analysis tooling used to
//! interpret them: gate saturation, cell traces, model agreement, error
//! overlap, long-range bracket case studies and the staged oracle error
//! breakdown.

pub mod analysis;
pub mod cells;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod kneser_ney;
pub mod numerics;
pub mod oracles;
pub mod records;
pub mod trainer;

pub use error::{Error, Result};
