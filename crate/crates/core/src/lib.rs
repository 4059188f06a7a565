//! Shift-aware sequential recommendation.
//!
//! Each training sample is labelled with how far its target's categories lie
//! from the categories in its history ([`pmsa`]). A sequence encoder
//! ([`backbone`]) feeds a multi-branch head ([`model`]) with one branch per shift
//! level, trained with recommendation, decomposition and matching losses
//! ([`train`]) and evaluated by full ranking ([`eval`]).

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod diffcore;
pub mod eval;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod pmsa;
pub mod store;
pub mod sweep;
pub mod synth;
pub mod train;
