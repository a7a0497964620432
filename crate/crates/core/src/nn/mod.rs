//! Minimal epsilon-prediction MLP with hand-written reverse-mode gradients,
//! an Adam optimizer and flat parameter sets.

mod adam;
mod net;
mod params;

pub use adam::{adam_step, AdamState};
pub use net::{time_embedding, Arch, Batch, ForwardCache, ScoreNet};
pub use params::{paramset_axpy, ParamSet};
