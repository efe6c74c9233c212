//! Simulated electromagnetic side-channel attribute extraction.
//!
//! The crate turns simulated neural-network inferences into EM-like
//! traces ([`leaksim`]), trains a small 1D-CNN on labelled traces
//! ([`nnet`]) and uses it to recover the class of unseen inputs
//! ([`pipeline`]). [`assess`] and [`attribution`] locate the leaking
//! operations with Welch's t-test and Grad-CAM.

pub mod assess;
pub mod attribution;
pub mod leaksim;
pub mod nnet;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod trace;
