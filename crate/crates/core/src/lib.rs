//! Subnetwork discovery in small frozen networks.
//!
//! Binary masks over the weights (or neurons) of a trained model are
//! optimized with hard-concrete gates or continuous sparsification under an
//! L0 penalty, or computed by magnitude pruning as a baseline. Discovered
//! subnetworks can be evaluated by ablation, compared by overlap and drawn
//! as SVG figures.

pub mod cli;
pub mod discovery;
pub mod masking;
pub mod model;
pub mod seed;
pub mod subnetwork;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod viz;
