//! ModuleFormer at desk scale: stick-breaking mixture-of-attention, sparse
//! mixture-of-experts feed-forward layers, load balancing and concentration
//! objectives, and the module lifecycle (pretrain, finetune, insert, prune).

pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod lifecycle;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
