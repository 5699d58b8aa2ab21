//! Multi-exit classifiers trained across a domain shift.
//!
//! A shared trunk of `K` dense blocks feeds a softmax head and a domain
//! discriminator after every block. Training runs in two steps. The warm-up
//! fits the labeled source domain while the discriminators are confused
//! through gradient reversal. Self-training then admits pseudo-labeled target
//! samples under class-balanced caps and routes each one to a random exit.
//! The trained network is evaluated either exit by exit or with
//! confidence-gated early exit under a compute budget measured in MACs.
//!
//! ```
//! use exitwise::cascade::{CascadeConfig, MultiExitNet};
//!
//! let net = MultiExitNet::new(CascadeConfig::default(), 7).unwrap();
//! let out = net.forward_to_exit(&[0.5, -0.25], 2).unwrap();
//! assert_eq!(out.probs.len(), 2);
//! assert_eq!(out.macs, net.cost_model().cumulative_inference_macs(2).unwrap());
//! ```

pub mod adversarial;
pub mod cascade;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod seed;
pub mod selftrain;
pub mod trainloop;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cascade.md")]
    mod cascade {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
