//! Multi-modal, multi-label contrastive representation learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`losses`]: NT-Xent, cross-modal InfoNCE, multi-label supervised
//!   contrastive and BCE losses with analytic gradients.
//! * [`model`]: per-modality encoders, projection heads, concatenation
//!   fusion and the linear multi-label head, with hand-written backprop.
//! * [`data`]: synthetic co-registered datasets, manifests, augmentation
//!   and stratified low-label subsampling.
//! * [`training`]: loss recipes, sequential and joint optimisation, and the
//!   multi-seed protocol.
//! * [`metrics`]: macro/micro P/R/F1, Hamming loss, Brier score and the
//!   class-similarity matrix.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;
