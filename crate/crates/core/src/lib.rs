//! Core algorithms for a multi-modal face anti-spoofing toolkit.
//!
//! Everything in this crate is `no_std` (with `alloc`) and fully
//! deterministic: rank-pooled dynamic images, a small reverse-mode
//! autodiff graph with the network builders on top of it, presentation
//! attack detection metrics, evaluation protocol splits, image
//! augmentation, and a checkpoint byte format. File IO, the dataset
//! generator, and the CLI live in the companion `psmmlab` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod psmm;
pub mod rankpool;
pub mod sdnet;
pub mod seed;
pub mod tensor;
