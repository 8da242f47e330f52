//! Contrastive domain-adaptive single-shot detection on a small reverse-mode
//! differentiation substrate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is a pure function of its inputs and an explicit
//! RNG; file formats, configuration files and the training harness live in the
//! companion `dacdet` crate.
//!
//! Module map:
//!
//! - [`tensor`]: shapes, the computation [`tensor::Graph`], and every
//!   differentiable primitive the model and losses use.
//! - [`synth`]: procedural clean/degraded paired scene generation.
//! - [`augment`]: crop/scale, mix-up and mosaic with box-consistent labels.
//! - [`model`]: CSP-style backbone, grid detection head, projection head and
//!   prediction decoding.
//! - [`losses`]: target assignment, detection losses and the domain adaptive
//!   contrastive loss.
//! - [`evalmap`]: IoU matching, per-class AP and mAP@0.5.
//! - [`optim`]: Adam and SGD with momentum.
//! - [`train`]: one optimisation step over a paired batch.
//! - [`gradcheck`]: finite-difference verification of every parameter gradient.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod boxes;
pub mod evalmap;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use boxes::{BBox, ParasiteClass, NUM_CLASSES};
pub use image::Image;
pub use scalar::Scalar;
