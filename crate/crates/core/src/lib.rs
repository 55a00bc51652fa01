//! Core library for `maskdet`: a desk-scale, CPU-only object detector that
//! learns duplicate suppression instead of relying on NMS post-processing.
//!
//! The decoder stacks one-to-many supervised refinement layers and finishes
//! with a confidence-sorted, strictly masked self-attention layer that is
//! supervised one-to-one, so the network itself filters redundant candidates.
//!
//! Modules:
//! - [`autodiff`]: minimal reverse-mode AD over dense f64 arrays.
//! - [`geometry`]: boxes, IoU/GIoU, pairwise relative position encodings.
//! - [`matchers`]: Hungarian one-to-one and top-K one-to-many assignment.
//! - [`losses`]: varifocal classification + L1/GIoU regression objectives.
//! - [`mds`]: the masked duplicate-suppressor attention block.
//! - [`detector`]: the end-to-end toy detector.
//! - [`datasynth`]: deterministic synthetic shape scenes and their file format.

pub mod autodiff;
pub mod checkpoint;
pub mod datasynth;
pub mod detector;
pub mod geometry;
pub mod image;
pub mod kvtext;
pub mod losses;
pub mod matchers;
pub mod mds;
pub mod optim;
