//! Semi-supervised infrared small-target segmentation at desk scale.
//!
//! The crate trains a frozen-encoder teacher whose capacity lives in a
//! mixture-of-experts adapter of four white-box operators (anisotropic
//! diffusion, a learnable filter bank, hypernetwork modulation, deformable
//! sampling), generates pseudo-labels with it, and distills them into a
//! lightweight convolutional student. Everything runs on synthetic
//! infrared scenes so the full two-stage pipeline is testable on a CPU.
//!
//! The library is organized around runnable examples — each major
//! capability has one:
//!
//! ```text
//! cargo run --release --example generate_dataset   # synthetic IR scenes -> PGM + manifest
//! cargo run --release --example gradient_checks    # finite-difference audit of every operator
//! cargo run --release --example diffusion_demo     # the PIMDO expert smoothing a noisy scene
//! cargo run --release --example train_teacher      # stage one: adapter + decoder on 10% labels
//! cargo run --release --example two_stage          # full pipeline: teacher -> pseudo-labels -> student
//! cargo run --release --example ablate_insertion   # adapter insertion-layer ablation
//! ```
//!
//! The same capabilities are scriptable through the thin `irdistill` binary
//! (`gen-data`, `split`, `train-teacher`, `gen-pseudo`, `train-student`,
//! `eval`, `gradcheck`, `ablate`).

pub mod adapter;
pub mod backbone;
pub mod datagen;
pub mod error;
pub mod experts;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
