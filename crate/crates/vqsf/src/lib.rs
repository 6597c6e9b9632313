//! Sparse vector-quantized implicit shape codes, plus a two-stream
//! autoregressive transformer that completes partial scans by generating
//! code sequences.
//!
//! The crate is self-contained: it ships its own tensor autodiff engine,
//! procedural shape generation, virtual scanning, marching cubes, and an
//! evaluation suite, so the whole pipeline trains and runs on a CPU in
//! minutes at the default desk-scale configuration.
//!
//! The pipeline in one paragraph: a point cloud is encoded into a short
//! sequence of `(cell index, codebook index)` tuples — one tuple per
//! occupied cell of an `R`-resolution grid — by a point encoder with a
//! minimal receptive field followed by vector quantization against a
//! learned codebook. The sequence decodes back to an occupancy field
//! through a small 3D U-Net and an implicit MLP, and a mesh is extracted
//! with marching cubes. For completion, a two-stream causal transformer
//! models `p(complete sequence | partial sequence)` and is sampled with
//! nucleus (top-p) filtering under a coordinate-monotonicity mask.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `vqsf` binary wraps the same library
//! calls behind subcommands (`gen-data`, `train-vqdif`, `train-shapeformer`,
//! `encode`, `complete`, `reconstruct`, `eval`, `grad-check`).

pub mod autodiff;
mod error;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod geometry;
pub mod metrics;
pub mod rng;
pub mod shapeformer;
pub mod vqdif;

pub use error::{Error, Result};
