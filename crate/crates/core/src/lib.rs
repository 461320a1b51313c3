//! Pixel-space policy alignment for discrete-token autoregressive image
//! generators, at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`) and carries the whole numeric
//! pipeline: a dense f64 tensor kernel with reverse-mode differentiation,
//! a procedural class-conditional image source, a micro VQ tokenizer, a micro
//! causal transformer over token sequences, the teacher-forced group-relative
//! alignment trainer with its two baselines, and evaluation routines with
//! brute-force oracles for enumerable token spaces.
//!
//! File formats, configuration and the command-line host live in the `vapi`
//! companion crate.

#![no_std]
#![deny(rust_2018_idioms)]
// Guards like `!(x >= 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod argen;
pub mod error;
pub mod eval;
pub mod image;
pub mod num;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod vapi;

pub use error::{Error, Result};
pub use image::Image;
pub use num::{Graph, ParamStore, SeededRng, Tensor, Var};
pub use tokenizer::TokenSeq;
