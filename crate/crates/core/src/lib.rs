//! Numerical core of a one-stage, anchor-free oriented object detector.
//!
//! Oriented boxes are regressed as a horizontal box plus two orientation offsets
//! `(w, h)`. The crate covers the box transform, per-pixel target assignment,
//! the training losses with analytic gradients, the channel self-attention
//! fusion used by the orientation branch, inference with rotated NMS, and a
//! VOC-style rotated-IoU evaluation over DOTA-format files.

pub mod attention;
pub mod cli;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod targets;
