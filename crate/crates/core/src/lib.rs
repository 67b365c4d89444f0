//! Depth-guided rectification of planar scenes ahead of object detection.
//!
//! The pipeline segments dominant planes from an RGB-D frame, places a virtual
//! camera squarely in front of each plane, warps the image into overlapping
//! fronto-parallel tiles, runs a pluggable detector on the tiles and maps the
//! detections back into the original frame.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod cli;
pub mod dataset;
pub mod detection;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod rectification;
pub mod segmentation;
pub mod synth;
