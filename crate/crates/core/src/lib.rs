//! Prompted small-object segmentation for aerial imagery.
//!
//! The pipeline magnifies each annotated instance with a region-adaptive
//! square crop, prompts a compact ViT encoder/decoder with the instance's
//! horizontal envelope box plus three points along its oriented long axis,
//! and refines coarse mask/edge predictions through a three-scale residual
//! cascade with a learned mask-quality score.
//!
//! Modules follow the processing order:
//! - [`geometry`]: crop sizing and placement, oriented-box algebra, prompt
//!   points, crop-space transforms
//! - [`tensor`]: minimal reverse-mode autodiff over dense row-major tensors
//! - [`nn`]: layers and parameter storage built on the tape
//! - [`encoder`]: tiny ViT backbone with positional-embedding interpolation
//! - [`prompting`]: frequency encoding of box/point prompts into tokens
//! - [`decoder`]: two-way transformer, parallel mask/edge heads, progressive
//!   refinement, quality head
//! - [`model`]: full forward pass plus checkpoint save/load
//! - [`training`]: edge targets, multi-scale loss, AdamW with cosine schedule
//! - [`evaluation`]: instance IoU / boundary IoU and report aggregation
//! - [`data`]: synthetic dataset generation, annotation I/O, patch assembly
//! - [`pipeline`]: annotate/infer workflows over whole datasets
//! - [`archive`]: the tensor-archive checkpoint file format

pub mod archive;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{
    clamp_window, crop_window, horizontal_envelope, magnification, oriented_prompts, region_size,
    CropWindow, HBox, OrientedBox, Point, PromptPoints, RamParams,
};
