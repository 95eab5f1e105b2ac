//! Multi-size object detection for high-resolution frames.
//!
//! Small objects vanish when a 5472-pixel frame is shrunk to a detector's
//! input size. This crate splits the work by object size: large classes are
//! detected on the resized frame, small classes on the cells of a fixed grid,
//! and the two sets are fused. Detectors are pluggable ([`backend`]), so the
//! whole flow, including AP/mAP evaluation and Monte Carlo cross-validation,
//! runs without a neural network.
//!
//! | module | contents |
//! |---|---|
//! | [`geometry`] | boxes, IoU, clipping, NMS |
//! | [`dataset`] | VOC XML ingestion, class registry, statistics |
//! | [`tiling`] | grid layout, annotation projection, detection remapping |
//! | [`backend`] | detector trait, oracle / jitter / replay / external process |
//! | [`pipeline`] | class routing, dual-branch run, fusion |
//! | [`evaluation`] | matching, PR curves, AP, mAP, aggregation |
//! | [`splits`] | seeded splits and cross-validation |
//! | [`wire`] | JSON schemas for the protocol and detection documents |
//!
//! ```
//! use mspad::backend::BackendDescriptor;
//! use mspad::evaluation::{evaluate, EvalConfig};
//! use mspad::pipeline::{run_dataset, FailurePolicy, Mode, PipelineConfig};
//!
//! let index = mspad::synthetic::plad_like(4, 1);
//! let oracle = BackendDescriptor::Oracle.build(&index.registry)?;
//! let config = PipelineConfig::plad_default(&index.registry, Mode::Mspad)?;
//! let run = run_dataset(&index, &config, oracle.as_ref(), oracle.as_ref(), FailurePolicy::FailFast)?;
//! let report = evaluate(&index, &run.scored(), &EvalConfig::default())?;
//! assert_eq!(report.map, 1.0);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod backend;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod splits;
pub mod synthetic;
pub mod tiling;
pub mod wire;

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    mod tiling {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cross-validation.md")]
    mod cross_validation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
