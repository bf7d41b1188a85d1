//! Real-time multi-camera vehicle tracking.
//!
//! Detections from each camera are filtered, tracked per camera with a
//! bottom-centre DeepSORT variant, summarized into one embedding per
//! concluded track and associated across cameras by traffic-rule gated
//! similarity and camera-exclusive hierarchical clustering.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod geo;
pub mod ingest;
pub mod reid;
pub mod sct;
pub mod mct;
pub mod losses;
pub mod metrics;
pub mod simkit;
pub mod pipeline;
