//! Layer-wise external attention for color anomaly detection.
//!
//! A colorizer trained on normal images turns every image into a CIEDE2000
//! anomaly map. An attention network reads the map and rescales the
//! features of a detection network at one attention point. Everything runs
//! on a small reverse-mode autodiff engine over NHWC tensors.
//!
//! The book under `book/` walks through each module; its listings are
//! compiled as doc-tests of this crate.

pub mod anomap;
pub mod colorlab;
pub mod error;
pub mod harness;
pub mod lea;
pub mod netspec;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/color.md")]
    mod color {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/anomaly-maps.md")]
    mod anomaly_maps {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
