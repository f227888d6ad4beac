//! Small volatility forecasters trained under SGD, Adam and Muon, with tools
//! to compare what the resulting models compute: response surfaces, Shapley
//! lag attributions, Hessian curvature and portfolio turnover.
//!
//! The guide under `book/` walks through each module; its snippets run as
//! doctests of this crate.

pub mod cli;
pub mod config;
pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod gradengine;
pub mod ingest;
pub mod models;
pub mod optim;
pub mod portfolio;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/optimizers.md")]
    mod optimizers {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/curvature.md")]
    mod curvature {}
    #[doc = include_str!("../../../book/src/portfolios.md")]
    mod portfolios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
