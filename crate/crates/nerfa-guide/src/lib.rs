//! The guide's chapters, compiled as doctests.
//!
//! Each module's documentation is one chapter of the mdbook under
//! `book/`, included verbatim. `cargo test` runs every fenced Rust block
//! exactly as readers see it, so the book cannot drift from the API.
//! One module per chapter keeps test failures attributable to a file.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/rays.md")]
pub mod rays {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}

#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
