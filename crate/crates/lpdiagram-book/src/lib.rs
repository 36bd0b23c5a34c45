//! The guide's chapters, compiled as doc-tests so that every snippet in
//! `book/src` keeps building against the current API.
//!
//! mdbook cannot resolve workspace dependencies when it runs snippets, so
//! each chapter is pulled in here instead and `cargo test --doc` does the work.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/exact.md")]
pub mod exact {}
#[doc = include_str!("../../../book/src/dickson.md")]
pub mod dickson {}
#[doc = include_str!("../../../book/src/series.md")]
pub mod series {}
#[doc = include_str!("../../../book/src/prepared.md")]
pub mod prepared {}
#[doc = include_str!("../../../book/src/rectilinear.md")]
pub mod rectilinear {}
#[doc = include_str!("../../../book/src/diagrams.md")]
pub mod diagrams {}
#[doc = include_str!("../../../book/src/oracle.md")]
pub mod oracle {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
