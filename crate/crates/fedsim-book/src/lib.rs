//! Compiles and runs every code block in the guide under `book/`.
//!
//! Each chapter is attached verbatim as the documentation of an empty
//! module, so `cargo test --doc` executes the guide's examples and a stale
//! snippet fails the build instead of rotting in prose.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/parameters.md")]
pub mod parameters {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/strategies.md")]
pub mod strategies {}

#[doc = include_str!("../../../book/src/privacy.md")]
pub mod privacy {}

#[doc = include_str!("../../../book/src/orchestration.md")]
pub mod orchestration {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
