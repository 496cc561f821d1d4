//! Doc tests for the guide in `book/src`. Each chapter is a module, so
//! `cargo test -p relgen-book-tests` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/diffusion.md")]
pub mod diffusion {}

#[doc = include_str!("../../../book/src/vocabulary.md")]
pub mod vocabulary {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/matching.md")]
pub mod matching {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/world.md")]
pub mod world {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/checks.md")]
pub mod checks {}
