//! Doc-test registration for the guide in `book/`: every fenced Rust
//! block in the chapters compiles and runs with the crate's test suite,
//! so the book cannot drift from the code.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
mod autodiff {}

#[doc = include_str!("../../../book/src/saliency.md")]
mod saliency {}

#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
