//! The book's code blocks, compiled and run by `cargo test --doc`.
//!
//! mdbook cannot test snippets that depend on workspace crates, so each
//! chapter is pulled in as the docs of an empty module.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/basis.md")]
pub mod chapter1 {}
#[doc = include_str!("../../../book/src/norms.md")]
pub mod chapter2 {}
#[doc = include_str!("../../../book/src/potential.md")]
pub mod chapter3 {}
#[doc = include_str!("../../../book/src/divisors.md")]
pub mod chapter4 {}
#[doc = include_str!("../../../book/src/iteration.md")]
pub mod chapter5 {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod chapter6 {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod chapter7 {}
