//! The guide under `book/`, compiled as doc-tests so its snippets keep working.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/pandora.md")]
pub mod pandora {}
#[doc = include_str!("../../../book/src/constrained.md")]
pub mod constrained {}
#[doc = include_str!("../../../book/src/multi.md")]
pub mod multi {}
#[doc = include_str!("../../../book/src/markov.md")]
pub mod markov {}
#[doc = include_str!("../../../book/src/grdip.md")]
pub mod grdip {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
