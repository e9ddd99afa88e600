//! The guide in `book/` compiled as doc comments, so `cargo test` runs every
//! listing. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tape.md")]
pub mod tape {}
#[doc = include_str!("../../../book/src/combiner.md")]
pub mod combiner {}
#[doc = include_str!("../../../book/src/heads.md")]
pub mod heads {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/ablations.md")]
pub mod ablations {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
