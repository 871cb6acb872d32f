// The guide chapters under book/ carry runnable snippets. Including them
// as doc comments here makes `cargo test --doc` compile and run every
// snippet, so the book cannot drift from the API.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/data-generation.md")]
mod data_generation {}

#[doc = include_str!("../../../book/src/stage1-regression.md")]
mod stage1_regression {}

#[doc = include_str!("../../../book/src/stage2-causal-model.md")]
mod stage2_causal_model {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli_guide {}

#[doc = include_str!("../../../book/src/reproducing.md")]
mod reproducing {}
