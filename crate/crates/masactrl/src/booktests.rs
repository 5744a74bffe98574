//! Hooks the guide chapters into `cargo test --doc` so every code snippet
//! in the book compiles and runs against the current crate.

#[doc = include_str!("../../../book/src/intro.md")]
mod intro_chapter {}

#[doc = include_str!("../../../book/src/schedule.md")]
mod schedule_chapter {}

#[doc = include_str!("../../../book/src/denoiser.md")]
mod denoiser_chapter {}

#[doc = include_str!("../../../book/src/attention-control.md")]
mod attention_chapter {}

#[doc = include_str!("../../../book/src/pipeline.md")]
mod pipeline_chapter {}

#[doc = include_str!("../../../book/src/training.md")]
mod training_chapter {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli_chapter {}

#[doc = include_str!("../../../book/src/formats.md")]
mod formats_chapter {}
