#![doc = include_str!("../../book/src/introduction.md")]

#[doc = include_str!("../../book/src/datasets.md")]
pub mod datasets {}

#[doc = include_str!("../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../book/src/indicators.md")]
pub mod indicators {}

#[doc = include_str!("../../book/src/finetune.md")]
pub mod finetune {}

#[doc = include_str!("../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../book/src/theory.md")]
pub mod theory {}

#[doc = include_str!("../../book/src/harness.md")]
pub mod harness {}
