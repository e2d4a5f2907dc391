//! Every guide chapter and the README, included so `cargo test` runs their
//! code blocks.

#[doc = include_str!("../../../README.md")]
pub mod readme {}
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors-and-layers.md")]
pub mod tensors_and_layers {}
#[doc = include_str!("../../../book/src/autoencoder.md")]
pub mod autoencoder {}
#[doc = include_str!("../../../book/src/ward.md")]
pub mod ward {}
#[doc = include_str!("../../../book/src/embedded-clustering.md")]
pub mod embedded_clustering {}
#[doc = include_str!("../../../book/src/ifl.md")]
pub mod ifl {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
