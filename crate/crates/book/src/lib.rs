//! Compiles the guide in `book/src` so its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/plant.md")]
pub mod plant {}

#[doc = include_str!("../../../book/src/authority.md")]
pub mod authority {}

#[doc = include_str!("../../../book/src/governor.md")]
pub mod governor {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[doc = include_str!("../../../book/src/buffer.md")]
pub mod buffer {}

#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
