//! Code listings from the guide in `book/`, compiled and run by
//! `cargo test --doc`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../../book/src/layout.md")]
pub mod layout {}
#[doc = include_str!("../../../book/src/timing.md")]
pub mod timing {}
#[doc = include_str!("../../../book/src/dataflow.md")]
pub mod dataflow {}
#[doc = include_str!("../../../book/src/energy.md")]
pub mod energy {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
