//! Functional and timing simulator for a near-data-processing DNN accelerator
//! built on 3D-stacked DRAM.
//!
//! Activations are quantized to signed powers of two (a 4-bit exponent), so
//! every product `w * x` in an FC or CONV layer becomes a bit shift of an
//! INT8 weight. A negative exponent discards low-order weight bits, and the
//! accelerator stores each weight bit position in its own DRAM bank so those
//! bits are never fetched. This crate models three machines that run the same
//! workloads:
//!
//! * [`MachineKind::QeiHaN`]: input-stationary dataflow, bit-plane weight
//!   layout, LOG2 activations.
//! * [`MachineKind::NaHiD`]: identical, but with a standard weight layout, so
//!   every fetch moves all 8 bits of each weight.
//! * [`MachineKind::Neurocube`]: output-stationary dataflow, standard layout,
//!   uniform INT8 activations.
//!
//! Module map:
//!
//! * [`model`]: layer and network descriptors, tensor files, synthetic
//!   activation streams.
//! * [`quant`]: uniform INT8 and LOG2 quantizers (software reference and
//!   comparator datapath).
//! * [`analysis`]: exponent histograms and estimated memory savings.
//! * [`mem3d`]: DRAM geometry, weight layouts, beat-exact fetches and the
//!   closed-page timing contract.
//! * [`pe`]: Decode-&-Shift, the ADD array and the SFU.
//! * [`sched`]: the three machines, partitioning, pipelining and reduction.
//! * [`metrics`]: energy model and cross-machine comparisons.

pub mod analysis;
pub mod error;
pub mod mem3d;
pub mod metrics;
pub mod model;
pub mod pe;
pub mod quant;
pub mod sched;

pub use error::{Error, Result};
pub use sched::MachineKind;

/// IEEE 754 binary16, the activation storage format.
pub type Real16 = half::f16;
