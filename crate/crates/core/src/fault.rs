//! Simulator faults: failure modes of the simulated machine itself, as
//! opposed to memory-safety violations detected by the runtime checks.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Access touched bytes outside every mapped region.
    Unmapped { addr: u64, len: u64 },
    /// Deallocation of an address the allocator does not track.
    InvalidFree { addr: u64 },
    /// A load or store used an address word with nonzero tag bits. On real
    /// hardware this is a non-canonical pointer fault; here it also proves
    /// an elided check would have been needed.
    TaggedAddress { addr: u64 },
    /// Stack region exhausted by `alloca`.
    StackOverflow { requested: u64 },
    /// Interpreter step budget exceeded.
    StepLimit { limit: u64 },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::Unmapped { addr, len } => {
                write!(f, "unmapped access of {len} byte(s) at {addr:#x}")
            }
            Fault::InvalidFree { addr } => write!(f, "invalid free of {addr:#x}"),
            Fault::TaggedAddress { addr } => {
                write!(f, "dereference of non-canonical address {addr:#x}")
            }
            Fault::StackOverflow { requested } => {
                write!(f, "stack overflow allocating {requested} byte(s)")
            }
            Fault::StepLimit { limit } => write!(f, "step limit of {limit} exceeded"),
        }
    }
}

impl std::error::Error for Fault {}

impl Fault {
    /// Short machine-readable name, used in structured reports.
    pub fn name(&self) -> &'static str {
        match self {
            Fault::Unmapped { .. } => "Unmapped",
            Fault::InvalidFree { .. } => "InvalidFree",
            Fault::TaggedAddress { .. } => "TaggedAddress",
            Fault::StackOverflow { .. } => "StackOverflow",
            Fault::StepLimit { .. } => "StepLimit",
        }
    }
}
