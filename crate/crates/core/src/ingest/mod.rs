//! Bit-exact readers and writers for the three on-disk formats the pipeline
//! touches: a minimal DICOM RTDOSE subset (Explicit VR Little Endian only),
//! Varian-style optimal-fluence text files, and the FLXQA tensor container.
//!
//! All parsers operate on in-memory buffers, never read past declared
//! lengths, cap allocations by the declared dimensions, and fail with a
//! structured [`IngestError`] rather than panicking on malformed input.

mod container;
mod fluence_text;
mod rtdose;

pub use container::{
    parse_container, write_fluence_container, write_grid_container, write_mask_container,
    ContainerDtype, ContainerPayload, CONTAINER_MAGIC,
};
pub use fluence_text::{parse_optimal_fluence, write_optimal_fluence};
pub use rtdose::{parse_rtdose, write_rtdose, RtDoseMeta};

use thiserror::Error;

/// Hard cap on voxel counts declared by any header; rejects allocation bombs.
pub const MAX_DECLARED_VOXELS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum IngestError {
    /// Structurally invalid input; names the missing or offending element.
    #[error("parse error: {0}")]
    Parse(String),
    /// Recognized but outside the supported subset.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Internally inconsistent input (declared sizes vs. actual payload).
    #[error("corrupt input: {0}")]
    Corrupt(String),
    /// Input is not an FLXQA container at all.
    #[error("not an FLXQA container")]
    NotContainer,
    /// A value violates a domain-type invariant after decoding.
    #[error("invalid decoded data: {0}")]
    Invalid(#[from] crate::volgrid::GridError),
}
