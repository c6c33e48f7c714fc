//! Dosimetric QA toolkit for fluence-based treatment plans.
//!
//! The crate covers the full desk-scale evaluation pipeline:
//!
//! - [`volgrid`]: volumetric grids, masks, fluence maps, resampling and
//!   normalization.
//! - [`ingest`]: readers/writers for a minimal DICOM RTDOSE subset, Varian-style
//!   optimal-fluence text files, and the FLXQA tensor container.
//! - [`gamma`]: 3D gamma analysis with a brute-force oracle and an accelerated
//!   pruned search that must agree.
//! - [`dvh`]: cumulative dose-volume histograms and clinical indices.
//! - [`stats`]: voxel-wise agreement metrics and paired significance testing.
//! - [`swinkernel`]: forward-only shifted-window attention primitives and the
//!   mean-squared fluence loss.
//! - [`phantom`]: deterministic synthetic cases with analytically known
//!   outcomes, used as fixtures throughout the test suite.

pub mod dvh;
pub mod gamma;
pub mod ingest;
pub mod numeric;
pub mod phantom;
pub mod stats;
pub mod swinkernel;
pub mod volgrid;

pub use dvh::{DvhCurve, DvhIndices};
pub use gamma::{GammaParams, GammaResult, Normalization};
pub use stats::{PairedTTest, VoxelMetrics};
pub use volgrid::{FluenceMap, FluenceSet, Grid3, Mask3, Unit};
