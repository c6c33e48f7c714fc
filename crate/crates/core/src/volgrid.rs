//! Volumetric and planar data types shared by the whole pipeline.
//!
//! A [`Grid3`] is a scalar field on a regular grid with physical geometry:
//! voxel counts, spacing in mm, and the position of the *center* of voxel
//! (0,0,0) in mm (matching DICOM ImagePositionPatient semantics). Values are
//! stored x-fastest row-major, so `index = x + nx*(y + ny*z)`. All types are
//! immutable after construction and safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical interpretation of grid values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Gy,
    Hu,
    Unitless,
    Gamma,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Gy => "Gy",
            Unit::Hu => "HU",
            Unit::Unitless => "unitless",
            Unit::Gamma => "gamma",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        match s {
            "Gy" => Some(Unit::Gy),
            "HU" => Some(Unit::Hu),
            "unitless" => Some(Unit::Unitless),
            "gamma" => Some(Unit::Gamma),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("point ({0}, {1}, {2}) mm is outside the grid bounding box")]
    OutOfBounds(f64, f64, f64),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("degenerate normalization range: lo {lo} >= hi {hi}")]
    DegenerateRange { lo: f64, hi: f64 },
}

/// Volumetric scalar field with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    origin: (f64, f64, f64),
    unit: Unit,
    values: Vec<f64>,
}

impl Grid3 {
    /// Builds a grid, enforcing the type invariants: dims all >= 1, spacing
    /// all > 0, finite geometry, values length nx*ny*nz, all values finite.
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        origin: (f64, f64, f64),
        unit: Unit,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(GridError::Invalid(format!("zero dimension in {dims:?}")));
        }
        for s in [spacing.0, spacing.1, spacing.2] {
            if !(s.is_finite() && s > 0.0) {
                return Err(GridError::Invalid(format!("non-positive spacing {s}")));
            }
        }
        for o in [origin.0, origin.1, origin.2] {
            if !o.is_finite() {
                return Err(GridError::Invalid(format!("non-finite origin {o}")));
            }
        }
        let expected = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| GridError::Invalid("dimension overflow".into()))?;
        if values.len() != expected {
            return Err(GridError::Invalid(format!(
                "values length {} != {}*{}*{}",
                values.len(),
                nx,
                ny,
                nz
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(GridError::Invalid(format!("non-finite value {v}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            unit,
            values,
        })
    }

    /// Builds a grid by evaluating `f` at every voxel center.
    pub fn from_fn(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        origin: (f64, f64, f64),
        unit: Unit,
        mut f: impl FnMut(f64, f64, f64) -> f64,
    ) -> Result<Self, GridError> {
        let (nx, ny, nz) = dims;
        let mut values = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let px = origin.0 + x as f64 * spacing.0;
                    let py = origin.1 + y as f64 * spacing.1;
                    let pz = origin.2 + z as f64 * spacing.2;
                    values.push(f(px, py, pz));
                }
            }
        }
        Self::new(dims, spacing, origin, unit, values)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64, f64) {
        self.origin
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat index of voxel (x, y, z); x-fastest layout.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn value_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Physical position (mm) of the center of voxel (x, y, z).
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> (f64, f64, f64) {
        (
            self.origin.0 + x as f64 * self.spacing.0,
            self.origin.1 + y as f64 * self.spacing.1,
            self.origin.2 + z as f64 * self.spacing.2,
        )
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when dims, spacing, and origin are exactly equal. Gamma, DVH,
    /// and voxel statistics require this before comparing two grids;
    /// resample first otherwise.
    pub fn same_geometry(&self, other: &Grid3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    /// Returns a copy with the unit tag replaced; values untouched.
    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    /// Trilinear interpolation of the eight voxels surrounding `point_mm`.
    ///
    /// The sampling domain is the box spanned by the outermost voxel
    /// centers; a query at a voxel center returns that voxel's stored value
    /// exactly. Points outside the box yield [`GridError::OutOfBounds`] and
    /// the caller decides whether to skip or clamp.
    pub fn trilinear_sample(&self, point_mm: (f64, f64, f64)) -> Result<f64, GridError> {
        let oob = || GridError::OutOfBounds(point_mm.0, point_mm.1, point_mm.2);
        let (u, v, w) = (
            (point_mm.0 - self.origin.0) / self.spacing.0,
            (point_mm.1 - self.origin.1) / self.spacing.1,
            (point_mm.2 - self.origin.2) / self.spacing.2,
        );
        let (ix, fx) = cell_coord(u, self.dims.0).ok_or_else(oob)?;
        let (iy, fy) = cell_coord(v, self.dims.1).ok_or_else(oob)?;
        let (iz, fz) = cell_coord(w, self.dims.2).ok_or_else(oob)?;
        Ok(self.interp_cell(ix, iy, iz, fx, fy, fz))
    }

    #[inline]
    fn interp_cell(&self, ix: usize, iy: usize, iz: usize, fx: f64, fy: f64, fz: f64) -> f64 {
        let xp = (ix + 1).min(self.dims.0 - 1);
        let yp = (iy + 1).min(self.dims.1 - 1);
        let zp = (iz + 1).min(self.dims.2 - 1);
        let c000 = self.value_at(ix, iy, iz);
        let c100 = self.value_at(xp, iy, iz);
        let c010 = self.value_at(ix, yp, iz);
        let c110 = self.value_at(xp, yp, iz);
        let c001 = self.value_at(ix, iy, zp);
        let c101 = self.value_at(xp, iy, zp);
        let c011 = self.value_at(ix, yp, zp);
        let c111 = self.value_at(xp, yp, zp);
        let c00 = c000 * (1.0 - fx) + c100 * fx;
        let c10 = c010 * (1.0 - fx) + c110 * fx;
        let c01 = c001 * (1.0 - fx) + c101 * fx;
        let c11 = c011 * (1.0 - fx) + c111 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }
}

/// Splits a continuous voxel coordinate into (cell index, fraction), or None
/// when it falls outside [0, n-1]. Degenerate axes (n == 1) accept only the
/// single center, with a small tolerance for rounding in mm -> index math.
#[inline]
fn cell_coord(u: f64, n: usize) -> Option<(usize, f64)> {
    if n == 1 {
        return if u.abs() <= 1e-9 { Some((0, 0.0)) } else { None };
    }
    let max = (n - 1) as f64;
    if !(0.0..=max).contains(&u) {
        return None;
    }
    let mut i = u.floor() as usize;
    if i >= n - 1 {
        i = n - 2; // u == n-1 lands in the last cell with fraction 1
    }
    Some((i, u - i as f64))
}

/// In-plane bilinear resampling to `target` = (rows, cols); `rows` is the new
/// y count and `cols` the new x count. The physical in-plane extent (voxel
/// edge to voxel edge) is preserved, so spacing rescales by nx/cols and
/// ny/rows. Sample points in the half-voxel margin clamp to the edge voxels.
pub fn resample_plane(grid: &Grid3, target: (usize, usize)) -> Result<Grid3, GridError> {
    let (rows, cols) = target;
    if rows == 0 || cols == 0 {
        return Err(GridError::Invalid("resample target must be >= 1".into()));
    }
    let (nx, ny, nz) = grid.dims();
    if (ny, nx) == (rows, cols) {
        return Ok(grid.clone());
    }
    let (sx, sy, sz) = grid.spacing();
    let new_sx = sx * nx as f64 / cols as f64;
    let new_sy = sy * ny as f64 / rows as f64;
    // Edge of the grid stays fixed; origin is the center of the first new voxel.
    let new_ox = (grid.origin().0 - sx / 2.0) + new_sx / 2.0;
    let new_oy = (grid.origin().1 - sy / 2.0) + new_sy / 2.0;

    let mut values = Vec::with_capacity(cols * rows * nz);
    for z in 0..nz {
        for y in 0..rows {
            // Continuous source coordinates of the new voxel centers.
            let v = ((new_oy + y as f64 * new_sy) - grid.origin().1) / sy;
            let v = v.clamp(0.0, (ny - 1) as f64);
            let (iy, fy) = cell_coord(v, ny).expect("clamped in range");
            for x in 0..cols {
                let u = ((new_ox + x as f64 * new_sx) - grid.origin().0) / sx;
                let u = u.clamp(0.0, (nx - 1) as f64);
                let (ix, fx) = cell_coord(u, nx).expect("clamped in range");
                values.push(grid.interp_cell(ix, iy, z, fx, fy, 0.0));
            }
        }
    }
    Grid3::new(
        (cols, rows, nz),
        (new_sx, new_sy, sz),
        (new_ox, new_oy, grid.origin().2),
        grid.unit(),
        values,
    )
}

/// Min-max normalization to [0, 1] against a caller-supplied cohort range.
/// Values outside [lo, hi] clamp, since downstream consumers assume [0, 1].
pub fn minmax_normalize(grid: &Grid3, lo: f64, hi: f64) -> Result<Grid3, GridError> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(GridError::DegenerateRange { lo, hi });
    }
    let span = hi - lo;
    let values = grid
        .values()
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    Grid3::new(
        grid.dims(),
        grid.spacing(),
        grid.origin(),
        Unit::Unitless,
        values,
    )
}

/// Binary structure mask on the same lattice as a companion [`Grid3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    origin: (f64, f64, f64),
    name: String,
    values: Vec<bool>,
}

impl Mask3 {
    pub fn new(companion: &Grid3, name: impl Into<String>, values: Vec<bool>) -> Result<Self, GridError> {
        let name = name.into();
        if name.is_empty() {
            return Err(GridError::Invalid("empty structure name".into()));
        }
        if values.len() != companion.len() {
            return Err(GridError::Invalid(format!(
                "mask length {} != grid length {}",
                values.len(),
                companion.len()
            )));
        }
        Ok(Self {
            dims: companion.dims(),
            spacing: companion.spacing(),
            origin: companion.origin(),
            name,
            values,
        })
    }

    /// Rebuilds a mask from raw geometry, e.g. when reading from a container.
    pub fn from_parts(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        origin: (f64, f64, f64),
        name: impl Into<String>,
        values: Vec<bool>,
    ) -> Result<Self, GridError> {
        // Borrow Grid3's geometry validation via a zero-filled companion.
        let companion = Grid3::new(dims, spacing, origin, Unit::Unitless, vec![
            0.0;
            dims.0 * dims.1 * dims.2
        ])?;
        Self::new(&companion, name, values)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64, f64) {
        self.origin
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn matches_geometry(&self, grid: &Grid3) -> bool {
        self.dims == grid.dims() && self.spacing == grid.spacing() && self.origin == grid.origin()
    }
}

/// Collapses per-structure masks into a single label field: 0 background,
/// i+1 for the i-th mask, later masks overwriting earlier ones where they
/// overlap. Companion for pipelines that feed one merged contour channel.
pub fn merge_masks(companion: &Grid3, masks: &[Mask3]) -> Result<Grid3, GridError> {
    let mut labels = vec![0.0; companion.len()];
    for (i, mask) in masks.iter().enumerate() {
        if !mask.matches_geometry(companion) {
            return Err(GridError::GeometryMismatch(format!(
                "mask '{}' does not match the companion grid",
                mask.name()
            )));
        }
        for (l, &inside) in labels.iter_mut().zip(mask.values()) {
            if inside {
                *l = (i + 1) as f64;
            }
        }
    }
    Grid3::new(
        companion.dims(),
        companion.spacing(),
        companion.origin(),
        Unit::Unitless,
        labels,
    )
}

/// One beam's planar intensity distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceMap {
    pub beam_index: u8,
    pub gantry_angle: f64,
    rows: usize,
    cols: usize,
    spacing: (f64, f64),
    origin: (f64, f64),
    values: Vec<f64>,
}

impl FluenceMap {
    pub fn new(
        beam_index: u8,
        gantry_angle: f64,
        rows: usize,
        cols: usize,
        spacing: (f64, f64),
        origin: (f64, f64),
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        if !(1..=9).contains(&beam_index) {
            return Err(GridError::Invalid(format!(
                "beam index {beam_index} outside 1..9"
            )));
        }
        if !gantry_angle.is_finite() {
            return Err(GridError::Invalid("non-finite gantry angle".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(GridError::Invalid("empty fluence plane".into()));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite())
        {
            return Err(GridError::Invalid("non-positive fluence spacing".into()));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(GridError::Invalid("non-finite fluence origin".into()));
        }
        if values.len() != rows * cols {
            return Err(GridError::Invalid(format!(
                "fluence values length {} != {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(GridError::Invalid(format!(
                "fluence values must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self {
            beam_index,
            gantry_angle,
            rows,
            cols,
            spacing,
            origin,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Exactly nine per-beam fluence maps, ordered by beam index.
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceSet {
    maps: Vec<FluenceMap>,
}

pub const BEAM_COUNT: usize = 9;

impl FluenceSet {
    pub fn new(mut maps: Vec<FluenceMap>) -> Result<Self, GridError> {
        if maps.len() != BEAM_COUNT {
            return Err(GridError::Invalid(format!(
                "fluence set needs {BEAM_COUNT} beams, got {}",
                maps.len()
            )));
        }
        maps.sort_by_key(|m| m.beam_index);
        for (i, m) in maps.iter().enumerate() {
            if m.beam_index as usize != i + 1 {
                return Err(GridError::Invalid(format!(
                    "beam indices must be exactly 1..=9, found {}",
                    m.beam_index
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[FluenceMap] {
        &self.maps
    }

    pub fn beam(&self, beam_index: u8) -> Option<&FluenceMap> {
        self.maps.get(beam_index.checked_sub(1)? as usize)
    }
}

/// Shape contract for the model tensors: two input channels (CT, contour),
/// nine output channels (one per beam), 128x128 in-plane after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientTensorSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    pub plane: (usize, usize),
    pub n_slices: usize,
}

impl PatientTensorSpec {
    pub fn new(n_slices: usize) -> Result<Self, GridError> {
        if n_slices == 0 {
            return Err(GridError::Invalid("n_slices must be >= 1".into()));
        }
        Ok(Self {
            channels_in: 2,
            channels_out: BEAM_COUNT,
            plane: (128, 128),
            n_slices,
        })
    }

    /// (C, D, H, W) expected of the input tensor.
    pub fn input_shape(&self) -> (usize, usize, usize, usize) {
        (self.channels_in, self.n_slices, self.plane.0, self.plane.1)
    }

    /// (C, D, H, W) expected of the predicted fluence tensor.
    pub fn output_shape(&self) -> (usize, usize, usize, usize) {
        (self.channels_out, self.n_slices, self.plane.0, self.plane.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_grid() -> Grid3 {
        // 4x4 in-plane linear ramp along x, one slice.
        let mut values = Vec::new();
        for _y in 0..4 {
            for x in 0..4 {
                values.push(x as f64);
            }
        }
        Grid3::new((4, 4, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, values).unwrap()
    }

    #[test]
    fn grid_invariants_rejected() {
        assert!(Grid3::new((0, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, vec![]).is_err());
        assert!(
            Grid3::new((1, 1, 1), (0.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, vec![1.0]).is_err()
        );
        assert!(
            Grid3::new((1, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, vec![f64::NAN])
                .is_err()
        );
        assert!(
            Grid3::new((2, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, vec![1.0]).is_err()
        );
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let g = ramp_grid();
        let r = resample_plane(&g, (4, 4)).unwrap();
        assert_eq!(g.values(), r.values());
        assert_eq!(g.spacing(), r.spacing());
        assert_eq!(g.origin(), r.origin());
    }

    #[test]
    fn resample_constant_stays_constant() {
        let g = Grid3::new(
            (5, 3, 2),
            (1.5, 2.0, 3.0),
            (-1.0, 0.5, 2.0),
            Unit::Gy,
            vec![4.25; 30],
        )
        .unwrap();
        for target in [(7, 9), (2, 2), (1, 11)] {
            let r = resample_plane(&g, target).unwrap();
            assert!(r.values().iter().all(|&v| v == 4.25));
            assert_eq!(r.dims(), (target.1, target.0, 2));
        }
    }

    #[test]
    fn resample_downsample_matches_hand_interpolation() {
        // 4x4 ramp along x, downsampled to 2x2. New voxel centers sit at
        // source continuous coordinates 0.5 and 2.5 in both axes, so the
        // expected values are the ramp evaluated there: 0.5 and 2.5.
        let g = ramp_grid();
        let r = resample_plane(&g, (2, 2)).unwrap();
        assert_eq!(r.dims(), (2, 2, 1));
        assert_eq!(r.spacing(), (2.0, 2.0, 1.0));
        let expected = [0.5, 2.5, 0.5, 2.5];
        for (got, want) in r.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Physical extent preserved: edges at -0.5 and 3.5 in both axes.
        assert!((r.origin().0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_preserves_extent_when_upsampling() {
        let g = ramp_grid();
        let r = resample_plane(&g, (8, 8)).unwrap();
        let (nx, ny, _) = r.dims();
        assert_eq!((nx, ny), (8, 8));
        let extent = r.spacing().0 * nx as f64;
        assert!((extent - 4.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_endpoints_and_clamping() {
        let g = Grid3::new(
            (3, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![-2.0, 0.0, 5.0],
        )
        .unwrap();
        let n = minmax_normalize(&g, 0.0, 4.0).unwrap();
        assert_eq!(n.values(), &[0.0, 0.0, 1.0]);
        assert_eq!(n.unit(), Unit::Unitless);

        let two = Grid3::new(
            (2, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![1.0, 3.0],
        )
        .unwrap();
        let n = minmax_normalize(&two, 1.0, 3.0).unwrap();
        assert_eq!(n.values(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_midpoint() {
        let g = Grid3::new(
            (2, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![2.0, 2.0],
        )
        .unwrap();
        let n = minmax_normalize(&g, 1.5, 2.5).unwrap();
        assert_eq!(n.values(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_degenerate_range_rejected() {
        let g = ramp_grid();
        assert!(matches!(
            minmax_normalize(&g, 2.0, 2.0),
            Err(GridError::DegenerateRange { .. })
        ));
    }

    #[test]
    fn trilinear_center_and_midpoint() {
        let g = Grid3::new(
            (2, 1, 1),
            (10.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![10.0, 20.0],
        )
        .unwrap();
        assert_eq!(g.trilinear_sample((0.0, 0.0, 0.0)).unwrap(), 10.0);
        assert_eq!(g.trilinear_sample((10.0, 0.0, 0.0)).unwrap(), 20.0);
        assert!((g.trilinear_sample((5.0, 0.0, 0.0)).unwrap() - 15.0).abs() < 1e-12);
        assert!(g.trilinear_sample((10.1, 0.0, 0.0)).is_err());
        assert!(g.trilinear_sample((0.0, 0.5, 0.0)).is_err());
    }

    #[test]
    fn trilinear_exact_for_affine_fields() {
        // a*x + b*y + c*z + d is reproduced exactly by trilinear interpolation.
        let (a, b, c, d) = (0.75, -1.25, 2.5, 4.0);
        let g = Grid3::from_fn(
            (5, 4, 3),
            (2.0, 1.5, 3.0),
            (-4.0, 1.0, 0.5),
            Unit::Gy,
            |x, y, z| a * x + b * y + c * z + d,
        )
        .unwrap();
        let points = [
            (-4.0, 1.0, 0.5),
            (-3.1, 2.2, 1.7),
            (0.99, 4.3, 5.49),
            (3.9999, 5.4999, 6.4999),
        ];
        for p in points {
            let want = a * p.0 + b * p.1 + c * p.2 + d;
            let got = g.trilinear_sample(p).unwrap();
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "{got} vs {want} at {p:?}"
            );
        }
    }

    #[test]
    fn mask_requires_companion_geometry() {
        let g = ramp_grid();
        assert!(Mask3::new(&g, "PTV", vec![true; 16]).is_ok());
        assert!(Mask3::new(&g, "", vec![true; 16]).is_err());
        assert!(Mask3::new(&g, "PTV", vec![true; 15]).is_err());
    }

    #[test]
    fn merge_masks_painter_order() {
        let g = ramp_grid();
        let mut a = vec![false; 16];
        a[0] = true;
        a[1] = true;
        let mut b = vec![false; 16];
        b[1] = true;
        let merged = merge_masks(
            &g,
            &[
                Mask3::new(&g, "A", a).unwrap(),
                Mask3::new(&g, "B", b).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(merged.values()[0], 1.0);
        assert_eq!(merged.values()[1], 2.0); // later mask wins
        assert_eq!(merged.values()[2], 0.0);
    }

    #[test]
    fn fluence_set_requires_nine_distinct_beams() {
        let map = |i| {
            FluenceMap::new(i, 0.0, 2, 2, (1.0, 1.0), (0.0, 0.0), vec![0.0; 4]).unwrap()
        };
        let maps: Vec<_> = (1..=9).map(map).collect();
        assert!(FluenceSet::new(maps).is_ok());
        let mut dup: Vec<_> = (1..=8).map(map).collect();
        dup.push(map(8));
        assert!(FluenceSet::new(dup).is_err());
    }

    #[test]
    fn tensor_spec_shapes() {
        let spec = PatientTensorSpec::new(40).unwrap();
        assert_eq!(spec.input_shape(), (2, 40, 128, 128));
        assert_eq!(spec.output_shape(), (9, 40, 128, 128));
    }

    proptest! {
        #[test]
        fn normalize_range_and_monotone(values in proptest::collection::vec(-50.0f64..150.0, 8), lo in -10.0f64..10.0, span in 0.5f64..100.0) {
            let g = Grid3::new((8, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, values.clone()).unwrap();
            let n = minmax_normalize(&g, lo, lo + span).unwrap();
            for &v in n.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for (i, a) in values.iter().enumerate() {
                for (j, b) in values.iter().enumerate() {
                    if a <= b {
                        prop_assert!(n.values()[i] <= n.values()[j]);
                    }
                }
            }
        }

        #[test]
        fn trilinear_interior_within_value_hull(seedval in 0.0f64..1.0) {
            let g = Grid3::from_fn((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, |x, y, z| {
                (x * 12.9898 + y * 78.233 + z * 37.719 + seedval * 10.0).sin().abs()
            }).unwrap();
            let p = (0.3 + seedval * 2.0, 1.1, 2.2);
            let v = g.trilinear_sample(p).unwrap();
            prop_assert!(v >= g.min_value() - 1e-12 && v <= g.max_value() + 1e-12);
        }
    }
}
