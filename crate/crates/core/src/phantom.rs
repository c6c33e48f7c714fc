//! Deterministic synthetic cases with analytically known gamma, DVH, and
//! statistics outcomes. Replaces clinical data in the test and acceptance
//! suites, and doubles as the fixture factory for the file-format tests.
//!
//! All fields are evaluated voxel-wise from closed-form rules, so the same
//! spec always produces bit-identical grids (and, through `ingest`,
//! bit-identical files).

use crate::volgrid::{FluenceMap, FluenceSet, Grid3, GridError, Mask3, Unit, BEAM_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Constant dose everywhere; evaluated == reference.
    Uniform,
    /// Linear ramp 0 -> amplitude along x; evaluated == reference.
    RampX,
    /// Isotropic Gaussian centered in the volume; evaluated == reference.
    GaussianBlob,
    /// Reference ramp, evaluated ramp translated by `shift_mm` along x.
    ShiftedPair,
    /// Two-level checkerboard plateau (amplitude and 0.98*amplitude) on a
    /// half-amplitude background; evaluated = scale * reference.
    ScaledPair,
}

/// Deterministic case description; same spec + seed => byte-identical files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub amplitude_gy: f64,
    pub sigma_mm: f64,
    pub shift_mm: f64,
    pub scale: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind) -> Self {
        Self {
            kind,
            dims: (64, 64, 32),
            spacing: (2.0, 2.0, 2.0),
            amplitude_gy: 70.0,
            sigma_mm: 12.0,
            shift_mm: 3.0,
            scale: 1.03,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let (nx, ny, nz) = self.dims;
        if nx < 2 || ny < 1 || nz < 1 {
            return Err(PhantomError::Spec(format!("dims {:?} too small", self.dims)));
        }
        for s in [self.spacing.0, self.spacing.1, self.spacing.2] {
            if !(s.is_finite() && s > 0.0) {
                return Err(PhantomError::Spec(format!("spacing {s} must be > 0")));
            }
        }
        if !(self.amplitude_gy.is_finite() && self.amplitude_gy > 0.0) {
            return Err(PhantomError::Spec("amplitude must be > 0".into()));
        }
        match self.kind {
            PhantomKind::GaussianBlob if !(self.sigma_mm > 0.0) => {
                Err(PhantomError::Spec("sigma must be > 0".into()))
            }
            PhantomKind::ShiftedPair => {
                let extent = self.dims.0 as f64 * self.spacing.0;
                if self.shift_mm.abs() >= extent {
                    Err(PhantomError::Spec(format!(
                        "shift {} mm exceeds x extent {extent} mm",
                        self.shift_mm
                    )))
                } else {
                    Ok(())
                }
            }
            PhantomKind::ScaledPair if !(self.scale.is_finite() && self.scale > 0.0) => {
                Err(PhantomError::Spec("scale must be > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Grid origin placing the volume center at the coordinate origin.
    fn origin(&self) -> (f64, f64, f64) {
        (
            -(self.dims.0 as f64 - 1.0) / 2.0 * self.spacing.0,
            -(self.dims.1 as f64 - 1.0) / 2.0 * self.spacing.1,
            -(self.dims.2 as f64 - 1.0) / 2.0 * self.spacing.2,
        )
    }
}

/// Generated case: dose pair, structure masks, and a nine-beam fluence set.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub reference: Grid3,
    pub evaluated: Grid3,
    pub masks: Vec<Mask3>,
    pub fluences: FluenceSet,
}

const PLATEAU_LOW_FACTOR: f64 = 0.98;
const BACKGROUND_FACTOR: f64 = 0.5;

fn ramp_value(spec: &PhantomSpec, x_mm: f64) -> f64 {
    let x0 = spec.origin().0;
    let extent = (spec.dims.0 - 1) as f64 * spec.spacing.0;
    let t = ((x_mm - x0) / extent).clamp(0.0, 1.0);
    spec.amplitude_gy * t
}

fn gaussian_value(spec: &PhantomSpec, x: f64, y: f64, z: f64) -> f64 {
    let r2 = x * x + y * y + z * z;
    spec.amplitude_gy * (-r2 / (2.0 * spec.sigma_mm * spec.sigma_mm)).exp()
}

/// Plateau field for the scaled pair: a centered box spanning half of each
/// axis holds a voxel-parity checkerboard of amplitude and 0.98*amplitude;
/// everything else sits at half amplitude. The three levels are separated by
/// wide dose gaps, so scaled-pair gamma outcomes depend only on the dose
/// term and can be enumerated exactly.
fn plateau_value(spec: &PhantomSpec, ix: usize, iy: usize, iz: usize) -> f64 {
    let (nx, ny, nz) = spec.dims;
    let inside = |i: usize, n: usize| {
        let lo = n / 4;
        let hi = n - n / 4;
        i >= lo && i < hi
    };
    if inside(ix, nx) && inside(iy, ny) && inside(iz, nz) {
        if (ix + iy + iz) % 2 == 0 {
            spec.amplitude_gy
        } else {
            spec.amplitude_gy * PLATEAU_LOW_FACTOR
        }
    } else {
        spec.amplitude_gy * BACKGROUND_FACTOR
    }
}

fn reference_values(spec: &PhantomSpec) -> Vec<f64> {
    let (nx, ny, nz) = spec.dims;
    let origin = spec.origin();
    let mut values = Vec::with_capacity(nx * ny * nz);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let x = origin.0 + ix as f64 * spec.spacing.0;
                let y = origin.1 + iy as f64 * spec.spacing.1;
                let z = origin.2 + iz as f64 * spec.spacing.2;
                let v = match spec.kind {
                    PhantomKind::Uniform => spec.amplitude_gy,
                    PhantomKind::RampX | PhantomKind::ShiftedPair => ramp_value(spec, x),
                    PhantomKind::GaussianBlob => gaussian_value(spec, x, y, z),
                    PhantomKind::ScaledPair => plateau_value(spec, ix, iy, iz),
                };
                values.push(v);
            }
        }
    }
    values
}

fn evaluated_values(spec: &PhantomSpec, reference: &[f64]) -> Vec<f64> {
    let (nx, ny, nz) = spec.dims;
    let origin = spec.origin();
    match spec.kind {
        PhantomKind::ShiftedPair => {
            let mut values = Vec::with_capacity(reference.len());
            for _iz in 0..nz {
                for _iy in 0..ny {
                    for ix in 0..nx {
                        let x = origin.0 + ix as f64 * spec.spacing.0;
                        values.push(ramp_value(spec, x - spec.shift_mm));
                    }
                }
            }
            values
        }
        PhantomKind::ScaledPair => reference.iter().map(|v| v * spec.scale).collect(),
        _ => reference.to_vec(),
    }
}

fn sphere_mask(grid: &Grid3, name: &str, center: (f64, f64, f64), radius: f64) -> Mask3 {
    let (nx, ny, nz) = grid.dims();
    let mut values = Vec::with_capacity(grid.len());
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y, z) = grid.voxel_center(ix, iy, iz);
                let d2 = (x - center.0).powi(2) + (y - center.1).powi(2) + (z - center.2).powi(2);
                values.push(d2 <= radius * radius);
            }
        }
    }
    Mask3::new(grid, name, values).expect("sphere mask matches grid")
}

fn box_mask(grid: &Grid3, name: &str, lo: (f64, f64, f64), hi: (f64, f64, f64)) -> Mask3 {
    let (nx, ny, nz) = grid.dims();
    let mut values = Vec::with_capacity(grid.len());
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y, z) = grid.voxel_center(ix, iy, iz);
                values.push(
                    x >= lo.0 && x <= hi.0 && y >= lo.1 && y <= hi.1 && z >= lo.2 && z <= hi.2,
                );
            }
        }
    }
    Mask3::new(grid, name, values).expect("box mask matches grid")
}

fn beam_fluences(spec: &PhantomSpec) -> FluenceSet {
    let (rows, cols) = (64, 64);
    let spacing = 2.5;
    let origin = -(cols as f64 - 1.0) / 2.0 * spacing;
    let sigma = 20.0;
    let maps = (1..=BEAM_COUNT as u8)
        .map(|beam| {
            let gantry = f64::from(beam - 1) * 40.0;
            let theta = gantry.to_radians();
            let (cu, cv) = (15.0 * theta.cos(), 15.0 * theta.sin());
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let u = origin + c as f64 * spacing;
                    let v = origin + r as f64 * spacing;
                    let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                    values.push((-d2 / (2.0 * sigma * sigma)).exp());
                }
            }
            FluenceMap::new(
                beam,
                gantry,
                rows,
                cols,
                (spacing, spacing),
                (origin, origin),
                values,
            )
            .expect("fluence invariants hold")
        })
        .collect();
    FluenceSet::new(maps).expect("nine beams")
}

/// Generates the full case: reference/evaluated dose grids, PTV + OAR + BODY
/// masks, and the nine-beam fluence set.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomCase, PhantomError> {
    spec.validate()?;
    let origin = spec.origin();
    let reference_vals = reference_values(spec);
    let evaluated_vals = evaluated_values(spec, &reference_vals);
    let reference = Grid3::new(spec.dims, spec.spacing, origin, Unit::Gy, reference_vals)?;
    let evaluated = Grid3::new(spec.dims, spec.spacing, origin, Unit::Gy, evaluated_vals)?;

    let half_extent = (
        spec.dims.0 as f64 * spec.spacing.0 / 2.0,
        spec.dims.1 as f64 * spec.spacing.1 / 2.0,
        spec.dims.2 as f64 * spec.spacing.2 / 2.0,
    );
    let min_half = half_extent.0.min(half_extent.1).min(half_extent.2);
    let ptv = sphere_mask(&reference, "PTV", (0.0, 0.0, 0.0), 0.5 * min_half);
    let oar = box_mask(
        &reference,
        "Rectum",
        (0.55 * half_extent.0, -0.3 * half_extent.1, -0.3 * half_extent.2),
        (0.95 * half_extent.0, 0.3 * half_extent.1, 0.3 * half_extent.2),
    );
    let body = Mask3::new(&reference, "BODY", vec![true; reference.len()])?;

    Ok(PhantomCase {
        reference,
        evaluated,
        masks: vec![ptv, oar, body],
        fluences: beam_fluences(spec),
    })
}

/// Closed-form expectations for specs that have them; `None` marks
/// oracle-only quantities that tests must take from the brute-force path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedOutcomes {
    /// Global-normalization 3%/3mm pass rate.
    pub gamma_pass_rate_pct: Option<f64>,
    /// Scaled pairs fail exactly where reference dose exceeds this (Gy).
    pub gamma_fail_above_gy: Option<f64>,
    /// D95 over the full volume (BODY mask).
    pub d95_gy: Option<f64>,
    /// V at half amplitude over the full volume, percent.
    pub v_half_amplitude_pct: Option<f64>,
    /// Mean percentage dose difference (eval vs ref, normalized by ref max).
    pub mean_delta_dose_pct: Option<f64>,
}

/// Predicts gamma/DVH/statistics outcomes for the analytic specs, using the
/// canonical 3%/3mm global criteria for the gamma entries.
pub fn expected_outcomes(spec: &PhantomSpec) -> Result<ExpectedOutcomes, PhantomError> {
    spec.validate()?;
    let a = spec.amplitude_gy;
    Ok(match spec.kind {
        PhantomKind::Uniform => ExpectedOutcomes {
            gamma_pass_rate_pct: Some(100.0),
            gamma_fail_above_gy: None,
            d95_gy: Some(a),
            v_half_amplitude_pct: Some(100.0),
            mean_delta_dose_pct: Some(0.0),
        },
        PhantomKind::RampX => ExpectedOutcomes {
            gamma_pass_rate_pct: Some(100.0),
            gamma_fail_above_gy: None,
            d95_gy: Some(0.05 * a),
            v_half_amplitude_pct: Some(50.0),
            mean_delta_dose_pct: Some(0.0),
        },
        PhantomKind::GaussianBlob => ExpectedOutcomes {
            gamma_pass_rate_pct: Some(100.0), // evaluated == reference
            gamma_fail_above_gy: None,
            d95_gy: None,
            v_half_amplitude_pct: None,
            mean_delta_dose_pct: Some(0.0),
        },
        PhantomKind::ShiftedPair => ExpectedOutcomes {
            // brute-force oracle territory: interior behavior depends on the
            // shift against the DTA; no closed form is published here
            gamma_pass_rate_pct: None,
            gamma_fail_above_gy: None,
            d95_gy: Some(0.05 * a),
            v_half_amplitude_pct: Some(50.0),
            mean_delta_dose_pct: None,
        },
        PhantomKind::ScaledPair => {
            let reference = reference_values(spec);
            let n = reference.len() as f64;
            let mean: f64 = reference.iter().sum::<f64>() / n;
            let delta = (spec.scale - 1.0) * mean / a * 100.0;
            // Dose term alone decides each voxel: gamma fails exactly where
            // |scale - 1| * D > 3% of Dmax. The plateau/background levels are
            // far from the cut, so the enumeration is float-robust.
            let excess = (spec.scale - 1.0).abs();
            if excess * 100.0 <= 3.0 {
                ExpectedOutcomes {
                    gamma_pass_rate_pct: Some(100.0),
                    gamma_fail_above_gy: None,
                    d95_gy: None,
                    v_half_amplitude_pct: None,
                    mean_delta_dose_pct: Some(delta),
                }
            } else {
                let cut = 0.03 / excess * a;
                let failing = reference.iter().filter(|&&v| v > cut).count();
                ExpectedOutcomes {
                    gamma_pass_rate_pct: Some(100.0 * (1.0 - failing as f64 / n)),
                    gamma_fail_above_gy: Some(cut),
                    d95_gy: None,
                    v_half_amplitude_pct: None,
                    mean_delta_dose_pct: Some(delta),
                }
            }
        }
    })
}

/// Smooth pseudo-random dose field: a positive floor plus a few seeded
/// Gaussian bumps. Deterministic per seed; used as a fixture generator.
pub fn random_grid(dims: (usize, usize, usize), spacing: (f64, f64, f64), seed: u64) -> Grid3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = (
        -(dims.0 as f64 - 1.0) / 2.0 * spacing.0,
        -(dims.1 as f64 - 1.0) / 2.0 * spacing.1,
        -(dims.2 as f64 - 1.0) / 2.0 * spacing.2,
    );
    let extent = (
        dims.0 as f64 * spacing.0,
        dims.1 as f64 * spacing.1,
        dims.2 as f64 * spacing.2,
    );
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.35..0.35) * extent.0,
                rng.gen_range(-0.35..0.35) * extent.1,
                rng.gen_range(-0.35..0.35) * extent.2,
                rng.gen_range(10.0..60.0),                        // amplitude
                rng.gen_range(0.1..0.3) * extent.0.min(extent.1), // sigma
            )
        })
        .collect();
    Grid3::from_fn(dims, spacing, origin, Unit::Gy, |x, y, z| {
        let mut v = 2.0;
        for &(cx, cy, cz, amp, sigma) in &bumps {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2);
            v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
        v
    })
    .expect("random field is finite")
}

/// Companion pair for oracle-equivalence tests: the evaluated grid is the
/// reference with seeded multiplicative and additive perturbations.
pub fn random_pair(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    seed: u64,
) -> (Grid3, Grid3) {
    let reference = random_grid(dims, spacing, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let max = reference.max_value();
    let values = reference
        .values()
        .iter()
        .map(|&v| {
            let gain = 1.0 + rng.gen_range(-0.04..0.04);
            let offset = rng.gen_range(-0.015..0.015) * max;
            (v * gain + offset).max(0.0)
        })
        .collect();
    let evaluated = Grid3::new(
        reference.dims(),
        reference.spacing(),
        reference.origin(),
        Unit::Gy,
        values,
    )
    .expect("perturbed field is finite");
    (reference, evaluated)
}
