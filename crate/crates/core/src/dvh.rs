//! Cumulative dose-volume histograms and the clinical indices derived from
//! them (D95, D98, V_x, min/max/mean structure dose).
//!
//! Production code uses the binned cumulative curve; [`sort_oracle`] holds
//! the exact sort-based reference used by the test suite. The two agree
//! within one bin width by construction: the binned curve is exact at bin
//! edges and only the interpolation between edges is approximate.

use crate::numeric::KahanSum;
use crate::volgrid::{Grid3, Mask3};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_BIN_WIDTH_GY: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DvhError {
    #[error("structure '{0}' contains no voxels")]
    EmptyStructure(String),
    #[error("dose grid and mask geometry differ")]
    GeometryMismatch,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Cumulative DVH: fraction of structure volume receiving at least each
/// edge dose. Monotone non-increasing, 100% at zero dose, 0% past the max.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvhCurve {
    pub structure: String,
    pub bin_width: f64,
    pub bin_edges: Vec<f64>,
    pub cum_volume_pct: Vec<f64>,
    pub voxel_count: usize,
}

/// Clinical index block for one structure, shaped like a table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvhIndices {
    pub structure: String,
    pub d95_gy: f64,
    pub d98_gy: f64,
    /// (dose level Gy, % volume receiving at least that dose).
    pub v_levels: Vec<(f64, f64)>,
    pub min_dose_gy: f64,
    pub max_dose_gy: f64,
    pub mean_dose_gy: f64,
}

/// Builds the cumulative histogram over the masked voxels, each voxel
/// weighted equally.
pub fn compute_dvh(dose: &Grid3, mask: &Mask3, bin_width: f64) -> Result<DvhCurve, DvhError> {
    if !mask.matches_geometry(dose) {
        return Err(DvhError::GeometryMismatch);
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(DvhError::Invalid(format!("bin width {bin_width}")));
    }
    let mut max_dose = 0.0f64;
    let mut count = 0usize;
    for (&d, &inside) in dose.values().iter().zip(mask.values()) {
        if inside {
            if d < 0.0 {
                return Err(DvhError::Invalid(format!("negative dose {d}")));
            }
            max_dose = max_dose.max(d);
            count += 1;
        }
    }
    if count == 0 {
        return Err(DvhError::EmptyStructure(mask.name().to_string()));
    }

    // Edges k*w for k = 0..=n_bins, with the last edge strictly above max.
    let n_bins = (max_dose / bin_width).floor() as usize + 1;
    let mut histogram = vec![0usize; n_bins];
    for (&d, &inside) in dose.values().iter().zip(mask.values()) {
        if inside {
            let k = ((d / bin_width).floor() as usize).min(n_bins - 1);
            histogram[k] += 1;
        }
    }
    let mut edges = Vec::with_capacity(n_bins + 1);
    let mut cum = Vec::with_capacity(n_bins + 1);
    let mut above = count;
    for (k, &h) in histogram.iter().enumerate() {
        edges.push(k as f64 * bin_width);
        cum.push(100.0 * above as f64 / count as f64);
        above -= h;
    }
    edges.push(n_bins as f64 * bin_width);
    cum.push(0.0);
    debug_assert_eq!(above, 0);

    Ok(DvhCurve {
        structure: mask.name().to_string(),
        bin_width,
        bin_edges: edges,
        cum_volume_pct: cum,
        voxel_count: count,
    })
}

/// D_x: the minimum dose received by the hottest `volume_pct` of the
/// structure — the largest dose whose cumulative volume is still >= x,
/// linearly interpolated between bin edges.
pub fn dose_at_volume(curve: &DvhCurve, volume_pct: f64) -> f64 {
    assert!(
        volume_pct > 0.0 && volume_pct <= 100.0,
        "volume percentage must be in (0, 100]"
    );
    let cum = &curve.cum_volume_pct;
    let edges = &curve.bin_edges;
    // Largest k with cum[k] >= volume_pct; cum[0] = 100 >= volume_pct always.
    let mut k = 0;
    for (i, &c) in cum.iter().enumerate() {
        if c >= volume_pct {
            k = i;
        }
    }
    if k + 1 >= cum.len() {
        return edges[k];
    }
    let (c0, c1) = (cum[k], cum[k + 1]);
    if c0 <= c1 {
        return edges[k];
    }
    edges[k] + curve.bin_width * (c0 - volume_pct) / (c0 - c1)
}

/// V_x: percent of structure volume receiving at least `dose` Gy,
/// interpolated on the cumulative curve.
pub fn volume_at_dose(curve: &DvhCurve, dose: f64) -> f64 {
    assert!(dose >= 0.0, "dose level must be >= 0");
    let edges = &curve.bin_edges;
    let cum = &curve.cum_volume_pct;
    if dose >= *edges.last().unwrap() {
        return 0.0;
    }
    let k = ((dose / curve.bin_width).floor() as usize).min(edges.len() - 2);
    let f = (dose - edges[k]) / curve.bin_width;
    cum[k] + (cum[k + 1] - cum[k]) * f
}

/// Exact masked reductions: (min, max, mean), mean by compensated summation.
pub fn structure_minmaxmean(dose: &Grid3, mask: &Mask3) -> Result<(f64, f64, f64), DvhError> {
    if !mask.matches_geometry(dose) {
        return Err(DvhError::GeometryMismatch);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = KahanSum::new();
    let mut n = 0usize;
    for (&d, &inside) in dose.values().iter().zip(mask.values()) {
        if inside {
            min = min.min(d);
            max = max.max(d);
            sum.add(d);
            n += 1;
        }
    }
    if n == 0 {
        return Err(DvhError::EmptyStructure(mask.name().to_string()));
    }
    Ok((min, max, sum.value() / n as f64))
}

/// Computes the full index block for one structure.
pub fn dvh_indices(
    dose: &Grid3,
    mask: &Mask3,
    bin_width: f64,
    v_levels_gy: &[f64],
) -> Result<DvhIndices, DvhError> {
    let curve = compute_dvh(dose, mask, bin_width)?;
    let (min_dose, max_dose, mean_dose) = structure_minmaxmean(dose, mask)?;
    Ok(DvhIndices {
        structure: mask.name().to_string(),
        d95_gy: dose_at_volume(&curve, 95.0),
        d98_gy: dose_at_volume(&curve, 98.0),
        v_levels: v_levels_gy
            .iter()
            .map(|&level| (level, volume_at_dose(&curve, level)))
            .collect(),
        min_dose_gy: min_dose,
        max_dose_gy: max_dose,
        mean_dose_gy: mean_dose,
    })
}

/// Exact sort-based reference implementations, independent of the histogram
/// path. Intended for tests and verification runs, not hot loops.
pub mod sort_oracle {
    /// D_x over raw masked doses: the minimum dose among the hottest
    /// ceil(x% * N) voxels.
    pub fn dose_at_volume(doses: &[f64], volume_pct: f64) -> f64 {
        assert!(!doses.is_empty());
        assert!(volume_pct > 0.0 && volume_pct <= 100.0);
        let mut sorted = doses.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((volume_pct / 100.0 * sorted.len() as f64).ceil() as usize).max(1);
        sorted[k.min(sorted.len()) - 1]
    }

    /// V_d over raw masked doses: percent of voxels with dose >= d.
    pub fn volume_at_dose(doses: &[f64], dose: f64) -> f64 {
        assert!(!doses.is_empty());
        let above = doses.iter().filter(|&&v| v >= dose).count();
        100.0 * above as f64 / doses.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Unit;

    fn grid_and_full_mask(values: Vec<f64>) -> (Grid3, Mask3) {
        let n = values.len();
        let g = Grid3::new((n, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, values)
            .unwrap();
        let m = Mask3::new(&g, "ROI", vec![true; n]).unwrap();
        (g, m)
    }

    #[test]
    fn uniform_dose_is_step_function() {
        let (g, m) = grid_and_full_mask(vec![70.0; 8]);
        let curve = compute_dvh(&g, &m, 0.05).unwrap();
        assert_eq!(curve.cum_volume_pct[0], 100.0);
        assert_eq!(*curve.cum_volume_pct.last().unwrap(), 0.0);
        assert_eq!(volume_at_dose(&curve, 65.0), 100.0);
        assert_eq!(volume_at_dose(&curve, 75.0), 0.0);
        assert_eq!(volume_at_dose(&curve, 0.0), 100.0);
        let d95 = dose_at_volume(&curve, 95.0);
        assert!((d95 - 70.0).abs() <= 0.05, "D95 = {d95}");
    }

    #[test]
    fn two_voxel_hand_enumeration() {
        // Voxels at 10 and 30 Gy: 100% up to 10, 50% in (10, 30], 0% above.
        let (g, m) = grid_and_full_mask(vec![10.0, 30.0]);
        let curve = compute_dvh(&g, &m, 0.05).unwrap();
        assert_eq!(volume_at_dose(&curve, 5.0), 100.0);
        assert_eq!(volume_at_dose(&curve, 20.0), 50.0);
        assert_eq!(volume_at_dose(&curve, 30.05), 0.0);
        assert_eq!(sort_oracle::volume_at_dose(&[10.0, 30.0], 20.0), 50.0);
        let (min, max, mean) = structure_minmaxmean(&g, &m).unwrap();
        assert_eq!((min, max, mean), (10.0, 30.0, 20.0));
    }

    #[test]
    fn d100_is_min_dose_within_a_bin() {
        let (g, m) = grid_and_full_mask(vec![12.3, 45.6, 33.3, 21.0]);
        let curve = compute_dvh(&g, &m, 0.05).unwrap();
        let d100 = dose_at_volume(&curve, 100.0);
        assert!((d100 - 12.3).abs() <= 0.05, "D100 = {d100}");
        assert_eq!(sort_oracle::dose_at_volume(g.values(), 100.0), 12.3);
    }

    #[test]
    fn empty_mask_rejected() {
        let (g, _) = grid_and_full_mask(vec![1.0, 2.0]);
        let empty = Mask3::new(&g, "Empty", vec![false, false]).unwrap();
        assert!(matches!(
            compute_dvh(&g, &empty, 0.05),
            Err(DvhError::EmptyStructure(_))
        ));
        assert!(matches!(
            structure_minmaxmean(&g, &empty),
            Err(DvhError::EmptyStructure(_))
        ));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let (g, _) = grid_and_full_mask(vec![1.0, 2.0]);
        let (g2, m2) = grid_and_full_mask(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            compute_dvh(&g, &m2, 0.05),
            Err(DvhError::GeometryMismatch)
        ));
        let _ = g2;
    }

    #[test]
    fn hotspot_outside_mask_ignored() {
        let g = Grid3::new(
            (3, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![10.0, 20.0, 99.0],
        )
        .unwrap();
        let m = Mask3::new(&g, "ROI", vec![true, true, false]).unwrap();
        let (_, max, _) = structure_minmaxmean(&g, &m).unwrap();
        assert_eq!(max, 20.0);
        assert_eq!(g.max_value(), 99.0);
    }

    #[test]
    fn refinement_halving_bin_width_moves_indices_at_most_one_bin() {
        let doses: Vec<f64> = (0..400).map(|i| (i as f64 * 0.7919).fract() * 60.0).collect();
        let (g, m) = grid_and_full_mask(doses);
        let coarse = compute_dvh(&g, &m, 0.10).unwrap();
        let fine = compute_dvh(&g, &m, 0.05).unwrap();
        for pct in [98.0, 95.0, 80.0, 50.0, 20.0] {
            let dc = dose_at_volume(&coarse, pct);
            let df = dose_at_volume(&fine, pct);
            assert!((dc - df).abs() <= 0.10 + 1e-12, "D{pct}: {dc} vs {df}");
        }
    }

    #[test]
    fn quasi_inverse_within_one_bin() {
        let doses: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).fract() * 45.0).collect();
        let (g, m) = grid_and_full_mask(doses);
        let curve = compute_dvh(&g, &m, 0.05).unwrap();
        for v in [99.0, 95.0, 70.0, 40.0, 10.0] {
            let d = dose_at_volume(&curve, v);
            let back = volume_at_dose(&curve, d);
            // one-bin tolerance on the volume axis: the cum drop across a bin
            let k = ((d / 0.05).floor() as usize).min(curve.cum_volume_pct.len() - 2);
            let drop = curve.cum_volume_pct[k] - curve.cum_volume_pct[k + 1];
            assert!(back >= v - drop - 1e-9, "V(D({v})) = {back}");
        }
    }

    #[test]
    fn dose_axis_scaling_property() {
        let doses: Vec<f64> = (0..300).map(|i| (i as f64 * 1.313).fract() * 30.0).collect();
        for k in [0.5, 2.0, 3.25] {
            let scaled: Vec<f64> = doses.iter().map(|d| d * k).collect();
            for pct in [95.0, 60.0, 25.0] {
                let d1 = sort_oracle::dose_at_volume(&doses, pct);
                let d2 = sort_oracle::dose_at_volume(&scaled, pct);
                assert!((d2 - k * d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn histogram_brackets_sort_oracle() {
        // Pseudo-random masked grid; histogram indices within one bin of the
        // exact sorted values.
        let doses: Vec<f64> = (0..777)
            .map(|i| ((i as f64 * 2.399).sin().abs() * 55.0 * 100.0).round() / 100.0)
            .collect();
        let (g, m) = grid_and_full_mask(doses.clone());
        let curve = compute_dvh(&g, &m, 0.05).unwrap();
        for pct in [99.5, 98.0, 95.0, 75.0, 50.0, 25.0, 5.0] {
            let hist = dose_at_volume(&curve, pct);
            let exact = sort_oracle::dose_at_volume(&doses, pct);
            assert!(
                (hist - exact).abs() <= 0.05 + 1e-12,
                "D{pct}: hist {hist} vs sort {exact}"
            );
        }
    }
}
