//! Voxel-wise agreement metrics and cohort-level paired significance testing.
//!
//! The Student-t machinery is self-contained: the two-sided p-value comes
//! from the regularized incomplete beta function evaluated by Lentz's
//! continued fraction with a Lanczos log-gamma, targeting 1e-10 accuracy.
//! No lookup tables.

use crate::numeric::KahanSum;
use crate::volgrid::{Grid3, Mask3};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("paired samples have different lengths ({0} vs {1})")]
    Pairing(usize, usize),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("geometry mismatch between compared grids")]
    GeometryMismatch,
    #[error("need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

/// Voxel-wise agreement between a reference and an evaluated grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoxelMetrics {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean of 100 * (eval - ref) / max(ref): normalized by the global
    /// reference maximum, not the per-voxel dose, to avoid low-dose blowup.
    pub mean_delta_dose_pct: f64,
    pub n_voxels: usize,
}

/// Computes R^2, MAE, RMSE and mean percentage dose difference over the
/// masked voxels (all voxels when `mask` is `None`).
pub fn voxel_metrics(
    reference: &Grid3,
    evaluated: &Grid3,
    mask: Option<&Mask3>,
) -> Result<VoxelMetrics, StatsError> {
    if !reference.same_geometry(evaluated) {
        return Err(StatsError::GeometryMismatch);
    }
    if let Some(m) = mask {
        if !m.matches_geometry(reference) {
            return Err(StatsError::GeometryMismatch);
        }
    }
    let included = |i: usize| mask.map_or(true, |m| m.values()[i]);

    let mut n = 0usize;
    let mut ref_sum = KahanSum::new();
    for (i, &r) in reference.values().iter().enumerate() {
        if included(i) {
            n += 1;
            ref_sum.add(r);
        }
    }
    if n < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: n });
    }
    let ref_mean = ref_sum.value() / n as f64;
    let ref_max = reference.max_value();

    let mut ss_res = KahanSum::new();
    let mut ss_tot = KahanSum::new();
    let mut abs_err = KahanSum::new();
    let mut sq_err = KahanSum::new();
    let mut delta = KahanSum::new();
    for (i, (&r, &e)) in reference
        .values()
        .iter()
        .zip(evaluated.values())
        .enumerate()
    {
        if !included(i) {
            continue;
        }
        let err = e - r;
        ss_res.add(err * err);
        ss_tot.add((r - ref_mean) * (r - ref_mean));
        abs_err.add(err.abs());
        sq_err.add(err * err);
        delta.add(100.0 * err / ref_max);
    }
    if ss_tot.value() == 0.0 {
        return Err(StatsError::DegenerateVariance(
            "reference is constant over the included voxels".into(),
        ));
    }
    Ok(VoxelMetrics {
        r2: 1.0 - ss_res.value() / ss_tot.value(),
        mae: abs_err.value() / n as f64,
        rmse: (sq_err.value() / n as f64).sqrt(),
        mean_delta_dose_pct: delta.value() / n as f64,
        n_voxels: n,
    })
}

/// Paired two-sample t-test summary; `significant` uses p < 0.05.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTTest {
    pub n_pairs: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t_stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub significant: bool,
    /// Set when the differences had zero variance; `p_value` is then 1 for a
    /// zero mean difference and 0 otherwise, by convention.
    pub degenerate: bool,
}

/// Paired t-test of `a` against `b` using differences `a[i] - b[i]`, sample
/// standard deviation (n-1 denominator), and a two-sided p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Pairing(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: n });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&diffs);
    let df = n - 1;
    if sd == 0.0 {
        let zero_mean = mean == 0.0;
        return Ok(PairedTTest {
            n_pairs: n,
            mean_diff: mean,
            sd_diff: 0.0,
            t_stat: if zero_mean { 0.0 } else { f64::INFINITY.copysign(mean) },
            df,
            p_value: if zero_mean { 1.0 } else { 0.0 },
            significant: !zero_mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, df as f64);
    Ok(PairedTTest {
        n_pairs: n,
        mean_diff: mean,
        sd_diff: sd,
        t_stat: t,
        df,
        p_value: p,
        significant: p < 0.05,
        degenerate: false,
    })
}

/// Arithmetic mean and sample standard deviation of per-case values.
pub fn cohort_summary(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    Ok(mean_sd(values))
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = {
        let mut s = KahanSum::new();
        for &v in values {
            s.add(v);
        }
        s.value() / n
    };
    let mut ss = KahanSum::new();
    for &v in values {
        ss.add((v - mean) * (v - mean));
    }
    (mean, (ss.value() / (n - 1.0)).sqrt())
}

/// Two-sided p-value of the Student-t distribution:
/// `p = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0, "degrees of freedom must be >= 1");
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// Student-t CDF, P(T <= t), derived from the two-sided tail.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let p = student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - 0.5 * p
    } else {
        0.5 * p
    }
}

/// Regularized incomplete beta function I_x(a, b) by Lentz's continued
/// fraction, using the symmetry relation to stay in the fast-converging
/// region. Accuracy target 1e-10 over the t-test parameter range.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x must lie in [0, 1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front =
        a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 coefficients), relative error ~1e-13.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Unit;
    use proptest::prelude::*;

    /// Datasets with p-values frozen from an independent statistics oracle
    /// (scipy.stats.ttest_rel, two-sided).
    pub const T_TEST_ORACLE: [(&[f64], &[f64], f64, f64); 5] = [
        (
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0],
            4.242_640_687_119_285,
            0.013_235_599_563_682_695,
        ),
        (
            &[10.1, 9.8, 10.3, 10.0, 9.9, 10.4, 10.2],
            &[10.0, 9.9, 10.1, 9.8, 10.0, 10.1, 10.0],
            1.921_537_845_661_048_1,
            0.103_046_173_179_540_12,
        ),
        (
            &[87.3, 85.1, 90.2, 88.8, 86.4, 89.9, 84.2, 91.0, 87.7, 88.1],
            &[84.0, 85.9, 88.1, 85.2, 86.0, 87.3, 83.1, 88.8, 86.2, 85.0],
            4.362_873_901_047_911_4,
            0.001_815_843_053_790_273_8,
        ),
        (
            &[2.0, -1.0, 0.5, 3.0, -0.5, 1.5],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            1.467_318_953_408_572_4,
            0.202_209_265_790_414_93,
        ),
        (
            &[70.2, 71.5, 69.8, 70.9, 71.1, 70.4, 70.7, 71.3],
            &[70.4, 71.2, 70.1, 70.6, 71.4, 70.2, 70.9, 71.0],
            0.124_034_734_589_200_1,
            0.904_774_322_435_948_35,
        ),
    ];

    fn grid(values: Vec<f64>) -> Grid3 {
        let n = values.len();
        Grid3::new((n, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), Unit::Gy, values).unwrap()
    }

    #[test]
    fn identity_metrics() {
        let r = grid(vec![1.0, 2.0, 3.0, 4.0]);
        let m = voxel_metrics(&r, &r, None).unwrap();
        assert_eq!(m.r2, 1.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mean_delta_dose_pct, 0.0);
        assert_eq!(m.n_voxels, 4);
    }

    #[test]
    fn constant_offset_metrics() {
        // eval = ref + 0.02 * max(ref): delta = +2%, rmse = mae = offset.
        let r = grid(vec![10.0, 20.0, 30.0, 40.0, 50.0]);
        let offset = 0.02 * 50.0;
        let e = grid(r.values().iter().map(|v| v + offset).collect());
        let m = voxel_metrics(&r, &e, None).unwrap();
        assert!((m.mean_delta_dose_pct - 2.0).abs() < 1e-12);
        assert!((m.mae - offset).abs() < 1e-12);
        assert!((m.rmse - offset).abs() < 1e-12);
    }

    #[test]
    fn mean_predictor_gives_r2_zero() {
        let r = grid(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let e = grid(vec![3.0; 5]);
        let m = voxel_metrics(&r, &e, None).unwrap();
        assert!(m.r2.abs() < 1e-12);
    }

    #[test]
    fn constant_reference_is_degenerate() {
        let r = grid(vec![5.0; 4]);
        let e = grid(vec![5.0, 5.0, 5.0, 6.0]);
        assert!(matches!(
            voxel_metrics(&r, &e, None),
            Err(StatsError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn masked_metrics_ignore_outside_voxels() {
        let r = grid(vec![1.0, 2.0, 100.0]);
        let e = grid(vec![1.0, 2.5, -10.0]);
        let mask = Mask3::new(&r, "roi", vec![true, true, false]).unwrap();
        let m = voxel_metrics(&r, &e, Some(&mask)).unwrap();
        assert_eq!(m.n_voxels, 2);
        assert!((m.mae - 0.25).abs() < 1e-12);
    }

    #[test]
    fn t_test_matches_frozen_oracle() {
        for (a, b, t_expect, p_expect) in T_TEST_ORACLE {
            let r = paired_t_test(a, b).unwrap();
            assert!(
                (r.t_stat - t_expect).abs() <= 1e-9 * t_expect.abs().max(1.0),
                "t {} vs {t_expect}",
                r.t_stat
            );
            assert!(
                (r.p_value - p_expect).abs() <= 1e-6,
                "p {} vs {p_expect}",
                r.p_value
            );
        }
    }

    #[test]
    fn t_test_against_statrs_oracle() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for (a, b, _, _) in T_TEST_ORACLE {
            let r = paired_t_test(a, b).unwrap();
            let dist = StudentsT::new(0.0, 1.0, r.df as f64).unwrap();
            let p_oracle = 2.0 * (1.0 - dist.cdf(r.t_stat.abs()));
            assert!(
                (r.p_value - p_oracle).abs() < 1e-9,
                "{} vs {p_oracle}",
                r.p_value
            );
        }
    }

    #[test]
    fn identical_pairs_give_p_one_exactly() {
        let a = [1.5, 2.5, 3.5];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate);
        assert!(!r.significant);
    }

    #[test]
    fn symmetric_cancellation_two_pairs() {
        // n=2, d = {-1, +1}: mean 0, t = 0, p = 1.
        let r = paired_t_test(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_nonzero_difference_is_degenerate_significant() {
        let r = paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert!(r.significant);
    }

    #[test]
    fn length_mismatch_is_pairing_error() {
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0]),
            Err(StatsError::Pairing(2, 1))
        ));
    }

    #[test]
    fn published_critical_value_df19() {
        // Two-sided alpha = 0.05 critical value at df = 19 is t = 2.093.
        let p = student_t_two_sided_p(2.093, 19.0);
        assert!((p - 0.05).abs() < 5e-4, "p = {p}");
    }

    #[test]
    fn cohort_summary_hand_values() {
        let (m, s) = cohort_summary(&[87.0, 88.0]).unwrap();
        assert!((m - 87.5).abs() < 1e-12);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
        let (_, s0) = cohort_summary(&[4.2; 6]).unwrap();
        assert_eq!(s0, 0.0);
        assert!(matches!(
            cohort_summary(&[1.0]),
            Err(StatsError::InsufficientData { .. })
        ));
    }

    #[test]
    fn rmse_mae_equality_iff_uniform_errors() {
        let r = grid(vec![1.0, 2.0, 3.0]);
        let e1 = grid(vec![2.0, 3.0, 4.0]); // all |err| = 1
        let m1 = voxel_metrics(&r, &e1, None).unwrap();
        assert!((m1.rmse - m1.mae).abs() < 1e-12);
        let e2 = grid(vec![1.0, 2.0, 6.0]); // mixed errors
        let m2 = voxel_metrics(&r, &e2, None).unwrap();
        assert!(m2.rmse > m2.mae);
    }

    proptest! {
        #[test]
        fn rmse_at_least_mae(vals in proptest::collection::vec((0.0f64..100.0, -5.0f64..5.0), 2..40)) {
            let r = grid(vals.iter().map(|(v, _)| *v).collect());
            let e = grid(vals.iter().map(|(v, d)| (v + d).max(0.0)).collect());
            if let Ok(m) = voxel_metrics(&r, &e, None) {
                prop_assert!(m.rmse + 1e-12 >= m.mae);
                prop_assert!(m.r2 <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn r2_affine_invariant(vals in proptest::collection::vec((1.0f64..100.0, -5.0f64..5.0), 4..20), scale in 0.5f64..3.0, shift in -10.0f64..10.0) {
            let r = grid(vals.iter().map(|(v, _)| *v).collect());
            let e = grid(vals.iter().map(|(v, d)| v + d).collect());
            if let Ok(m) = voxel_metrics(&r, &e, None) {
                let r2 = grid(r.values().iter().map(|v| scale * v + shift).collect());
                let e2 = grid(e.values().iter().map(|v| scale * v + shift).collect());
                let m2 = voxel_metrics(&r2, &e2, None).unwrap();
                prop_assert!((m.r2 - m2.r2).abs() < 1e-8);
            }
        }

        #[test]
        fn t_antisymmetric(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30)) {
            let a: Vec<f64> = pairs.iter().map(|(x, _)| *x).collect();
            let b: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
            let ab = paired_t_test(&a, &b).unwrap();
            let ba = paired_t_test(&b, &a).unwrap();
            prop_assert!((ab.t_stat + ba.t_stat).abs() < 1e-9);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        }

        #[test]
        fn p_monotone_in_abs_t(df in 1u32..60, t1 in 0.01f64..8.0, dt in 0.01f64..4.0) {
            let p1 = student_t_two_sided_p(t1, df as f64);
            let p2 = student_t_two_sided_p(t1 + dt, df as f64);
            prop_assert!(p2 <= p1 + 1e-12);
        }

        #[test]
        fn cdf_matches_statrs(df in 1u32..50, t in -8.0f64..8.0) {
            use statrs::distribution::{ContinuousCDF, StudentsT};
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            prop_assert!((student_t_cdf(t, df as f64) - dist.cdf(t)).abs() < 1e-9);
        }
    }
}
