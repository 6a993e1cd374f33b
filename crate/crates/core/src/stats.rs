//! Rank statistics: separation margins, per-query AUC, normal-CDF
//! calibration, the Cantelli check, Kendall's tau-b and McNemar's test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Gold score minus pool mean, with the pool's population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub s: f64,
    pub sigma: f64,
    /// The pool has zero spread; `s / sigma` is undefined.
    pub degenerate: bool,
}

impl Margin {
    /// `S / sigma`, saturating to ±inf (or 0) for degenerate pools.
    pub fn z(&self) -> f64 {
        if self.degenerate {
            if self.s == 0.0 {
                0.0
            } else {
                self.s.signum() * f64::INFINITY
            }
        } else {
            self.s / self.sigma
        }
    }
}

fn check_pool(pool: &[f64]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Degenerate("empty pool".into()));
    }
    if pool.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pool scores".into()));
    }
    Ok(())
}

pub fn separation_margin(gold: f64, pool: &[f64]) -> Result<Margin> {
    check_pool(pool)?;
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    Ok(Margin {
        s: gold - mean,
        sigma,
        degenerate: sigma == 0.0,
    })
}

/// Fraction of the pool scored strictly below `gold`, plus half the
/// fraction tied with it.
pub fn per_query_auc(gold: f64, pool: &[f64]) -> Result<f64> {
    check_pool(pool)?;
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let below = sorted.partition_point(|v| *v < gold);
    let not_above = sorted.partition_point(|v| *v <= gold);
    let ties = not_above - below;
    Ok((2 * below + ties) as f64 / (2 * pool.len()) as f64)
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail of chi-square with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub r_squared: f64,
    pub inversion_accuracy: f64,
    pub n: usize,
    /// Pairs contributing to `inversion_accuracy`.
    pub pairs: u64,
    /// All observed AUCs are equal, so `r_squared` is undefined.
    pub degenerate: bool,
}

/// Fraction of pairs `(i, j)` whose predicted and observed differences
/// share a sign. Pairs where either difference is zero are skipped.
pub fn inversion_accuracy(predicted: &[f64], observed: &[f64]) -> (f64, u64) {
    let n = predicted.len();
    let mut agree = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dp = predicted[i] - predicted[j];
            let dobs = observed[i] - observed[j];
            if dp == 0.0 || dobs == 0.0 {
                continue;
            }
            total += 1;
            if (dp > 0.0) == (dobs > 0.0) {
                agree += 1;
            }
        }
    }
    let acc = if total == 0 { 0.0 } else { agree as f64 / total as f64 };
    (acc, total)
}

/// Compares `phi(S_i / sigma_i)` against empirical AUCs.
pub fn calibration_fit(margins: &[Margin], aucs: &[f64]) -> Result<CalibrationFit> {
    if margins.len() != aucs.len() {
        return Err(Error::LengthMismatch {
            left: margins.len(),
            right: aucs.len(),
        });
    }
    let n = aucs.len();
    if n < 3 {
        return Err(Error::Invalid(format!("calibration needs at least 3 queries, got {n}")));
    }
    let predicted: Vec<f64> = margins.iter().map(|m| phi(m.z())).collect();
    let mean = aucs.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = aucs.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = aucs.iter().zip(&predicted).map(|(a, p)| (a - p).powi(2)).sum();
    let degenerate = aucs.iter().all(|a| *a == aucs[0]);
    let r_squared = if degenerate {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    let (inversion_accuracy, pairs) = inversion_accuracy(&predicted, aucs);
    Ok(CalibrationFit {
        r_squared,
        inversion_accuracy,
        n,
        pairs,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CantelliCheck {
    pub threshold: f64,
    /// Fraction of AUCs strictly above the threshold.
    pub empirical: f64,
    /// `1 / (1 + (t - 0.5)^2 / sigma^2)`.
    pub bound: f64,
    /// `empirical >= bound`.
    pub satisfied: bool,
    /// Classical one-sided Cantelli bound around the sample mean: an upper
    /// bound on `P(AUC >= t)` when `t` is above the mean, a lower bound on
    /// `P(AUC > t)` otherwise.
    pub classical_bound: f64,
    pub classical_kind: BoundKind,
    pub classical_satisfied: bool,
    pub sample_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
}

pub fn cantelli_check(aucs: &[f64], sigma: f64, t: f64) -> Result<CantelliCheck> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if aucs.is_empty() {
        return Err(Error::Degenerate("no AUC values".into()));
    }
    let n = aucs.len() as f64;
    let empirical = aucs.iter().filter(|&&a| a > t).count() as f64 / n;
    let bound = 1.0 / (1.0 + (t - 0.5).powi(2) / sigma.powi(2));

    let mean = aucs.iter().sum::<f64>() / n;
    let var = sigma * sigma;
    let gap = t - mean;
    let (classical_bound, classical_kind, classical_satisfied) = if gap >= 0.0 {
        let b = var / (var + gap * gap);
        let at_least = aucs.iter().filter(|&&a| a >= t).count() as f64 / n;
        (b, BoundKind::Upper, at_least <= b)
    } else {
        let b = gap * gap / (var + gap * gap);
        (b, BoundKind::Lower, empirical >= b)
    };
    Ok(CantelliCheck {
        threshold: t,
        empirical,
        bound,
        satisfied: empirical >= bound,
        classical_bound,
        classical_kind,
        classical_satisfied,
        sample_mean: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTau {
    pub tau: f64,
    /// Two-sided p-value from the normal approximation with tie correction.
    pub p: f64,
    pub z: f64,
    pub n: usize,
    /// Concordant minus discordant pairs.
    pub s: i64,
}

/// Sum over tie groups of a run-length statistic, for a sorted slice.
fn tie_groups(sorted: &[f64]) -> Vec<u64> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            groups.push((j - i) as u64);
        }
        i = j;
    }
    groups
}

/// Merge sort counting exchanges (inversions) of `v`.
fn count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_swaps(&mut v[..mid], buf) + count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b, O(n log n) via Knight's algorithm.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<KendallTau> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("kendall tau needs at least two pairs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall tau input".into()));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sorted_a: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let mut by_a: Vec<f64> = idx.iter().map(|&i| b[i]).collect();

    // Pairs tied on both coordinates.
    let mut joint_ties = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted_a[j] == sorted_a[i] && by_a[j] == by_a[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        joint_ties += t * (t - 1) / 2;
        i = j;
    }

    let ties_a = tie_groups(&sorted_a);
    let swaps = count_swaps(&mut by_a, &mut Vec::with_capacity(n));
    let ties_b = tie_groups(&by_a);

    let pairs = |g: &[u64]| g.iter().map(|t| t * (t - 1) / 2).sum::<u64>();
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let n1 = pairs(&ties_a);
    let n2 = pairs(&ties_b);
    if n1 == n0 || n2 == n0 {
        return Err(Error::Degenerate("all values tied in one input".into()));
    }
    let s = n0 as i64 - n1 as i64 - n2 as i64 + joint_ties as i64 - 2 * swaps as i64;
    let tau = s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();

    let nf = n as f64;
    let sum3 = |g: &[u64], f: fn(f64) -> f64| g.iter().map(|&t| f(t as f64)).sum::<f64>();
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt = sum3(&ties_a, |t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = sum3(&ties_b, |t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = sum3(&ties_a, |t| t * (t - 1.0)) * sum3(&ties_b, |t| t * (t - 1.0)) / (2.0 * nf * (nf - 1.0));
    let v2 = if n > 2 {
        sum3(&ties_a, |t| t * (t - 1.0) * (t - 2.0)) * sum3(&ties_b, |t| t * (t - 1.0) * (t - 2.0))
            / (9.0 * nf * (nf - 1.0) * (nf - 2.0))
    } else {
        0.0
    };
    let var = (v0 - vt - vu) / 18.0 + v1 + v2;
    let z = if var > 0.0 { s as f64 / var.sqrt() } else { 0.0 };
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(KendallTau { tau, p, z, n, s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub wins: u64,
    pub losses: u64,
    /// Two-sided exact binomial p.
    pub p_exact: f64,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_exact_one_sided: f64,
    /// Chi-square (one dof, no continuity correction) survival.
    pub p_chi2: f64,
    pub chi2: f64,
    /// No discordant pairs: every p is 1.
    pub degenerate: bool,
}

/// `P(X <= k)` for `X ~ Binomial(n, 1/2)` by direct summation.
fn binomial_half_cdf(n: u64, k: u64) -> f64 {
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    (0..=k.min(n))
        .map(|i| (ln_binomial(n, i) - ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

pub fn mcnemar(wins: u64, losses: u64) -> McNemar {
    let n = wins + losses;
    if n == 0 {
        return McNemar {
            wins,
            losses,
            p_exact: 1.0,
            p_exact_one_sided: 1.0,
            p_chi2: 1.0,
            chi2: 0.0,
            degenerate: true,
        };
    }
    let low = wins.min(losses);
    let p_exact = (2.0 * binomial_half_cdf(n, low)).min(1.0);
    // P(X >= wins) = P(X <= losses) by symmetry of Binomial(n, 1/2).
    let p_exact_one_sided = binomial_half_cdf(n, losses);
    let diff = wins as f64 - losses as f64;
    let chi2 = diff * diff / n as f64;
    McNemar {
        wins,
        losses,
        p_exact,
        p_exact_one_sided,
        p_chi2: chi2_1_sf(chi2),
        chi2,
        degenerate: false,
    }
}

/// McNemar counts for paired binary outcomes: wins are pairs where only the
/// treatment succeeded.
pub fn paired_outcomes(baseline: &[bool], treatment: &[bool]) -> McNemar {
    let wins = baseline.iter().zip(treatment).filter(|(b, t)| !**b && **t).count() as u64;
    let losses = baseline.iter().zip(treatment).filter(|(b, t)| **b && !**t).count() as u64;
    mcnemar(wins, losses)
}

/// Sign test on paired differences; zeros are dropped.
pub fn sign_test(deltas: &[f64]) -> McNemar {
    let pos = deltas.iter().filter(|d| **d > 0.0).count() as u64;
    let neg = deltas.iter().filter(|d| **d < 0.0).count() as u64;
    mcnemar(pos, neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub n: usize,
    pub observed: f64,
    pub expected: f64,
    pub kappa: f64,
}

/// Cohen's kappa for two label sequences over any categorical type. When
/// chance agreement is 1 (both raters constant and equal) kappa is 1.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Degenerate("no labels".into()));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ca: BTreeMap<&T, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&T, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let cats: BTreeSet<&T> = ca.keys().chain(cb.keys()).copied().collect();
    let expected: f64 = cats
        .iter()
        .map(|c| {
            let pa = *ca.get(c).unwrap_or(&0) as f64 / n;
            let pb = *cb.get(c).unwrap_or(&0) as f64 / n;
            pa * pb
        })
        .sum();
    let kappa = if (1.0 - expected).abs() < 1e-15 {
        1.0
    } else {
        (observed - expected) / (1.0 - expected)
    };
    Ok(Agreement {
        n: a.len(),
        observed,
        expected,
        kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_arithmetic() {
        let m = separation_margin(0.9, &[0.1, 0.3, 0.5]).unwrap();
        assert!((m.s - 0.6).abs() < 1e-12);
        assert!((m.sigma - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        let m = separation_margin(0.3, &[0.1, 0.3, 0.5]).unwrap();
        assert!(m.s.abs() < 1e-15);
        let flat = separation_margin(0.5, &[0.2, 0.2]).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.z(), f64::INFINITY);
        assert!(separation_margin(0.5, &[]).is_err());
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(per_query_auc(1.0, &[0.1, 0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(per_query_auc(0.0, &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(per_query_auc(0.4, &[0.4, 0.4, 0.4]).unwrap(), 0.5);
        assert_eq!(per_query_auc(0.4, &[0.1, 0.4, 0.9, 0.2]).unwrap(), 0.625);
    }

    #[test]
    fn phi_reference_values() {
        // Reference values from 30-digit mpmath evaluation.
        let cases = [
            (0.0, 0.5),
            (1.959964, 0.975_000_000_903_557_6),
            (-1.0, 0.158_655_253_931_457_05),
            (3.0, 0.998_650_101_968_369_9),
            (-5.0, 2.866_515_718_791_939e-7),
            (7.5, 0.999_999_999_999_968_1),
            (0.5, 0.691_462_461_274_013_1),
            (-8.0, 6.220_960_574_271_784e-16),
        ];
        for (z, want) in cases {
            assert!((phi(z) - want).abs() <= 1e-10, "phi({z})");
        }
        assert!((phi(1.959964) - 0.975).abs() < 1e-6);
        for z in [0.1, 0.7, 1.3, 2.9, 5.5] {
            assert!((phi(-z) - (1.0 - phi(z))).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_perfect_prediction() {
        let margins: Vec<Margin> = [-1.0, 0.0, 0.5, 2.0]
            .iter()
            .map(|&s| Margin {
                s,
                sigma: 1.0,
                degenerate: false,
            })
            .collect();
        let aucs: Vec<f64> = margins.iter().map(|m| phi(m.z())).collect();
        let fit = calibration_fit(&margins, &aucs).unwrap();
        assert_eq!(fit.r_squared, 1.0);
        assert_eq!(fit.inversion_accuracy, 1.0);
        assert_eq!(fit.pairs, 6);
    }

    #[test]
    fn calibration_flags_constant_aucs() {
        let margins = vec![
            Margin {
                s: 0.1,
                sigma: 1.0,
                degenerate: false
            };
            3
        ];
        assert!(calibration_fit(&margins, &[0.7, 0.7, 0.7]).unwrap().degenerate);
        assert!(calibration_fit(&margins[..2], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn cantelli_printed_bound() {
        let c = cantelli_check(&[0.2, 0.6, 0.9], 0.1, 0.5).unwrap();
        assert_eq!(c.bound, 1.0);
        let c = cantelli_check(&[1.0; 5], 0.2, 0.9).unwrap();
        assert_eq!(c.empirical, 1.0);
        assert!(c.satisfied);
        assert!((c.bound - 1.0 / (1.0 + 0.16 / 0.04)).abs() < 1e-15);
        assert!(cantelli_check(&[0.5], 0.0, 0.6).is_err());
    }

    #[test]
    fn kendall_identity_and_reversal() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r: Vec<f64> = a.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&a, &a).unwrap().tau, 1.0);
        assert_eq!(kendall_tau(&a, &r).unwrap().tau, -1.0);
        assert!(matches!(kendall_tau(&a, &[2.0; 5]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kendall_matches_scipy_with_ties() {
        // scipy.stats.kendalltau(x, y) -> (0.6428571428571429, 0.07983871964585261)
        let x = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 3.0, 2.0, 2.0, 5.0, 4.0];
        let k = kendall_tau(&x, &y).unwrap();
        assert_eq!(k.s, 9);
        assert!((k.tau - 9.0 / 14.0).abs() < 1e-15);
        assert!((k.p - 0.079_838_719_645_852_61).abs() < 1e-10, "{k:?}");
    }

    #[test]
    fn mcnemar_reference_counts() {
        let big = mcnemar(54, 5);
        assert!(big.p_exact < 1e-9 && big.p_chi2 < 0.001);
        let m = mcnemar(22, 6);
        assert!((m.p_exact - 0.003_719_165_921_211_242_7).abs() < 1e-12);
        assert!((m.p_chi2 - 0.002_496_908_915_141_551).abs() < 1e-12);
        assert!((m.p_exact_one_sided - 0.001_859_582_960_605_621_4).abs() < 1e-12);
        let hp = mcnemar(14, 8);
        assert!((hp.p_exact_one_sided - 0.143_139_362_335_205_08).abs() < 1e-12);
        assert_eq!(mcnemar(7, 7).p_exact, 1.0);
        assert!(mcnemar(0, 0).degenerate);
    }

    #[test]
    fn mcnemar_is_symmetric() {
        for (w, l) in [(3, 9), (0, 4), (22, 6), (100, 81)] {
            let a = mcnemar(w, l);
            let b = mcnemar(l, w);
            assert_eq!(a.p_exact, b.p_exact);
            assert_eq!(a.p_chi2, b.p_chi2);
        }
    }

    #[test]
    fn kappa_perfect_and_chance() {
        let a = [1, 0, 1, 1, 0];
        assert_eq!(cohen_kappa(&a, &a).unwrap().kappa, 1.0);
        let b = [0, 1, 0, 0, 1];
        assert!((cohen_kappa(&a, &b).unwrap().kappa - (-0.48 / 0.52)).abs() < 1e-12);
    }

    #[test]
    fn sign_test_drops_zeros() {
        let m = sign_test(&[0.1, -0.2, 0.0, 0.3]);
        assert_eq!((m.wins, m.losses), (2, 1));
    }
}
