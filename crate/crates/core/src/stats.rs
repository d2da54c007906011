//! Statistical machinery: Azuma-Hoeffding tail evaluation, exact binomial
//! tails, Wilson score intervals for Monte Carlo estimates, chi-square
//! uniformity/homogeneity tests, and empirical supermartingale checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Azuma-Hoeffding tail exp[-N eps^2 / (2 c^2)] for a supermartingale with
/// increments bounded by c.
pub fn azuma_tail(n: u64, epsilon: f64, c: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::argument("N must be at least 1"));
    }
    if epsilon < 0.0 {
        return Err(Error::argument("epsilon must be non-negative"));
    }
    if c <= 0.0 {
        return Err(Error::argument("increment bound c must be positive"));
    }
    Ok((-(n as f64) * epsilon * epsilon / (2.0 * c * c)).exp())
}

/// Prob(Bin(n, p) >= k), computed in log space for numerical stability.
pub fn binomial_tail(n: u64, k: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::argument(format!("k={k} exceeds n={n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::argument("p must lie in [0, 1]"));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let nf = n as f64;
    let mut acc = 0.0;
    for j in k..=n {
        let jf = j as f64;
        let ln_term = ln_gamma(nf + 1.0) - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0)
            + jf * ln_p
            + (nf - jf) * ln_q;
        acc += ln_term.exp();
    }
    Ok(acc.min(1.0))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, confidence: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::argument("trials must be at least 1"));
    }
    if successes > trials {
        return Err(Error::argument("successes exceed trials"));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(Error::argument("confidence must lie in (0, 1)"));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + confidence / 2.0);
    let n = trials as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// A Monte Carlo proportion estimate with its Wilson interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    pub successes: u64,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
}

impl McEstimate {
    pub fn from_counts(successes: u64, trials: u64, confidence: f64) -> Result<Self> {
        let (lo, hi) = wilson_interval(successes, trials, confidence)?;
        Ok(McEstimate {
            trials,
            successes,
            point: successes as f64 / trials as f64,
            ci_low: lo,
            ci_high: hi,
            confidence,
        })
    }

    /// Half-width of the Wilson interval; the sigma_MC unit used by the
    /// acceptance suite's `bound + 5 sigma` comparisons.
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

/// Chi-square goodness-of-fit p-value against the uniform distribution.
pub fn uniformity_test(counts: &[u64]) -> Result<f64> {
    let m = counts.len();
    if m < 2 {
        return Err(Error::argument("need at least 2 categories"));
    }
    let total: u64 = counts.iter().sum();
    if total < 5 * m as u64 {
        return Err(Error::InsufficientData(format!(
            "total count {total} below 5 per category for m={m}"
        )));
    }
    let expected = total as f64 / m as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let diff = c as f64 - expected;
            diff * diff / expected
        })
        .sum();
    chi_square_p(stat, (m - 1) as f64)
}

/// Chi-square homogeneity test: do two count vectors over the same
/// categories come from the same distribution?
pub fn homogeneity_test(counts_a: &[u64], counts_b: &[u64]) -> Result<f64> {
    if counts_a.len() != counts_b.len() || counts_a.len() < 2 {
        return Err(Error::argument("count vectors must share >= 2 categories"));
    }
    let m = counts_a.len();
    let na: u64 = counts_a.iter().sum();
    let nb: u64 = counts_b.iter().sum();
    if na < 5 * m as u64 || nb < 5 * m as u64 {
        return Err(Error::InsufficientData("undersampled homogeneity test".into()));
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    for i in 0..m {
        let col = (counts_a[i] + counts_b[i]) as f64;
        if col == 0.0 {
            continue;
        }
        let ea = col * na as f64 / total;
        let eb = col * nb as f64 / total;
        let da = counts_a[i] as f64 - ea;
        let db = counts_b[i] as f64 - eb;
        stat += da * da / ea + db * db / eb;
    }
    chi_square_p(stat, (m - 1) as f64)
}

fn chi_square_p(stat: f64, dof: f64) -> Result<f64> {
    if stat <= 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(dof).map_err(|e| Error::argument(e.to_string()))?;
    Ok((1.0 - dist.cdf(stat)).clamp(0.0, 1.0))
}

/// Cumulative martingale trace Z_0 = 0, Z_k = sum_{j<=k}(D1_j + D2_j) - k*c
/// with increment bound c = 1 + 2/(d+1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    z: Vec<f64>,
    increment_bound: f64,
}

impl MartingaleTrace {
    pub fn new(increment_bound: f64) -> Result<Self> {
        if increment_bound <= 0.0 {
            return Err(Error::argument("increment bound must be positive"));
        }
        Ok(MartingaleTrace {
            z: vec![0.0],
            increment_bound,
        })
    }

    /// Bound for the redundant two-site protocol at dimension d.
    pub fn two_site_bound(d: usize) -> f64 {
        1.0 + 2.0 / (d as f64 + 1.0)
    }

    /// Record one round's pair of test indicators.
    pub fn push_round(&mut self, d1: bool, d2: bool) {
        let inc = (d1 as u8 + d2 as u8) as f64 - self.increment_bound;
        debug_assert!(inc.abs() <= self.increment_bound + 1e-12);
        self.z.push(self.z.last().unwrap() + inc);
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn increment_bound(&self) -> f64 {
        self.increment_bound
    }

    pub fn len_rounds(&self) -> usize {
        self.z.len() - 1
    }

    pub fn final_value(&self) -> f64 {
        *self.z.last().unwrap()
    }

    #[cfg(test)]
    pub(crate) fn from_values(z: Vec<f64>, increment_bound: f64) -> Self {
        MartingaleTrace { z, increment_bound }
    }
}

/// One history bin of the supermartingale check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementBin {
    /// Coarse round-position decile (0..10).
    pub round_decile: usize,
    /// Sign of Z_{k-1}: -1, 0, +1.
    pub prefix_sign: i8,
    pub samples: u64,
    pub mean_increment: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Report of the binned conditional-increment check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub bins: Vec<IncrementBin>,
    pub max_mean: f64,
    /// True only if some bin's CI lies entirely above zero.
    pub violation: bool,
}

/// Bin increments of many identically-configured traces by coarse history
/// features and test whether any conditional increment mean is positive.
///
/// The increments here are the raw D1+D2 - c values, whose conditional
/// expectation must be <= 0 for any admissible strategy.
pub fn supermartingale_check(
    traces: &[MartingaleTrace],
    confidence: f64,
) -> Result<SupermartingaleReport> {
    if traces.len() < 1000 {
        return Err(Error::InsufficientData(format!(
            "need >= 1000 traces, got {}",
            traces.len()
        )));
    }
    let n_rounds = traces[0].len_rounds();
    if n_rounds == 0 || traces.iter().any(|t| t.len_rounds() != n_rounds) {
        return Err(Error::argument("traces must share a common positive length"));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + confidence / 2.0);

    // (decile, sign index) -> accumulated increments
    let mut sums = vec![(0u64, 0.0f64, 0.0f64); 30];
    for t in traces {
        for k in 1..=n_rounds {
            let inc = t.z[k] - t.z[k - 1];
            let decile = ((k - 1) * 10 / n_rounds).min(9);
            let prev = t.z[k - 1];
            let sign_idx = if prev > 1e-12 {
                2
            } else if prev < -1e-12 {
                0
            } else {
                1
            };
            let cell = &mut sums[decile * 3 + sign_idx];
            cell.0 += 1;
            cell.1 += inc;
            cell.2 += inc * inc;
        }
    }
    let mut bins = Vec::new();
    let mut max_mean = f64::NEG_INFINITY;
    let mut violation = false;
    for decile in 0..10 {
        for sign_idx in 0..3 {
            let (n, s, s2) = sums[decile * 3 + sign_idx];
            if n < 30 {
                continue;
            }
            let nf = n as f64;
            let mean = s / nf;
            let var = (s2 / nf - mean * mean).max(0.0);
            let half = z * (var / nf).sqrt();
            let bin = IncrementBin {
                round_decile: decile,
                prefix_sign: sign_idx as i8 - 1,
                samples: n,
                mean_increment: mean,
                ci_low: mean - half,
                ci_high: mean + half,
            };
            max_mean = max_mean.max(mean);
            if bin.ci_low > 0.0 {
                violation = true;
            }
            bins.push(bin);
        }
    }
    Ok(SupermartingaleReport {
        bins,
        max_mean,
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn azuma_tail_pinned_value() {
        // N=1000, eps=0.1, c=5/3 -> exp(-1.8)
        let v = azuma_tail(1000, 0.1, 5.0 / 3.0).unwrap();
        assert!((v - (-1.8f64).exp()).abs() < 1e-12);
        assert!((v - 0.16529888822158656).abs() < 1e-10);
    }

    #[test]
    fn azuma_tail_limits_and_scaling() {
        assert!((azuma_tail(10, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let t1 = azuma_tail(500, 0.2, 1.5).unwrap();
        let t2 = azuma_tail(1000, 0.2, 1.5).unwrap();
        assert!((t2 - t1 * t1).abs() < 1e-12);
        // Monotone over a grid.
        let mut prev = f64::INFINITY;
        for n in [10u64, 100, 1000, 10000] {
            let t = azuma_tail(n, 0.1, 1.5).unwrap();
            assert!(t < prev);
            prev = t;
        }
        let mut prev = f64::INFINITY;
        for eps in [0.01, 0.05, 0.1, 0.5] {
            let t = azuma_tail(100, eps, 1.5).unwrap();
            assert!(t < prev);
            prev = t;
        }
        let mut prev = 0.0;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let t = azuma_tail(100, 0.1, c).unwrap();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn binomial_tail_edges() {
        assert!((binomial_tail(10, 0, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert!(binomial_tail(10, 11, 0.3).is_err());
        assert!(binomial_tail(10, 3, 1.3).is_err());
    }

    #[test]
    fn binomial_tail_matches_enumeration() {
        // Exact enumeration oracle for n <= 20.
        fn enumerate(n: u64, k: u64, p: f64) -> f64 {
            let mut acc = 0.0;
            for j in k..=n {
                let mut comb = 1.0;
                for i in 0..j {
                    comb = comb * (n - i) as f64 / (i + 1) as f64;
                }
                acc += comb * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
            }
            acc
        }
        for n in [5u64, 12, 20] {
            for k in 0..=n {
                for p in [0.1, 0.25, 0.5, 0.9] {
                    let a = binomial_tail(n, k, p).unwrap();
                    let b = enumerate(n, k, p);
                    assert!((a - b).abs() < 1e-10, "n={n} k={k} p={p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn binomial_tail_b3_matching_bound() {
        // Guess-match rate 1/d^2 = 1/4 at d=2; 2M/3 = 200 of N=1200.
        let v = binomial_tail(1200, 200, 0.25).unwrap();
        assert!(v >= 0.9999, "got {v}");
    }

    #[test]
    fn wilson_interval_orders_and_shrinks() {
        let e1 = McEstimate::from_counts(30, 100, 0.95).unwrap();
        assert!(e1.ci_low <= e1.point && e1.point <= e1.ci_high);
        let e2 = McEstimate::from_counts(3000, 10000, 0.95).unwrap();
        assert!(e2.half_width() < e1.half_width() / 5.0);
    }

    #[test]
    fn wilson_coverage_calibration() {
        // 95% nominal coverage measured >= 94% over 1000 replications.
        let mut rng = crate::rng_for_run(23, 0);
        let p = 0.85;
        let n = 200u64;
        let mut covered = 0;
        let reps = 1000;
        for _ in 0..reps {
            let mut succ = 0u64;
            for _ in 0..n {
                if rng.random::<f64>() < p {
                    succ += 1;
                }
            }
            let (lo, hi) = wilson_interval(succ, n, 0.95).unwrap();
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        assert!(covered as f64 / reps as f64 >= 0.94, "coverage {covered}/{reps}");
    }

    #[test]
    fn uniformity_test_cases() {
        assert!((uniformity_test(&[100, 100, 100]).unwrap() - 1.0).abs() < 1e-12);
        assert!(uniformity_test(&[100000, 0, 0, 0]).unwrap() < 1e-10);
        assert!(uniformity_test(&[4, 4]).is_err());
        assert!(uniformity_test(&[100]).is_err());
    }

    #[test]
    fn uniformity_test_calibrated_on_true_uniform() {
        // 10^5 draws over 9 categories should essentially never reject at
        // p < 0.001; run a reduced replication suite.
        let mut rng = crate::rng_for_run(29, 0);
        let mut rejects = 0;
        let suites = 200;
        for _ in 0..suites {
            let mut counts = [0u64; 9];
            for _ in 0..100_000 {
                counts[rng.random_range(0..9)] += 1;
            }
            if uniformity_test(&counts).unwrap() <= 0.001 {
                rejects += 1;
            }
        }
        assert!(rejects <= 2, "{rejects} rejects out of {suites}");
    }

    #[test]
    fn homogeneity_same_vs_shifted() {
        let mut rng = crate::rng_for_run(31, 0);
        let mut a = [0u64; 4];
        let mut b = [0u64; 4];
        for _ in 0..20_000 {
            a[rng.random_range(0..4)] += 1;
            b[rng.random_range(0..4)] += 1;
        }
        assert!(homogeneity_test(&a, &b).unwrap() > 0.001);
        let skewed = [12_000u64, 4000, 2000, 2000];
        assert!(homogeneity_test(&a, &skewed).unwrap() < 1e-10);
    }

    #[test]
    fn martingale_trace_structure() {
        let c = MartingaleTrace::two_site_bound(2);
        assert!((c - 5.0 / 3.0).abs() < 1e-15);
        let mut t = MartingaleTrace::new(c).unwrap();
        t.push_round(true, true);
        t.push_round(false, false);
        assert_eq!(t.len_rounds(), 2);
        assert!((t.values()[1] - (2.0 - c)).abs() < 1e-12);
        assert!((t.final_value() - (2.0 - 2.0 * c)).abs() < 1e-12);
        for w in t.values().windows(2) {
            assert!((w[1] - w[0]).abs() <= c + 1e-12);
        }
    }

    #[test]
    fn supermartingale_check_honest_and_drift() {
        let mut rng = crate::rng_for_run(37, 0);
        let c = MartingaleTrace::two_site_bound(2);
        // Honest-like: D1 ~ Bern(1.0), D2 ~ Bern(0.5): mean 1.5 < 5/3.
        let mut honest = Vec::new();
        for _ in 0..1500 {
            let mut t = MartingaleTrace::new(c).unwrap();
            for _ in 0..50 {
                t.push_round(true, rng.random::<f64>() < 0.5);
            }
            honest.push(t);
        }
        let rep = supermartingale_check(&honest, 0.95).unwrap();
        assert!(!rep.violation, "max mean {}", rep.max_mean);

        // Injected positive drift +0.1 must be flagged.
        let mut drifted = Vec::new();
        for _ in 0..1500 {
            let mut z = vec![0.0];
            for _ in 0..50 {
                let inc = 0.1 + if rng.random::<f64>() < 0.5 { 0.02 } else { -0.02 };
                z.push(z.last().unwrap() + inc);
            }
            drifted.push(MartingaleTrace::from_values(z, c));
        }
        let rep = supermartingale_check(&drifted, 0.95).unwrap();
        assert!(rep.violation);
    }

    #[test]
    fn supermartingale_check_needs_enough_traces() {
        let c = MartingaleTrace::two_site_bound(2);
        let traces = vec![MartingaleTrace::new(c).unwrap(); 10];
        assert!(matches!(
            supermartingale_check(&traces, 0.95),
            Err(Error::InsufficientData(_))
        ));
    }
}
