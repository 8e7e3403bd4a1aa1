//! Conformal unlearning risk: a high-probability upper bound on the expected
//! per-sample risk of a configuration, from `n_ref` reference evaluations.
//!
//! The bound is the smaller of two inversions at budget `delta`:
//!
//! * KL / Hoeffding: the `b >= r_hat` solving `kl(r_hat, b) = ln(1/delta) / n_ref`.
//! * Bentkus: the smallest `p >= r_hat` whose binomial CDF at the observed
//!   count `n_ref * r_hat` is at most `delta / e`.
//!
//! Both searches are deterministic bisections on monotone branches.

use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::ln_gamma;

use crate::error::{FrocError, Result};
/// Tolerance on the divergence in [`kl_upper_inverse`], relative for targets below 1.
/// Absolute tolerance on the divergence in [`kl_upper_inverse`].
pub const KL_TOLERANCE: f64 = 1e-10;
/// Absolute tolerance on `p` in [`bentkus_ucb`].
pub const BENTKUS_TOLERANCE: f64 = 1e-10;
pub const MAX_BISECTION_STEPS: usize = 200;

// Counts this close to an integer are treated as that integer.
const COUNT_SNAP: f64 = 1e-9;

/// Tolerated probability of the bound failing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBudget {
    delta: f64,
}

impl RiskBudget {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(FrocError::Domain(format!(
                "delta must lie strictly between 0 and 1, got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Equal Bonferroni share of this budget over `tests` simultaneous tests.
    pub fn split(&self, tests: usize) -> Result<Self> {
        if tests == 0 {
            return Err(FrocError::Config("cannot split a budget over zero tests".into()));
        }
        Self::new(self.delta / tests as f64)
    }
}

/// Sufficient statistics of a reference evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceStats {
    pub n_ref: u64,
    pub r_hat: f64,
}

impl ReferenceStats {
    pub fn new(n_ref: u64, r_hat: f64) -> Result<Self> {
        if n_ref == 0 {
            return Err(FrocError::Domain("n_ref must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&r_hat) {
            return Err(FrocError::Domain(format!(
                "r_hat must lie in [0, 1], got {r_hat}"
            )));
        }
        Ok(Self { n_ref, r_hat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub stats: ReferenceStats,
    pub delta: f64,
    pub alpha_hoeffding: f64,
    pub alpha_bentkus: f64,
    /// `min(alpha_hoeffding, alpha_bentkus)`
    pub alpha_unlearn: f64,
}

/// Bernoulli KL divergence `a ln(a/b) + (1-a) ln((1-a)/(1-b))` with the
/// convention `0 ln 0 = 0`. Returns `+inf` when `b` sits on a boundary that
/// `a` does not.
pub fn kl_bernoulli(a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(FrocError::Domain(format!("kl: a must lie in [0, 1], got {a}")));
    }
    if !(0.0..=1.0).contains(&b) {
        return Err(FrocError::Domain(format!("kl: b must lie in [0, 1], got {b}")));
    }
    Ok(kl_unchecked(a, b))
}

fn kl_unchecked(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if b == 0.0 || b == 1.0 {
        return f64::INFINITY;
    }
    let head = if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    let tail = if a == 1.0 {
        0.0
    } else {
        (1.0 - a) * ((-a).ln_1p() - (-b).ln_1p())
    };
    (head + tail).max(0.0)
}

/// Upper partial inverse of the Bernoulli KL divergence: the `b` in
/// `[a, 1]` with `kl(a, b) = x`.
pub fn kl_upper_inverse(x: f64, a: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(FrocError::Domain(format!(
            "kl inverse: divergence must be non-negative, got {x}"
        )));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(FrocError::Domain(format!(
            "kl inverse: a must lie in [0, 1], got {a}"
        )));
    }
    if x == 0.0 {
        return Ok(a);
    }
    if a == 1.0 || x == f64::INFINITY {
        return Ok(1.0);
    }
    if a == 0.0 {
        // kl(0, b) = -ln(1 - b)
        return Ok(-(-x).exp_m1());
    }

    let (mut lo, mut hi) = (a, 1.0f64);
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let d = kl_unchecked(a, mid);
        if (d - x).abs() <= KL_TOLERANCE * x.min(1.0) {
            return Ok(mid);
        }
        if d > x {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `P(Bin(n, p) <= k)`.
pub fn binom_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    binom_ln_cdf(k, n, p).map(f64::exp)
}

/// Natural log of `P(Bin(n, p) <= k)`, by exact term summation in log
/// space starting at the largest term of the summed tail.
pub fn binom_ln_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    if n == 0 {
        return Err(FrocError::Domain("binomial: n must be at least 1".into()));
    }
    if k > n {
        return Err(FrocError::Domain(format!(
            "binomial: k = {k} exceeds n = {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(FrocError::Domain(format!(
            "binomial: p must lie in [0, 1], got {p}"
        )));
    }
    if k == n || p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::NEG_INFINITY);
    }

    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let odds = p / (1.0 - p);
    let ln_term = |j: u64| ln_binomial(n, j) + j as f64 * ln_p + (n - j) as f64 * ln_q;
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);

    if k < mode {
        // Left tail: terms shrink walking down from k.
        let mut sum = 1.0f64;
        let mut term = 1.0f64;
        let mut j = k;
        while j > 0 {
            term *= j as f64 / ((n - j + 1) as f64 * odds);
            sum += term;
            if term < sum * 1e-20 {
                break;
            }
            j -= 1;
        }
        Ok(ln_term(k) + sum.ln())
    } else {
        // Upper tail from k + 1 (past the mode, terms shrink walking up).
        let start = k + 1;
        let mut sum = 1.0f64;
        let mut term = 1.0f64;
        let mut j = start;
        while j < n {
            term *= (n - j) as f64 / (j + 1) as f64 * odds;
            sum += term;
            if term < sum * 1e-20 {
                break;
            }
            j += 1;
        }
        let upper = (ln_term(start) + sum.ln()).exp();
        Ok((-upper.min(1.0)).ln_1p())
    }
}

/// Natural log of the binomial CDF extended to a real count `x` in
/// `[0, n)`: `I_{1-p}(n - x, x + 1)`. Agrees with [`binom_ln_cdf`] at
/// integer `x` and is continuous and increasing in `x`.
pub fn binom_ln_cdf_real(x: f64, n: u64, p: f64) -> Result<f64> {
    if !(x.is_finite() && x >= 0.0) {
        return Err(FrocError::Domain(format!(
            "binomial: count must be finite and non-negative, got {x}"
        )));
    }
    let nf = n as f64;
    if x >= nf {
        return binom_ln_cdf(n, n, p);
    }
    let nearest = x.round();
    if (x - nearest).abs() <= COUNT_SNAP {
        return binom_ln_cdf(nearest as u64, n, p);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(FrocError::Domain(format!(
            "binomial: p must lie in [0, 1], got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ln_beta_reg(nf - x, x + 1.0, 1.0 - p))
}

/// `ln I_z(a, b)` via the Lentz continued fraction, with the symmetry
/// `I_z(a, b) = 1 - I_{1-z}(b, a)` on the slowly converging side.
fn ln_beta_reg(a: f64, b: f64, z: f64) -> f64 {
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if z >= 1.0 {
        return 0.0;
    }
    let ln_front = |a: f64, b: f64, z: f64| {
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * z.ln() + b * (-z).ln_1p() - a.ln()
    };
    if z < (a + 1.0) / (a + b + 2.0) {
        ln_front(a, b, z) + beta_continued_fraction(a, b, z).ln()
    } else {
        let other = (ln_front(b, a, 1.0 - z) + beta_continued_fraction(b, a, 1.0 - z).ln()).exp();
        (-other.min(1.0)).ln_1p()
    }
}

fn beta_continued_fraction(a: f64, b: f64, z: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    // Convergence takes O(sqrt(max(a, b))) terms.
    let max_terms = 200 + 20 * (a.max(b).sqrt() as usize);
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * z / qap);
    let mut h = d;
    for m in 1..=max_terms {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * z / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (qab + m) * z / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() <= EPS {
            break;
        }
    }
    h
}

/// Bentkus-style upper bound: the smallest `p` in `[r_hat, 1]` with
/// `P(Bin(n_ref, p) <= n_ref * r_hat) <= delta / e`. The count is used as
/// a real number (see [`binom_ln_cdf_real`]); for integer counts this is
/// the ordinary binomial tail.
pub fn bentkus_ucb(budget: RiskBudget, stats: ReferenceStats) -> f64 {
    let ReferenceStats { n_ref, r_hat } = stats;
    let n = n_ref as f64;
    let count = n * r_hat;
    if r_hat >= 1.0 || count >= n - COUNT_SNAP {
        return 1.0;
    }
    // delta / e, kept in log space.
    let ln_target = budget.delta().ln() - 1.0;
    if count <= COUNT_SNAP {
        // P(Bin(n, p) = 0) = (1 - p)^n.
        return (-(ln_target / n).exp_m1()).max(r_hat);
    }

    let ln_cdf = |p: f64| binom_ln_cdf_real(count, n_ref, p).unwrap_or(f64::NEG_INFINITY);
    let (mut lo, mut hi) = (r_hat, 1.0f64);
    if ln_cdf(lo) <= ln_target {
        return lo;
    }
    for _ in 0..MAX_BISECTION_STEPS {
        if hi - lo <= BENTKUS_TOLERANCE {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ln_cdf(mid) <= ln_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// KL / Hoeffding upper bound `kl^{-1}(ln(1/delta) / n_ref; r_hat)`.
pub fn hoeffding_ucb(budget: RiskBudget, stats: ReferenceStats) -> f64 {
    let ReferenceStats { n_ref, r_hat } = stats;
    let n = n_ref as f64;
    if r_hat >= 1.0 {
        return 1.0;
    }
    if r_hat == 0.0 {
        // 1 - delta^{1/N}
        return -(budget.delta().ln() / n).exp_m1();
    }
    let divergence = -budget.delta().ln() / n;
    kl_upper_inverse(divergence, r_hat).unwrap_or(1.0).max(r_hat)
}

/// The conformal unlearning risk at `budget` for the given statistics.
pub fn conformal_unlearning_risk(budget: RiskBudget, stats: ReferenceStats) -> BoundResult {
    let alpha_hoeffding = hoeffding_ucb(budget, stats);
    let alpha_bentkus = bentkus_ucb(budget, stats);
    BoundResult {
        stats,
        delta: budget.delta(),
        alpha_hoeffding,
        alpha_bentkus,
        alpha_unlearn: alpha_hoeffding.min(alpha_bentkus),
    }
}

/// Empirical check of the risk-control event on a batch of per-sample risks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationReport {
    pub alpha: f64,
    pub samples: usize,
    pub violations: usize,
    pub violation_rate: f64,
}

impl ViolationReport {
    /// The empirical coverage `1 - violation_rate` reaches `1 - delta`.
    pub fn satisfied_at(&self, delta: f64) -> bool {
        1.0 - self.violation_rate >= 1.0 - delta
    }
}

pub fn check_condition(per_sample_risks: &[f64], alpha: f64) -> Result<ViolationReport> {
    if per_sample_risks.is_empty() {
        return Err(FrocError::Config("no per-sample risks to check".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FrocError::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let violations = per_sample_risks.iter().filter(|&&r| r > alpha).count();
    Ok(ViolationReport {
        alpha,
        samples: per_sample_risks.len(),
        violations,
        violation_rate: violations as f64 / per_sample_risks.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stats(n: u64, r: f64) -> ReferenceStats {
        ReferenceStats::new(n, r).unwrap()
    }

    fn budget(d: f64) -> RiskBudget {
        RiskBudget::new(d).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_bernoulli(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(kl_bernoulli(0.0, 0.5).unwrap(), std::f64::consts::LN_2);
        // mpmath, 40 digits
        assert_abs_diff_eq!(kl_bernoulli(0.1, 0.3).unwrap(), 0.11632175658600450, epsilon = 1e-15);
        assert_eq!(kl_bernoulli(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(kl_bernoulli(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(kl_bernoulli(0.2, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(kl_bernoulli(0.2, 0.0).unwrap(), f64::INFINITY);
        assert!(kl_bernoulli(1.5, 0.5).is_err());
        assert!(kl_bernoulli(-0.1, 0.5).is_err());
    }

    #[test]
    fn kl_increases_on_upper_branch() {
        let mut prev = 0.0;
        for i in 1..100 {
            let b = 0.2 + 0.008 * i as f64;
            let d = kl_bernoulli(0.2, b).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn kl_inverse_examples() {
        assert_eq!(kl_upper_inverse(0.0, 0.2).unwrap(), 0.2);
        // 1 - e^{-0.05}
        assert_abs_diff_eq!(kl_upper_inverse(0.05, 0.0).unwrap(), 0.048770575499285991, epsilon = 1e-15);
        let x = kl_bernoulli(0.1, 0.3).unwrap();
        assert_abs_diff_eq!(kl_upper_inverse(x, 0.1).unwrap(), 0.3, epsilon = 1e-8);
        assert_eq!(kl_upper_inverse(3.0, 1.0).unwrap(), 1.0);
        assert_eq!(kl_upper_inverse(f64::INFINITY, 0.4).unwrap(), 1.0);
        assert!(kl_upper_inverse(-1e-3, 0.4).is_err());
    }

    #[test]
    fn binom_cdf_examples() {
        assert_eq!(binom_cdf(0, 7, 0.0).unwrap(), 1.0);
        assert_eq!(binom_cdf(3, 7, 0.0).unwrap(), 1.0);
        assert_eq!(binom_cdf(5, 5, 0.37).unwrap(), 1.0);
        assert_abs_diff_eq!(binom_cdf(1, 2, 0.5).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(binom_cdf(2, 5, 1.0).unwrap(), 0.0);
        assert!(binom_cdf(6, 5, 0.5).is_err());
        assert!(binom_cdf(1, 5, 1.5).is_err());
    }

    #[test]
    fn binom_cdf_decreases_in_p() {
        let mut prev = 1.0;
        for i in 1..100 {
            let v = binom_cdf(40, 200, i as f64 / 100.0).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn binom_cdf_large_n_matches_normal_region_sanity() {
        // P(Bin(10^6, 0.5) <= 500000) is 1/2 + P(X = n/2)/2.
        let v = binom_cdf(500_000, 1_000_000, 0.5).unwrap();
        let point = (ln_binomial(1_000_000, 500_000) + 1e6 * 0.5f64.ln()).exp();
        assert_abs_diff_eq!(v, 0.5 + 0.5 * point, epsilon = 1e-9);
    }

    #[test]
    fn real_count_extension_agrees_at_integers_and_interpolates() {
        for &(k, n, p) in &[(3u64, 10u64, 0.4), (10, 100, 0.2), (0, 5, 0.3), (250, 1000, 0.27)] {
            let exact = binom_ln_cdf(k, n, p).unwrap();
            let nudged_down = binom_ln_cdf_real(k as f64 + 1e-6, n, p).unwrap();
            assert_abs_diff_eq!(exact, nudged_down, epsilon = 1e-4);
            let mid = binom_ln_cdf_real(k as f64 + 0.5, n, p).unwrap();
            assert!(mid > exact);
            if k < n {
                assert!(mid < binom_ln_cdf(k + 1, n, p).unwrap());
            }
        }
    }

    #[test]
    fn real_count_extension_is_accurate_for_large_n() {
        // A count one ulp-scale away from an integer should agree with the
        // exact sum; exercises the long continued fraction.
        let n = 200_000u64;
        let k = 40_000u64;
        let p = 0.201;
        let exact = binom_ln_cdf(k, n, p).unwrap();
        let near = binom_ln_cdf_real(k as f64 + 1e-7, n, p).unwrap();
        assert_abs_diff_eq!(exact, near, epsilon = 1e-5);
    }

    #[test]
    fn bentkus_examples() {
        // binom_cdf(0; 1, p) = 1 - p
        assert_abs_diff_eq!(
            bentkus_ucb(budget(0.1), stats(1, 0.0)),
            0.96321205588285577,
            epsilon = 1e-10
        );
        assert_eq!(bentkus_ucb(budget(0.1), stats(50, 1.0)), 1.0);
    }

    #[test]
    fn bentkus_matches_grid_scan() {
        let target = 0.05 / std::f64::consts::E;
        // Smallest grid p with cdf <= target, step 1e-6, from the binomial oracle.
        let mut p = 0.1f64;
        let mut i = 0u64;
        while binom_cdf(10, 100, p).unwrap() > target {
            i += 1;
            p = 0.1 + i as f64 * 1e-6;
        }
        let got = bentkus_ucb(budget(0.05), stats(100, 0.1));
        assert!(got <= p + 1e-10 && got > p - 1e-6 - 1e-10, "{got} vs {p}");
        // mpmath root of the same equation
        assert_abs_diff_eq!(got, 0.18143841815351685, epsilon = 2e-10);
    }

    #[test]
    fn hoeffding_examples() {
        let expected = 1.0 - 0.05f64.powf(1.0 / 100.0);
        assert_abs_diff_eq!(hoeffding_ucb(budget(0.05), stats(100, 0.0)), expected, epsilon = 1e-12);
        let near_one = hoeffding_ucb(budget(1.0 - 1e-12), stats(100, 0.4));
        assert_abs_diff_eq!(near_one, 0.4, epsilon = 1e-6);
        let x = (1.0f64 / 0.1).ln() / 200.0;
        let got = hoeffding_ucb(budget(0.1), stats(200, 0.1));
        assert_abs_diff_eq!(kl_bernoulli(0.1, got).unwrap(), x, epsilon = 1e-10);
        assert_abs_diff_eq!(got, kl_upper_inverse(x, 0.1).unwrap(), epsilon = 1e-8);
        // mpmath
        assert_abs_diff_eq!(got, 0.15155553744683573, epsilon = 1e-9);
    }

    #[test]
    fn conformal_examples() {
        let saturated = conformal_unlearning_risk(budget(0.1), stats(30, 1.0));
        assert_eq!(saturated.alpha_unlearn, 1.0);

        let b = conformal_unlearning_risk(budget(0.05), stats(100, 0.0));
        let hoeffding = 1.0 - 0.05f64.powf(0.01);
        let bentkus = 1.0 - (0.05 / std::f64::consts::E).powf(0.01);
        assert_abs_diff_eq!(b.alpha_hoeffding, hoeffding, epsilon = 1e-12);
        assert_abs_diff_eq!(b.alpha_bentkus, bentkus, epsilon = 1e-12);
        assert_eq!(b.alpha_unlearn, b.alpha_hoeffding.min(b.alpha_bentkus));

        let s = stats(150, 0.2);
        let a = [0.2, 0.1, 0.05].map(|d| conformal_unlearning_risk(budget(d), s).alpha_unlearn);
        assert!(a[0] < a[1] && a[1] < a[2]);
    }

    #[test]
    fn budget_and_stats_validation() {
        assert!(RiskBudget::new(0.0).is_err());
        assert!(RiskBudget::new(1.0).is_err());
        assert!(RiskBudget::new(f64::NAN).is_err());
        assert!(ReferenceStats::new(0, 0.5).is_err());
        assert!(ReferenceStats::new(3, 1.01).is_err());
        assert_abs_diff_eq!(budget(0.1).split(4).unwrap().delta(), 0.025, epsilon = 1e-18);
        assert!(budget(0.1).split(0).is_err());
    }

    #[test]
    fn tiny_budgets_stay_finite() {
        let b = conformal_unlearning_risk(budget(1e-300), stats(1000, 0.3));
        assert!(b.alpha_unlearn > 0.3 && b.alpha_unlearn <= 1.0);
    }

    #[test]
    fn check_condition_cases() {
        let all_ok = check_condition(&[0.1, 0.2, 0.3], 0.3).unwrap();
        assert_eq!(all_ok.violation_rate, 0.0);
        assert!(all_ok.satisfied_at(1e-9));
        let half = check_condition(&[0.1, 0.9], 0.5).unwrap();
        assert_eq!(half.violation_rate, 0.5);
        assert!(half.satisfied_at(0.5));
        assert!(!half.satisfied_at(0.4));
        assert!(check_condition(&[], 0.5).is_err());
    }

    #[test]
    fn check_condition_counts_like_a_scan() {
        let mut rng = crate::simulator::SplitMix64::new(99);
        let risks: Vec<f64> = (0..1000).map(|_| rng.next_f64()).collect();
        let mut over = 0usize;
        for r in &risks {
            if *r > 0.3 {
                over += 1;
            }
        }
        let report = check_condition(&risks, 0.3).unwrap();
        assert_eq!(report.violations, over);
        assert_eq!(report.violation_rate, over as f64 / 1000.0);
    }
}
