//! Root-committee mathematics and selection.
//!
//! Failure probabilities are computed with exact big-integer binomials and a
//! single final division; floating-point summation of the hypergeometric
//! tail loses the 1e-12-scale values the sizing decisions rest on.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::types::ReplicaId;

/// Name of the generator behind [`select_committee`], recorded in trace
/// headers so runs are reproducible across implementations.
pub const SELECTION_ALGORITHM: &str = "sha256-keyed-chacha20-fisher-yates";

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CommitteeError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("no feasible committee size for n={n} under target {target}")]
    NoFeasibleSize { n: u32, target: f64 },
}

/// Global protocol parameters: n replicas, at most f Byzantine, committee
/// size c.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CommitteeParams {
    pub n: u32,
    pub f: u32,
    pub c: u32,
}

impl CommitteeParams {
    /// Standard parameterisation: f = floor((n-1)/3).
    pub fn with_default_f(n: u32, c: u32) -> CommitteeParams {
        CommitteeParams {
            n,
            f: default_f(n),
            c,
        }
    }

    pub fn validate(&self) -> Result<(), CommitteeError> {
        if self.n == 0 || self.c == 0 || self.c > self.n {
            return Err(CommitteeError::InvalidCounts(format!(
                "need 1 <= c <= n, got n={} c={}",
                self.n, self.c
            )));
        }
        if self.f >= self.n {
            return Err(CommitteeError::InvalidCounts(format!(
                "need f < n, got n={} f={}",
                self.n, self.f
            )));
        }
        Ok(())
    }
}

/// Maximal adversary consistent with n = 3f + 1.
pub fn default_f(n: u32) -> u32 {
    if n == 0 {
        0
    } else {
        (n - 1) / 3
    }
}

/// Exact probability in [0, 1].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailureProbability {
    exact: BigRational,
}

impl FailureProbability {
    pub fn zero() -> FailureProbability {
        FailureProbability {
            exact: BigRational::zero(),
        }
    }

    pub fn from_ratio(num: BigInt, den: BigInt) -> FailureProbability {
        FailureProbability {
            exact: BigRational::new(num, den),
        }
    }

    pub fn exact(&self) -> &BigRational {
        &self.exact
    }

    pub fn to_f64(&self) -> f64 {
        // BigRational::to_f64 underflows for very small ratios of huge
        // integers; scale through a float-safe window instead.
        if self.exact.is_zero() {
            return 0.0;
        }
        let num = self.exact.numer();
        let den = self.exact.denom();
        let shift = (den.bits() as i64 - num.bits() as i64).max(0) + 64;
        let scaled = (num << shift as u64) / den;
        let lead = scaled.to_f64().unwrap_or(0.0);
        lead * 2f64.powi(-(shift as i32))
    }
}

fn binomial(n: u32, k: u32) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for i in 0..k {
        num *= BigInt::from(n - i);
        den *= BigInt::from(i + 1);
    }
    num / den
}

/// Probability that a uniformly drawn committee of a+b members contains
/// exactly `a` good and `b` bad nodes: C(n-f, a) * C(f, b) / C(n, a+b).
pub fn committee_draw_probability(
    n: u32,
    f: u32,
    a: u32,
    b: u32,
) -> Result<FailureProbability, CommitteeError> {
    let c = a + b;
    if c > n || f > n {
        return Err(CommitteeError::InvalidCounts(format!(
            "need a+b <= n and f <= n, got n={n} f={f} a={a} b={b}"
        )));
    }
    if a > n - f || b > f {
        return Err(CommitteeError::InvalidCounts(format!(
            "need a <= n-f and b <= f, got n={n} f={f} a={a} b={b}"
        )));
    }
    let num = binomial(n - f, a) * binomial(f, b);
    let den = binomial(n, c);
    Ok(FailureProbability::from_ratio(num, den))
}

/// Probability that a uniformly drawn committee of size c contains more than
/// floor(2c/3) bad nodes: the tail sum of the hypergeometric distribution,
/// exactly zero once f cannot exceed that bound.
pub fn failure_probability(n: u32, f: u32, c: u32) -> Result<FailureProbability, CommitteeError> {
    if c > n || f > n {
        return Err(CommitteeError::InvalidCounts(format!(
            "need c <= n and f <= n, got n={n} f={f} c={c}"
        )));
    }
    let first_bad = (2 * c) / 3 + 1;
    if f < first_bad {
        return Ok(FailureProbability::zero());
    }
    let den = binomial(n, c);
    let mut num = BigInt::zero();
    for b in first_bad..=c.min(f) {
        let a = c - b;
        if a > n - f {
            continue;
        }
        num += binomial(n - f, a) * binomial(f, b);
    }
    Ok(FailureProbability::from_ratio(num, den))
}

/// Smallest committee size c (a multiple of 3, at most n) whose failure
/// probability does not exceed `pf_target`. Scans upward, so monotonicity is
/// observed rather than assumed.
pub fn min_committee_size(n: u32, f: u32, pf_target: f64) -> Result<u32, CommitteeError> {
    if !(0.0..1.0).contains(&pf_target) || pf_target <= 0.0 {
        return Err(CommitteeError::InvalidCounts(format!(
            "pf_target must lie in (0, 1), got {pf_target}"
        )));
    }
    let target = float_to_rational(pf_target);
    let mut c = 3;
    while c <= n {
        let pf = failure_probability(n, f, c)?;
        if pf.exact() <= &target {
            return Ok(c);
        }
        c += 3;
    }
    Err(CommitteeError::NoFeasibleSize { n, target: pf_target })
}

fn float_to_rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

/// The committee for a view: c distinct members plus the designated primary
/// (the lowest-index member). Identical (seed, view, n, c) yields identical
/// selections on every replica.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitteeSelection {
    pub view: u64,
    /// Members in ascending id order.
    pub members: Vec<ReplicaId>,
    pub primary: ReplicaId,
}

impl CommitteeSelection {
    pub fn contains(&self, id: ReplicaId) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }
}

/// Deterministic Fisher-Yates draw of c distinct ids from a ChaCha20 stream
/// keyed by (seed, view).
pub fn select_committee(
    seed: &[u8],
    view: u64,
    n: u32,
    c: u32,
) -> Result<CommitteeSelection, CommitteeError> {
    if c == 0 || c > n {
        return Err(CommitteeError::InvalidCounts(format!(
            "need 1 <= c <= n, got n={n} c={c}"
        )));
    }
    let mut h = Sha256::new();
    h.update(b"proteus-committee");
    h.update(seed);
    h.update(view.to_le_bytes());
    let key = h.finalize();
    let mut rng_key = [0u8; 32];
    rng_key.copy_from_slice(&key);
    let mut rng = ChaCha20Rng::from_seed(rng_key);

    let mut pool: Vec<u32> = (0..n).collect();
    for i in 0..c as usize {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut members: Vec<ReplicaId> = pool[..c as usize].iter().map(|&i| ReplicaId(i)).collect();
    members.sort_unstable();
    let primary = members[0];
    Ok(CommitteeSelection {
        view,
        members,
        primary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::{FromPrimitive, Signed};

    fn assert_close(value: f64, expect: f64, rel: f64) {
        let err = (value - expect).abs() / expect;
        assert!(
            err <= rel,
            "value {value:e} not within {rel} of {expect:e} (rel err {err:.4})"
        );
    }

    #[test]
    fn draw_probability_small_cases() {
        // n=10, f=3, committee of 3: all-good and all-bad draws, checked
        // against exhaustive enumeration of all C(10,3)=120 committees in
        // the oracle test below; the closed forms are 35/120 and 1/120.
        let all_good = committee_draw_probability(10, 3, 3, 0).unwrap();
        assert_eq!(
            all_good.exact(),
            &BigRational::new(BigInt::from(35), BigInt::from(120))
        );
        let all_bad = committee_draw_probability(10, 3, 0, 3).unwrap();
        assert_eq!(
            all_bad.exact(),
            &BigRational::new(BigInt::from(1), BigInt::from(120))
        );
    }

    #[test]
    fn draw_probabilities_sum_to_one() {
        for (n, f, c) in [(10u32, 3u32, 4u32), (12, 4, 6), (9, 2, 3)] {
            let mut total = BigRational::zero();
            for b in 0..=c.min(f) {
                let a = c - b;
                if a > n - f {
                    continue;
                }
                total += committee_draw_probability(n, f, a, b).unwrap().exact().clone();
            }
            assert_eq!(total, BigRational::one(), "n={n} f={f} c={c}");
        }
    }

    #[test]
    fn draw_probability_rejects_invalid_counts() {
        assert!(committee_draw_probability(10, 3, 8, 3).is_err());
        assert!(committee_draw_probability(10, 3, 0, 4).is_err());
        assert!(committee_draw_probability(10, 11, 1, 1).is_err());
    }

    #[test]
    fn failure_probability_zero_when_adversary_below_bound() {
        // n=10, f=3, c=6: f <= floor(2c/3) = 4, so the tail is empty.
        let pf = failure_probability(10, 3, 6).unwrap();
        assert!(pf.exact().is_zero());
        assert_eq!(pf.to_f64(), 0.0);
    }

    #[test]
    fn failure_probability_single_term_case() {
        // n=10, f=3, c=3: only the all-bad draw exceeds floor(2c/3)=2.
        let pf = failure_probability(10, 3, 3).unwrap();
        assert_eq!(
            pf.exact(),
            &BigRational::new(BigInt::from(1), BigInt::from(120))
        );
    }

    /// Exhaustive oracle: enumerate every possible committee (as a bitmask
    /// of n with c members) and count those with more than floor(2c/3)
    /// members drawn from the f bad ids. Independent of the closed form.
    fn brute_force_pf(n: u32, f: u32, c: u32) -> BigRational {
        let mut bad_count = 0u64;
        let mut total = 0u64;
        let mut committee: Vec<u32> = (0..c).collect();
        loop {
            total += 1;
            let bad = committee.iter().filter(|&&m| m < f).count() as u32;
            if bad > (2 * c) / 3 {
                bad_count += 1;
            }
            // next combination in lexicographic order
            let mut i = c as usize;
            loop {
                if i == 0 {
                    return BigRational::new(BigInt::from(bad_count), BigInt::from(total));
                }
                i -= 1;
                if committee[i] != n - (c - i as u32) {
                    committee[i] += 1;
                    for k in i + 1..c as usize {
                        committee[k] = committee[k - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn matches_exhaustive_enumeration_small_n() {
        // Spot checks across the small-n lattice; the acceptance suite
        // sweeps the full n <= 12 space.
        for (n, f, c) in [(10u32, 3u32, 3u32), (10, 3, 4), (8, 5, 6), (12, 7, 9), (7, 6, 7)] {
            let fast = failure_probability(n, f, c).unwrap();
            let slow = brute_force_pf(n, f, c);
            assert_eq!(fast.exact(), &slow, "n={n} f={f} c={c}");
        }
    }

    #[test]
    fn reproduces_published_probability_curve() {
        // Committee-size/failure-probability curve points for n=100, f=33.
        assert_close(failure_probability(100, 33, 40).unwrap().to_f64(), 2.1e-9, 0.10);
        let p10 = failure_probability(100, 33, 10).unwrap().to_f64();
        assert!((p10 - 0.0137).abs() <= 0.0005, "got {p10}");
    }

    #[test]
    fn probability_decreases_across_observed_curve() {
        let series: Vec<f64> = [10u32, 20, 30, 40]
            .iter()
            .map(|&c| failure_probability(100, 33, c).unwrap().to_f64())
            .collect();
        for w in series.windows(2) {
            assert!(w[0] > w[1], "expected strictly decreasing: {series:?}");
        }
    }

    #[test]
    fn min_size_matches_published_table() {
        for (n, expect) in [(40u32, 18u32), (70, 27), (100, 30), (130, 33), (200, 36)] {
            let c = min_committee_size(n, default_f(n), 8.9e-7).unwrap();
            assert_eq!(c, expect, "n={n}");
        }
    }

    #[test]
    fn min_size_rejects_bad_target() {
        assert!(min_committee_size(40, 13, 0.0).is_err());
        assert!(min_committee_size(40, 13, 1.5).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let a = select_committee(b"seed", 7, 100, 30).unwrap();
        let b = select_committee(b"seed", 7, 100, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.primary, a.members[0]);
    }

    #[test]
    fn selection_covers_all_when_c_equals_n() {
        let sel = select_committee(b"seed", 0, 9, 9).unwrap();
        let ids: Vec<u32> = sel.members.iter().map(|r| r.0).collect();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn views_usually_select_different_committees() {
        // Over 100 seeds, at least 95 must differ between view v and v+1.
        let mut differing = 0;
        for s in 0u32..100 {
            let seed = s.to_le_bytes();
            let a = select_committee(&seed, 1, 20, 6).unwrap();
            let b = select_committee(&seed, 2, 20, 6).unwrap();
            if a.members != b.members {
                differing += 1;
            }
        }
        assert!(differing >= 95, "only {differing} of 100 differed");
    }

    #[test]
    fn to_f64_handles_tiny_ratios() {
        let pf = failure_probability(200, 66, 60).unwrap();
        let v = pf.to_f64();
        assert!(v > 0.0 && v < 1e-10, "got {v:e}");
        // Cross-check the scaled conversion against the known exact value.
        let expected = BigRational::from_f64(9.234728159170224e-12).unwrap();
        let rel = ((pf.exact() - &expected).abs() / expected).to_f64().unwrap_or(1.0);
        assert!(rel < 1e-6);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // A committee never contains duplicate ids, its size is exactly
            // c, and the primary is its least member.
            #[test]
            fn selection_members_distinct(seed in any::<u64>(), view in 0u64..50,
                                          n in 2u32..64, c_frac in 1u32..100) {
                let c = (c_frac % n).max(1);
                let sel = select_committee(&seed.to_le_bytes(), view, n, c).unwrap();
                prop_assert_eq!(sel.members.len(), c as usize);
                let set: std::collections::BTreeSet<_> = sel.members.iter().collect();
                prop_assert_eq!(set.len(), c as usize);
                prop_assert!(sel.members.iter().all(|r| r.0 < n));
                prop_assert_eq!(sel.primary, sel.members[0]);
            }
        }
    }
}
