//! The sign-change randomization test on per-group scores.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{validate_grouping, Grouping, Hypothesis, PanelDataset};
use crate::error::{Error, Result};
use crate::estimation::{check_c, ols_within_group, score_stat, GroupFit};
use crate::formula::RegressionSpec;

/// Largest number of groups the enumeration accepts.
pub const MAX_Q: usize = 24;

/// Sign vectors in {1,−1}^q with first entry +1, in binary-counting order:
/// vector `i` has entry `j ≥ 1` equal to −1 iff bit `q−1−j` of `i` is set,
/// so entry `q` is the least significant digit. Index 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignChangeSet {
    q: usize,
}

impl SignChangeSet {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 || q > MAX_Q {
            return Err(Error::Bound {
                what: "number of groups q",
                value: q,
                bound: MAX_Q,
            });
        }
        Ok(SignChangeSet { q })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// |G_U| = 2^{q−1}.
    pub fn len(&self) -> usize {
        1usize << (self.q - 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// L = 2^{q−1} − 1, the number of non-identity vectors.
    pub fn num_nonidentity(&self) -> usize {
        self.len() - 1
    }

    /// Entry `j` (0-based) of vector `i`.
    pub fn sign(&self, i: usize, j: usize) -> f64 {
        if j > 0 && (i >> (self.q - 1 - j)) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn vector(&self, i: usize) -> Vec<i8> {
        (0..self.q)
            .map(|j| if self.sign(i, j) < 0.0 { -1 } else { 1 })
            .collect()
    }

    pub fn vectors(&self) -> impl Iterator<Item = Vec<i8>> + '_ {
        (0..self.len()).map(|i| self.vector(i))
    }
}

/// K = ⌊α·|G_U|⌋, the number of top values the statistic may occupy.
pub fn k_budget(alpha: f64, n_unique: usize) -> usize {
    (alpha * n_unique as f64 + 1e-9).floor() as usize
}

/// T(g) = |(1/q) Σ g_j Ŝ_j| for every g in G_U, in the set's order.
///
/// The signed sum is split into a head and a tail table so that every
/// value is computed with the same fixed summation pattern.
pub fn randomization_stats(scores: &[f64], s: &SignChangeSet) -> Vec<f64> {
    assert_eq!(scores.len(), s.q(), "one score per group");
    let q = s.q();
    let bits = q - 1;
    let lo_bits = bits / 2;
    let hi_bits = bits - lo_bits;
    // Bit b of the index flips entry q−1−b.
    let table = |nbits: usize, offset: usize| -> Vec<f64> {
        (0..1usize << nbits)
            .map(|m| {
                (0..nbits)
                    .map(|b| {
                        let v = scores[q - 1 - (b + offset)];
                        if (m >> b) & 1 == 1 {
                            -v
                        } else {
                            v
                        }
                    })
                    .sum()
            })
            .collect()
    };
    let lo = table(lo_bits, 0);
    let hi = table(hi_bits, lo_bits);
    let mask = (1usize << lo_bits) - 1;
    let qf = q as f64;
    let value = |i: usize| ((scores[0] + hi[i >> lo_bits]) + lo[i & mask]).abs() / qf;
    if s.len() >= 1 << 14 {
        (0..s.len()).into_par_iter().map(value).collect()
    } else {
        (0..s.len()).map(value).collect()
    }
}

/// inf{u : #{T(g) ≤ u}/|G_U| ≥ 1 − α}.
pub fn critical_value(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let k = k_budget(alpha, n).min(n - 1);
    let mut sorted = values.to_vec();
    let idx = n - k - 1;
    let (_, cv, _) = sorted.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *cv
}

/// Decision of the test on raw scores without materializing the
/// randomization distribution: reject iff at least N − K of the values are
/// strictly below the observed one. Visits G_U in Gray-code order.
pub fn rejects(scores: &[f64], k: usize) -> bool {
    let q = scores.len();
    if k == 0 || q < 2 {
        return false;
    }
    let n = 1usize << (q - 1);
    let total: f64 = scores.iter().sum();
    let t = total.abs();
    // The identity counts as one value not below t.
    let mut not_below = 1usize;
    let mut sum = total;
    let mut flipped = vec![false; q];
    for i in 1..n {
        let b = i.trailing_zeros() as usize;
        let j = q - 1 - b;
        if flipped[j] {
            sum += 2.0 * scores[j];
        } else {
            sum -= 2.0 * scores[j];
        }
        flipped[j] = !flipped[j];
        if sum.abs() >= t {
            not_below += 1;
            if not_below > k {
                return false;
            }
        }
    }
    true
}

/// Result of one application of the test.
#[derive(Debug, Clone, Serialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    #[serde(rename = "K")]
    pub k_budget: usize,
    pub q: usize,
    pub alpha: f64,
    pub scores: Vec<f64>,
    pub groups: Vec<String>,
    #[serde(skip)]
    pub randomization_values: Vec<f64>,
}

/// Runs the test on given scores.
pub fn test_scores(scores: &[f64], alpha: f64, groups: Vec<String>) -> Result<TestOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Estimation("a group score is not finite".into()));
    }
    let s = SignChangeSet::new(scores.len())?;
    let values = randomization_stats(scores, &s);
    let cv = critical_value(&values, alpha);
    let statistic = values[0];
    Ok(TestOutcome {
        statistic,
        critical_value: cv,
        reject: statistic > cv,
        k_budget: k_budget(alpha, s.len()),
        q: s.q(),
        alpha,
        scores: scores.to_vec(),
        groups,
        randomization_values: values,
    })
}

/// Fits every group of `g`, forms the scores, and applies the test.
pub fn run_test(
    d: &PanelDataset,
    g: &Grouping,
    h: &Hypothesis,
    spec: &RegressionSpec,
) -> Result<TestOutcome> {
    let (outcome, _) = run_test_with_fits(d, g, h, spec)?;
    Ok(outcome)
}

pub fn run_test_with_fits(
    d: &PanelDataset,
    g: &Grouping,
    h: &Hypothesis,
    spec: &RegressionSpec,
) -> Result<(TestOutcome, Vec<GroupFit>)> {
    ensure_valid(g, d)?;
    check_c(&h.c, spec)?;
    let fits = g
        .groups
        .par_iter()
        .map(|grp| ols_within_group(d, &grp.members(), spec))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = fits.iter().map(|f| score_stat(f, h)).collect();
    let labels = fits.iter().map(GroupFit::label).collect();
    Ok((test_scores(&scores, h.alpha, labels)?, fits))
}

pub(crate) fn ensure_valid(g: &Grouping, d: &PanelDataset) -> Result<()> {
    let violations = validate_grouping(g, d);
    if violations.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Error::Grouping(msgs.join("; ")))
    }
}
