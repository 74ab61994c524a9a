//! Local asymptotic power of the test: closed form for K = 1, term-by-term
//! enumeration for small q, and direct simulation of the limit experiment.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::crs::{k_budget, rejects, SignChangeSet};
use crate::data::{Grouping, Hypothesis, PanelDataset};
use crate::error::{Error, Result};
use crate::estimation::{limit_params, LimitParams, WorkingModel};
use crate::formula::RegressionSpec;
use crate::normal;
use crate::rng::stream_rng;

/// Largest q the term enumeration accepts.
pub const MAX_EXACT_Q: usize = 4;
/// Smallest replication count accepted by the simulators.
pub const MIN_MC_REPS: u64 = 1000;
const CHUNK: u64 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMethodKind {
    ClosedK1,
    ExactEnum,
    MonteCarlo,
}

impl PowerMethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            PowerMethodKind::ClosedK1 => "closed_k1",
            PowerMethodKind::ExactEnum => "exact_enum",
            PowerMethodKind::MonteCarlo => "monte_carlo",
        }
    }
}

/// How to evaluate power.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerMethod {
    ClosedK1,
    Exact { term_reps: u64, seed: u64 },
    MonteCarlo { reps: u64, seed: u64 },
    /// Closed form when K = 1, simulation otherwise.
    Auto { reps: u64, seed: u64 },
}

/// One nonzero term of the enumeration: the probability that exactly the
/// non-identity vectors in `h_mask` exceed the statistic, with partial-sum
/// sign pattern `m_bits` (bit l set means κ = −1 for vector l+1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Term {
    pub k: usize,
    pub h_mask: u64,
    pub m_bits: u64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerEstimate {
    pub value: f64,
    pub method: PowerMethodKind,
    pub mc_reps: Option<u64>,
    pub mc_se: Option<f64>,
    /// (π_L, π_R) for the closed form.
    pub components: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<Term>>,
}

impl PowerEstimate {
    pub fn se(&self) -> f64 {
        self.mc_se.unwrap_or(0.0)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must be finite, got {delta}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// π_L = Π Φ(−ξ_jδ/σ_j), π_R = Π Φ(ξ_jδ/σ_j).
pub fn k1_components(ratios: &[f64], delta: f64) -> (f64, f64) {
    let mut left = 1.0;
    let mut right = 1.0;
    for r in ratios {
        left *= normal::cdf(-r * delta);
        right *= normal::cdf(r * delta);
    }
    (left, right)
}

/// Closed-form power when K = 1. When `alpha` is given it must imply K = 1.
pub fn power_k1(lp: &LimitParams, delta: f64, alpha: Option<f64>) -> Result<PowerEstimate> {
    check_delta(delta)?;
    if let Some(alpha) = alpha {
        check_alpha(alpha)?;
        let k = k_budget(alpha, SignChangeSet::new(lp.q())?.len());
        if k != 1 {
            return Err(Error::Domain(format!(
                "alpha = {alpha} gives K = {k} with q = {}; the closed form needs K = 1, use the exact or Monte Carlo method",
                lp.q()
            )));
        }
    }
    let (left, right) = k1_components(&lp.ratios(), delta);
    Ok(PowerEstimate {
        value: left + right,
        method: PowerMethodKind::ClosedK1,
        mc_reps: None,
        mc_se: None,
        components: Some((left, right)),
        terms: None,
    })
}

fn binomial_se(p: f64, reps: u64) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

/// Runs `per_chunk` on seeded chunks of `reps` and reduces with `merge`.
fn chunked<T, F, M>(reps: u64, seed: u64, per_chunk: F, merge: M) -> T
where
    T: Send + Default,
    F: Fn(&mut rand_chacha::ChaCha8Rng, u64) -> T + Sync,
    M: Fn(T, T) -> T + Sync + Send,
{
    let n_chunks = reps.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(reps - c * CHUNK);
            let mut rng = stream_rng(seed, c);
            per_chunk(&mut rng, len)
        })
        .reduce(T::default, merge)
}

/// Rejection frequency of the limit experiment: scores Z_j + ξ_jδ with
/// independent Z_j ~ N(0, σ_j²).
pub fn power_mc(lp: &LimitParams, delta: f64, alpha: f64, reps: u64, seed: u64) -> Result<PowerEstimate> {
    check_delta(delta)?;
    check_alpha(alpha)?;
    if reps < MIN_MC_REPS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_MC_REPS} replications are required, got {reps}"
        )));
    }
    let q = lp.q();
    let k = k_budget(alpha, SignChangeSet::new(q)?.len());
    let mean: Vec<f64> = lp.xi.iter().map(|x| x * delta).collect();
    let hits = chunked(
        reps,
        seed,
        |rng, len| {
            let mut scores = vec![0.0; q];
            let mut hits = 0u64;
            for _ in 0..len {
                for j in 0..q {
                    let e: f64 = StandardNormal.sample(rng);
                    scores[j] = lp.sigma[j] * e + mean[j];
                }
                if rejects(&scores, k) {
                    hits += 1;
                }
            }
            hits
        },
        |a, b| a + b,
    );
    let value = hits as f64 / reps as f64;
    Ok(PowerEstimate {
        value,
        method: PowerMethodKind::MonteCarlo,
        mc_reps: Some(reps),
        mc_se: Some(binomial_se(value, reps)),
        components: None,
        terms: None,
    })
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}

/// The index sets of the power expansion for a given q and K.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationPlan {
    pub q: usize,
    pub k: usize,
    /// L = 2^{q−1} − 1.
    pub l: usize,
}

impl EnumerationPlan {
    pub fn new(q: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if q == 0 || q > MAX_EXACT_Q {
            return Err(Error::Bound {
                what: "q for exact enumeration",
                value: q,
                bound: MAX_EXACT_Q,
            });
        }
        let n = 1usize << (q - 1);
        Ok(EnumerationPlan {
            q,
            k: k_budget(alpha, n),
            l: n - 1,
        })
    }

    /// |H_{k−1}| = C(L, k−1).
    pub fn num_subsets(&self, k: usize) -> u64 {
        binomial(self.l, k - 1)
    }

    /// |M| = 2^L.
    pub fn num_patterns(&self) -> u64 {
        1u64 << self.l
    }

    /// Size-(k−1) subsets of the L non-identity vectors as bitmasks (bit
    /// l−1 stands for vector l), in increasing numeric order.
    pub fn subsets(&self, k: usize) -> impl Iterator<Item = u64> {
        let size = (k - 1) as u32;
        (0..1u64 << self.l).filter(move |m| m.count_ones() == size)
    }

    pub fn sign_patterns(&self) -> std::ops::Range<u64> {
        0..self.num_patterns()
    }

    /// Total number of terms in the triple sum.
    pub fn num_terms(&self) -> u64 {
        (1..=self.k).map(|k| self.num_subsets(k)).sum::<u64>() * self.num_patterns()
    }
}

/// Evaluates the expansion Σ_k Σ_{H ∈ H_{k−1}} Σ_{m ∈ M} P[∩_l F^{(m_l)}(ḡ_l, H, δ)].
///
/// Each joint probability is estimated from `term_reps` draws shared by all
/// terms. A draw falls in exactly one (H, m) cell: m_l is the sign of the
/// same-sign partial sum V_same(ḡ_l), and ḡ_l ∈ H iff V_same and V_diff
/// have opposite signs.
pub fn power_exact(
    lp: &LimitParams,
    delta: f64,
    alpha: f64,
    term_reps: u64,
    seed: u64,
) -> Result<PowerEstimate> {
    check_delta(delta)?;
    let plan = EnumerationPlan::new(lp.q(), alpha)?;
    if term_reps < MIN_MC_REPS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_MC_REPS} term replications are required, got {term_reps}"
        )));
    }
    let q = plan.q;
    let l_count = plan.l;
    let s = SignChangeSet::new(q)?;
    let mean: Vec<f64> = lp.xi.iter().map(|x| x * delta).collect();
    let cells: BTreeMap<(u64, u64), u64> = chunked(
        term_reps,
        seed,
        |rng, len| {
            let mut counts: BTreeMap<(u64, u64), u64> = BTreeMap::new();
            let mut x = vec![0.0; q];
            for _ in 0..len {
                for j in 0..q {
                    let e: f64 = StandardNormal.sample(rng);
                    x[j] = lp.sigma[j] * e + mean[j];
                }
                let mut h_mask = 0u64;
                let mut m_bits = 0u64;
                let mut degenerate = false;
                for l in 1..=l_count {
                    let (mut same, mut diff) = (0.0, 0.0);
                    for (j, xj) in x.iter().enumerate() {
                        if s.sign(l, j) > 0.0 {
                            same += xj;
                        } else {
                            diff += xj;
                        }
                    }
                    if same == 0.0 || diff == 0.0 {
                        degenerate = true;
                        break;
                    }
                    if same < 0.0 {
                        m_bits |= 1 << (l - 1);
                    }
                    if (same > 0.0) != (diff > 0.0) {
                        h_mask |= 1 << (l - 1);
                    }
                }
                if !degenerate && (h_mask.count_ones() as usize) < plan.k {
                    *counts.entry((h_mask, m_bits)).or_default() += 1;
                }
            }
            counts
        },
        |mut a, b| {
            for (key, v) in b {
                *a.entry(key).or_default() += v;
            }
            a
        },
    );
    let n = term_reps as f64;
    let mut terms = Vec::new();
    let mut total = 0u64;
    for k in 1..=plan.k {
        for h in plan.subsets(k) {
            for (&(_, m), &count) in cells.range((h, 0)..=(h, u64::MAX)) {
                total += count;
                terms.push(Term {
                    k,
                    h_mask: h,
                    m_bits: m,
                    prob: count as f64 / n,
                });
            }
        }
    }
    let value = total as f64 / n;
    Ok(PowerEstimate {
        value,
        method: PowerMethodKind::ExactEnum,
        mc_reps: Some(term_reps),
        mc_se: Some(binomial_se(value, term_reps)),
        components: None,
        terms: Some(terms),
    })
}

/// Power of the limit experiment described by `lp`.
pub fn power_of_limits(
    lp: &LimitParams,
    delta: f64,
    alpha: f64,
    method: PowerMethod,
) -> Result<PowerEstimate> {
    match method {
        PowerMethod::ClosedK1 => power_k1(lp, delta, Some(alpha)),
        PowerMethod::Exact { term_reps, seed } => power_exact(lp, delta, alpha, term_reps, seed),
        PowerMethod::MonteCarlo { reps, seed } => power_mc(lp, delta, alpha, reps, seed),
        PowerMethod::Auto { reps, seed } => {
            check_alpha(alpha)?;
            if k_budget(alpha, SignChangeSet::new(lp.q())?.len()) == 1 {
                power_k1(lp, delta, None)
            } else {
                power_mc(lp, delta, alpha, reps, seed)
            }
        }
    }
}

/// Plug-in power of grouping `g`: (ξ, σ) estimated per group, then
/// evaluated with `method` at the hypothesis' δ and α.
pub fn power_of_grouping(
    d: &PanelDataset,
    g: &Grouping,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
    method: PowerMethod,
) -> Result<PowerEstimate> {
    crate::crs::ensure_valid(g, d)?;
    let (lp, _, _) = limit_params(d, g, &h.c, spec, model)?;
    power_of_limits(&lp, h.delta, h.alpha, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(q: usize) -> LimitParams {
        LimitParams::new(vec![1.0; q], vec![1.0; q]).unwrap()
    }

    #[test]
    fn k1_examples() {
        let p = power_k1(&unit(5), 0.0, None).unwrap();
        assert_eq!(p.components, Some((1.0 / 32.0, 1.0 / 32.0)));
        assert_eq!(p.value, 0.0625);
        let p = power_k1(&unit(2), 1.0, None).unwrap();
        let phi = normal::cdf(-1.0);
        assert!((p.value - (phi * phi + (1.0 - phi) * (1.0 - phi))).abs() < 1e-15);
        assert!((p.value - 0.7330).abs() < 1e-4);
        let far = power_k1(&unit(3), 40.0, None).unwrap();
        assert!((far.value - 1.0).abs() < 1e-15);
        assert!(matches!(
            power_k1(&unit(5), 0.0, Some(0.2)),
            Err(Error::Domain(_))
        ));
        assert!(power_k1(&unit(5), 0.0, Some(0.0625)).is_ok());
    }

    #[test]
    fn mc_null_value_and_determinism() {
        let lp = unit(6);
        let p = power_mc(&lp, 0.0, 0.05, 100_000, 3).unwrap();
        assert!((p.value - 0.03125).abs() <= 3.0 * p.se(), "{}", p.value);
        let a = power_mc(&lp, 0.5, 0.05, 1000, 11).unwrap();
        let b = power_mc(&lp, 0.5, 0.05, 1000, 11).unwrap();
        assert_eq!(a, b);
        assert!(power_mc(&lp, 0.0, 0.05, 999, 1).is_err());
    }

    #[test]
    fn exact_plan_sizes_and_guard() {
        let plan = EnumerationPlan::new(4, 0.25).unwrap();
        assert_eq!((plan.k, plan.l), (2, 7));
        assert_eq!(plan.num_subsets(2), 7);
        assert_eq!(plan.num_patterns(), 128);
        assert_eq!(plan.subsets(2).count(), 7);
        assert!(matches!(EnumerationPlan::new(5, 0.1), Err(Error::Bound { bound: 4, .. })));
    }

    #[test]
    fn exact_matches_k1_at_null() {
        let p = power_exact(&unit(3), 0.0, 0.26, 200_000, 5).unwrap();
        assert!((p.value - 0.25).abs() <= 3.0 * p.se());
        let terms = p.terms.unwrap();
        let sum: f64 = terms.iter().map(|t| t.prob).sum();
        assert!((sum - p.value).abs() < 1e-12);
        // With K = 1 only H = ∅ contributes, and only the all-positive and
        // all-negative sign patterns are possible.
        assert!(terms.iter().all(|t| t.h_mask == 0));
        assert!(terms.len() <= 2);
    }

    #[test]
    fn exact_agrees_with_mc_for_k2() {
        let lp = LimitParams::new(vec![0.5; 4], vec![1.0, 2.0, 0.7, 1.3]).unwrap();
        let e = power_exact(&lp, 1.5, 0.25, 200_000, 1).unwrap();
        let m = power_mc(&lp, 1.5, 0.25, 200_000, 2).unwrap();
        let se = (e.se().powi(2) + m.se().powi(2)).sqrt();
        assert!((e.value - m.value).abs() <= 3.0 * se);
    }

    #[test]
    fn auto_dispatch() {
        let lp = unit(4);
        let a = power_of_limits(&lp, 1.0, 0.2, PowerMethod::Auto { reps: 1000, seed: 1 }).unwrap();
        assert_eq!(a.method, PowerMethodKind::ClosedK1);
        let b = power_of_limits(&lp, 1.0, 0.3, PowerMethod::Auto { reps: 1000, seed: 1 }).unwrap();
        assert_eq!(b.method, PowerMethodKind::MonteCarlo);
    }

    proptest! {
        #[test]
        fn k1_depends_only_on_ratios(
            xi in prop::collection::vec(0.1f64..1.0, 2..7),
            scale in 0.1f64..10.0,
            delta in -3.0f64..3.0,
        ) {
            let q = xi.len();
            let sigma: Vec<f64> = (0..q).map(|j| 0.5 + j as f64 * 0.3).collect();
            let a = power_k1(&LimitParams::new(xi.clone(), sigma.clone()).unwrap(), delta, None).unwrap();
            let scaled: Vec<f64> = sigma.iter().map(|s| s * scale).collect();
            let b = power_k1(&LimitParams::new(xi, scaled).unwrap(), delta * scale, None).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }

        #[test]
        fn k1_properties(
            ratios in prop::collection::vec(0.05f64..3.0, 2..8),
            delta in -4.0f64..4.0,
        ) {
            let q = ratios.len();
            let lp = LimitParams::new(ratios, vec![1.0; q]).unwrap();
            let p = power_k1(&lp, delta, None).unwrap();
            let (l, r) = p.components.unwrap();
            prop_assert!(p.value >= 0.0 && p.value <= 1.0);
            prop_assert!(p.value >= l.max(r));
            let base = 0.5f64.powi(q as i32);
            if delta < -1e-6 {
                prop_assert!(l > base && base > r);
            } else if delta > 1e-6 {
                prop_assert!(r > base && base > l);
            }
            let mirrored = power_k1(&lp, -delta, None).unwrap();
            prop_assert!((mirrored.value - p.value).abs() < 1e-15);
        }
    }
}
