//! Choosing how to combine clusters so that the test has the most local
//! power.
//!
//! The K = 1 routine splits the range of the small product term into
//! intervals and solves one constrained assignment program per interval.
//! The K > 1 routine improves a starting pairing by pairwise swaps.

mod bnb;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{next_permutation, ClusterId, Group, Grouping, Hypothesis, PanelDataset};
use crate::error::{Error, Result};
use crate::estimation::{LimitParams, PairTable, PsiMatrix, WorkingModel};
use crate::formula::RegressionSpec;
use crate::power::{power_of_limits, PowerEstimate, PowerMethod, PowerMethodKind};
use crate::rng::stream_rng;

/// Default number of intervals.
pub const DEFAULT_INTERVALS: usize = 200;
/// Largest q̄ accepted by the exhaustive search.
pub const MAX_EXHAUSTIVE: usize = 8;
/// Largest number of candidate treated-side subsets.
pub const MAX_SUBSETS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Equal steps on the raw scale.
    #[default]
    Raw,
    /// Equal steps on the log scale.
    Log,
}

/// Interval end points ε₀ < ε₁ < … < ε_A = 2^{−q̄}, stored as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalPlan {
    pub ln_eps: Vec<f64>,
}

impl IntervalPlan {
    pub fn new(ln_eps0: f64, q_bar: usize, a: usize, spacing: Spacing) -> Result<Self> {
        if a == 0 {
            return Err(Error::InvalidArgument("the number of intervals must be at least 1".into()));
        }
        let ln_top = -(q_bar as f64) * std::f64::consts::LN_2;
        if !(ln_eps0.is_finite() && ln_eps0 < ln_top) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_0 must lie in (0, 2^-{q_bar})"
            )));
        }
        let mut ln_eps = Vec::with_capacity(a + 1);
        ln_eps.push(ln_eps0);
        let eps0 = ln_eps0.exp();
        let top = ln_top.exp();
        for i in 1..a {
            let frac = i as f64 / a as f64;
            ln_eps.push(match spacing {
                Spacing::Raw => (eps0 + frac * (top - eps0)).ln(),
                Spacing::Log => ln_eps0 + frac * (ln_top - ln_eps0),
            });
        }
        ln_eps.push(ln_top);
        Ok(IntervalPlan { ln_eps })
    }

    pub fn len(&self) -> usize {
        self.ln_eps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inclusive log range of interval `a` (1-based). The outer ends are
    /// widened slightly (the top one up to 0) so that rounding in the log
    /// sums cannot push an assignment attaining ε₀ or 2^{−q̄} out of range.
    pub fn interval(&self, a: usize) -> (f64, f64) {
        let lo = self.ln_eps[a - 1];
        let lo = if a == 1 { lo - 1e-9 * (1.0 + lo.abs()) } else { lo };
        let hi = if a == self.len() { 0.0 } else { self.ln_eps[a] };
        (lo, hi)
    }
}

/// Which product the program maximizes: for δ < 0 it is ΠΨ, with Π(1−Ψ)
/// confined to the interval; for δ > 0 the roles swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    NegativeDelta,
    PositiveDelta,
}

impl Branch {
    pub fn of(delta: f64) -> Option<Self> {
        if delta < 0.0 {
            Some(Branch::NegativeDelta)
        } else if delta > 0.0 {
            Some(Branch::PositiveDelta)
        } else {
            None
        }
    }

    fn coefficients<'a>(&self, psi: &'a PsiMatrix) -> (&'a [f64], &'a [f64]) {
        match self {
            Branch::NegativeDelta => (&psi.ln_psi, &psi.ln_psi_c),
            Branch::PositiveDelta => (&psi.ln_psi_c, &psi.ln_psi),
        }
    }
}

/// One assignment of rows to columns of Ψ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentSolution {
    /// Column chosen by each row.
    pub assignment: Vec<usize>,
    pub grouping: Grouping,
    pub objective: f64,
    pub side_sum: f64,
}

impl AssignmentSolution {
    /// The 0/1 matrix z.
    pub fn z(&self, n_cols: usize) -> Vec<Vec<u8>> {
        self.assignment
            .iter()
            .map(|&c| (0..n_cols).map(|r| u8::from(r == c)).collect())
            .collect()
    }
}

struct Layout {
    col_mask: Vec<u64>,
    full_mask: u64,
}

fn layout(psi: &PsiMatrix) -> Result<Layout> {
    let universe: BTreeSet<ClusterId> = psi.col_sets.iter().flatten().copied().collect();
    if universe.len() > 64 {
        return Err(Error::Bound {
            what: "clusters on the column side",
            value: universe.len(),
            bound: 64,
        });
    }
    let pos: Vec<ClusterId> = universe.into_iter().collect();
    let col_mask = psi
        .col_sets
        .iter()
        .map(|set| {
            set.iter()
                .map(|id| 1u64 << pos.binary_search(id).expect("id in universe"))
                .fold(0, |a, b| a | b)
        })
        .collect();
    let full_mask = if pos.len() == 64 { u64::MAX } else { (1u64 << pos.len()) - 1 };
    Ok(Layout {
        col_mask,
        full_mask,
    })
}

fn grouping_of(psi: &PsiMatrix, assignment: &[usize]) -> Grouping {
    let groups = assignment
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let row = BTreeSet::from([psi.row_ids[j]]);
            let col = psi.col_sets[c].clone();
            if psi.rows_treated {
                Group {
                    controls: col,
                    treated: row,
                }
            } else {
                Group {
                    controls: row,
                    treated: col,
                }
            }
        })
        .collect();
    Grouping::new(groups)
}

fn solve_with(
    psi: &PsiMatrix,
    obj: &[f64],
    side: Option<(&[f64], f64, f64)>,
) -> Result<Option<AssignmentSolution>> {
    let lay = layout(psi)?;
    let p = bnb::Problem {
        n_rows: psi.n_rows,
        n_cols: psi.n_cols,
        obj,
        side,
        allowed: &psi.allowed,
        col_mask: &lay.col_mask,
        full_mask: lay.full_mask,
    };
    Ok(bnb::solve(&p).map(|a| AssignmentSolution {
        grouping: grouping_of(psi, &a.cols),
        assignment: a.cols,
        objective: a.objective,
        side_sum: a.side_sum,
    }))
}

/// Maximizes the log of the large product subject to the log of the small
/// product lying in `[lo, hi]` (both logs). `None` means infeasible.
pub fn solve_interval_bilp(
    psi: &PsiMatrix,
    ln_interval: (f64, f64),
    branch: Branch,
) -> Result<Option<AssignmentSolution>> {
    let (lo, hi) = ln_interval;
    if !(lo < hi) || lo.is_nan() {
        return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
    }
    let (obj, side) = branch.coefficients(psi);
    solve_with(psi, obj, Some((side, lo, hi)))
}

/// Π Ψ + Π (1 − Ψ) along an assignment, with both products.
pub fn k1_power_of_assignment(psi: &PsiMatrix, assignment: &[usize]) -> (f64, f64, f64) {
    let mut left = 1.0;
    let mut right = 1.0;
    for (j, &c) in assignment.iter().enumerate() {
        let i = psi.idx(j, c);
        left *= psi.psi[i];
        right *= psi.psi_c[i];
    }
    (left + right, left, right)
}

fn k1_estimate(psi: &PsiMatrix, assignment: &[usize]) -> PowerEstimate {
    let (value, left, right) = k1_power_of_assignment(psi, assignment);
    PowerEstimate {
        value,
        method: PowerMethodKind::ClosedK1,
        mc_reps: None,
        mc_se: None,
        components: Some((left, right)),
        terms: None,
    }
}

/// Default ε₀: a lower bound on the small product, q̄ times the smallest
/// log factor. It is kept as a log, so it stays finite even when ε₀
/// itself underflows.
pub fn default_ln_eps0(psi: &PsiMatrix, branch: Branch) -> f64 {
    let (_, side) = branch.coefficients(psi);
    let min = side
        .iter()
        .zip(&psi.allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::INFINITY, f64::min);
    psi.n_rows as f64 * min
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalDiagnostic {
    pub a: usize,
    pub ln_lo: f64,
    pub ln_hi: f64,
    pub feasible: bool,
    pub power: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CombineResult {
    pub grouping: Grouping,
    pub power: PowerEstimate,
    pub solution: Option<AssignmentSolution>,
    pub diagnostics: Vec<IntervalDiagnostic>,
    pub warnings: Vec<String>,
}

/// Options for the interval programs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct K1Options {
    pub intervals: usize,
    pub spacing: Spacing,
    /// Overrides the default ε₀ (given as a log).
    pub ln_eps0: Option<f64>,
}

impl Default for K1Options {
    fn default() -> Self {
        K1Options {
            intervals: DEFAULT_INTERVALS,
            spacing: Spacing::Raw,
            ln_eps0: None,
        }
    }
}

/// The K = 1 procedure on a Ψ matrix: solve every interval program, score
/// each solution by its K = 1 power, and keep the best (smallest a on ties).
pub fn combine_k1(psi: &PsiMatrix, opts: K1Options) -> Result<CombineResult> {
    let Some(branch) = Branch::of(psi.delta) else {
        let sol = solve_with(psi, &vec![0.0; psi.psi.len()], None)?
            .ok_or(Error::AllInfeasible(0))?;
        return Ok(CombineResult {
            grouping: sol.grouping.clone(),
            power: k1_estimate(psi, &sol.assignment),
            solution: Some(sol),
            diagnostics: Vec::new(),
            warnings: vec![
                "delta = 0: every grouping has the same power; returning the first one".into(),
            ],
        });
    };
    let ln_eps0 = opts.ln_eps0.unwrap_or_else(|| default_ln_eps0(psi, branch));
    let plan = IntervalPlan::new(ln_eps0, psi.n_rows, opts.intervals, opts.spacing)?;
    let solved = (1..=plan.len())
        .into_par_iter()
        .map(|a| solve_interval_bilp(psi, plan.interval(a), branch))
        .collect::<Result<Vec<_>>>()?;
    let mut diagnostics = Vec::with_capacity(plan.len());
    let mut best: Option<(f64, usize)> = None;
    for (i, sol) in solved.iter().enumerate() {
        let a = i + 1;
        let (ln_lo, ln_hi) = plan.interval(a);
        let power = sol.as_ref().map(|s| k1_power_of_assignment(psi, &s.assignment).0);
        if let Some(p) = power {
            if best.is_none_or(|(b, _)| p > b) {
                best = Some((p, i));
            }
        }
        diagnostics.push(IntervalDiagnostic {
            a,
            ln_lo,
            ln_hi,
            feasible: sol.is_some(),
            power,
        });
    }
    let (_, i) = best.ok_or(Error::AllInfeasible(plan.len()))?;
    let sol = solved[i].clone().expect("feasible");
    Ok(CombineResult {
        grouping: sol.grouping.clone(),
        power: k1_estimate(psi, &sol.assignment),
        solution: Some(sol),
        diagnostics,
        warnings: Vec::new(),
    })
}

/// Maximizes Σ z (log Ψ + log(1 − Ψ)) with no side constraint.
pub fn combine_loglinear(psi: &PsiMatrix) -> Result<(AssignmentSolution, Vec<String>)> {
    let obj: Vec<f64> = psi.ln_psi.iter().zip(&psi.ln_psi_c).map(|(a, b)| a + b).collect();
    let sol = solve_with(psi, &obj, None)?.ok_or(Error::AllInfeasible(1))?;
    Ok((
        sol,
        vec!["the log-linearized objective can do worse than picking a grouping at random; use it for comparison only".into()],
    ))
}

/// Exhaustive K = 1 search over all perfect assignments of a square Ψ.
/// Ties go to the lexicographically first permutation.
pub fn exhaustive_k1(psi: &PsiMatrix) -> Result<(Vec<usize>, f64)> {
    if !psi.is_square() {
        return Err(Error::InvalidArgument("exhaustive search needs a square Ψ".into()));
    }
    let n = psi.n_rows;
    if n > MAX_EXHAUSTIVE {
        return Err(Error::Bound {
            what: "q_bar for exhaustive search",
            value: n,
            bound: MAX_EXHAUSTIVE,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        if perm.iter().enumerate().all(|(j, &c)| psi.allowed[psi.idx(j, c)]) {
            let p = k1_power_of_assignment(psi, &perm).0;
            if best.as_ref().is_none_or(|b| p > b.1) {
                best = Some((perm.clone(), p));
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.ok_or(Error::AllInfeasible(1))
}

/// Limit parameters of the pairing that gives row j column `assignment[j]`.
pub fn limits_of_assignment(table: &PairTable, assignment: &[usize]) -> Result<LimitParams> {
    let mut xi = Vec::with_capacity(assignment.len());
    let mut sigma = Vec::with_capacity(assignment.len());
    for (j, &c) in assignment.iter().enumerate() {
        let i = table.idx(j, c);
        if !table.allowed[i] {
            return Err(Error::UnidentifiedGroup(format!("({}, {:?})", table.rows[j], table.cols[c])));
        }
        xi.push(table.xi[i]);
        sigma.push(table.sigma[i]);
    }
    LimitParams::new(xi, sigma)
}

/// Power of every assignment in `candidates`, evaluated in parallel.
fn powers_of(
    table: &PairTable,
    candidates: &[Vec<usize>],
    delta: f64,
    alpha: f64,
    method: PowerMethod,
) -> Result<Vec<Option<PowerEstimate>>> {
    candidates
        .par_iter()
        .map(|a| {
            if a.iter().enumerate().all(|(j, &c)| table.allowed[table.idx(j, c)]) {
                let lp = limits_of_assignment(table, a)?;
                power_of_limits(&lp, delta, alpha, method).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapStep {
    /// Rows whose columns were exchanged; `None` for the starting point.
    pub swap: Option<(usize, usize)>,
    pub assignment: Vec<usize>,
    pub power: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeuristicResult {
    pub grouping: Grouping,
    pub power: PowerEstimate,
    pub initial_power: f64,
    pub trace: Vec<SwapStep>,
}

/// Pairwise-swap local search from `start`. Each round evaluates every
/// swap of two rows' columns and moves to the best strict improvement
/// (first pair on ties); it stops when no swap improves. Power estimates
/// share `method`'s seed, so all candidates see the same draws.
pub fn heuristic_from(
    table: &PairTable,
    start: Vec<usize>,
    delta: f64,
    alpha: f64,
    method: PowerMethod,
) -> Result<HeuristicResult> {
    let n = start.len();
    let psi_layout = PsiMatrix::from_table(table, delta);
    let mut current = start;
    let mut current_power = powers_of(table, &[current.clone()], delta, alpha, method)?
        .pop()
        .flatten()
        .ok_or_else(|| Error::Grouping("the starting grouping is not identified".into()))?;
    let initial_power = current_power.value;
    let mut trace = vec![SwapStep {
        swap: None,
        assignment: current.clone(),
        power: current_power.value,
    }];
    loop {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let candidates: Vec<Vec<usize>> = pairs
            .iter()
            .map(|&(i, j)| {
                let mut a = current.clone();
                a.swap(i, j);
                a
            })
            .collect();
        let powers = powers_of(table, &candidates, delta, alpha, method)?;
        let mut best: Option<usize> = None;
        for (k, p) in powers.iter().enumerate() {
            if let Some(p) = p {
                let bar = best.map_or(current_power.value, |b| {
                    powers[b].as_ref().expect("scored").value
                });
                if p.value > bar {
                    best = Some(k);
                }
            }
        }
        let Some(k) = best else { break };
        current = candidates[k].clone();
        current_power = powers[k].clone().expect("scored");
        trace.push(SwapStep {
            swap: Some(pairs[k]),
            assignment: current.clone(),
            power: current_power.value,
        });
    }
    Ok(HeuristicResult {
        grouping: grouping_of(&psi_layout, &current),
        power: current_power,
        initial_power,
        trace,
    })
}

/// The K > 1 procedure on a table of candidate pairs: start from the K = 1
/// solution, then improve by swaps.
pub fn combine_heuristic_table(
    table: &PairTable,
    delta: f64,
    alpha: f64,
    method: PowerMethod,
    k1: K1Options,
) -> Result<HeuristicResult> {
    if table.n_rows() != table.n_cols() {
        return Err(Error::InvalidArgument("the swap heuristic needs paired mode".into()));
    }
    let psi = PsiMatrix::from_table(table, delta);
    let start = combine_k1(&psi, k1)?
        .solution
        .expect("combine_k1 returns a solution")
        .assignment;
    heuristic_from(table, start, delta, alpha, method)
}

/// Exhaustive search over all pairings of a table, scoring each with
/// `method`. Ties go to the lexicographically first pairing.
pub fn exhaustive_table(
    table: &PairTable,
    delta: f64,
    alpha: f64,
    method: PowerMethod,
) -> Result<(Vec<usize>, PowerEstimate)> {
    let n = table.n_rows();
    if n != table.n_cols() {
        return Err(Error::InvalidArgument("exhaustive search needs paired mode".into()));
    }
    if n > MAX_EXHAUSTIVE {
        return Err(Error::Bound {
            what: "q_bar for exhaustive search",
            value: n,
            bound: MAX_EXHAUSTIVE,
        });
    }
    let mut perms = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perms.push(perm.clone());
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let powers = powers_of(table, &perms, delta, alpha, method)?;
    let mut best: Option<usize> = None;
    for (k, p) in powers.iter().enumerate() {
        if let Some(p) = p {
            if best.is_none_or(|b| p.value > powers[b].as_ref().expect("scored").value) {
                best = Some(k);
            }
        }
    }
    let k = best.ok_or(Error::AllInfeasible(perms.len()))?;
    Ok((perms[k].clone(), powers[k].clone().expect("scored")))
}

fn paired_table(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
) -> Result<PairTable> {
    PairTable::paired(d, &h.c, spec, model, false)
}

/// The K = 1 procedure on data in paired mode. Candidate pairs that are
/// not identified are excluded from the programs.
pub fn combine_k1_data(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
    opts: K1Options,
) -> Result<CombineResult> {
    let table = paired_table(d, h, spec, model)?;
    let psi = PsiMatrix::from_table(&table, h.delta);
    let mut out = combine_k1(&psi, opts)?;
    out.warnings.extend(floor_warnings(&table));
    Ok(out)
}

fn floor_warnings(table: &PairTable) -> Vec<String> {
    let mut out = Vec::new();
    for j in 0..table.n_rows() {
        for r in 0..table.n_cols() {
            let i = table.idx(j, r);
            if table.allowed[i] && table.floored[i] {
                out.push(format!(
                    "sigma for candidate ({}, {:?}) was not positive and was floored",
                    table.rows[j], table.cols[r]
                ));
            }
        }
    }
    out
}

/// The swap heuristic on data in paired mode.
pub fn combine_heuristic(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
    method: PowerMethod,
    k1: K1Options,
) -> Result<HeuristicResult> {
    let table = paired_table(d, h, spec, model)?;
    combine_heuristic_table(&table, h.delta, h.alpha, method, k1)
}

/// Global argmax of estimated power over all pairings of `d`.
pub fn combine_exhaustive(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
    method: PowerMethod,
) -> Result<(Grouping, PowerEstimate)> {
    let table = paired_table(d, h, spec, model)?;
    let (assignment, power) = exhaustive_table(&table, h.delta, h.alpha, method)?;
    let psi = PsiMatrix::from_table(&table, h.delta);
    Ok((grouping_of(&psi, &assignment), power))
}

/// A uniformly random pairing of `d`.
pub fn combine_random(d: &PanelDataset, seed: u64) -> Result<Grouping> {
    if d.controls().len() != d.treated().len() {
        return Err(Error::InvalidArgument("random pairing needs paired mode".into()));
    }
    let controls: Vec<ClusterId> = d.controls().iter().copied().collect();
    let mut treated: Vec<ClusterId> = d.treated().iter().copied().collect();
    treated.shuffle(&mut stream_rng(seed, 0));
    let pairs: Vec<(ClusterId, ClusterId)> = controls.into_iter().zip(treated).collect();
    Ok(Grouping::from_pairs(&pairs))
}

/// Nonempty subsets of `ids` with sizes 1..=max_size, by size and then
/// lexicographically.
pub fn candidate_subsets(ids: &[ClusterId], max_size: usize) -> Result<Vec<BTreeSet<ClusterId>>> {
    let n = ids.len();
    let max_size = max_size.min(n);
    let count: u128 = (1..=max_size)
        .map(|k| (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1)))
        .sum();
    if count > MAX_SUBSETS as u128 {
        return Err(Error::Bound {
            what: "candidate subsets |M|",
            value: usize::try_from(count).unwrap_or(usize::MAX),
            bound: MAX_SUBSETS,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    for k in 1..=max_size {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.iter().map(|&i| ids[i]).collect());
            // Next k-combination in lexicographic order.
            let mut i = k;
            while i > 0 && idx[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for t in i..k {
                idx[t] = idx[t - 1] + 1;
            }
        }
    }
    Ok(out)
}

/// The K = 1 procedure when the control and treated counts differ. Each
/// cluster on the smaller side anchors one group and receives a nonempty
/// subset of the larger side; the subsets must partition the larger side.
/// `partitions` overrides the candidate subsets.
pub fn combine_unequal(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
    opts: K1Options,
    partitions: Option<Vec<BTreeSet<ClusterId>>>,
) -> Result<CombineResult> {
    let controls: Vec<ClusterId> = d.controls().iter().copied().collect();
    let treated: Vec<ClusterId> = d.treated().iter().copied().collect();
    let rows_treated = controls.len() > treated.len();
    let (rows, many) = if rows_treated { (treated, controls) } else { (controls, treated) };
    let cols = match partitions {
        Some(m) => {
            let universe: BTreeSet<ClusterId> = many.iter().copied().collect();
            for set in &m {
                if set.is_empty() || !set.is_subset(&universe) {
                    return Err(Error::InvalidArgument(format!(
                        "candidate subset {set:?} is empty or not drawn from the larger side"
                    )));
                }
            }
            m
        }
        None => candidate_subsets(&many, many.len() + 1 - rows.len())?,
    };
    let mut table = PairTable::build(d, rows, cols, &h.c, spec, model, false)?;
    table.rows_treated = rows_treated;
    let psi = PsiMatrix::from_table(&table, h.delta);
    let mut out = combine_k1(&psi, opts)?;
    out.warnings.extend(floor_warnings(&table));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psi(rng: &mut ChaCha8Rng, n: usize, delta: f64) -> PsiMatrix {
        let values: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let v: f64 = rng.random_range(0.5..0.99);
                        if delta < 0.0 { v } else { 1.0 - v }
                    })
                    .collect()
            })
            .collect();
        PsiMatrix::from_values(&values, delta).unwrap()
    }

    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut p: Vec<usize> = (0..n).collect();
        loop {
            out.push(p.clone());
            if !next_permutation(&mut p) {
                break;
            }
        }
        out
    }

    #[test]
    fn interval_plan_shape() {
        let plan = IntervalPlan::new(-20.0, 3, 4, Spacing::Raw).unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan.ln_eps[0], -20.0);
        assert!((plan.ln_eps[4] - (0.125f64).ln()).abs() < 1e-15);
        assert!(plan.ln_eps.windows(2).all(|w| w[0] < w[1]));
        let log = IntervalPlan::new(-20.0, 3, 4, Spacing::Log).unwrap();
        let step = log.ln_eps[1] - log.ln_eps[0];
        assert!((log.ln_eps[3] - log.ln_eps[2] - step).abs() < 1e-12);
        assert!(IntervalPlan::new(-1.0, 3, 4, Spacing::Raw).is_err());
        assert!(IntervalPlan::new(-20.0, 3, 0, Spacing::Raw).is_err());
    }

    #[test]
    fn full_interval_matches_exhaustive_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let psi = random_psi(&mut rng, 3, -1.0);
            let lo = default_ln_eps0(&psi, Branch::NegativeDelta);
            let sol = solve_interval_bilp(&psi, (lo, 0.0), Branch::NegativeDelta)
                .unwrap()
                .unwrap();
            let best = all_perms(3)
                .into_iter()
                .map(|p| (0..3).map(|j| psi.ln_psi[psi.idx(j, p[j])]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sol.objective - best).abs() < 1e-14);
            assert!(sol.side_sum <= -3.0 * std::f64::consts::LN_2);
            for row in sol.z(3) {
                assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 1);
            }
        }
    }

    #[test]
    fn interval_without_solutions_is_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = random_psi(&mut rng, 3, -1.0);
        let lo = default_ln_eps0(&psi, Branch::NegativeDelta);
        let got = solve_interval_bilp(&psi, (lo - 10.0, lo - 1.0), Branch::NegativeDelta).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn equal_psi_returns_first_pairing() {
        let psi = PsiMatrix::from_values(&vec![vec![0.7; 4]; 4], -1.0).unwrap();
        let out = combine_k1(&psi, K1Options::default()).unwrap();
        assert_eq!(out.solution.unwrap().assignment, vec![0, 1, 2, 3]);
        let (first, _) = exhaustive_k1(&psi).unwrap();
        assert_eq!(first, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_by_two_hand_enumeration() {
        let psi = PsiMatrix::from_values(&[vec![0.6, 0.7], vec![0.8, 0.9]], -1.0).unwrap();
        let identity: f64 = 0.6 * 0.9 + 0.4 * 0.1;
        let swapped = 0.7 * 0.8 + 0.3 * 0.2;
        let out = combine_k1(&psi, K1Options::default()).unwrap();
        let want = if identity >= swapped { vec![0, 1] } else { vec![1, 0] };
        assert_eq!(out.solution.unwrap().assignment, want);
        assert!((out.power.value - identity.max(swapped)).abs() < 1e-15);
    }

    #[test]
    fn k1_matches_exhaustive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 3..=5 {
            for sign in [-1.0, 1.0] {
                for _ in 0..20 {
                    let psi = random_psi(&mut rng, n, sign);
                    let (_, best) = exhaustive_k1(&psi).unwrap();
                    let mut a = 200;
                    let mut got = combine_k1(&psi, K1Options::default()).unwrap().power.value;
                    while (got - best).abs() > 1e-12 && a < 3200 {
                        a *= 2;
                        let opts = K1Options { intervals: a, ..Default::default() };
                        got = combine_k1(&psi, opts).unwrap().power.value;
                    }
                    assert!((got - best).abs() <= 1e-12, "n={n} got {got} best {best}");
                }
            }
        }
    }

    #[test]
    fn zero_delta_warns() {
        let psi = PsiMatrix::from_values(&vec![vec![0.5; 3]; 3], 0.0).unwrap();
        let out = combine_k1(&psi, K1Options::default()).unwrap();
        assert_eq!(out.solution.unwrap().assignment, vec![0, 1, 2]);
        assert_eq!(out.warnings.len(), 1);
        assert!((out.power.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loglinear_matches_its_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let psi = random_psi(&mut rng, 3, -1.0);
            let (sol, warnings) = combine_loglinear(&psi).unwrap();
            assert_eq!(warnings.len(), 1);
            let best = all_perms(3)
                .into_iter()
                .map(|p| {
                    (0..3)
                        .map(|j| {
                            let i = psi.idx(j, p[j]);
                            psi.ln_psi[i] + psi.ln_psi_c[i]
                        })
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sol.objective - best).abs() < 1e-14);
        }
        let half = PsiMatrix::from_values(&vec![vec![0.5; 3]; 3], 0.0).unwrap();
        let (sol, _) = combine_loglinear(&half).unwrap();
        assert!((sol.objective - 3.0 * 0.25f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn subsets_for_three_treated() {
        let m = candidate_subsets(&[3, 4, 5], 2).unwrap();
        let want: Vec<BTreeSet<ClusterId>> = vec![
            BTreeSet::from([3]),
            BTreeSet::from([4]),
            BTreeSet::from([5]),
            BTreeSet::from([3, 4]),
            BTreeSet::from([3, 5]),
            BTreeSet::from([4, 5]),
        ];
        assert_eq!(m, want);
        let big: Vec<ClusterId> = (0..30).collect();
        assert!(matches!(candidate_subsets(&big, 30), Err(Error::Bound { .. })));
    }

    #[test]
    fn heuristic_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let n = 5;
            let xi: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.2..0.6)).collect();
            let sigma: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.3..3.0)).collect();
            let table = table_from(n, xi, sigma);
            let method = PowerMethod::MonteCarlo { reps: 4000, seed: 3 };
            let out = combine_heuristic_table(&table, -2.0, 0.2, method, K1Options::default()).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1].power > w[0].power));
            assert!(out.power.value >= out.initial_power);
            let again = combine_heuristic_table(&table, -2.0, 0.2, method, K1Options::default()).unwrap();
            assert_eq!(again.grouping, out.grouping);
        }
    }

    pub(crate) fn table_from(n: usize, xi: Vec<f64>, sigma: Vec<f64>) -> PairTable {
        PairTable::from_limits(n, xi, sigma).unwrap()
    }
}
