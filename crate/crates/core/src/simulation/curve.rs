use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::combiner::{combine_heuristic_table, combine_k1, K1Options};
use crate::crs::{k_budget, rejects, SignChangeSet};
use crate::data::{enumerate_pairings, ClusterId, Grouping, PanelDataset};
use crate::error::{Error, Result};
use crate::estimation::{PairTable, PsiMatrix, WorkingModel};
use crate::formula::RegressionSpec;
use crate::power::PowerMethod;
use crate::rng::{derive_seed, stream_rng};

use super::dgp::{gen_dgp, DgpSpec, DGP_C, DGP_FORMULA};

/// How the grouping is chosen in each replication.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Power-maximizing choice from the data of that replication.
    CrsData,
    /// A uniformly random pairing.
    CrsRandom,
    Fixed(Grouping),
    /// Every pairing; reported as a matrix and an envelope.
    AllOmegas,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::CrsData => "crs_data",
            Policy::CrsRandom => "crs_random",
            Policy::Fixed(_) => "fixed",
            Policy::AllOmegas => "all_omegas",
        }
    }
}

/// Settings shared by every rejection-curve run.
#[derive(Debug, Clone)]
pub struct CurveConfig {
    pub policies: Vec<Policy>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub model: WorkingModel,
    pub k1: K1Options,
    /// Replications behind each power estimate of the swap heuristic.
    pub heuristic_reps: u64,
}

impl CurveConfig {
    pub fn new(policies: Vec<Policy>, reps: usize, alpha: f64, seed: u64) -> Self {
        CurveConfig {
            policies,
            reps,
            alpha,
            seed,
            model: WorkingModel::Ar1,
            k1: K1Options::default(),
            heuristic_reps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub dgp: String,
    pub h: Option<usize>,
    pub beta: f64,
    pub policy: String,
    pub rep_count: usize,
    pub reject_rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaRates {
    pub beta: f64,
    /// Rejection rate of every pairing, in lexicographic pairing order.
    pub rates: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveOutput {
    pub rows: Vec<CurveRow>,
    pub omegas: Vec<Grouping>,
    pub omega_rates: Vec<OmegaRates>,
}

/// Describes what is simulated: a generator of one data set per grid value
/// and replication seed, and the hypothesis tested on it.
pub struct Experiment<'a> {
    pub label: String,
    pub h: Option<usize>,
    pub grid: Vec<f64>,
    pub spec: RegressionSpec,
    pub c: Vec<f64>,
    pub lambda: f64,
    /// |δ| used by the data-driven policy; its sign follows the grid value.
    pub delta_magnitude: f64,
    #[allow(clippy::type_complexity)]
    pub generate: Box<dyn Fn(f64, u64) -> Result<PanelDataset> + Sync + 'a>,
}

fn pairing_assignment(table: &PairTable, g: &Grouping) -> Result<Vec<usize>> {
    if !g.is_paired() || g.len() != table.n_rows() {
        return Err(Error::Grouping(format!("`{g}` is not a pairing of the data")));
    }
    let mut out = vec![usize::MAX; table.n_rows()];
    for grp in &g.groups {
        let c = *grp.controls.iter().next().expect("paired");
        let t = *grp.treated.iter().next().expect("paired");
        let j = table.rows.iter().position(|&r| r == c);
        let r = table.cols.iter().position(|s| s.len() == 1 && s.contains(&t));
        match (j, r) {
            (Some(j), Some(r)) if out[j] == usize::MAX => out[j] = r,
            _ => return Err(Error::Grouping(format!("`{g}` is not a pairing of the data"))),
        }
    }
    Ok(out)
}

fn scores_of(table: &PairTable, assignment: &[usize], lambda: f64) -> Result<Vec<f64>> {
    assignment
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if table.allowed[table.idx(j, c)] {
                Ok(table.score(j, c, lambda))
            } else {
                Err(Error::UnidentifiedGroup(format!("({}, {:?})", table.rows[j], table.cols[c])))
            }
        })
        .collect()
}

/// Rejection frequencies of each policy along the grid. Replication r uses
/// seed `derive_seed(seed, r)` for every grid value and policy, so all of
/// them see the same underlying draws.
pub fn run_experiment(exp: &Experiment<'_>, cfg: &CurveConfig) -> Result<CurveOutput> {
    if cfg.reps < 100 {
        return Err(Error::InvalidArgument(format!(
            "at least 100 replications are required, got {}",
            cfg.reps
        )));
    }
    if cfg.policies.is_empty() {
        return Err(Error::InvalidArgument("no policy given".into()));
    }
    // Layout and pairings come from one draw; they do not vary across reps.
    let probe = (exp.generate)(exp.grid[0], derive_seed(cfg.seed, 0))?;
    let paired = probe.controls().len() == probe.treated().len();
    let wants_omegas = cfg.policies.contains(&Policy::AllOmegas);
    let omegas = if wants_omegas {
        if !paired {
            return Err(Error::InvalidArgument("all_omegas needs paired mode".into()));
        }
        enumerate_pairings(probe.controls(), probe.treated())?
    } else {
        Vec::new()
    };
    let n_groups = probe.controls().len().min(probe.treated().len());
    let k = k_budget(cfg.alpha, SignChangeSet::new(n_groups)?.len());
    let controls: Vec<ClusterId> = probe.controls().iter().copied().collect();
    let treated: Vec<ClusterId> = probe.treated().iter().copied().collect();
    let table_cols: Vec<std::collections::BTreeSet<ClusterId>> = if paired {
        treated.iter().map(|&t| std::collections::BTreeSet::from([t])).collect()
    } else {
        let (few, many) = if controls.len() > treated.len() {
            (&treated, &controls)
        } else {
            (&controls, &treated)
        };
        crate::combiner::candidate_subsets(many, many.len() + 1 - few.len())?
    };
    let rows_treated = !paired && controls.len() > treated.len();
    let table_rows = if rows_treated { treated.clone() } else { controls.clone() };

    let omega_assignments: Vec<Vec<usize>> = omegas
        .iter()
        .map(|g| {
            // Columns are sorted treated ids; position of each treated id.
            g.groups
                .iter()
                .map(|grp| {
                    let t = grp.treated.iter().next().expect("paired");
                    treated.binary_search(t).expect("treated id")
                })
                .collect()
        })
        .collect();

    let n_grid = exp.grid.len();
    let n_pol = cfg.policies.len();
    let n_omega = omegas.len();
    let per_rep = |r: usize| -> Result<(Vec<u32>, Vec<u32>)> {
        let seed_r = derive_seed(cfg.seed, r as u64);
        let mut hits = vec![0u32; n_grid * n_pol];
        let mut omega_hits = vec![0u32; n_grid * n_omega];
        for (b, &x) in exp.grid.iter().enumerate() {
            let d = (exp.generate)(x, seed_r)?;
            let mut table = PairTable::build(
                &d,
                table_rows.clone(),
                table_cols.clone(),
                &exp.c,
                &exp.spec,
                cfg.model,
                false,
            )?;
            table.rows_treated = rows_treated;
            for (p, policy) in cfg.policies.iter().enumerate() {
                let reject = match policy {
                    Policy::CrsData => {
                        let delta = if x >= 0.0 { exp.delta_magnitude } else { -exp.delta_magnitude };
                        let assignment = if k <= 1 || !paired {
                            let psi = PsiMatrix::from_table(&table, delta);
                            combine_k1(&psi, cfg.k1)?.solution.expect("solution").assignment
                        } else {
                            let method = PowerMethod::MonteCarlo {
                                reps: cfg.heuristic_reps,
                                seed: derive_seed(seed_r, 2),
                            };
                            let res = combine_heuristic_table(&table, delta, cfg.alpha, method, cfg.k1)?;
                            res.trace.last().expect("trace").assignment.clone()
                        };
                        rejects(&scores_of(&table, &assignment, exp.lambda)?, k)
                    }
                    Policy::CrsRandom => {
                        if !paired {
                            return Err(Error::InvalidArgument("crs_random needs paired mode".into()));
                        }
                        let mut perm: Vec<usize> = (0..table.n_cols()).collect();
                        perm.shuffle(&mut stream_rng(seed_r, 1));
                        rejects(&scores_of(&table, &perm, exp.lambda)?, k)
                    }
                    Policy::Fixed(g) => {
                        let a = pairing_assignment(&table, g)?;
                        rejects(&scores_of(&table, &a, exp.lambda)?, k)
                    }
                    Policy::AllOmegas => {
                        for (o, a) in omega_assignments.iter().enumerate() {
                            if rejects(&scores_of(&table, a, exp.lambda)?, k) {
                                omega_hits[b * n_omega + o] += 1;
                            }
                        }
                        continue;
                    }
                };
                if reject {
                    hits[b * n_pol + p] += 1;
                }
            }
        }
        Ok((hits, omega_hits))
    };
    let (hits, omega_hits) = (0..cfg.reps)
        .into_par_iter()
        .map(per_rep)
        .try_reduce(
            || (vec![0u32; n_grid * n_pol], vec![0u32; n_grid * n_omega]),
            |mut a, b| {
                a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
                a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;

    let reps = cfg.reps as f64;
    let mut rows = Vec::new();
    let mut omega_rates = Vec::new();
    for (b, &x) in exp.grid.iter().enumerate() {
        for (p, policy) in cfg.policies.iter().enumerate() {
            if *policy == Policy::AllOmegas {
                let rates: Vec<f64> = (0..n_omega)
                    .map(|o| omega_hits[b * n_omega + o] as f64 / reps)
                    .collect();
                let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                omega_rates.push(OmegaRates { beta: x, rates, min, max });
                continue;
            }
            let rate = hits[b * n_pol + p] as f64 / reps;
            rows.push(CurveRow {
                dgp: exp.label.clone(),
                h: exp.h,
                beta: x,
                policy: policy.name().to_string(),
                rep_count: cfg.reps,
                reject_rate: rate,
                se: (rate * (1.0 - rate) / reps).sqrt(),
            });
        }
    }
    Ok(CurveOutput {
        rows,
        omegas,
        omega_rates,
    })
}

/// Rejection curves for one of the built-in designs, testing β = 0.
pub fn rejection_curve(spec: &DgpSpec, betas: &[f64], cfg: &CurveConfig) -> Result<CurveOutput> {
    if betas.is_empty() {
        return Err(Error::InvalidArgument("empty beta grid".into()));
    }
    let base = spec.clone();
    let exp = Experiment {
        label: spec.variant.name().to_string(),
        h: Some(spec.h),
        grid: betas.to_vec(),
        spec: DGP_FORMULA.parse()?,
        c: DGP_C.to_vec(),
        lambda: 0.0,
        delta_magnitude: spec.delta_magnitude(),
        generate: Box::new(move |beta, seed| gen_dgp(&base.with_beta(beta), seed)),
    };
    run_experiment(&exp, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::DgpVariant;

    #[test]
    fn envelope_and_fixed_policy_agree() {
        let spec = DgpSpec::new(DgpVariant::Dgp2, 4, 0.0).unwrap();
        let fixed = Grouping::from_pairs(&[(7, 1), (8, 2), (9, 3), (10, 4), (11, 5), (12, 6)]);
        let cfg = CurveConfig::new(
            vec![Policy::CrsData, Policy::CrsRandom, Policy::Fixed(fixed.clone()), Policy::AllOmegas],
            100,
            0.05,
            3,
        );
        let out = rejection_curve(&spec, &[-3.0, 3.0], &cfg).unwrap();
        assert_eq!(out.omegas.len(), 720);
        assert_eq!(out.rows.len(), 6);
        let o = out.omegas.iter().position(|g| *g == fixed).unwrap();
        for (b, env) in out.omega_rates.iter().enumerate() {
            let rows: Vec<&CurveRow> = out.rows.iter().filter(|r| r.beta == env.beta).collect();
            let data = rows.iter().find(|r| r.policy == "crs_data").unwrap();
            let fixed_rate = rows.iter().find(|r| r.policy == "fixed").unwrap().reject_rate;
            assert!(data.reject_rate >= env.min && data.reject_rate <= env.max, "grid {b}");
            assert_eq!(fixed_rate, env.rates[o]);
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let spec = DgpSpec::new(DgpVariant::Dgp1, 1, 0.0).unwrap();
        let cfg = CurveConfig::new(vec![Policy::CrsData, Policy::CrsRandom], 100, 0.05, 11);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| rejection_curve(&spec, &[0.0, 2.0], &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_small_budgets() {
        let spec = DgpSpec::new(DgpVariant::Dgp1, 1, 0.0).unwrap();
        let cfg = CurveConfig::new(vec![Policy::CrsData], 99, 0.05, 1);
        assert!(rejection_curve(&spec, &[0.0], &cfg).is_err());
    }
}
