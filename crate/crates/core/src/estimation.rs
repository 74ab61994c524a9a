//! Per-group least squares, score statistics, and the working-model scale
//! estimates that feed Ψ.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterId, Grouping, Hypothesis, PanelDataset};
use crate::error::{Error, Result};
use crate::formula::RegressionSpec;
use crate::normal;

/// Relative singular-value cutoff for the rank test.
pub const RANK_TOL: f64 = 1e-8;
/// Lower bound applied to every σ estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Least-squares fit on the pooled rows of one combined group.
///
/// Rows are stacked by ascending cluster id and keep their input order
/// within each cluster.
#[derive(Debug, Clone)]
pub struct GroupFit {
    pub members: Vec<ClusterId>,
    /// Coefficients on the formula covariates, in formula order.
    pub beta_hat: Vec<f64>,
    /// Coefficients on every design column.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Row range of each member cluster inside `residuals`.
    pub segments: Vec<(ClusterId, Range<usize>)>,
    design: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl GroupFit {
    pub fn n_g(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    /// c′β̂.
    pub fn contrast(&self, c: &[f64]) -> f64 {
        assert_eq!(c.len(), self.beta_hat.len(), "c has the wrong length");
        c.iter().zip(&self.beta_hat).map(|(a, b)| a * b).sum()
    }

    pub fn label(&self) -> String {
        group_label(&self.members)
    }

    /// X(X′X)⁻¹c̃, with c̃ = c padded by zeros for the non-formula columns.
    fn influence(&self, c: &[f64]) -> DVector<f64> {
        let mut ct = DVector::zeros(self.n_params());
        for (i, v) in c.iter().enumerate() {
            ct[i] = *v;
        }
        &self.design * (&self.gram_inv * ct)
    }
}

pub(crate) fn group_label(members: &[ClusterId]) -> String {
    let ids: Vec<String> = members.iter().map(|m| m.to_string()).collect();
    format!("{{{}}}", ids.join(","))
}

/// Regresses the outcome on the design of `spec` using the rows of `members`.
///
/// Column order: formula covariates, intercept, cluster dummies, time
/// dummies. The first level of a dummy block is dropped whenever an
/// intercept or an earlier block already spans the constant.
pub fn ols_within_group(
    d: &PanelDataset,
    members: &BTreeSet<ClusterId>,
    spec: &RegressionSpec,
) -> Result<GroupFit> {
    let cols = spec.resolve(d)?;
    let member_list: Vec<ClusterId> = members.iter().copied().collect();
    for m in &member_list {
        if !d.contains_cluster(*m) {
            return Err(Error::InvalidArgument(format!("cluster {m} is not in the data")));
        }
    }
    let mut rows = Vec::new();
    let mut segments = Vec::with_capacity(member_list.len());
    for &m in &member_list {
        let start = rows.len();
        rows.extend_from_slice(d.rows_of(m));
        segments.push((m, start..rows.len()));
    }
    let n_g = rows.len();

    let mut spans_constant = spec.intercept;
    let cluster_levels: &[ClusterId] = if spec.fe_cluster {
        let skip = usize::from(spans_constant);
        spans_constant = true;
        &member_list[skip.min(member_list.len())..]
    } else {
        &[]
    };
    let time_levels: Vec<i64> = if spec.fe_time {
        let all: BTreeSet<i64> = rows.iter().map(|&r| d.time(r)).collect();
        all.into_iter().skip(usize::from(spans_constant)).collect()
    } else {
        Vec::new()
    };
    let p = cols.len() + usize::from(spec.intercept) + cluster_levels.len() + time_levels.len();

    let mut x = DMatrix::<f64>::zeros(n_g, p);
    let mut y = DVector::<f64>::zeros(n_g);
    for (i, &r) in rows.iter().enumerate() {
        y[i] = d.y(r);
        let mut k = 0;
        for &c in &cols {
            x[(i, k)] = d.x(r, c);
            k += 1;
        }
        if spec.intercept {
            x[(i, k)] = 1.0;
            k += 1;
        }
        let cl = d.cluster_of(r);
        if let Some(pos) = cluster_levels.iter().position(|&l| l == cl) {
            x[(i, k + pos)] = 1.0;
        }
        k += cluster_levels.len();
        if let Ok(pos) = time_levels.binary_search(&d.time(r)) {
            x[(i, k + pos)] = 1.0;
        }
    }

    let rank_error = |rank| Error::Identification {
        group: group_label(&member_list),
        rank,
        columns: p,
    };
    if n_g < p {
        return Err(rank_error(n_g));
    }
    let svd = x.clone().svd(true, true);
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&v| v > RANK_TOL * s_max).count();
    if rank < p || s_max == 0.0 {
        return Err(rank_error(rank));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v = svd.v_t.as_ref().expect("v_t requested").transpose();
    let uty = u.transpose() * &y;
    let mut scaled = uty;
    let mut inv_s2 = DVector::zeros(p);
    for i in 0..p {
        scaled[i] /= s[i];
        inv_s2[i] = 1.0 / (s[i] * s[i]);
    }
    let coef = &v * scaled;
    let gram_inv = &v * DMatrix::from_diagonal(&inv_s2) * v.transpose();
    let fitted = &x * &coef;
    let residuals: Vec<f64> = (0..n_g).map(|i| y[i] - fitted[i]).collect();
    let coefficients: Vec<f64> = coef.iter().copied().collect();

    Ok(GroupFit {
        members: member_list,
        beta_hat: coefficients[..cols.len()].to_vec(),
        coefficients,
        residuals,
        segments,
        design: x,
        gram_inv,
    })
}

/// Ŝ = √n_g (c′β̂ − λ).
pub fn score_stat(fit: &GroupFit, h: &Hypothesis) -> f64 {
    (fit.n_g() as f64).sqrt() * (fit.contrast(&h.c) - h.lambda)
}

/// √(n_group / n) for each group of `g`.
pub fn estimate_xi(d: &PanelDataset, g: &Grouping) -> Vec<f64> {
    let n = d.n() as f64;
    g.groups
        .iter()
        .map(|grp| {
            let size: usize = grp.members().iter().map(|&m| d.cluster_size(m)).sum();
            (size as f64 / n).sqrt()
        })
        .collect()
}

/// Dependence structure assumed when estimating σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkingModel {
    /// Homoskedastic and serially uncorrelated within each cluster.
    Iid,
    /// Bartlett-kernel long-run variance; `None` uses ⌊n_g^{1/3}⌋ lags.
    Hac { lag: Option<usize> },
    /// AR(1) errors fitted by least squares within each cluster.
    Ar1,
}

impl WorkingModel {
    /// `Ar1` for panels with a time column, `Iid` otherwise.
    pub fn default_for(d: &PanelDataset) -> Self {
        if d.has_time() {
            WorkingModel::Ar1
        } else {
            WorkingModel::Iid
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorkingModel::Iid => "iid",
            WorkingModel::Hac { .. } => "hac",
            WorkingModel::Ar1 => "ar1",
        }
    }
}

impl std::str::FromStr for WorkingModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(WorkingModel::Iid),
            "hac" => Ok(WorkingModel::Hac { lag: None }),
            "ar1" => Ok(WorkingModel::Ar1),
            _ => match s.strip_prefix("hac:").map(str::parse::<usize>) {
                Some(Ok(lag)) => Ok(WorkingModel::Hac { lag: Some(lag) }),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown working model `{s}` (iid, hac, hac:<lag>, ar1)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEstimate {
    pub sigma: f64,
    /// The raw estimate was not positive and `SIGMA_FLOOR` was used.
    pub floored: bool,
}

/// Per-cluster AR(1) fit of a residual series: (ρ̂, ν̂²).
pub(crate) fn ar1_fit(u: &[f64]) -> Option<(f64, f64)> {
    if u.len() < 3 {
        return None;
    }
    let num: f64 = u.windows(2).map(|w| w[1] * w[0]).sum();
    let den: f64 = u[..u.len() - 1].iter().map(|v| v * v).sum();
    let rho = if den > 0.0 { num / den } else { 0.0 };
    let sse: f64 = u.windows(2).map(|w| (w[1] - rho * w[0]).powi(2)).sum();
    Some((rho, sse / (u.len() - 1) as f64))
}

/// σ̂ of the limiting score √n_g(c′β̂ − c′β) under `model`.
///
/// Errors are treated as independent across the member clusters of the
/// group; each cluster gets its own residual variance or AR(1) fit.
pub fn estimate_sigma(fit: &GroupFit, c: &[f64], model: WorkingModel) -> Result<SigmaEstimate> {
    let a = fit.influence(c);
    let u = &fit.residuals;
    let n_g = fit.n_g();
    let mut var = 0.0;
    for (id, seg) in &fit.segments {
        let len = seg.len();
        let a_seg = &a.as_slice()[seg.clone()];
        let u_seg = &u[seg.clone()];
        let a2: f64 = a_seg.iter().map(|v| v * v).sum();
        match model {
            WorkingModel::Iid => {
                let s2 = u_seg.iter().map(|v| v * v).sum::<f64>() / len as f64;
                var += s2 * a2;
            }
            WorkingModel::Hac { lag } => {
                let lag = lag
                    .unwrap_or_else(|| (n_g as f64).cbrt().floor() as usize)
                    .min(len.saturating_sub(1));
                let v: Vec<f64> = a_seg.iter().zip(u_seg).map(|(x, e)| x * e).collect();
                let mut lrv: f64 = v.iter().map(|x| x * x).sum();
                for l in 1..=lag {
                    let w = 1.0 - l as f64 / (lag as f64 + 1.0);
                    let gamma: f64 = v[l..].iter().zip(&v[..len - l]).map(|(x, y)| x * y).sum();
                    lrv += 2.0 * w * gamma;
                }
                var += lrv;
            }
            WorkingModel::Ar1 => {
                let (rho, nu2) = ar1_fit(u_seg).ok_or_else(|| {
                    Error::Estimation(format!(
                        "cluster {id} has {len} rows; the ar1 working model needs at least 3"
                    ))
                })?;
                let rho = rho.clamp(-0.99, 0.99);
                var += nu2 / (1.0 - rho).powi(2) * a2;
            }
        }
    }
    let p = fit.n_params();
    if n_g > p {
        var *= n_g as f64 / (n_g - p) as f64;
    }
    let sigma = (n_g as f64 * var).sqrt();
    if sigma.is_finite() && sigma > SIGMA_FLOOR {
        Ok(SigmaEstimate {
            sigma,
            floored: false,
        })
    } else {
        Ok(SigmaEstimate {
            sigma: SIGMA_FLOOR,
            floored: true,
        })
    }
}

/// Per-group (ξ, σ) of the limiting experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitParams {
    pub xi: Vec<f64>,
    pub sigma: Vec<f64>,
    pub labels: Vec<String>,
}

impl LimitParams {
    pub fn new(xi: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if xi.is_empty() || xi.len() != sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "xi and sigma must be nonempty and of equal length (got {} and {})",
                xi.len(),
                sigma.len()
            )));
        }
        if xi.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("every xi must be positive".into()));
        }
        if sigma.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("every sigma must be positive".into()));
        }
        let labels = (1..=xi.len()).map(|i| i.to_string()).collect();
        Ok(LimitParams { xi, sigma, labels })
    }

    pub fn q(&self) -> usize {
        self.xi.len()
    }

    /// ξ_j / σ_j.
    pub fn ratios(&self) -> Vec<f64> {
        self.xi.iter().zip(&self.sigma).map(|(x, s)| x / s).collect()
    }
}

/// Fits every group of `g` and estimates its (ξ, σ). Returns the fits too,
/// together with the labels of groups whose σ was floored.
pub fn limit_params(
    d: &PanelDataset,
    g: &Grouping,
    c: &[f64],
    spec: &RegressionSpec,
    model: WorkingModel,
) -> Result<(LimitParams, Vec<GroupFit>, Vec<String>)> {
    check_c(c, spec)?;
    let fits = g
        .groups
        .par_iter()
        .map(|grp| ols_within_group(d, &grp.members(), spec))
        .collect::<Result<Vec<_>>>()?;
    let mut sigma = Vec::with_capacity(fits.len());
    let mut floored = Vec::new();
    for fit in &fits {
        let s = estimate_sigma(fit, c, model)?;
        if s.floored {
            floored.push(fit.label());
        }
        sigma.push(s.sigma);
    }
    let lp = LimitParams {
        xi: estimate_xi(d, g),
        sigma,
        labels: fits.iter().map(GroupFit::label).collect(),
    };
    Ok((lp, fits, floored))
}

pub(crate) fn check_c(c: &[f64], spec: &RegressionSpec) -> Result<()> {
    if c.len() != spec.d_x() {
        return Err(Error::InvalidArgument(format!(
            "c has {} entries but the formula has {} covariates",
            c.len(),
            spec.d_x()
        )));
    }
    Ok(())
}

/// Fits of every candidate group {row} ∪ col, stored row-major.
#[derive(Debug, Clone)]
pub struct PairTable {
    pub rows: Vec<ClusterId>,
    pub cols: Vec<BTreeSet<ClusterId>>,
    pub xi: Vec<f64>,
    pub sigma: Vec<f64>,
    /// c′β̂ of each candidate group.
    pub estimate: Vec<f64>,
    pub n_g: Vec<usize>,
    /// False where the candidate group is not identified.
    pub allowed: Vec<bool>,
    pub floored: Vec<bool>,
    /// Rows hold treated clusters and columns control subsets.
    pub rows_treated: bool,
}

impl PairTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn idx(&self, j: usize, r: usize) -> usize {
        j * self.cols.len() + r
    }

    /// Ŝ of candidate (j, r).
    pub fn score(&self, j: usize, r: usize, lambda: f64) -> f64 {
        let i = self.idx(j, r);
        (self.n_g[i] as f64).sqrt() * (self.estimate[i] - lambda)
    }

    /// Fits every candidate. With `strict`, a non-identified candidate is an
    /// error naming the pair; otherwise it is marked as not allowed.
    pub fn build(
        d: &PanelDataset,
        rows: Vec<ClusterId>,
        cols: Vec<BTreeSet<ClusterId>>,
        c: &[f64],
        spec: &RegressionSpec,
        model: WorkingModel,
        strict: bool,
    ) -> Result<Self> {
        check_c(c, spec)?;
        let n = d.n() as f64;
        let cells: Vec<(usize, usize)> = (0..rows.len())
            .flat_map(|j| (0..cols.len()).map(move |r| (j, r)))
            .collect();
        let fitted = cells
            .par_iter()
            .map(|&(j, r)| {
                let mut members = cols[r].clone();
                members.insert(rows[j]);
                let size: usize = members.iter().map(|&m| d.cluster_size(m)).sum();
                match ols_within_group(d, &members, spec) {
                    Ok(fit) => {
                        let s = estimate_sigma(&fit, c, model)?;
                        Ok(Some(((size as f64 / n).sqrt(), s, fit.contrast(c), size)))
                    }
                    Err(Error::Identification { .. }) if !strict => Ok(None),
                    Err(Error::Identification { rank, columns, .. }) => {
                        Err(Error::Identification {
                            group: format!("({}, {})", rows[j], group_label(&cols[r].iter().copied().collect::<Vec<_>>())),
                            rank,
                            columns,
                        })
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let m = fitted.len();
        let mut t = PairTable {
            rows,
            cols,
            xi: vec![0.0; m],
            sigma: vec![1.0; m],
            estimate: vec![0.0; m],
            n_g: vec![0; m],
            allowed: vec![false; m],
            floored: vec![false; m],
            rows_treated: false,
        };
        for (i, cell) in fitted.into_iter().enumerate() {
            if let Some((xi, s, est, size)) = cell {
                t.xi[i] = xi;
                t.sigma[i] = s.sigma;
                t.floored[i] = s.floored;
                t.estimate[i] = est;
                t.n_g[i] = size;
                t.allowed[i] = true;
            }
        }
        Ok(t)
    }

    /// Square table of given (ξ, σ), row-major, for working with the limit
    /// experiment directly. Rows are labelled 1..=n and columns n+1..=2n;
    /// estimates are zero.
    pub fn from_limits(n: usize, xi: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if xi.len() != n * n || sigma.len() != n * n {
            return Err(Error::InvalidArgument(format!("expected {} entries of xi and sigma", n * n)));
        }
        if xi.iter().chain(&sigma).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("xi and sigma must be positive and finite".into()));
        }
        Ok(PairTable {
            rows: (1..=n as ClusterId).collect(),
            cols: (n as ClusterId + 1..=2 * n as ClusterId).map(|t| BTreeSet::from([t])).collect(),
            xi,
            sigma,
            estimate: vec![0.0; n * n],
            n_g: vec![1; n * n],
            allowed: vec![true; n * n],
            floored: vec![false; n * n],
            rows_treated: false,
        })
    }

    /// Paired layout: sorted controls against sorted singleton treated sets.
    pub fn paired(
        d: &PanelDataset,
        c: &[f64],
        spec: &RegressionSpec,
        model: WorkingModel,
        strict: bool,
    ) -> Result<Self> {
        if d.controls().len() != d.treated().len() {
            return Err(Error::InvalidArgument(format!(
                "paired mode needs equal control and treated counts, got {} and {}",
                d.controls().len(),
                d.treated().len()
            )));
        }
        let rows = d.controls().iter().copied().collect();
        let cols = d.treated().iter().map(|&t| BTreeSet::from([t])).collect();
        Self::build(d, rows, cols, c, spec, model, strict)
    }
}

/// Ψ_{j,r} = Φ(−ξ_{j,r}δ/σ_{j,r}) with its complement and logs, each
/// computed directly so that neither tail loses precision.
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub psi: Vec<f64>,
    pub psi_c: Vec<f64>,
    pub ln_psi: Vec<f64>,
    pub ln_psi_c: Vec<f64>,
    pub allowed: Vec<bool>,
    pub delta: f64,
    pub row_ids: Vec<ClusterId>,
    pub col_sets: Vec<BTreeSet<ClusterId>>,
    pub rows_treated: bool,
}

impl PsiMatrix {
    pub fn from_table(t: &PairTable, delta: f64) -> Self {
        let m = t.xi.len();
        let mut out = PsiMatrix {
            n_rows: t.n_rows(),
            n_cols: t.n_cols(),
            psi: vec![0.5; m],
            psi_c: vec![0.5; m],
            ln_psi: vec![0.5f64.ln(); m],
            ln_psi_c: vec![0.5f64.ln(); m],
            allowed: t.allowed.clone(),
            delta,
            row_ids: t.rows.clone(),
            col_sets: t.cols.clone(),
            rows_treated: t.rows_treated,
        };
        for i in 0..m {
            if t.allowed[i] {
                let z = -t.xi[i] * delta / t.sigma[i];
                out.psi[i] = normal::cdf(z);
                out.psi_c[i] = normal::cdf(-z);
                out.ln_psi[i] = normal::ln_cdf(z);
                out.ln_psi_c[i] = normal::ln_cdf(-z);
            }
        }
        out
    }

    /// A square matrix given directly. Rows are labelled 1..=q̄ and columns
    /// q̄+1..=2q̄.
    pub fn from_values(values: &[Vec<f64>], delta: f64) -> Result<Self> {
        let q = values.len();
        if q == 0 || values.iter().any(|r| r.len() != q) {
            return Err(Error::InvalidArgument("Ψ must be a nonempty square matrix".into()));
        }
        let flat: Vec<f64> = values.iter().flatten().copied().collect();
        if flat.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::InvalidArgument("Ψ entries must lie in (0, 1)".into()));
        }
        let q_id = q as ClusterId;
        Ok(PsiMatrix {
            n_rows: q,
            n_cols: q,
            psi_c: flat.iter().map(|v| 1.0 - v).collect(),
            ln_psi: flat.iter().map(|v| v.ln()).collect(),
            ln_psi_c: flat.iter().map(|v| (-v).ln_1p()).collect(),
            psi: flat,
            allowed: vec![true; q * q],
            delta,
            row_ids: (1..=q_id).collect(),
            col_sets: (q_id + 1..=2 * q_id).map(|t| BTreeSet::from([t])).collect(),
            rows_treated: false,
        })
    }

    pub fn idx(&self, j: usize, r: usize) -> usize {
        j * self.n_cols + r
    }

    pub fn get(&self, j: usize, r: usize) -> f64 {
        self.psi[self.idx(j, r)]
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }
}

/// Ψ for the paired layout of `d`. Every candidate pair must be identified.
pub fn psi_matrix(
    d: &PanelDataset,
    h: &Hypothesis,
    spec: &RegressionSpec,
    model: WorkingModel,
) -> Result<PsiMatrix> {
    let table = PairTable::paired(d, &h.c, spec, model, true)?;
    Ok(PsiMatrix::from_table(&table, h.delta))
}
