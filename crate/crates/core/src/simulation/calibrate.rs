use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ClusterId, PanelDataset, PanelRow};
use crate::error::{Error, Result};
use crate::estimation::{ar1_fit, ols_within_group};
use crate::formula::RegressionSpec;
use crate::rng::stream_rng;

use super::dgp::normal;

/// AR(1) coefficients used by the generator are kept inside this bound.
pub const RHO_BOUND: f64 = 0.99;

/// Fitted outcome model and per-cluster AR(1) error laws of a panel.
///
/// The model is y = β₀ + Σ_k β_k X_k + μ_j + U with binary X_k. Vectors
/// indexed by cluster follow `cluster_ids` (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub outcome: String,
    pub covariates: Vec<String>,
    pub beta0: f64,
    pub beta_hat: Vec<f64>,
    pub cluster_ids: Vec<ClusterId>,
    pub controls: BTreeSet<ClusterId>,
    pub treated: BTreeSet<ClusterId>,
    pub mu_hat: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub t: usize,
    /// onsets[j][k]: X_k of cluster j switches on after this period.
    pub treatment_onsets: Vec<Vec<usize>>,
}

/// Onset of covariate k (0 or 1) for the cluster at 1-based position j of
/// q, given whether the covariate varies within that cluster.
pub fn onset_rule(k: usize, j: usize, q: usize, t: usize, varies: bool) -> Result<usize> {
    if !varies {
        return Ok(0);
    }
    let base = (3 * t / 4) as i64;
    let raw = match k {
        0 => base - 5 * j as i64,
        1 => base - 8 * (q as i64 - j as i64),
        _ => {
            return Err(Error::InvalidArgument(
                "calibration supports at most two covariates".into(),
            ))
        }
    };
    Ok(raw.clamp(0, t as i64) as usize)
}

/// Innovation sd multipliers of specification 1, 2 or 3.
pub fn nu_scale(nu_spec: u32, q: usize) -> Result<Vec<f64>> {
    (1..=q)
        .map(|j| match nu_spec {
            1 => Ok(1.0),
            2 => Ok(if j <= 4 { 10.0 } else { 1.0 }),
            3 => Ok(if j <= 4 {
                10.0
            } else if j <= 8 {
                5.0
            } else {
                1.0
            }),
            _ => Err(Error::InvalidArgument(format!(
                "nu specification must be 1, 2 or 3, got {nu_spec}"
            ))),
        })
        .collect()
}

/// Pooled fit of `spec` on all clusters, then an AR(1) fit of each
/// cluster's residuals in time order.
pub fn calibrate(d: &PanelDataset, spec: &RegressionSpec) -> Result<CalibrationParams> {
    if !d.has_time() {
        return Err(Error::InvalidArgument("calibration needs a time column".into()));
    }
    if spec.fe_time {
        return Err(Error::InvalidArgument(
            "calibration does not support time fixed effects".into(),
        ));
    }
    let cols = spec.resolve(d)?;
    if cols.is_empty() || cols.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs one or two covariates, got {}",
            cols.len()
        )));
    }
    let ids: Vec<ClusterId> = d.cluster_ids().collect();
    let all: BTreeSet<ClusterId> = ids.iter().copied().collect();
    let fit = ols_within_group(d, &all, spec)?;
    let p = cols.len();
    let beta0 = if spec.intercept { fit.coefficients[p] } else { 0.0 };
    let fe_start = p + usize::from(spec.intercept);
    let mu_hat: Vec<f64> = (0..ids.len())
        .map(|j| {
            if !spec.fe_cluster {
                0.0
            } else if spec.intercept {
                if j == 0 {
                    0.0
                } else {
                    fit.coefficients[fe_start + j - 1]
                }
            } else {
                fit.coefficients[fe_start + j]
            }
        })
        .collect();

    let q = ids.len();
    let t = ids.iter().map(|&m| d.cluster_size(m)).max().unwrap_or(0);
    let mut rho_hat = Vec::with_capacity(q);
    let mut nu_hat = Vec::with_capacity(q);
    let mut onsets = Vec::with_capacity(q);
    for (pos, (id, seg)) in fit.segments.iter().enumerate() {
        let rows = d.rows_of(*id);
        let mut series: Vec<(i64, f64)> = rows
            .iter()
            .zip(&fit.residuals[seg.clone()])
            .map(|(&r, &u)| (d.time(r), u))
            .collect();
        series.sort_by_key(|s| s.0);
        let u: Vec<f64> = series.iter().map(|s| s.1).collect();
        let (rho, nu2) = ar1_fit(&u).ok_or_else(|| {
            Error::Estimation(format!(
                "cluster {id} has {} periods; at least 3 are needed",
                u.len()
            ))
        })?;
        if !(nu2 > 0.0) || !nu2.is_finite() {
            return Err(Error::Estimation(format!(
                "cluster {id} has a degenerate residual series"
            )));
        }
        rho_hat.push(rho);
        nu_hat.push(nu2.sqrt());
        let mut cl = Vec::with_capacity(p);
        for (k, &c) in cols.iter().enumerate() {
            let first = d.x(rows[0], c);
            let varies = rows.iter().any(|&r| d.x(r, c) != first);
            cl.push(onset_rule(k, pos + 1, q, t, varies)?);
        }
        onsets.push(cl);
    }
    Ok(CalibrationParams {
        outcome: d.outcome_name().to_string(),
        covariates: cols.iter().map(|&c| d.covariate_names()[c].clone()).collect(),
        beta0,
        beta_hat: fit.beta_hat.clone(),
        cluster_ids: ids,
        controls: d.controls().clone(),
        treated: d.treated().clone(),
        mu_hat,
        rho_hat,
        nu_hat,
        t,
        treatment_onsets: onsets,
    })
}

/// One simulated panel: coefficient `target` is shifted by `delta_shift`,
/// the others stay at their estimates, and cluster j's innovations have sd
/// ν̂_j times the multiplier of `nu_spec`. Errors start from the stationary
/// law; ρ̂ is clipped to ±`RHO_BOUND`.
pub fn gen_calibrated(
    params: &CalibrationParams,
    target: usize,
    delta_shift: f64,
    nu_spec: u32,
    seed: u64,
) -> Result<PanelDataset> {
    let k = params.beta_hat.len();
    if target >= k {
        return Err(Error::InvalidArgument(format!(
            "target coefficient {target} out of range for {k} covariates"
        )));
    }
    let q = params.cluster_ids.len();
    let scale = nu_scale(nu_spec, q)?;
    let mut beta = params.beta_hat.clone();
    beta[target] += delta_shift;
    let mut rows = Vec::with_capacity(q * params.t);
    for (j, &id) in params.cluster_ids.iter().enumerate() {
        let mut rng = stream_rng(seed, j as u64 + 1);
        let rho = params.rho_hat[j].clamp(-RHO_BOUND, RHO_BOUND);
        let nu = params.nu_hat[j] * scale[j];
        let mut u = nu / (1.0 - rho * rho).sqrt() * normal(&mut rng);
        for t in 1..=params.t {
            u = rho * u + nu * normal(&mut rng);
            let x: Vec<f64> = params.treatment_onsets[j]
                .iter()
                .map(|&on| if t > on { 1.0 } else { 0.0 })
                .collect();
            let y = params.beta0
                + beta.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>()
                + params.mu_hat[j]
                + u;
            rows.push(PanelRow {
                cluster: id,
                time: t as i64,
                y,
                x,
            });
        }
    }
    PanelDataset::new(
        &params.outcome,
        params.covariates.clone(),
        true,
        rows,
        params.controls.clone(),
        params.treated.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic(q: usize, t: usize) -> CalibrationParams {
        let cluster_ids: Vec<ClusterId> = (1..=q as i64).collect();
        let half = q as i64 / 2;
        CalibrationParams {
            outcome: "y".into(),
            covariates: vec!["c".into(), "l".into()],
            beta0: 0.5,
            beta_hat: vec![1.5, -0.7],
            controls: (1..=half).collect(),
            treated: (half + 1..=q as i64).collect(),
            mu_hat: (0..q).map(|j| if j == 0 { 0.0 } else { 0.1 * j as f64 }).collect(),
            rho_hat: (0..q).map(|j| 0.6 + 0.25 * j as f64 / (q - 1) as f64).collect(),
            nu_hat: (0..q).map(|j| 0.5 + 0.1 * j as f64).collect(),
            treatment_onsets: (1..=q)
                .map(|j| {
                    vec![
                        onset_rule(0, j, q, t, j != 2).unwrap(),
                        onset_rule(1, j, q, t, j != 5).unwrap(),
                    ]
                })
                .collect(),
            cluster_ids,
            t,
        }
    }

    #[test]
    fn onset_rules() {
        assert_eq!(onset_rule(0, 2, 11, 100, true).unwrap(), 65);
        assert_eq!(onset_rule(1, 2, 11, 100, true).unwrap(), 3);
        assert_eq!(onset_rule(1, 1, 11, 100, true).unwrap(), 0);
        assert_eq!(onset_rule(0, 30, 40, 100, true).unwrap(), 0);
        assert_eq!(onset_rule(0, 3, 11, 100, false).unwrap(), 0);
        assert!(onset_rule(2, 1, 11, 100, true).is_err());
    }

    #[test]
    fn nu_specifications() {
        let s2 = nu_scale(2, 11).unwrap();
        assert_eq!(&s2[..4], &[10.0; 4]);
        assert_eq!(&s2[4..], &[1.0; 7]);
        let s3 = nu_scale(3, 11).unwrap();
        assert_eq!(&s3[4..8], &[5.0; 4]);
        assert_eq!(s3[8], 1.0);
        assert!(nu_scale(4, 11).is_err());
    }

    #[test]
    fn zero_onset_is_always_on() {
        let p = synthetic(6, 30);
        let d = gen_calibrated(&p, 0, 0.0, 1, 3).unwrap();
        // Cluster 2 has no variation in the first covariate.
        for &r in d.rows_of(2) {
            assert_eq!(d.x(r, 0), 1.0);
        }
    }

    #[test]
    fn round_trip_recovers_parameters() {
        let p = synthetic(6, 2000);
        let d = gen_calibrated(&p, 0, 0.0, 1, 11).unwrap();
        let spec: RegressionSpec = "y ~ c + l + fe(cluster)".parse().unwrap();
        let got = calibrate(&d, &spec).unwrap();
        for j in 0..6 {
            assert!((got.rho_hat[j] - p.rho_hat[j]).abs() < 0.06, "rho {j}");
            assert!((got.nu_hat[j] / p.nu_hat[j] - 1.0).abs() < 0.06, "nu {j}");
        }
        assert_eq!(got.treatment_onsets, p.treatment_onsets);
        assert!((got.beta_hat[0] - 1.5).abs() < 0.5);
    }

    #[test]
    fn white_noise_gives_small_rho() {
        let mut p = synthetic(4, 1000);
        p.rho_hat = vec![0.0; 4];
        let d = gen_calibrated(&p, 1, 0.0, 1, 5).unwrap();
        let spec: RegressionSpec = "y ~ c + l + fe(cluster)".parse().unwrap();
        let got = calibrate(&d, &spec).unwrap();
        assert!(got.rho_hat.iter().all(|r| r.abs() < 0.12));
    }

    #[test]
    fn degenerate_series_names_cluster() {
        let rows: Vec<PanelRow> = (1..=2)
            .flat_map(|c| {
                (1..=2).map(move |t| PanelRow {
                    cluster: c,
                    time: t,
                    y: t as f64,
                    x: vec![(t > 1) as i32 as f64],
                })
            })
            .collect();
        let d = PanelDataset::new(
            "y",
            vec!["c".into()],
            true,
            rows,
            BTreeSet::from([1]),
            BTreeSet::from([2]),
        )
        .unwrap();
        let spec: RegressionSpec = "y ~ c".parse().unwrap();
        let err = calibrate(&d, &spec).unwrap_err().to_string();
        assert!(err.contains("cluster 1"), "{err}");
    }

    #[test]
    fn shift_moves_target_only() {
        let p = synthetic(6, 40);
        let a = gen_calibrated(&p, 1, 0.0, 1, 9).unwrap();
        let b = gen_calibrated(&p, 1, 2.0, 1, 9).unwrap();
        for i in 0..a.n() {
            assert!((b.y(i) - a.y(i) - 2.0 * a.x(i, 1)).abs() < 1e-12);
        }
    }
}
