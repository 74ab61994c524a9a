use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, PanelRow};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpVariant {
    Dgp1,
    Dgp2,
    Dgp3,
}

impl DgpVariant {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(DgpVariant::Dgp1),
            2 => Ok(DgpVariant::Dgp2),
            3 => Ok(DgpVariant::Dgp3),
            _ => Err(Error::InvalidArgument(format!("unknown DGP {n}; use 1, 2 or 3"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DgpVariant::Dgp1 => "dgp1",
            DgpVariant::Dgp2 => "dgp2",
            DgpVariant::Dgp3 => "dgp3",
        }
    }
}

/// How the AR(1) error starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArInit {
    /// U₀ drawn from the stationary law N(0, σ²/(1 − ρ²)).
    Stationary,
    /// U starts at 0 and runs this many periods before t = 1.
    Burnin(usize),
}

/// Difference-in-differences design with 12 clusters: 1–6 treated after
/// `t0`, 7–12 never treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub variant: DgpVariant,
    pub h: usize,
    pub beta: f64,
    pub q: usize,
    pub t: usize,
    pub t0: usize,
    pub theta0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub rho: f64,
    /// Cluster fixed effect, common to all clusters.
    pub xi_fe: f64,
    pub init: ArInit,
}

/// Regression the test runs on generated data; c selects `d`.
pub const DGP_FORMULA: &str = "y ~ d + i_t + x1 + x2 + x3 + fe(cluster)";
pub const DGP_C: [f64; 5] = [1.0, 0.0, 0.0, 0.0, 0.0];

impl DgpSpec {
    pub fn new(variant: DgpVariant, h: usize, beta: f64) -> Result<Self> {
        if !(1..=4).contains(&h) {
            return Err(Error::InvalidArgument(format!("h must be in 1..=4, got {h}")));
        }
        Ok(DgpSpec {
            variant,
            h,
            beta,
            q: 12,
            t: 20,
            t0: 10,
            theta0: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            gamma4: 0.8,
            rho: 0.5,
            xi_fe: 1.0,
            init: ArInit::Stationary,
        })
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        DgpSpec { beta, ..self.clone() }
    }

    /// σ_j for cluster j = 1..=12. "j mod 6" is taken literally, so
    /// clusters 6 and 12 have residue 0.
    pub fn sigma(&self, j: usize) -> f64 {
        let h = self.h;
        let r = j % 6;
        match self.variant {
            DgpVariant::Dgp1 => {
                if j + h >= 13 {
                    20.0
                } else {
                    1.0
                }
            }
            DgpVariant::Dgp2 => {
                if r < h {
                    5.0 + 3.0 * r as f64
                } else {
                    1.0
                }
            }
            DgpVariant::Dgp3 => {
                if r < h {
                    2.5f64.powi(1 + r as i32)
                } else {
                    1.0
                }
            }
        }
    }

    pub fn treated(&self) -> BTreeSet<i64> {
        (1..=(self.q / 2) as i64).collect()
    }

    pub fn controls(&self) -> BTreeSet<i64> {
        ((self.q / 2 + 1) as i64..=self.q as i64).collect()
    }

    /// δ magnitude 2√(qT).
    pub fn delta_magnitude(&self) -> f64 {
        2.0 * ((self.q * self.t) as f64).sqrt()
    }
}

pub(crate) fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One draw of the design. Random draws do not depend on β, so two specs
/// differing only in β give data differing only through βD.
pub fn gen_dgp(spec: &DgpSpec, seed: u64) -> Result<PanelDataset> {
    if !(spec.rho.abs() < 1.0) {
        return Err(Error::InvalidArgument("|rho| must be below 1".into()));
    }
    let mut rows = Vec::with_capacity(spec.q * spec.t);
    for j in 1..=spec.q {
        let mut rng = stream_rng(seed, j as u64);
        let s = spec.sigma(j);
        let treated = j <= spec.q / 2;
        let mut u = match spec.init {
            ArInit::Stationary => s / (1.0 - spec.rho * spec.rho).sqrt() * normal(&mut rng),
            ArInit::Burnin(b) => {
                let mut u = 0.0;
                for _ in 0..b {
                    u = spec.rho * u + s * normal(&mut rng);
                }
                u
            }
        };
        for t in 1..=spec.t {
            let x2 = s * normal(&mut rng);
            let x3 = s * normal(&mut rng);
            let v = s * normal(&mut rng);
            let w = s * normal(&mut rng);
            u = spec.rho * u + v;
            let i_t = if t > spec.t0 { 1.0 } else { 0.0 };
            let d = if treated { i_t } else { 0.0 };
            let x1 = spec.gamma4 * i_t * d + w;
            let y = spec.theta0 * i_t
                + spec.beta * d
                + spec.gamma1 * x1
                + spec.gamma2 * x2
                + spec.gamma3 * x3
                + spec.xi_fe
                + u;
            rows.push(PanelRow {
                cluster: j as i64,
                time: t as i64,
                y,
                x: vec![d, i_t, x1, x2, x3],
            });
        }
    }
    PanelDataset::new(
        "y",
        ["d", "i_t", "x1", "x2", "x3"].iter().map(|s| s.to_string()).collect(),
        true,
        rows,
        spec.controls(),
        spec.treated(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_schedules() {
        let d1 = DgpSpec::new(DgpVariant::Dgp1, 4, 0.0).unwrap();
        let s: Vec<f64> = (1..=12).map(|j| d1.sigma(j)).collect();
        assert_eq!(&s[..8], &[1.0; 8]);
        assert_eq!(&s[8..], &[20.0; 4]);
        let d2 = DgpSpec::new(DgpVariant::Dgp2, 4, 0.0).unwrap();
        let s: Vec<f64> = (1..=12).map(|j| d2.sigma(j)).collect();
        assert_eq!(s, vec![8.0, 11.0, 14.0, 1.0, 1.0, 5.0, 8.0, 11.0, 14.0, 1.0, 1.0, 5.0]);
        let d3 = DgpSpec::new(DgpVariant::Dgp3, 1, 0.0).unwrap();
        assert_eq!(d3.sigma(6), 2.5);
        assert_eq!(d3.sigma(12), 2.5);
        assert_eq!(d3.sigma(1), 1.0);
        assert!(DgpSpec::new(DgpVariant::Dgp1, 5, 0.0).is_err());
    }

    #[test]
    fn sizes_and_coupling() {
        let spec = DgpSpec::new(DgpVariant::Dgp1, 1, 0.0).unwrap();
        let a = gen_dgp(&spec, 7).unwrap();
        assert_eq!(a.n(), 240);
        assert!(a.cluster_sizes().values().all(|&n| n == 20));
        let b = gen_dgp(&spec.with_beta(3.0), 7).unwrap();
        for i in 0..a.n() {
            assert_eq!(a.x_row(i), b.x_row(i));
            let diff = b.y(i) - a.y(i);
            assert!((diff - 3.0 * a.x(i, 0)).abs() < 1e-12);
        }
        assert_eq!(gen_dgp(&spec, 7).unwrap(), a);
        assert_ne!(gen_dgp(&spec, 8).unwrap(), a);
    }
}
