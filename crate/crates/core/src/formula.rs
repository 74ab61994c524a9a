//! Regression specifications of the form `y ~ x1 + x2 + fe(cluster) + fe(time)`.

use std::fmt;
use std::str::FromStr;

use crate::data::PanelDataset;
use crate::error::{Error, Result};

/// Outcome, covariates, and optional fixed-effect blocks.
///
/// The hypothesis vector `c` is indexed by `covariates` in formula order.
/// An intercept is included unless the formula contains `- 1` or `+ 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegressionSpec {
    pub outcome: String,
    pub covariates: Vec<String>,
    pub intercept: bool,
    pub fe_cluster: bool,
    pub fe_time: bool,
}

impl RegressionSpec {
    /// `outcome ~ every covariate of d`, with an intercept.
    pub fn all_covariates(d: &PanelDataset) -> Self {
        RegressionSpec {
            outcome: d.outcome_name().to_string(),
            covariates: d.covariate_names().to_vec(),
            intercept: true,
            fe_cluster: false,
            fe_time: false,
        }
    }

    pub fn d_x(&self) -> usize {
        self.covariates.len()
    }

    /// Dataset column of each formula covariate.
    pub fn resolve(&self, d: &PanelDataset) -> Result<Vec<usize>> {
        if self.outcome != d.outcome_name() {
            return Err(Error::Formula(format!(
                "outcome `{}` does not match the loaded outcome `{}`",
                self.outcome,
                d.outcome_name()
            )));
        }
        self.covariates
            .iter()
            .map(|c| {
                d.covariate_index(c)
                    .ok_or_else(|| Error::Formula(format!("unknown covariate `{c}`")))
            })
            .collect()
    }
}

impl FromStr for RegressionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once('~')
            .ok_or_else(|| Error::Formula(format!("`{s}` has no `~`")))?;
        let outcome = lhs.trim();
        if outcome.is_empty() || !is_name(outcome) {
            return Err(Error::Formula(format!("bad outcome name `{outcome}`")));
        }
        let mut spec = RegressionSpec {
            outcome: outcome.to_string(),
            covariates: Vec::new(),
            intercept: true,
            fe_cluster: false,
            fe_time: false,
        };
        // Split on + and -, keeping the sign of each term.
        let mut terms: Vec<(bool, String)> = Vec::new();
        let mut current = String::new();
        let mut negative = false;
        for ch in rhs.chars() {
            match ch {
                '+' | '-' => {
                    terms.push((negative, std::mem::take(&mut current)));
                    negative = ch == '-';
                }
                _ => current.push(ch),
            }
        }
        terms.push((negative, current));
        for (i, (negative, term)) in terms.into_iter().enumerate() {
            let term = term.trim();
            if term.is_empty() {
                if i == 0 && !negative {
                    continue;
                }
                return Err(Error::Formula(format!("empty term in `{s}`")));
            }
            match (negative, term) {
                (true, "1") | (false, "0") => spec.intercept = false,
                (false, "1") => spec.intercept = true,
                (true, _) => {
                    return Err(Error::Formula(format!("cannot remove term `{term}`")));
                }
                (false, "fe(cluster)") => spec.fe_cluster = true,
                (false, "fe(time)") => spec.fe_time = true,
                (false, t) if t.starts_with("fe(") => {
                    return Err(Error::Formula(format!(
                        "unknown fixed effect `{t}`; use fe(cluster) or fe(time)"
                    )));
                }
                (false, t) if is_name(t) => {
                    if spec.covariates.iter().any(|c| c == t) {
                        return Err(Error::Formula(format!("covariate `{t}` repeated")));
                    }
                    spec.covariates.push(t.to_string());
                }
                (false, t) => return Err(Error::Formula(format!("bad term `{t}`"))),
            }
        }
        if spec.covariates.is_empty() {
            return Err(Error::Formula("at least one covariate is required".into()));
        }
        Ok(spec)
    }
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

impl fmt::Display for RegressionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.outcome, self.covariates.join(" + "))?;
        if self.fe_cluster {
            write!(f, " + fe(cluster)")?;
        }
        if self.fe_time {
            write!(f, " + fe(time)")?;
        }
        if !self.intercept {
            write!(f, " - 1")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_terms() {
        let s: RegressionSpec = "y ~ d + x1 + fe(cluster) + fe(time)".parse().unwrap();
        assert_eq!(s.covariates, vec!["d", "x1"]);
        assert!(s.intercept && s.fe_cluster && s.fe_time);
        let s: RegressionSpec = "y ~ x - 1".parse().unwrap();
        assert!(!s.intercept);
        let s: RegressionSpec = "y~x+0".parse().unwrap();
        assert!(!s.intercept);
        assert_eq!(s.to_string().parse::<RegressionSpec>().unwrap(), s);
    }

    #[test]
    fn rejects_bad_formulas() {
        for bad in ["y", "y ~", "y ~ fe(unit)", "y ~ x + x", "y ~ x - z", "~ x", "y ~ x +"] {
            assert!(bad.parse::<RegressionSpec>().is_err(), "{bad}");
        }
    }
}
