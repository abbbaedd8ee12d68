//! Monte Carlo estimates with per-path influence values.
//!
//! An [`Estimate`] keeps, next to its summary, one linearized contribution per
//! path. For a plain sample mean these are the samples themselves; for smooth
//! functions of sample means they are the delta-method influence values. Two
//! estimates built on the same ensemble can then report the standard error
//! of their difference, which is what common random numbers buy us.

use crate::error::{Error, Result};
use crate::exec::{mean, sample_std};

/// Summary of a Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub paths: usize,
    pub seed: u64,
    pub estimator: String,
}

impl ValueEstimate {
    /// Exact value carrying no sampling error.
    pub fn exact(value: f64, estimator: impl Into<String>) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            paths: 0,
            seed: 0,
            estimator: estimator.into(),
        }
    }

    /// |mean - target| in units of standard error (infinite if se is zero and the gap is not).
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = (self.mean - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.std_error
        }
    }

    pub fn within_se(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub value: ValueEstimate,
    influence: Vec<f64>,
}

impl Estimate {
    /// Sample mean of per-path values.
    pub fn from_samples(samples: Vec<f64>, seed: u64, estimator: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at path {i}")));
        }
        let m = mean(&samples);
        let se = sample_std(&samples) / (samples.len() as f64).sqrt();
        Ok(Self {
            value: ValueEstimate {
                mean: m,
                std_error: se,
                paths: samples.len(),
                seed,
                estimator: estimator.into(),
            },
            influence: samples,
        })
    }

    /// Estimate whose value is `value` and whose sampling error is carried by
    /// the linearized per-path contributions `influence`.
    pub fn from_influence(value: f64, influence: Vec<f64>, seed: u64, estimator: impl Into<String>) -> Result<Self> {
        if influence.is_empty() {
            return Err(Error::InvalidInput("no samples".into()));
        }
        if !value.is_finite() || influence.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite estimate".into()));
        }
        let se = sample_std(&influence) / (influence.len() as f64).sqrt();
        Ok(Self {
            value: ValueEstimate {
                mean: value,
                std_error: se,
                paths: influence.len(),
                seed,
                estimator: estimator.into(),
            },
            influence,
        })
    }

    pub fn mean(&self) -> f64 {
        self.value.mean
    }

    pub fn std_error(&self) -> f64 {
        self.value.std_error
    }

    pub fn influence(&self) -> &[f64] {
        &self.influence
    }

    pub fn paths(&self) -> usize {
        self.influence.len()
    }

    /// Standard error of `self - other` under common random numbers.
    pub fn joint_std_error(&self, other: &Estimate) -> Result<f64> {
        if self.paths() != other.paths() {
            return Err(Error::Shape(format!(
                "estimates over {} and {} paths",
                self.paths(),
                other.paths()
            )));
        }
        let diff: Vec<f64> = self
            .influence
            .iter()
            .zip(&other.influence)
            .map(|(a, b)| a - b)
            .collect();
        Ok(sample_std(&diff) / (diff.len() as f64).sqrt())
    }

    /// `Σ coeff_i · est_i` with influence combined path by path.
    pub fn linear_combination(terms: &[(f64, &Estimate)], estimator: impl Into<String>) -> Result<Estimate> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidInput("empty linear combination".into()))?;
        let m = first.1.paths();
        if terms.iter().any(|(_, e)| e.paths() != m) {
            return Err(Error::Shape("estimates over different path counts".into()));
        }
        let value: f64 = terms.iter().map(|(c, e)| c * e.mean()).sum();
        let influence: Vec<f64> = (0..m)
            .map(|i| terms.iter().map(|(c, e)| c * e.influence[i]).sum())
            .collect();
        Estimate::from_influence(value, influence, first.1.value.seed, estimator)
    }

    /// `self - other` with the joint standard error.
    pub fn difference(&self, other: &Estimate, estimator: impl Into<String>) -> Result<Estimate> {
        Estimate::linear_combination(&[(1.0, self), (-1.0, other)], estimator)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_is_std_over_sqrt_m() {
        let e = Estimate::from_samples(vec![1.0, 2.0, 3.0, 4.0], 1, "t").unwrap();
        assert_eq!(e.mean(), 2.5);
        let sd = (5.0_f64 / 3.0).sqrt();
        assert!((e.std_error() - sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_estimates_have_zero_joint_error() {
        let e = Estimate::from_samples(vec![1.0, 5.0, -2.0], 0, "t").unwrap();
        assert_eq!(e.joint_std_error(&e).unwrap(), 0.0);
        let d = e.difference(&e, "d").unwrap();
        assert_eq!(d.mean(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Estimate::from_samples(vec![1.0, f64::NAN], 0, "t").is_err());
        assert!(Estimate::from_samples(vec![], 0, "t").is_err());
    }
}
