use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::ServiceError;

/// How rewards within a group become per-trajectory advantages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `r_i - mean`.
    #[default]
    MeanBaseline,
    /// `(r_i - mean) / std` with the population standard deviation.
    GrpoStd,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::MeanBaseline => "mean_baseline",
            Estimator::GrpoStd => "grpo_std",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_baseline" => Ok(Estimator::MeanBaseline),
            "grpo_std" => Ok(Estimator::GrpoStd),
            other => Err(format!("unknown estimator '{other}' (expected mean_baseline or grpo_std)")),
        }
    }
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("rewards are finite")
}

/// `r_i - mean` in exact rational arithmetic. The advantages sum to zero.
pub fn mean_baseline_exact(rewards: &[f64]) -> Result<Vec<BigRational>, ServiceError> {
    check(rewards)?;
    let rs: Vec<BigRational> = rewards.iter().map(|&r| exact(r)).collect();
    let sum = rs.iter().fold(BigRational::zero(), |acc, r| acc + r);
    let mean = sum / BigRational::from_integer(BigInt::from(rs.len()));
    Ok(rs.into_iter().map(|r| r - &mean).collect())
}

fn check(rewards: &[f64]) -> Result<(), ServiceError> {
    if rewards.len() < 2 {
        return Err(ServiceError::GroupTooSmall(rewards.len()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ServiceError::InvalidJob(format!("reward {bad} is not finite")));
    }
    Ok(())
}

/// Group-relative advantages. Groups whose rewards are all equal get zeros
/// under both estimators.
pub fn compute_advantages(rewards: &[f64], estimator: Estimator) -> Result<Vec<f64>, ServiceError> {
    check(rewards)?;
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    match estimator {
        Estimator::MeanBaseline => Ok(mean_baseline_exact(rewards)?
            .iter()
            .map(|a| a.to_f64().expect("finite"))
            .collect()),
        Estimator::GrpoStd => {
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            Ok(rewards.iter().map(|r| (r - mean) / std).collect())
        }
    }
}
