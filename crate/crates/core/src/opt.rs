use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order solver settings shared by the kernel and network fits.
///
/// For the kernel fit `max_iters` counts projected-gradient iterations; for
/// the network fit it counts epochs. `momentum` and `batch_size` only affect
/// network training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub step: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            max_iters: 5_000,
            patience: 50,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.step > 0.0 && self.step.is_finite()) {
            problems.push(format!("opt.step must be positive, got {}", self.step));
        }
        if self.max_iters == 0 {
            problems.push("opt.max_iters must be at least 1".to_string());
        }
        if self.patience == 0 {
            problems.push("opt.patience must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("opt.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            problems.push("opt.batch_size must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Outcome of one constrained fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub training_error: f64,
    pub iterations: usize,
    /// Set when the solver stopped without meeting its convergence rule.
    pub warning: Option<String>,
}
