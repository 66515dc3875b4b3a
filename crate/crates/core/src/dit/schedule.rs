use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::DitError;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.2;

/// Linear variance schedule with cumulative products `alpha_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DitError> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if steps == 0 || !ok(beta_start) || !ok(beta_end) {
            return Err(DitError::Config(format!(
                "schedule needs steps >= 1 and betas in (0, 1), got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DitError> {
        if t >= self.steps() {
            return Err(DitError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }
}

/// `z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) epsilon`
pub fn add_noise(
    z0: &Array2<f64>,
    t: usize,
    epsilon: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>, DitError> {
    schedule.check(t)?;
    if z0.dim() != epsilon.dim() {
        return Err(DitError::ShapeMismatch(format!(
            "z0 {:?} vs epsilon {:?}",
            z0.dim(),
            epsilon.dim()
        )));
    }
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(z0).and(epsilon).map_collect(|&z, &e| a * z + b * e))
}

/// One ancestral step: posterior mean from the predicted noise, plus
/// `sqrt(beta_tilde) * noise` when `t > 0`.
pub(crate) fn posterior_step(
    z: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Array2<f64>>,
) -> Array2<f64> {
    let beta = schedule.betas[t];
    let ab = schedule.alpha_bar[t];
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mut out = ndarray::Zip::from(z)
        .and(eps_hat)
        .map_collect(|&z, &e| inv_sqrt_alpha * (z - coef * e));
    if let (Some(n), true) = (noise, t > 0) {
        let ab_prev = schedule.alpha_bar[t - 1];
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        out.scaled_add(sigma, n);
    }
    out
}
