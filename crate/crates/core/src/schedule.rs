//! Forward noising process: linear beta schedule, its integrated signal level,
//! the sampling time grid, and closed-form forward marginals.

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;
pub const DEFAULT_T_MIN: f64 = 1e-3;

/// Linear schedule `beta(t) = beta_min + (beta_max - beta_min) t` on `t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::Argument(format!(
                "schedule needs 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * t)
    }

    /// Signal level `exp(-int_0^t beta(s) ds)`.
    pub fn alpha_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok((-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)).exp())
    }
}

/// Sampling grid with `times[0] = t_min < ... < times[K] = 1` and step sizes
/// `gamma_k = beta(t_k) (t_k - t_{k-1})` for `k = 1..=K`.
///
/// Times are stored ascending; samplers walk them from `k = K` down to `k = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    gammas: Vec<f64>,
}

impl TimeGrid {
    /// Uniform-in-time grid. `t_min = 0` is accepted for analytic work; learned
    /// models should be sampled with `t_min > 0`.
    pub fn uniform(schedule: &NoiseSchedule, steps: usize, t_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("a time grid needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&t_min) {
            return Err(Error::Argument(format!("t_min = {t_min} must lie in [0, 1)")));
        }
        let span = 1.0 - t_min;
        let times: Vec<f64> = (0..=steps)
            .map(|k| if k == steps { 1.0 } else { t_min + (k as f64 / steps as f64) * span })
            .collect();
        let gammas = (1..=steps)
            .map(|k| Ok(schedule.beta_at(times[k])? * (times[k] - times[k - 1])))
            .collect::<Result<Vec<_>>>()?;
        debug_assert!(gammas.iter().all(|&g| g > 0.0));
        Ok(Self { times, gammas })
    }

    /// Number of sampling steps `K`.
    pub fn steps(&self) -> usize {
        self.gammas.len()
    }

    /// `t_k` for `k in 0..=K`.
    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// `gamma_k` for `k in 1..=K`.
    pub fn gamma(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.steps(), "gamma index {k} outside 1..={}", self.steps());
        self.gammas[k - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) noise`.
pub fn forward_marginal(x0: &[f64], t: f64, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::Argument(format!(
            "x0 has dimension {} but noise has dimension {}",
            x0.len(),
            noise.len()
        )));
    }
    let alpha = schedule.alpha_at(t)?;
    let (a, s) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect())
}
