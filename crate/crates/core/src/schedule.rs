//! Discrete noise schedule, forward noising, v-prediction algebra and the
//! deterministic first-order sampler.
//!
//! Timesteps are 0-based. The sampler treats "no timestep" (`None`) as the
//! clean state with `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::error::{Error, Result};

/// Serializable parameters of a linear-beta [`NoiseSchedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// A validated index into a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep(usize);

impl TimeStep {
    pub fn get(self) -> usize {
        self.0
    }
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "step count must be at least 1"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("schedule", "every beta must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Total number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep(&self, t: usize) -> Result<TimeStep> {
        if t < self.len() {
            Ok(TimeStep(t))
        } else {
            Err(Error::invalid("timestep", format!("{t} outside [0, {}]", self.len() - 1)))
        }
    }

    pub fn last(&self) -> TimeStep {
        TimeStep(self.len() - 1)
    }

    pub fn alpha_bar(&self, t: TimeStep) -> f64 {
        self.alpha_bar[t.0]
    }

    /// `alpha_bar` with `None` standing for the clean state.
    pub fn level(&self, t: Option<TimeStep>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar(t))
    }

    pub fn add_noise(&self, x0: &LatentVideo, t: TimeStep, eps: &LatentVideo) -> Result<LatentVideo> {
        add_noise_at(self.alpha_bar(t), x0, eps)
    }

    pub fn v_target(&self, x0: &LatentVideo, eps: &LatentVideo, t: TimeStep) -> Result<LatentVideo> {
        v_target_at(self.alpha_bar(t), x0, eps)
    }

    pub fn recover_x0(&self, x_t: &LatentVideo, v: &LatentVideo, t: TimeStep) -> Result<LatentVideo> {
        recover_x0_at(self.alpha_bar(t), x_t, v)
    }
}

/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn add_noise_at(alpha_bar: f64, x0: &LatentVideo, eps: &LatentVideo) -> Result<LatentVideo> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// `v = sqrt(ab) eps - sqrt(1 - ab) x0`.
pub fn v_target_at(alpha_bar: f64, x0: &LatentVideo, eps: &LatentVideo) -> Result<LatentVideo> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * e - s * x)
}

/// `x0 = sqrt(ab) x_t - sqrt(1 - ab) v`.
pub fn recover_x0_at(alpha_bar: f64, x_t: &LatentVideo, v: &LatentVideo) -> Result<LatentVideo> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(v, |x, v| a * x - s * v)
}

/// One deterministic first-order step from `t_from` to `t_to` (`None` = clean).
pub fn sampler_step<F>(
    schedule: &NoiseSchedule,
    predict_v: &mut F,
    x_t: &LatentVideo,
    t_from: TimeStep,
    t_to: Option<TimeStep>,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo>,
{
    if t_to.is_some_and(|to| to >= t_from) {
        return Err(Error::invalid("sampler_step", format!("target {t_to:?} must precede {t_from:?}")));
    }
    let v = predict_v(x_t, t_from)?;
    if v.shape() != x_t.shape() {
        return Err(Error::invalid(
            "sampler_step",
            format!("predictor returned {:?} for input {:?}", v.shape(), x_t.shape()),
        ));
    }
    let from = schedule.alpha_bar(t_from);
    let x0 = recover_x0_at(from, x_t, &v)?;
    let to = schedule.level(t_to);
    let (a_from, s_from) = (from.sqrt(), (1.0 - from).sqrt());
    let (a_to, s_to) = (to.sqrt(), (1.0 - to).sqrt());
    x_t.zip_map(&x0, |x, x0| {
        let eps = (x - a_from * x0) / s_from;
        a_to * x0 + s_to * eps
    })
}

/// `steps` strictly decreasing timesteps starting at `t_start` with uniform
/// integer stride; the sampler then finishes at the clean state.
pub fn sample_timesteps(t_start: TimeStep, steps: usize) -> Result<Vec<TimeStep>> {
    let span = t_start.0 + 1;
    if steps == 0 || steps > span {
        return Err(Error::invalid("sample", format!("steps must lie in [1, {span}], got {steps}")));
    }
    Ok((0..steps).map(|i| TimeStep(t_start.0 - i * span / steps)).collect())
}

/// Runs the sampler from `x_start` at `t_start` down to the clean state.
pub fn sample<F>(
    schedule: &NoiseSchedule,
    mut predict_v: F,
    x_start: &LatentVideo,
    t_start: TimeStep,
    steps: usize,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo>,
{
    let ts = sample_timesteps(t_start, steps)?;
    let mut x = x_start.clone();
    for (i, &t) in ts.iter().enumerate() {
        x = sampler_step(schedule, &mut predict_v, &x, t, ts.get(i + 1).copied())?;
    }
    Ok(x)
}
