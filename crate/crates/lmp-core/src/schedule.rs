//! Noise schedules, gate thresholds, and the noising operations.
//!
//! Two distinct noising rules live here. `forward_noise` is the usual
//! variance-preserving rule `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
//! `proportional_noise` is the convex blend `lam_t z0 + (1 - lam_t) eps`
//! used to keep a real reference video on a known trajectory between its
//! clean state (t = 0) and the run's noise sample (t = T).

use crate::error::{Error, Result};
use crate::latent::LatentVideo;

/// Per-step retention factors `a_t` and their running products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    a: Vec<f64>,
    abar: Vec<f64>,
}

impl NoiseSchedule {
    /// `a[t-1]` is the retention at step t; each must lie in (0, 1].
    pub fn from_alphas(a: Vec<f64>) -> Result<NoiseSchedule> {
        if let Some(&bad) = a.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Config(format!(
                "retention factors must lie in (0, 1], got {bad}"
            )));
        }
        let mut abar = Vec::with_capacity(a.len() + 1);
        abar.push(1.0);
        for &x in &a {
            abar.push(abar.last().unwrap() * x);
        }
        Ok(NoiseSchedule { a, abar })
    }

    /// Ramp with `a_t = 1 - beta_t`, betas linearly spaced over (0, 1).
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {beta_start}..{beta_end}"
            )));
        }
        if t_total == 0 {
            return NoiseSchedule::from_alphas(vec![]);
        }
        let step = if t_total == 1 {
            0.0
        } else {
            (beta_end - beta_start) / (t_total - 1) as f64
        };
        let a = (0..t_total)
            .map(|i| 1.0 - (beta_start + step * i as f64))
            .collect();
        NoiseSchedule::from_alphas(a)
    }

    pub fn t_total(&self) -> usize {
        self.a.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.a
    }

    /// Cumulative retention; `abar(0) = 1`.
    pub fn abar(&self, t: usize) -> f64 {
        self.abar[t]
    }
}

/// Run-level thresholds and steering strengths.
///
/// With the loop running t = T down to 0, reference-key injection is active
/// while `t > t1` and appearance suppression while `t3 < t < t2`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_total: usize,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    /// Reference-key reweighting factor.
    pub lambda: f64,
    /// Appearance-suppression step size.
    pub beta: f64,
    pub seed: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t3 < self.t2 && self.t2 <= self.t_total) {
            return Err(Error::Config(format!(
                "need t3 < t2 <= t_total, got t3={} t2={} t_total={}",
                self.t3, self.t2, self.t_total
            )));
        }
        if self.t1 > self.t_total {
            return Err(Error::Config(format!(
                "t1={} exceeds t_total={}",
                self.t1, self.t_total
            )));
        }
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendPolicy {
    /// `lam_t = 1 - t/T`
    #[default]
    Linear,
    /// `lam_t = sqrt(abar_t)`
    SqrtAbar,
}

impl std::str::FromStr for BlendPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<BlendPolicy> {
        match s {
            "linear" => Ok(BlendPolicy::Linear),
            "sqrt_abar" => Ok(BlendPolicy::SqrtAbar),
            other => Err(Error::Config(format!("unknown blend policy \"{other}\""))),
        }
    }
}

/// Clean-fraction weights `lam_t` for `proportional_noise`, indexed 0..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendSchedule {
    lam: Vec<f64>,
}

impl BlendSchedule {
    /// Requires `lam[0] = 1`, entries in [0, 1], non-increasing.
    pub fn new(lam: Vec<f64>) -> Result<BlendSchedule> {
        if lam.is_empty() {
            return Err(Error::Config("blend schedule is empty".into()));
        }
        if lam[0] != 1.0 {
            return Err(Error::Config(format!(
                "blend schedule must start at 1, got {}",
                lam[0]
            )));
        }
        for pair in lam.windows(2) {
            if !(pair[1].is_finite() && pair[1] >= 0.0 && pair[1] <= pair[0]) {
                return Err(Error::Config(format!(
                    "blend schedule must be non-increasing within [0, 1], got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(BlendSchedule { lam })
    }

    pub fn t_total(&self) -> usize {
        self.lam.len() - 1
    }

    pub fn lam(&self, t: usize) -> f64 {
        self.lam[t]
    }
}

/// Build the clean-fraction schedule for a T-step run.
///
/// `SqrtAbar` reads the cumulative retentions off `sched`, which must cover
/// the same number of steps.
pub fn make_blend_schedule(
    t_total: usize,
    kind: BlendPolicy,
    sched: Option<&NoiseSchedule>,
) -> Result<BlendSchedule> {
    match kind {
        BlendPolicy::Linear => {
            let lam = (0..=t_total)
                .map(|t| {
                    if t_total == 0 {
                        1.0
                    } else {
                        1.0 - t as f64 / t_total as f64
                    }
                })
                .collect();
            BlendSchedule::new(lam)
        }
        BlendPolicy::SqrtAbar => {
            let sched = sched.ok_or_else(|| {
                Error::Config("sqrt_abar blend policy needs a noise schedule".into())
            })?;
            if sched.t_total() != t_total {
                return Err(Error::Config(format!(
                    "blend schedule for {} steps, noise schedule has {}",
                    t_total,
                    sched.t_total()
                )));
            }
            let lam = (0..=t_total).map(|t| sched.abar(t).sqrt()).collect();
            BlendSchedule::new(lam)
        }
    }
}

fn check_step(t: usize, t_total: usize) -> Result<()> {
    if t > t_total {
        return Err(Error::Config(format!(
            "step {t} out of range for a {t_total}-step schedule"
        )));
    }
    Ok(())
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`. At t = 0 this is z0, bit-exact.
pub fn forward_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    check_step(t, sched.t_total())?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let abar = sched.abar(t);
    z0.blend(abar.sqrt(), eps, (1.0 - abar).sqrt())
}

/// `lam_t z0 + (1 - lam_t) eps`. Whenever `lam_t = 1` the input comes back
/// bit-exact, so a clean reference stays clean at t = 0.
pub fn proportional_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    blend: &BlendSchedule,
) -> Result<LatentVideo> {
    check_step(t, blend.t_total())?;
    let lam = blend.lam(t);
    if lam == 1.0 {
        return Ok(z0.clone());
    }
    z0.blend(lam, eps, 1.0 - lam)
}

/// One deterministic sampler step: recover `z0_hat` from `z_t` under the
/// predicted noise, then renoise it to level t-1.
pub fn denoise_update(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t == 0 {
        return Err(Error::Config("no step precedes t = 0".into()));
    }
    check_step(t, sched.t_total())?;
    let abar_t = sched.abar(t);
    if abar_t == 0.0 {
        return Err(Error::Numeric(format!(
            "cumulative retention underflowed to zero at t={t}"
        )));
    }
    let z0_hat = z_t.blend(1.0 / abar_t.sqrt(), eps_hat, -(1.0 - abar_t).sqrt() / abar_t.sqrt())?;
    let abar_prev = sched.abar(t - 1);
    z0_hat.blend(abar_prev.sqrt(), eps_hat, (1.0 - abar_prev).sqrt())
}
