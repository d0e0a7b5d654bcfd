//! Forward diffusion chain on feature vectors.
//!
//! Steps are 1-based: `β_t` for `t = 1..=T`, with `ᾱ_0 = 1` so the
//! posterior is defined at `t = 1` (where it collapses onto the clean
//! estimate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::vp(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    /// `ᾱ_t` for `t = 0..=T`
    alpha_bars: Vec<f64>,
}

/// Serialized form: only `T` and the β list.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleDoc {
    #[serde(rename = "T")]
    steps: usize,
    betas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Discretized variance-preserving schedule:
    /// `β_t = 1 − exp(−β_min/T − (β_max − β_min)(2t − 1)/(2T²))`.
    pub fn vp(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        let tf = steps as f64;
        let betas = (1..=steps)
            .map(|t| {
                let e = beta_min / tf
                    + (beta_max - beta_min) * (2.0 * t as f64 - 1.0) / (2.0 * tf * tf);
                -(-e).exp_m1()
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Empty("beta schedule"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    fn check_step0(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `β_t`, `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t`, `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.beta(t)
    }

    /// Noise-to-data ratio `κ_t = 1 − √ᾱ_t`.
    pub fn n2d(&self, t: usize) -> f64 {
        1.0 - self.alpha_bars[t].sqrt()
    }

    /// Coefficients of `(v̂₀, v_t)` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab_prev = self.alpha_bars[t - 1];
        let ab = self.alpha_bars[t];
        let beta = self.beta(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScheduleDoc {
            steps: self.steps(),
            betas: self.betas.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ScheduleDoc = serde_json::from_str(s)?;
        if doc.steps != doc.betas.len() {
            return Err(Error::DimensionMismatch(format!(
                "T = {} but {} betas",
                doc.steps,
                doc.betas.len()
            )));
        }
        Self::from_betas(doc.betas)
    }

    /// One forward step: `v_t ~ N(√(1 − β_t) v_{t−1}, β_t I)`.
    pub fn diffuse_step(&self, v_prev: &Matrix, t: usize, rng: &mut Rng) -> Result<Matrix> {
        self.check_step(t)?;
        let (s, n) = (self.alpha(t).sqrt(), self.beta(t).sqrt());
        Ok(v_prev.map(|x| s * x + n * rng.normal()))
    }

    /// Closed-form marginal: `v_t ~ N(√ᾱ_t v₀, (1 − ᾱ_t) I)`. `t = 0` returns `v₀`.
    pub fn diffuse_marginal(&self, v0: &Matrix, t: usize, rng: &mut Rng) -> Result<Matrix> {
        self.check_step0(t)?;
        if t == 0 {
            return Ok(v0.clone());
        }
        let (s, n) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        Ok(v0.map(|x| s * x + n * rng.normal()))
    }

    /// Marginal sample with caller-supplied standard-normal noise.
    pub fn diffuse_marginal_with(&self, v0: &Matrix, t: usize, noise: &Matrix) -> Result<Matrix> {
        self.check_step0(t)?;
        let (s, n) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        v0.zip_map(noise, |x, e| s * x + n * e)
    }

    /// Posterior mean `μ̃_t(v_t, v̂₀)`.
    pub fn posterior_mean(&self, v0_hat: &Matrix, v_t: &Matrix, t: usize) -> Result<Matrix> {
        self.check_step(t)?;
        let (c0, ct) = self.posterior_coefficients(t);
        v0_hat.zip_map(v_t, |a, b| c0 * a + ct * b)
    }

    /// `v_{t−1} ~ N(μ̃_t(v_t, v̂₀), β̃_t I)`.
    pub fn posterior_sample(
        &self,
        v0_hat: &Matrix,
        v_t: &Matrix,
        t: usize,
        rng: &mut Rng,
    ) -> Result<Matrix> {
        let noise = rng.normal_matrix(v0_hat.rows(), v0_hat.cols());
        self.posterior_sample_with(v0_hat, v_t, t, &noise)
    }

    pub fn posterior_sample_with(
        &self,
        v0_hat: &Matrix,
        v_t: &Matrix,
        t: usize,
        noise: &Matrix,
    ) -> Result<Matrix> {
        let mean = self.posterior_mean(v0_hat, v_t, t)?;
        let sd = self.beta_tilde(t).sqrt();
        mean.zip_map(noise, |m, e| m + sd * e)
    }
}
