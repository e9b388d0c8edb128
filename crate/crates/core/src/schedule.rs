//! Noise schedule, forward diffusion, x0-prediction and the student timestep set.
//!
//! Timesteps are 1-indexed: `betas[t - 1]` is βₜ and `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { num_timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule with cumulative products ᾱₜ = ∏_{i≤t}(1 − βᵢ).
pub fn build_schedule(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    let in_unit = |b: f64| b > 0.0 && b < 1.0;
    if num_timesteps == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if num_timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (num_timesteps - 1) as f64;
        (0..num_timesteps).map(|i| beta_start + step * i as f64).collect()
    };
    NoiseSchedule::from_betas(betas).map(|mut s| {
        s.config = ScheduleConfig { num_timesteps, beta_start, beta_end };
        s
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.num_timesteps, cfg.beta_start, cfg.beta_end)
    }

    /// Arbitrary β sequence; the recorded config takes its endpoints.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let config = ScheduleConfig {
            num_timesteps: betas.len(),
            beta_start: betas[0],
            beta_end: *betas.last().unwrap(),
        };
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

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
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { timestep: t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱₜ, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `(√ᾱₜ, √(1 − ᾱₜ))` for `t` in `1..=T`.
    pub fn signal_noise(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        let ab = self.alpha_bars[t - 1];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Coefficients `(a, b)` with `x̂0 = a·xₜ + b·ε̂`.
    pub fn x0_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        let ab = self.alpha_bars[t - 1];
        x0_coefficients_from_alpha_bar(ab)
    }
}

pub(crate) fn x0_coefficients_from_alpha_bar(alpha_bar: f64) -> Result<(f64, f64)> {
    if alpha_bar <= 0.0 {
        return Err(Error::invalid("alpha_bar == 0: x0 is unidentifiable at a terminal timestep"));
    }
    let sa = alpha_bar.sqrt();
    Ok((1.0 / sa, -(1.0 - alpha_bar).sqrt() / sa))
}

/// Per-sample timesteps: either one per batch element or a single shared value.
pub(crate) fn expand_timesteps(ts: &[usize], batch: usize) -> Result<Vec<usize>> {
    match ts.len() {
        1 => Ok(vec![ts[0]; batch]),
        n if n == batch => Ok(ts.to_vec()),
        n => Err(Error::Shape(format!("{n} timesteps for a batch of {batch}"))),
    }
}

/// Forward diffusion at an explicit ᾱ, used for limit cases outside the schedule.
pub fn diffuse_at<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let coeffs = vec![(alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt()); x0.shape()[0]];
    combine(x0, eps, &coeffs)
}

fn combine<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, coeffs: &[(f64, f64)]) -> Result<Tensor<T>> {
    x.expect_same_shape(y)?;
    let mut out = x.clone();
    for (n, &(a, b)) in coeffs.iter().enumerate() {
        let (a, b) = (T::lit(a), T::lit(b));
        let ys = y.sample(n);
        for (o, &yv) in out.sample_mut(n).iter_mut().zip(ys) {
            *o = a * *o + b * yv;
        }
    }
    Ok(out)
}

/// `xₛ = √ᾱₛ·x0 + √(1−ᾱₛ)·ε`, with `ts` per batch element or shared.
pub fn forward_diffuse<T: Scalar>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    x0.expect_same_shape(eps)?;
    let ts = expand_timesteps(ts, x0.shape()[0])?;
    let coeffs = ts.iter().map(|&t| sched.signal_noise(t)).collect::<Result<Vec<_>>>()?;
    combine(x0, eps, &coeffs)
}

/// `x̂0 = (xₛ − √(1−ᾱₛ)·ε̂) / √ᾱₛ`.
pub fn predict_x0<T: Scalar>(
    x_s: &Tensor<T>,
    ts: &[usize],
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    x_s.expect_same_shape(eps_hat)?;
    let ts = expand_timesteps(ts, x_s.shape()[0])?;
    let coeffs = ts.iter().map(|&t| sched.x0_coefficients(t)).collect::<Result<Vec<_>>>()?;
    combine(x_s, eps_hat, &coeffs)
}

/// Graph form of [`predict_x0`], differentiable in both inputs.
pub fn predict_x0_graph<T: Scalar>(
    g: &mut Graph<T>,
    x_s: Var,
    ts: &[usize],
    eps_hat: Var,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let ts = expand_timesteps(ts, g.value(x_s).shape()[0])?;
    let coeffs = ts.iter().map(|&t| sched.x0_coefficients(t)).collect::<Result<Vec<_>>>()?;
    let a = coeffs.iter().map(|c| T::lit(c.0)).collect();
    let b = coeffs.iter().map(|c| T::lit(c.1)).collect();
    g.lin_comb(x_s, eps_hat, a, b)
}

/// Student anchor timesteps and their projection onto inference-step indices.
///
/// Anchors are kept in decreasing order; the largest anchor is step 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTimestepSet {
    anchors: Vec<usize>,
}

impl Default for StudentTimestepSet {
    fn default() -> Self {
        Self { anchors: vec![999, 749, 499, 249] }
    }
}

impl StudentTimestepSet {
    pub fn new(anchors: Vec<usize>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("student timestep set is empty"));
        }
        if anchors.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!("anchors must be strictly decreasing: {anchors:?}")));
        }
        if anchors.len() > 2 {
            let gap = anchors[0] - anchors[1];
            if anchors.windows(2).any(|w| w[0] - w[1] != gap) {
                return Err(Error::invalid(format!("anchors must be uniformly spaced: {anchors:?}")));
            }
        }
        Ok(Self { anchors })
    }

    /// `count` anchors spaced evenly downwards from `max`.
    pub fn uniform(max: usize, count: usize) -> Result<Self> {
        if count == 0 || max == 0 {
            return Err(Error::invalid("need at least one anchor above zero"));
        }
        let gap = (max + 1) / count;
        if gap == 0 {
            return Err(Error::invalid(format!("cannot fit {count} anchors below {max}")));
        }
        Self::new((0..count).map(|i| max - i * gap).collect())
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate_against(&self, sched: &NoiseSchedule) -> Result<()> {
        self.anchors.iter().try_for_each(|&a| sched.check_timestep(a))
    }

    /// p(s): anchor → 1-based inference step.
    pub fn project_step(&self, s: usize) -> Result<usize> {
        self.anchors
            .iter()
            .position(|&a| a == s)
            .map(|i| i + 1)
            .ok_or(Error::NotAnAnchor(s))
    }

    /// Inverse of [`Self::project_step`].
    pub fn anchor_for_step(&self, step: usize) -> Result<usize> {
        if step == 0 || step > self.anchors.len() {
            return Err(Error::invalid(format!(
                "inference step {step} outside 1..={}",
                self.anchors.len()
            )));
        }
        Ok(self.anchors[step - 1])
    }
}

/// Convenience wrapper matching the free-function form.
pub fn project_step(s: usize, sts: &StudentTimestepSet) -> Result<usize> {
    sts.project_step(s)
}
