//! Timestep-adaptive distillation weighting and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StudentTimestepSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingForm {
    /// `μ·ν^(p−1)`
    Exponential,
    /// `γ·p + κ`
    Linear,
    /// Step factor fixed at 1: the weight depends on the teacher timestep only.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingParams {
    pub form: WeightingForm,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub lambda: f64,
}

impl Default for WeightingParams {
    fn default() -> Self {
        Self::perception()
    }
}

pub const PRESETS: [&str; 3] = ["perception", "fidelity", "baseline"];

impl WeightingParams {
    pub fn perception() -> Self {
        Self { form: WeightingForm::Exponential, mu: 0.5, nu: 2.1, gamma: 0.4, kappa: 0.5, lambda: 0.02 }
    }

    pub fn fidelity() -> Self {
        Self { mu: 0.7, ..Self::perception() }
    }

    /// Constant step factor, as in plain adversarial diffusion distillation.
    pub fn baseline() -> Self {
        Self { form: WeightingForm::Constant, ..Self::perception() }
    }

    pub fn exponential(mu: f64, nu: f64) -> Self {
        Self { mu, nu, ..Self::perception() }
    }

    pub fn linear(gamma: f64, kappa: f64) -> Self {
        Self { form: WeightingForm::Linear, gamma, kappa, ..Self::perception() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "perception" => Ok(Self::perception()),
            "fidelity" => Ok(Self::fidelity()),
            "baseline" => Ok(Self::baseline()),
            other => Err(Error::Config(format!("unknown weighting preset `{other}`, expected one of {PRESETS:?}"))),
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        let ok = finite(self.lambda)
            && self.lambda >= 0.0
            && match self.form {
                WeightingForm::Exponential => finite(self.mu) && finite(self.nu) && self.mu > 0.0 && self.nu > 0.0,
                WeightingForm::Linear => {
                    finite(self.gamma)
                        && finite(self.kappa)
                        && self.gamma >= 0.0
                        && self.kappa >= 0.0
                        && self.gamma + self.kappa > 0.0
                }
                WeightingForm::Constant => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid weighting parameters {self:?}")))
        }
    }

    /// Multiplier applied on top of `√ᾱ_t` for inference step `p` (1-based).
    pub fn step_factor(&self, p: usize) -> f64 {
        match self.form {
            WeightingForm::Exponential => self.mu * self.nu.powi(p as i32 - 1),
            WeightingForm::Linear => self.gamma * p as f64 + self.kappa,
            WeightingForm::Constant => 1.0,
        }
    }
}

/// Distillation weight `d(s, t) = √ᾱ_t · f(p(s))`.
pub fn weight_d(
    s: usize,
    t: usize,
    sched: &NoiseSchedule,
    sts: &StudentTimestepSet,
    wp: &WeightingParams,
) -> Result<f64> {
    let p = sts.project_step(s)?;
    sched.check_timestep(t)?;
    wp.validate()?;
    Ok(sched.alpha_bar(t)?.sqrt() * wp.step_factor(p))
}

/// Adversarial-to-distillation balance `λ / d(s, t)`.
pub fn weighting_ratio(
    s: usize,
    t: usize,
    sched: &NoiseSchedule,
    sts: &StudentTimestepSet,
    wp: &WeightingParams,
) -> Result<f64> {
    Ok(wp.lambda / weight_d(s, t, sched, sts, wp)?)
}

/// `d · MSE(student, teacher)`.
pub fn ta_distill_loss<T: Scalar>(student_x0: &Tensor<T>, teacher_x0: &Tensor<T>, d: f64) -> Result<f64> {
    student_x0.expect_same_shape(teacher_x0)?;
    let mse = student_x0
        .data()
        .iter()
        .zip(teacher_x0.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / student_x0.numel() as f64;
    Ok(d * mse)
}

/// Batched distillation term on the graph: mean over samples of `d_n · MSE_n`.
///
/// The teacher estimate is detached so no gradient reaches it.
pub fn ta_distill_loss_graph<T: Scalar>(g: &mut Graph<T>, student_x0: Var, teacher_x0: Var, d: &[f64]) -> Result<Var> {
    let teacher = g.detach(teacher_x0);
    g.weighted_mse(student_x0, teacher, d.iter().map(|&v| T::lit(v)).collect())
}

/// Hinge losses for one logit pair: `(g_loss, d_loss)`.
pub fn adversarial_losses(logit_real: f64, logit_fake: f64) -> Result<(f64, f64)> {
    if !logit_real.is_finite() || !logit_fake.is_finite() {
        return Err(Error::invalid(format!("non-finite logits ({logit_real}, {logit_fake})")));
    }
    let d_loss = (1.0 - logit_real).max(0.0) + (1.0 + logit_fake).max(0.0);
    Ok((-logit_fake, d_loss))
}

/// Generator hinge term averaged over the batch.
pub fn generator_adv_loss_graph<T: Scalar>(g: &mut Graph<T>, logits_fake: Var) -> Var {
    let m = g.mean(logits_fake);
    g.scale(m, -T::one())
}

/// Discriminator hinge term averaged over the batch.
pub fn discriminator_loss_graph<T: Scalar>(g: &mut Graph<T>, logits_real: Var, logits_fake: Var) -> Result<Var> {
    let r = g.affine(logits_real, -T::one(), T::one());
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.affine(logits_fake, T::one(), T::one());
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn total_loss(dis: f64, g_adv: f64, wp: &WeightingParams) -> f64 {
    dis + wp.lambda * g_adv
}

pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, dis: Var, g_adv: Var, wp: &WeightingParams) -> Result<Var> {
    let adv = g.scale(g_adv, T::lit(wp.lambda));
    g.add(dis, adv)
}
