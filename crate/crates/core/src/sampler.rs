//! Few-step self-refining sampling and the multi-step ancestral baseline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::degradation::resize::{resize_tensor, ResizeKernel};
use crate::error::{Error, Result};
use crate::networks::{denoise_eps, Denoiser};
use crate::schedule::{forward_diffuse, predict_x0, NoiseSchedule, StudentTimestepSet};
use crate::tensor::{Scalar, Tensor};

/// Anything that predicts noise from `(x_s, s, cond)`.
///
/// Implemented by [`Denoiser`]; tests plug in analytic predictors.
pub trait NoisePredictor<T: Scalar> {
    fn predict_eps(&self, x_s: &Tensor<T>, ts: &[usize], cond: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict_eps(&self, x_s: &Tensor<T>, ts: &[usize], cond: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
        denoise_eps(self, x_s, ts, cond, sched)
    }
}

/// Conditions consumed by successive inference steps: `[x_LR, x̂0¹, x̂0², …]`.
///
/// The first element is at LR resolution, the rest at HR resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionChain<T: Scalar = f32> {
    pub elements: Vec<Tensor<T>>,
}

impl<T: Scalar> ConditionChain<T> {
    /// Inference step the chain was produced for (its length).
    pub fn produced_for(&self) -> usize {
        self.elements.len()
    }

    /// Condition used at step `k` (1-based).
    pub fn condition(&self, k: usize) -> Result<&Tensor<T>> {
        k.checked_sub(1)
            .and_then(|i| self.elements.get(i))
            .ok_or_else(|| Error::invalid(format!("chain of length {} has no step {k}", self.elements.len())))
    }

    pub fn last(&self) -> &Tensor<T> {
        self.elements.last().expect("chain always holds the LR image")
    }
}

/// Standard normal tensor.
pub fn gaussian_like<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// `r·x̂0 + (1−r)·x_LR↑`; the endpoints return their input unchanged.
pub fn blend_condition<T: Scalar>(x0_hat: &Tensor<T>, x_lr_up: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("blend ratio {r} outside [0, 1]")));
    }
    x0_hat.expect_same_shape(x_lr_up)?;
    if r == 1.0 {
        return Ok(x0_hat.clone());
    }
    if r == 0.0 {
        return Ok(x_lr_up.clone());
    }
    let (a, b) = (T::lit(r), T::lit(1.0 - r));
    x0_hat.zip_map(x_lr_up, |x, l| a * x + b * l)
}

/// Clips an estimate to the data range `[-1, 1]`.
fn clamp_unit<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

/// Bicubic upsampling of an LR batch by an integer factor.
pub fn upsample_lr<T: Scalar>(x_lr: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x_lr.dims4()?;
    if scale == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    resize_tensor(x_lr, h * scale, w * scale, ResizeKernel::Bicubic)
}

/// Self-refining sampling: step 1 denoises pure noise under the LR condition,
/// each later step re-noises the previous estimate to the next anchor and
/// conditions on `blend(x̂0, x_LR↑, blend_r)`. Every estimate is clipped to `[-1, 1]`.
///
/// Returns the final estimate and the chain of conditions actually consumed.
#[allow(clippy::too_many_arguments)]
pub fn psr_sample<T: Scalar, N: NoisePredictor<T> + ?Sized, R: Rng>(
    net: &N,
    x_lr: &Tensor<T>,
    steps: usize,
    blend_r: f64,
    scale: usize,
    sts: &StudentTimestepSet,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor<T>, ConditionChain<T>)> {
    if steps == 0 || steps > sts.len() {
        return Err(Error::invalid(format!("steps {steps} outside 1..={}", sts.len())));
    }
    if !(0.0..=1.0).contains(&blend_r) {
        return Err(Error::invalid(format!("blend ratio {blend_r} outside [0, 1]")));
    }
    let x_lr_up = upsample_lr(x_lr, scale)?;
    let shape = x_lr_up.shape().to_vec();
    let mut chain = ConditionChain { elements: vec![x_lr.clone()] };

    let s1 = sts.anchor_for_step(1)?;
    let x = gaussian_like(&shape, rng);
    let eps = net.predict_eps(&x, &[s1], &x_lr_up, sched)?;
    let mut x0_hat = clamp_unit(predict_x0(&x, &[s1], &eps, sched)?);

    for k in 2..=steps {
        let s = sts.anchor_for_step(k)?;
        let cond = blend_condition(&x0_hat, &x_lr_up, blend_r)?;
        let noise = gaussian_like(&shape, rng);
        let x = forward_diffuse(&x0_hat, &[s], &noise, sched)?;
        let eps = net.predict_eps(&x, &[s], &cond, sched)?;
        x0_hat = clamp_unit(predict_x0(&x, &[s], &eps, sched)?);
        chain.elements.push(cond);
    }
    Ok((x0_hat, chain))
}

/// Timesteps visited by an `steps`-step sampler: evenly spaced down from `T − 1`.
pub fn baseline_timesteps(steps: usize, sched: &NoiseSchedule) -> Result<Vec<usize>> {
    let t = sched.len();
    if steps == 0 || steps >= t {
        return Err(Error::invalid(format!("baseline steps {steps} outside 1..{t}")));
    }
    let gap = t / steps;
    Ok((0..steps).map(|i| t - 1 - i * gap).collect())
}

/// Ancestral sampling over evenly spaced timesteps with the LR image as a fixed condition.
#[allow(clippy::too_many_arguments)]
pub fn baseline_sample<T: Scalar, N: NoisePredictor<T> + ?Sized, R: Rng>(
    teacher: &N,
    x_lr: &Tensor<T>,
    steps: usize,
    scale: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let ts = baseline_timesteps(steps, sched)?;
    let cond = upsample_lr(x_lr, scale)?;
    let shape = cond.shape().to_vec();
    let mut x = gaussian_like(&shape, rng);
    let mut x0_hat = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps = teacher.predict_eps(&x, &[t], &cond, sched)?;
        x0_hat = clamp_unit(predict_x0(&x, &[t], &eps, sched)?);
        let Some(&prev) = ts.get(i + 1) else { break };
        // posterior q(x_prev | x_t, x̂0)
        let ab_t = sched.alpha_bar(t)?;
        let ab_p = sched.alpha_bar(prev)?;
        let beta = 1.0 - ab_t / ab_p;
        let c0 = T::lit(ab_p.sqrt() * beta / (1.0 - ab_t));
        let ct = T::lit((ab_t / ab_p).sqrt() * (1.0 - ab_p) / (1.0 - ab_t));
        let sd = T::lit(((1.0 - ab_p) / (1.0 - ab_t) * beta).sqrt());
        let z = gaussian_like::<T, R>(&shape, rng);
        let mut next = x0_hat.zip_map(&x, |a, b| c0 * a + ct * b)?;
        for (v, zv) in next.data_mut().iter_mut().zip(z.data()) {
            *v += sd * *zv;
        }
        x = next;
    }
    Ok(x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    /// Exact noise for a point-mass data distribution at `target`.
    struct Oracle {
        target: Tensor<f64>,
        calls: Cell<usize>,
    }

    impl NoisePredictor<f64> for Oracle {
        fn predict_eps(&self, x_s: &Tensor<f64>, ts: &[usize], _: &Tensor<f64>, sched: &NoiseSchedule) -> Result<Tensor<f64>> {
            self.calls.set(self.calls.get() + 1);
            let (a, b) = sched.signal_noise(ts[0])?;
            x_s.zip_map(&self.target, |x, t| (x - a * t) / b)
        }
    }

    fn oracle() -> Oracle {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = gaussian_like::<f64, _>(&[1, 3, 8, 8], &mut rng).map(|v| v.tanh());
        Oracle { target, calls: Cell::new(0) }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = Tensor::<f32>::full([1, 1, 2, 2], 0.8);
        let b = Tensor::<f32>::full([1, 1, 2, 2], 0.2);
        assert_eq!(blend_condition(&a, &b, 1.0).unwrap(), a);
        assert_eq!(blend_condition(&a, &b, 0.0).unwrap(), b);
        let m = blend_condition(&a, &b, 0.5).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.5).abs() < 1e-7));
        assert!(blend_condition(&a, &b, 1.5).is_err());
        assert!(blend_condition(&a, &b, -0.1).is_err());
    }

    #[test]
    fn psr_counts_and_chain() {
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let sts = StudentTimestepSet::default();
        let o = oracle();
        let lr = Tensor::<f64>::zeros([1, 3, 2, 2]);
        for steps in 1..=4 {
            o.calls.set(0);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (out, chain) = psr_sample(&o, &lr, steps, 1.0, 4, &sts, &sched, &mut rng).unwrap();
            assert_eq!(o.calls.get(), steps);
            assert_eq!(chain.produced_for(), steps);
            assert_eq!(chain.elements[0], lr);
            let err = out.zip_map(&o.target, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-9, "{err}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(psr_sample(&o, &lr, 0, 1.0, 4, &sts, &sched, &mut rng).is_err());
        assert!(psr_sample(&o, &lr, 5, 1.0, 4, &sts, &sched, &mut rng).is_err());
        assert!(psr_sample(&o, &lr, 2, 1.1, 4, &sts, &sched, &mut rng).is_err());
    }

    #[test]
    fn baseline_recovers_point_mass() {
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let o = oracle();
        let lr = Tensor::<f64>::zeros([1, 3, 2, 2]);
        for steps in [1, 4, 50] {
            o.calls.set(0);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let out = baseline_sample(&o, &lr, steps, 4, &sched, &mut rng).unwrap();
            assert_eq!(o.calls.get(), steps);
            let err = out.zip_map(&o.target, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-2, "{steps}: {err}");
        }
        assert_eq!(baseline_timesteps(4, &sched).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(baseline_timesteps(1, &sched).unwrap(), vec![999]);
        assert_eq!(baseline_timesteps(50, &sched).unwrap().last(), Some(&19));
    }

    #[test]
    fn single_step_baseline_is_one_prediction() {
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let o = oracle();
        let lr = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = baseline_sample(&o, &lr, 1, 4, &sched, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian_like::<f64, _>(&[1, 3, 8, 8], &mut rng);
        let eps = o.predict_eps(&x, &[999], &lr, &sched).unwrap();
        let want = predict_x0(&x, &[999], &eps, &sched).unwrap().map(|v| v.clamp(-1.0, 1.0));
        assert_eq!(out, want);
    }
}
