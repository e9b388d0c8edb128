//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdistill::autodiff::Graph;
use srdistill::networks::{Denoiser, DenoiserArch, Discriminator, DiscriminatorArch};
use srdistill::objective::{discriminator_loss_graph, weight_d, WeightingParams};
use srdistill::params::ParamStore;
use srdistill::sampler::{gaussian_like, upsample_lr};
use srdistill::schedule::{build_schedule, forward_diffuse, NoiseSchedule, StudentTimestepSet};
use srdistill::tensor::{Scalar, Tensor};
use srdistill::trainer::{generator_loss, GeneratorInputs};

pub fn default_schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 0.02).unwrap()
}

pub fn tiny_denoiser_arch() -> DenoiserArch {
    DenoiserArch { channels: [1, 2, 2], time_dim: 2, ..Default::default() }
}

pub fn tiny_disc_arch() -> DiscriminatorArch {
    DiscriminatorArch { channels: 1, image_channels: 3 }
}

/// Gives zero-initialized layers random values so every parameter carries gradient.
pub fn randomize_zero_layers<T: Scalar>(params: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.iter_mut() {
        if name.starts_with("zero.") {
            for v in t.data_mut() {
                *v = T::lit(rng.random_range(-0.5..0.5));
            }
        }
    }
}

/// Tiny student and discriminator plus a fixed generator-pass input set.
pub struct GradientProblem {
    pub student: Denoiser<f64>,
    pub disc: Discriminator<f64>,
    pub inputs: GeneratorInputs<f64>,
    pub real: Tensor<f64>,
    pub sched: NoiseSchedule,
}

impl GradientProblem {
    pub fn new(wp: &WeightingParams) -> Self {
        let sched = default_schedule();
        let sts = StudentTimestepSet::default();
        let mut student = Denoiser::<f64>::new(tiny_denoiser_arch(), 11).unwrap();
        randomize_zero_layers(&mut student.params, 12);
        let disc = Discriminator::<f64>::new(tiny_disc_arch(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let real = gaussian_like::<f64, _>(&[2, 3, 16, 16], &mut rng).map(|v| (0.6 * v).tanh());
        let lr = gaussian_like::<f64, _>(&[2, 3, 4, 4], &mut rng).map(|v| (0.6 * v).tanh());
        let s = vec![sts.anchor_for_step(1).unwrap(), sts.anchor_for_step(3).unwrap()];
        let t = vec![650, 120];
        let eps = gaussian_like(real.shape(), &mut rng);
        let x_s = forward_diffuse(&real, &s, &eps, &sched).unwrap();
        let cond = upsample_lr(&lr, 4).unwrap();
        let teacher_x0 = gaussian_like::<f64, _>(real.shape(), &mut rng).map(|v| (0.5 * v).tanh());
        let d = s.iter().zip(&t).map(|(&s, &t)| weight_d(s, t, &sched, &sts, wp).unwrap()).collect();
        Self { student, disc, inputs: GeneratorInputs { x_s, s, cond, teacher_x0, lr, d }, real, sched }
    }

    pub fn num_params(&self) -> usize {
        self.student.num_params() + self.disc.num_params()
    }

    fn total<T: Scalar>(&self, student: &Denoiser<T>, disc: &Discriminator<T>, wp: &WeightingParams) -> f64 {
        let mut g = Graph::<T>::new();
        let sp = student.params.bind(&mut g, false);
        let dp = disc.params.bind(&mut g, false);
        let inp = self.inputs.cast::<T>();
        let terms = generator_loss(&mut g, student, &sp, disc, &dp, &inp, wp, &self.sched).unwrap();
        g.value(terms.total).data()[0].as_f64()
    }

    /// Analytic student gradient of the generator objective, computed in `T`.
    pub fn analytic<T: Scalar>(&self, wp: &WeightingParams) -> Vec<f64> {
        let student = Denoiser::<T>::from_params(self.student.arch.clone(), self.student.params.cast()).unwrap();
        let disc = Discriminator::<T>::from_params(self.disc.arch.clone(), self.disc.params.cast()).unwrap();
        let mut g = Graph::<T>::new();
        let sp = student.params.bind(&mut g, true);
        let dp = disc.params.bind(&mut g, false);
        let inp = self.inputs.cast::<T>();
        let terms = generator_loss(&mut g, &student, &sp, &disc, &dp, &inp, wp, &self.sched).unwrap();
        let mut grads = g.backward(terms.total).unwrap();
        let store = sp.gradients(&mut grads, &student.params);
        flatten(&store)
    }

    /// Central differences in double precision over every student parameter.
    pub fn finite_difference(&self, wp: &WeightingParams, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let names: Vec<String> = self.student.params.names().cloned().collect();
        let mut probe = self.student.clone();
        for name in names {
            let n = probe.params.get(&name).unwrap().numel();
            for i in 0..n {
                let orig = probe.params.get(&name).unwrap().data()[i];
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = self.total(&probe, &self.disc, wp);
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = self.total(&probe, &self.disc, wp);
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
        out
    }

    /// Hinge discriminator loss on the fixed real batch versus the teacher target as the fake.
    fn disc_loss(&self, disc: &Discriminator<f64>) -> f64 {
        let mut g = Graph::<f64>::new();
        let dp = disc.params.bind(&mut g, false);
        self.disc_loss_graph(&mut g, disc, &dp).1
    }

    fn disc_loss_graph(
        &self,
        g: &mut Graph<f64>,
        disc: &Discriminator<f64>,
        dp: &srdistill::params::Bound,
    ) -> (srdistill::autodiff::Var, f64) {
        let real = g.constant(self.real.clone());
        let fake = g.constant(self.inputs.teacher_x0.clone());
        let lr = g.constant(self.inputs.lr.clone());
        let lr_real = disc.forward(g, dp, real, lr).unwrap();
        let lr_fake = disc.forward(g, dp, fake, lr).unwrap();
        let loss = discriminator_loss_graph(g, lr_real, lr_fake).unwrap();
        let v = g.value(loss).data()[0];
        (loss, v)
    }

    /// `(analytic, finite-difference)` discriminator gradients.
    pub fn disc_gradients(&self, h: f64) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let dp = self.disc.params.bind(&mut g, true);
        let (loss, _) = self.disc_loss_graph(&mut g, &self.disc, &dp);
        let mut grads = g.backward(loss).unwrap();
        let analytic = flatten(&dp.gradients(&mut grads, &self.disc.params));
        let mut fd = Vec::new();
        let mut probe = Discriminator::from_params(self.disc.arch.clone(), self.disc.params.clone()).unwrap();
        let names: Vec<String> = probe.params.names().cloned().collect();
        for name in names {
            for i in 0..probe.params.get(&name).unwrap().numel() {
                let orig = probe.params.get(&name).unwrap().data()[i];
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = self.disc_loss(&probe);
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = self.disc_loss(&probe);
                probe.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                fd.push((up - down) / (2.0 * h));
            }
        }
        (analytic, fd)
    }
}

pub fn flatten<T: Scalar>(store: &ParamStore<T>) -> Vec<f64> {
    store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()).collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Direct per-window SSIM on a luminance plane: for every fully contained
/// 11×11 window, weighted moments with a normalized σ = 1.5 Gaussian.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11usize;
    let mut win = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            win[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - n {
        for ox in 0..=w - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let k = win[y * n + x];
                    ma += k * a[(oy + y) * w + ox + x];
                    mb += k * b[(oy + y) * w + ox + x];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let k = win[y * n + x];
                    let da = a[(oy + y) * w + ox + x] - ma;
                    let db = b[(oy + y) * w + ox + x] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
