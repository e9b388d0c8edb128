//! Conditional denoiser (student and teacher share it) and conditional discriminator.
//!
//! The denoiser is a three-scale encoder–decoder with residual blocks and a
//! sinusoidal timestep embedding. The condition image enters through a parallel
//! branch whose outputs are fused into the encoder by 1×1 projections that
//! start at zero, so a freshly built network ignores its condition exactly.
//!
//! The head predicts `v = √ᾱ·ε − √(1−ᾱ)·x0` and is converted to a noise
//! estimate before leaving [`Denoiser::forward`]; callers only ever see ε̂.
//! With ε̂ formed this way, `predict_x0` stays well conditioned at the terminal
//! anchor where `1/√ᾱ` would otherwise amplify head error a hundredfold.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::degradation::resize::{resize_tensor, ResizeKernel};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::schedule::{expand_timesteps, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Epsilon,
    V,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    /// Feature widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub time_dim: usize,
    /// Optional class-label embedding standing in for text conditioning.
    pub num_classes: Option<usize>,
    pub prediction: Prediction,
    pub image_channels: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            channels: [16, 32, 32],
            time_dim: 32,
            num_classes: None,
            prediction: Prediction::V,
            image_channels: 3,
        }
    }
}

impl DenoiserArch {
    fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("invalid denoiser architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorArch {
    pub channels: usize,
    pub image_channels: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self { channels: 16, image_channels: 3 }
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp() * t)
            .collect();
        data.extend(freqs.iter().map(|f| T::lit(f.sin())));
        data.extend(freqs.iter().map(|f| T::lit(f.cos())));
    }
    Tensor::from_vec([ts.len(), dim], data).expect("embedding shape")
}

fn conv_params<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    gain: f64,
) {
    store.insert(format!("{name}.w"), init.conv(out, inp, k, gain));
    store.insert(format!("{name}.b"), Tensor::zeros([out]));
}

fn linear_params<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    name: &str,
    out: usize,
    inp: usize,
    gain: f64,
) {
    store.insert(format!("{name}.w"), init.linear(out, inp, gain));
    store.insert(format!("{name}.b"), Tensor::zeros([out]));
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"));
    let k = g.value(w).shape()[2];
    g.conv2d(x, w, Some(p.var(&format!("{name}.b"))), stride, k / 2)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}

/// Checks that `params` has exactly the names and shapes `template` has.
fn check_layout<T: Scalar>(template: &ParamStore<T>, params: &ParamStore<T>) -> Result<()> {
    for (name, t) in template.iter() {
        let got = params.get(name).ok_or_else(|| Error::MissingMember(name.clone()))?;
        if got.shape() != t.shape() {
            return Err(Error::CorruptMember {
                name: name.clone(),
                reason: format!("shape {:?}, architecture expects {:?}", got.shape(), t.shape()),
            });
        }
    }
    if let Some(extra) = params.names().find(|n| template.get(n).is_none()) {
        return Err(Error::CorruptMember { name: extra.clone(), reason: "not part of the architecture".into() });
    }
    Ok(())
}

/// Resizes a condition image to `(h, w)` with bicubic resampling when needed.
pub fn match_resolution<T: Scalar>(cond: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, ch, cw) = cond.dims4()?;
    if (ch, cw) == (h, w) {
        return Ok(cond.clone());
    }
    resize_tensor(cond, h, w, ResizeKernel::Bicubic)
}

#[derive(Debug)]
pub struct Denoiser<T: Scalar = f32> {
    pub arch: DenoiserArch,
    pub params: ParamStore<T>,
    evals: AtomicU64,
}

impl<T: Scalar> Clone for Denoiser<T> {
    fn clone(&self) -> Self {
        Self { arch: self.arch.clone(), params: self.params.clone(), evals: AtomicU64::new(0) }
    }
}

const RES_BLOCKS: [&str; 5] = ["enc0", "enc1", "mid", "dec1", "dec0"];

impl<T: Scalar> Denoiser<T> {
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::new();
        let [c0, c1, c2] = arch.channels;
        let e = arch.time_dim;
        let ic = arch.image_channels;
        linear_params(&mut p, &mut init, "time.0", e, e, 1.0);
        linear_params(&mut p, &mut init, "time.1", e, e, 1.0);
        if let Some(k) = arch.num_classes {
            p.insert("class.emb", init.normal(&[k, e], 1.0));
        }
        conv_params(&mut p, &mut init, "in", c0, ic, 3, 1.0);
        conv_params(&mut p, &mut init, "cond.0", c0, ic, 3, 1.0);
        conv_params(&mut p, &mut init, "cond.1", c0, c0, 3, 1.0);
        conv_params(&mut p, &mut init, "cond.2", c1, c0, 3, 1.0);
        conv_params(&mut p, &mut init, "cond.3", c2, c1, 3, 1.0);
        for (i, c) in [c0, c1, c2].into_iter().enumerate() {
            p.insert(format!("zero.{i}.w"), Tensor::zeros([c, c, 1, 1]));
            p.insert(format!("zero.{i}.b"), Tensor::zeros([c]));
        }
        for (name, c) in RES_BLOCKS.iter().zip([c0, c1, c2, c1, c0]) {
            conv_params(&mut p, &mut init, &format!("{name}.c1"), c, c, 3, 1.0);
            linear_params(&mut p, &mut init, &format!("{name}.t"), c, e, 1.0);
            conv_params(&mut p, &mut init, &format!("{name}.c2"), c, c, 3, 0.2);
        }
        conv_params(&mut p, &mut init, "down0", c1, c0, 3, 1.0);
        conv_params(&mut p, &mut init, "down1", c2, c1, 3, 1.0);
        conv_params(&mut p, &mut init, "up1", c1, c2 + c1, 3, 1.0);
        conv_params(&mut p, &mut init, "up0", c0, c1 + c0, 3, 1.0);
        conv_params(&mut p, &mut init, "out", ic, c0, 3, 0.1);
        Ok(Self { arch, params: p, evals: AtomicU64::new(0) })
    }

    pub fn from_params(arch: DenoiserArch, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(arch.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self { arch, params, evals: AtomicU64::new(0) })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Number of forward evaluations since construction (or the last reset).
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn res_block(&self, g: &mut Graph<T>, p: &Bound, name: &str, h: Var, temb: Var) -> Result<Var> {
        let a = g.silu(h);
        let a = conv(g, p, &format!("{name}.c1"), a, 1)?;
        let t = linear(g, p, &format!("{name}.t"), temb)?;
        let a = g.add_channel(a, t)?;
        let a = g.silu(a);
        let a = conv(g, p, &format!("{name}.c2"), a, 1)?;
        g.add(h, a)
    }

    /// Graph-level forward pass returning the noise estimate ε̂.
    ///
    /// `cond` must already be at the resolution of `x_s`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_s: Var,
        ts: &[usize],
        cond: Var,
        labels: Option<&[usize]>,
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let (n, c, h, w) = g.value(x_s).dims4()?;
        if c != self.arch.image_channels {
            return Err(Error::Shape(format!("denoiser expects {} channels, got {c}", self.arch.image_channels)));
        }
        if g.value(cond).shape() != g.value(x_s).shape() {
            return Err(Error::Shape(format!(
                "condition {:?} does not match noisy input {:?}",
                g.value(cond).shape(),
                g.value(x_s).shape()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("denoiser input {h}x{w} must be divisible by 4")));
        }
        let ts = expand_timesteps(ts, n)?;
        let coeffs = ts.iter().map(|&t| sched.signal_noise(t)).collect::<Result<Vec<_>>>()?;
        self.evals.fetch_add(1, Ordering::Relaxed);

        let emb = g.constant(timestep_embedding(&ts, self.arch.time_dim));
        let mut temb = linear(g, p, "time.0", emb)?;
        temb = g.silu(temb);
        temb = linear(g, p, "time.1", temb)?;
        match (self.arch.num_classes, labels) {
            (Some(k), Some(labels)) => {
                if labels.len() != n || labels.iter().any(|&l| l >= k) {
                    return Err(Error::invalid(format!("class labels must be {n} values below {k}")));
                }
                let cls = g.gather(p.var("class.emb"), labels.to_vec())?;
                temb = g.add(temb, cls)?;
            }
            (None, Some(_)) => return Err(Error::invalid("network has no class embedding")),
            _ => {}
        }
        let temb = g.silu(temb);

        // control branch
        let mut cb = conv(g, p, "cond.0", cond, 1)?;
        cb = g.silu(cb);
        cb = conv(g, p, "cond.1", cb, 1)?;
        let cb0 = g.silu(cb);
        let cb1 = conv(g, p, "cond.2", cb0, 2)?;
        let cb1 = g.silu(cb1);
        let cb2 = conv(g, p, "cond.3", cb1, 2)?;
        let cb2 = g.silu(cb2);
        let inj0 = conv(g, p, "zero.0", cb0, 1)?;
        let inj1 = conv(g, p, "zero.1", cb1, 1)?;
        let inj2 = conv(g, p, "zero.2", cb2, 1)?;

        let mut hx = conv(g, p, "in", x_s, 1)?;
        hx = g.add(hx, inj0)?;
        let skip0 = self.res_block(g, p, "enc0", hx, temb)?;
        let mut h1 = conv(g, p, "down0", skip0, 2)?;
        h1 = g.add(h1, inj1)?;
        let skip1 = self.res_block(g, p, "enc1", h1, temb)?;
        let mut h2 = conv(g, p, "down1", skip1, 2)?;
        h2 = g.add(h2, inj2)?;
        h2 = self.res_block(g, p, "mid", h2, temb)?;

        let mut u = g.upsample2x(h2)?;
        u = g.concat_channels(u, skip1)?;
        u = conv(g, p, "up1", u, 1)?;
        u = self.res_block(g, p, "dec1", u, temb)?;
        u = g.upsample2x(u)?;
        u = g.concat_channels(u, skip0)?;
        u = conv(g, p, "up0", u, 1)?;
        u = self.res_block(g, p, "dec0", u, temb)?;
        let u = g.silu(u);
        let head = conv(g, p, "out", u, 1)?;

        match self.arch.prediction {
            Prediction::Epsilon => Ok(head),
            Prediction::V => {
                // ε̂ = √(1−ᾱ)·xₛ + √ᾱ·v̂
                let a = coeffs.iter().map(|&(_, sn)| T::lit(sn)).collect();
                let b = coeffs.iter().map(|&(sa, _)| T::lit(sa)).collect();
                g.lin_comb(x_s, head, a, b)
            }
        }
    }
}

/// Predicted noise for `x_s` at timesteps `ts` given a condition image.
///
/// The condition is resized (bicubic) to the resolution of `x_s` first.
pub fn denoise_eps<T: Scalar>(
    net: &Denoiser<T>,
    x_s: &Tensor<T>,
    ts: &[usize],
    cond: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    denoise_eps_labeled(net, x_s, ts, cond, None, sched)
}

pub fn denoise_eps_labeled<T: Scalar>(
    net: &Denoiser<T>,
    x_s: &Tensor<T>,
    ts: &[usize],
    cond: &Tensor<T>,
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (n, _, h, w) = x_s.dims4()?;
    if cond.shape()[0] != n {
        return Err(Error::Shape(format!("condition batch {} vs input batch {n}", cond.shape()[0])));
    }
    let cond = match_resolution(cond, h, w)?;
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let x = g.constant(x_s.clone());
    let c = g.constant(cond);
    let out = net.forward(&mut g, &p, x, ts, c, labels, sched)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar = f32> {
    pub arch: DiscriminatorArch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        if arch.channels == 0 {
            return Err(Error::invalid("discriminator needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::new();
        let c = arch.channels;
        let f = 2 * c;
        let ic = arch.image_channels;
        conv_params(&mut p, &mut init, "d0", c, ic, 3, 1.0);
        conv_params(&mut p, &mut init, "d1", f, c, 3, 1.0);
        conv_params(&mut p, &mut init, "d2", f, f, 3, 1.0);
        conv_params(&mut p, &mut init, "d3", f, f, 3, 1.0);
        conv_params(&mut p, &mut init, "e0", c, ic, 3, 1.0);
        conv_params(&mut p, &mut init, "e1", f, c, 3, 1.0);
        linear_params(&mut p, &mut init, "proj", f, f, 1.0);
        linear_params(&mut p, &mut init, "head", 1, f, 1.0);
        Ok(Self { arch, params: p })
    }

    pub fn from_params(arch: DiscriminatorArch, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(arch.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self { arch, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Graph-level logits `[N, 1]` for images conditioned on their LR inputs.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, img: Var, cond_lr: Var) -> Result<Var> {
        let (n, _, h, w) = g.value(img).dims4()?;
        let (cn, _, ch, cw) = g.value(cond_lr).dims4()?;
        if n != cn || ch > h || cw > w || h % ch != 0 || w % cw != 0 || h / ch != w / cw {
            return Err(Error::Shape(format!(
                "discriminator needs an HR image and its LR condition, got {:?} and {:?}",
                g.value(img).shape(),
                g.value(cond_lr).shape()
            )));
        }
        let mut x = img;
        for name in ["d0", "d1", "d2", "d3"] {
            x = conv(g, p, name, x, 2)?;
            x = g.silu(x);
        }
        let feat = g.global_avg_pool(x)?;

        let e = conv(g, p, "e0", cond_lr, 1)?;
        let e = g.silu(e);
        let e = conv(g, p, "e1", e, 2)?;
        let e = g.silu(e);
        let e = g.global_avg_pool(e)?;
        let e = linear(g, p, "proj", e)?;

        let uncond = linear(g, p, "head", feat)?;
        let inner = g.mul(feat, e)?;
        let proj = g.row_sum(inner)?;
        g.add(uncond, proj)
    }
}

/// One logit per image.
pub fn discriminate<T: Scalar>(d: &Discriminator<T>, img: &Tensor<T>, cond_lr: &Tensor<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let p = d.params.bind(&mut g, false);
    let x = g.constant(img.clone());
    let c = g.constant(cond_lr.clone());
    let out = d.forward(&mut g, &p, x, c)?;
    Ok(g.value(out).data().to_vec())
}
