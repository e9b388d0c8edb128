//! Run plumbing shared by the command-line front end and the toy experiments:
//! datasets from a config, loss logs, manifests, inference over image sets,
//! evaluation tables, parameter sweeps and the weighting-ratio figure.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::dataset::{load_folder_patches, procedural_textures, PairedDataset};
use crate::error::{Error, Result};
use crate::imaging::{codec_versions, load_image, rgb_to_tensor, save_png, tensor_to_rgb};
use crate::metrics::{evaluate, mean_metrics, ImageMetrics};
use crate::networks::Denoiser;
use crate::objective::{weighting_ratio, WeightingParams};
use crate::sampler::{baseline_sample, psr_sample};
use crate::schedule::{NoiseSchedule, StudentTimestepSet};
use crate::trainer::{distill, pretrain_teacher, step_rng, LossReport, TrainState};

pub const LOSS_LOG_HEADER: [&str; 5] = ["step", "dis_loss", "g_adv", "d_loss", "lambda_over_d"];

/// Append-only CSV of per-step losses, flushed after every row.
pub struct LossLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl LossLog {
    /// Opens `path` for appending, writing [`LOSS_LOG_HEADER`] only to a new or empty file.
    pub fn open(path: &Path) -> Result<Self> {
        Self::open_with_header(path, &LOSS_LOG_HEADER)
    }

    pub fn open_with_header(path: &Path, header: &[&str]) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(header)?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { writer, path: path.to_path_buf() })
    }

    /// Floats are written in shortest round-trip form, so re-reading is exact.
    pub fn append(&mut self, r: &LossReport) -> Result<()> {
        self.append_fields(&[
            r.step.to_string(),
            r.dis_loss.to_string(),
            r.g_adv.to_string(),
            r.d_loss.to_string(),
            r.ratio.to_string(),
        ])
    }

    pub fn append_fields(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Rows of a loss log as `(step, dis_loss, g_adv, d_loss, lambda_over_d)`.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64, f64, f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Everything needed to re-run a command deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub codecs: BTreeMap<String, String>,
    pub package_version: String,
    /// `git describe --always --dirty` of the working tree, when available.
    pub source_revision: Option<String>,
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config_sha256: cfg.hash()?,
            seed,
            codecs: codec_versions(),
            package_version: env!("CARGO_PKG_VERSION").into(),
            source_revision: source_revision(),
            config: cfg.to_toml()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn source_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn hr_images(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<RgbImage>> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Procedural => Ok(procedural_textures(count, d.patch, seed)),
        DataSource::Folder => {
            let dir = d.path.as_ref().ok_or_else(|| Error::Config("Dataset.path is not set".into()))?;
            let files = list_images(dir)?.len().max(1);
            load_folder_patches(dir, d.patch, count.div_ceil(files), seed)
        }
    }
}

/// HR patches degraded with freshly drawn training pipelines.
pub fn training_set(cfg: &RunConfig) -> Result<PairedDataset> {
    let d = &cfg.dataset;
    PairedDataset::synthesize(hr_images(cfg, d.count, d.seed)?, &cfg.degradation, d.seed.wrapping_add(1))
}

/// Held-out pairs: a disjoint seed, degraded with the fixed evaluation pipeline if one is configured.
pub fn eval_set(cfg: &RunConfig) -> Result<PairedDataset> {
    let d = &cfg.dataset;
    let hr = hr_images(cfg, d.eval_count, d.eval_seed)?;
    match &cfg.eval_pipeline {
        Some(p) => PairedDataset::with_pipeline(hr, p),
        None => PairedDataset::synthesize(hr, &cfg.degradation, d.eval_seed.wrapping_add(1)),
    }
}

pub fn run_teacher(cfg: &RunConfig, ds: &PairedDataset, on_step: impl FnMut(usize, f64) -> Result<()>) -> Result<Denoiser> {
    pretrain_teacher(ds, &cfg.teacher, &cfg.noise_schedule()?, on_step)
}

/// Continues distillation for `cfg.distill.steps` steps, appending to `log` when given.
pub fn run_distill(
    cfg: &RunConfig,
    state: &mut TrainState,
    ds: &PairedDataset,
    mut log: Option<&mut LossLog>,
    mut on_step: impl FnMut(&LossReport, &TrainState) -> Result<()>,
) -> Result<()> {
    let sched = cfg.noise_schedule()?;
    distill(state, ds, &cfg.weighting, &sched, &cfg.anchors, &cfg.distill, |r, s| {
        if let Some(log) = log.as_deref_mut() {
            log.append(r)?;
        }
        on_step(r, s)
    })
}

/// How a low-resolution image is turned into an HR estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Self-refining sampler on the student anchors.
    Psr { steps: usize, blend_r: f64 },
    /// Ancestral sampler with evenly spaced timesteps.
    Baseline { steps: usize },
}

impl Sampler {
    pub fn evaluations(&self) -> usize {
        match *self {
            Sampler::Psr { steps, .. } | Sampler::Baseline { steps } => steps,
        }
    }
}

/// Super-resolves image `index` of a set; noise derives from `(seed, index)` only.
///
/// Also returns the PSR conditions consumed, as images.
#[allow(clippy::too_many_arguments)]
pub fn super_resolve(
    net: &Denoiser,
    lr: &RgbImage,
    index: u64,
    sampler: Sampler,
    scale: usize,
    sts: &StudentTimestepSet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(RgbImage, Vec<RgbImage>)> {
    let x_lr = rgb_to_tensor::<f32>(lr);
    let mut rng = step_rng(seed, index);
    match sampler {
        Sampler::Psr { steps, blend_r } => {
            let (x0, chain) = psr_sample(net, &x_lr, steps, blend_r, scale, sts, sched, &mut rng)?;
            let chain = chain.elements.iter().map(|c| tensor_to_rgb(c, 0)).collect::<Result<Vec<_>>>()?;
            Ok((tensor_to_rgb(&x0, 0)?, chain))
        }
        Sampler::Baseline { steps } => {
            let x0 = baseline_sample(net, &x_lr, steps, scale, sched, &mut rng)?;
            Ok((tensor_to_rgb(&x0, 0)?, Vec::new()))
        }
    }
}

/// Outcome of running one sampler over an evaluation set.
#[derive(Clone, Debug)]
pub struct SetEvaluation {
    pub per_image: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
    pub evaluations: u64,
    pub seconds: f64,
}

/// Super-resolves every LR image of `ds` and scores it against its HR partner.
pub fn evaluate_sampler(net: &Denoiser, ds: &PairedDataset, sampler: Sampler, cfg: &RunConfig) -> Result<SetEvaluation> {
    let sched = cfg.noise_schedule()?;
    let scale = cfg.degradation.scale as usize;
    let before = net.evaluations();
    let start = Instant::now();
    let outputs = ds
        .lr
        .iter()
        .enumerate()
        .map(|(i, lr)| super_resolve(net, lr, i as u64, sampler, scale, &cfg.anchors, &sched, cfg.sampler.seed).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let evaluations = net.evaluations() - before;
    let per_image = outputs.iter().zip(&ds.hr).map(|(o, h)| evaluate(o, h)).collect::<Result<Vec<_>>>()?;
    Ok(SetEvaluation { mean: mean_metrics(&per_image), per_image, evaluations, seconds })
}

/// Scores each image in `pred_dir` against the same-named file in `ref_dir`.
pub fn evaluate_dirs(pred_dir: &Path, ref_dir: &Path) -> Result<Vec<(String, ImageMetrics)>> {
    let mut out = Vec::new();
    for p in list_images(pred_dir)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = p.file_stem().and_then(|n| n.to_str()).unwrap_or_default();
        let reference = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| ref_dir.join(format!("{stem}.{ext}")))
            .find(|r| r.exists())
            .ok_or_else(|| Error::Config(format!("no reference image for {name} in {}", ref_dir.display())))?;
        out.push((name, evaluate(&load_image(&p)?, &load_image(&reference)?)?));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", pred_dir.display())));
    }
    Ok(out)
}

/// Writes `per_image.csv` and `aggregate.csv` into `dir`; returns the aggregate.
pub fn write_eval_csv(dir: &Path, rows: &[(String, ImageMetrics)]) -> Result<ImageMetrics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("per_image.csv"))?;
    w.write_record(["image", "psnr", "ssim", "hf_energy"])?;
    for (name, m) in rows {
        w.write_record([name.clone(), m.psnr.to_string(), m.ssim.to_string(), m.hf_energy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let ms: Vec<ImageMetrics> = rows.iter().map(|r| r.1).collect();
    let mean = mean_metrics(&ms);
    let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
    w.write_record(["count", "psnr", "ssim", "hf_energy"])?;
    w.write_record([rows.len().to_string(), mean.psnr.to_string(), mean.ssim.to_string(), mean.hf_energy.to_string()])?;
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    Nu,
    Gamma,
    Kappa,
    BlendR,
    Steps,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mu" => Self::Mu,
            "nu" => Self::Nu,
            "gamma" => Self::Gamma,
            "kappa" => Self::Kappa,
            "blend_r" | "blend-r" => Self::BlendR,
            "steps" => Self::Steps,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{other}`, expected mu, nu, gamma, kappa, blend_r or steps"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mu => "mu",
            Self::Nu => "nu",
            Self::Gamma => "gamma",
            Self::Kappa => "kappa",
            Self::BlendR => "blend_r",
            Self::Steps => "steps",
        }
    }

    /// Weighting parameters need a fresh student per value; sampler knobs do not.
    pub fn needs_training(&self) -> bool {
        matches!(self, Self::Mu | Self::Nu | Self::Gamma | Self::Kappa)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub hf_energy: f64,
}

/// Distils a student from `teacher` under `cfg` on `train`.
pub fn distill_student(cfg: &RunConfig, teacher: &Denoiser, train: &PairedDataset) -> Result<TrainState> {
    let mut state = TrainState::new(teacher.clone(), &cfg.distill)?;
    run_distill(cfg, &mut state, train, None, |_, _| Ok(()))?;
    Ok(state)
}

/// Evaluates each value of `param` on `eval`, retraining the student only for
/// weighting parameters. Each value yields one row per inference step count
/// (a single row when sweeping `steps` itself).
pub fn run_sweep(
    base: &RunConfig,
    teacher: &Denoiser,
    train: &PairedDataset,
    eval: &PairedDataset,
    param: SweepParam,
    values: &[f64],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let set = |cfg: &mut RunConfig, v: f64| -> Result<()> {
        let key = match param {
            SweepParam::BlendR => "Sampler.blend_r".to_string(),
            SweepParam::Steps => "Sampler.steps".to_string(),
            p => format!("WeightingParams.{}", p.name()),
        };
        let lit = if param == SweepParam::Steps {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::Config(format!("step count {v} is not a positive integer")));
            }
            format!("{}", v as usize)
        } else {
            format!("{v:?}")
        };
        cfg.set(&key, &lit)
    };
    for &v in values {
        set(&mut base.clone(), v)?;
    }
    let shared = if param.needs_training() { None } else { Some(distill_student(base, teacher, train)?) };
    let mut rows = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        set(&mut cfg, v)?;
        let trained;
        let student = match &shared {
            Some(s) => &s.student,
            None => {
                trained = distill_student(&cfg, teacher, train)?;
                &trained.student
            }
        };
        let step_counts: Vec<usize> =
            if param == SweepParam::Steps { vec![cfg.sampler.steps] } else { (1..=cfg.anchors.len()).collect() };
        for steps in step_counts {
            let r = evaluate_sampler(student, eval, Sampler::Psr { steps, blend_r: cfg.sampler.blend_r }, &cfg)?;
            let row = SweepRow {
                param: param.name().into(),
                value: v,
                steps,
                psnr: r.mean.psnr,
                ssim: r.mean.ssim,
                hf_energy: r.mean.hf_energy,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-width text rendering of a sweep table.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>8} {:>10} {:>5} {:>9} {:>7} {:>9}\n", "param", "value", "steps", "psnr", "ssim", "hf_energy");
    for r in rows {
        s += &format!(
            "{:>8} {:>10} {:>5} {:>9.4} {:>7.4} {:>9.4}\n",
            r.param, r.value, r.steps, r.psnr, r.ssim, r.hf_energy
        );
    }
    s
}

/// One cell of the weighting-ratio figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingPoint {
    /// `baseline` or `ta-add`.
    pub mode: String,
    pub p: usize,
    pub s: usize,
    pub t: usize,
    pub ratio: f64,
}

/// Teacher timesteps `1, 1 + stride, …` up to `T`.
fn t_grid(sched: &NoiseSchedule, stride: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=sched.len()).step_by(stride.max(1)).collect();
    if ts.last() != Some(&sched.len()) {
        ts.push(sched.len());
    }
    ts
}

/// `λ / d(s, t)` over every anchor and the teacher-timestep grid, for the
/// constant-factor baseline and for `wp`.
pub fn weighting_grid(
    wp: &WeightingParams,
    sched: &NoiseSchedule,
    sts: &StudentTimestepSet,
    stride: usize,
) -> Result<Vec<WeightingPoint>> {
    let baseline = WeightingParams { form: crate::objective::WeightingForm::Constant, ..wp.clone() };
    let mut out = Vec::new();
    for (mode, params) in [("baseline", &baseline), ("ta-add", wp)] {
        for p in 1..=sts.len() {
            let s = sts.anchor_for_step(p)?;
            for &t in &t_grid(sched, stride) {
                out.push(WeightingPoint { mode: mode.into(), p, s, t, ratio: weighting_ratio(s, t, sched, sts, params)? });
            }
        }
    }
    Ok(out)
}

pub fn write_weighting_csv(path: &Path, points: &[WeightingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_weighting_csv(path: &Path) -> Result<Vec<WeightingPoint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

const CURVE_COLORS: [[u8; 3]; 4] = [[214, 39, 40], [255, 127, 14], [44, 160, 44], [31, 119, 180]];

/// Two panels, baseline left and TA-ADD right: `log10(ratio)` against `t`,
/// one colored curve per inference step (red, orange, green, blue for 1–4).
pub fn render_weighting_png(points: &[WeightingPoint], path: &Path) -> Result<()> {
    const PANEL_W: u32 = 400;
    const PANEL_H: u32 = 300;
    const MARGIN: u32 = 30;
    if points.is_empty() {
        return Err(Error::invalid("no weighting points to draw"));
    }
    let logs: Vec<f64> = points.iter().map(|p| p.ratio.max(f64::MIN_POSITIVE).log10()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let t_max = points.iter().map(|p| p.t).max().unwrap_or(1).max(1) as f64;
    let width = 2 * PANEL_W + 3 * MARGIN;
    let height = PANEL_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (panel, mode) in ["baseline", "ta-add"].iter().enumerate() {
        let x0 = MARGIN + panel as u32 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        for x in x0..=x0 + PANEL_W {
            img.put_pixel(x, y0 + PANEL_H, Rgb([0, 0, 0]));
        }
        for y in y0..=y0 + PANEL_H {
            img.put_pixel(x0, y, Rgb([0, 0, 0]));
        }
        let to_px = |t: usize, l: f64| {
            let x = x0 as f64 + t as f64 / t_max * PANEL_W as f64;
            let y = (y0 + PANEL_H) as f64 - (l - lo) / span * PANEL_H as f64;
            (x, y)
        };
        for p in 1..=CURVE_COLORS.len() {
            let color = Rgb(CURVE_COLORS[p - 1]);
            let curve: Vec<(f64, f64)> = points
                .iter()
                .zip(&logs)
                .filter(|(pt, _)| pt.mode == *mode && pt.p == p)
                .map(|(pt, &l)| to_px(pt.t, l))
                .collect();
            for w in curve.windows(2) {
                draw_line(&mut img, w[0], w[1], color);
            }
        }
    }
    save_png(&img, path)
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let f = i as f64 / n as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}
