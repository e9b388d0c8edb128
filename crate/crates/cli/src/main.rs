use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use srdistill::checkpoint::{load_denoiser, load_state, save_state, save_teacher};
use srdistill::config::RunConfig;
use srdistill::degradation::{apply_pipeline, random_training_pipeline, DegradationPipeline};
use srdistill::harness::{
    evaluate_dirs, format_sweep_table, list_images, render_weighting_png, run_distill, run_sweep, run_teacher,
    super_resolve, training_set, eval_set, weighting_grid, write_eval_csv, write_sweep_csv, write_weighting_csv,
    LossLog, RunManifest, Sampler, SweepParam,
};
use srdistill::imaging::{load_image, save_png};
use srdistill::trainer::TrainState;
use srdistill::Error;

#[derive(Parser)]
#[command(name = "srdistill", version, about = "Few-step diffusion super-resolution by timestep-adaptive adversarial distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; sections are named after the configured types.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weighting preset: perception, fidelity or baseline.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Condition image for the teacher during distillation: hr or lr.
    #[arg(long, global = true)]
    teacher_cond: Option<String>,
    /// Number of degradation passes used to synthesize training pairs.
    #[arg(long, global = true)]
    order: Option<u32>,
    /// Override any configuration key, e.g. `--set WeightingParams.nu=1.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional teacher denoiser.
    PretrainTeacher {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distil a few-step student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from a distillation checkpoint instead of starting from the teacher.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Super-resolve every image in a folder.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        blend_r: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the many-step ancestral sampler instead of self-refinement.
        #[arg(long)]
        baseline: bool,
        /// Also write the conditions consumed at each step.
        #[arg(long)]
        dump_chain: bool,
    },
    /// Degrade every image in a folder.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// A named evaluation pipeline, `random` for the training distribution,
        /// or omitted to use the configured pipeline.
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predictions against same-named references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil and evaluate over a list of values for one parameter.
    Sweep {
        #[arg(long)]
        teacher: PathBuf,
        /// One of mu, nu, gamma, kappa, blend_r, steps.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate and draw the adversarial-to-distillation ratio over timesteps.
    PlotWeighting {
        #[arg(long)]
        out: PathBuf,
        /// Spacing of the teacher-timestep grid.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
}

fn set(cfg: &mut RunConfig, key: &str, value: Option<impl Display>) -> srdistill::Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn set_float(cfg: &mut RunConfig, key: &str, value: Option<f64>) -> srdistill::Result<()> {
    set(cfg, key, value.map(|v| format!("{v:?}")))
}

fn load_config(common: &Common) -> srdistill::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.preset {
        let lambda = cfg.weighting.lambda;
        cfg.weighting = srdistill::objective::WeightingParams::preset(name)?.with_lambda(lambda);
    }
    set(&mut cfg, "DistillConfig.teacher_cond", common.teacher_cond.as_ref().map(|s| format!("{s:?}")))?;
    set(&mut cfg, "TrainingDegradation.order", common.order)?;
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn pretrain_teacher(mut cfg: RunConfig, out: &Path, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    set(&mut cfg, "TeacherConfig.steps", steps)?;
    set(&mut cfg, "TeacherConfig.seed", seed)?;
    ensure_dir(out)?;
    RunManifest::new("pretrain-teacher", &cfg, cfg.teacher.seed)?.write(out)?;
    let ds = training_set(&cfg)?;
    let log_path = out.join("teacher_loss.csv");
    let mut log = LossLog::open_with_header(&log_path, &["step", "loss"])?;
    let total = cfg.teacher.steps;
    let net = run_teacher(&cfg, &ds, |step, loss| {
        log.append_fields(&[step.to_string(), loss.to_string()])?;
        if step % 100 == 0 || step == total {
            eprintln!("teacher step {step}/{total} loss {loss:.5}");
        }
        Ok(())
    })?;
    let path = out.join("teacher.ckpt");
    save_teacher(&path, &net, &cfg.schedule, &cfg.anchors, cfg.teacher.seed)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill(
    mut cfg: RunConfig,
    teacher: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    mu: Option<f64>,
    nu: Option<f64>,
    lambda: Option<f64>,
) -> Result<()> {
    set(&mut cfg, "DistillConfig.steps", steps)?;
    set(&mut cfg, "DistillConfig.seed", seed)?;
    set_float(&mut cfg, "WeightingParams.mu", mu)?;
    set_float(&mut cfg, "WeightingParams.nu", nu)?;
    set_float(&mut cfg, "WeightingParams.lambda", lambda)?;
    let mut state = match (resume, teacher) {
        (Some(r), _) => {
            let (state, meta) = load_state(r, &cfg.schedule, &cfg.anchors)?;
            if meta.seed != cfg.distill.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, configuration has {}",
                    meta.seed, cfg.distill.seed
                ))
                .into());
            }
            state
        }
        (None, Some(t)) => TrainState::new(load_denoiser(t, &cfg.schedule, &cfg.anchors)?.0, &cfg.distill)?,
        (None, None) => return Err(Error::Config("distill needs --teacher or --resume".into()).into()),
    };
    ensure_dir(out)?;
    RunManifest::new("distill", &cfg, cfg.distill.seed)?.write(out)?;
    let ds = training_set(&cfg)?;
    let mut log = LossLog::open(&out.join("loss.csv"))?;
    let ckpt = out.join("student.ckpt");
    let end = state.step + cfg.distill.steps as u64;
    let result = run_distill(&cfg, &mut state, &ds, Some(&mut log), |r, _| {
        if r.step % 50 == 0 || r.step == end {
            eprintln!(
                "distill step {}/{end} dis {:.5} g_adv {:.5} d {:.5} lambda/d {:.5}",
                r.step, r.dis_loss, r.g_adv, r.d_loss, r.ratio
            );
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite { .. }) {
            save_state(&out.join("last_finite.ckpt"), &state, &cfg.schedule, &cfg.anchors, &cfg.weighting)?;
        }
        return Err(e.into());
    }
    save_state(&ckpt, &state, &cfg.schedule, &cfg.anchors, &cfg.weighting)?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    mut cfg: RunConfig,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    steps: Option<usize>,
    blend_r: Option<f64>,
    seed: Option<u64>,
    baseline: bool,
    dump_chain: bool,
) -> Result<()> {
    if baseline {
        set(&mut cfg, "Sampler.baseline_steps", steps)?;
    } else {
        set(&mut cfg, "Sampler.steps", steps)?;
    }
    set_float(&mut cfg, "Sampler.blend_r", blend_r)?;
    set(&mut cfg, "Sampler.seed", seed)?;
    let (net, _) = load_denoiser(ckpt, &cfg.schedule, &cfg.anchors)?;
    let sched = cfg.noise_schedule()?;
    let sampler = if baseline {
        Sampler::Baseline { steps: cfg.sampler.baseline_steps }
    } else {
        Sampler::Psr { steps: cfg.sampler.steps, blend_r: cfg.sampler.blend_r }
    };
    ensure_dir(out)?;
    RunManifest::new("infer", &cfg, cfg.sampler.seed)?.write(out)?;
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", input.display())).into());
    }
    for (i, f) in files.iter().enumerate() {
        let lr = load_image(f)?;
        let (sr, chain) =
            super_resolve(&net, &lr, i as u64, sampler, cfg.degradation.scale as usize, &cfg.anchors, &sched, cfg.sampler.seed)
                .with_context(|| format!("super-resolving {}", f.display()))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_png(&sr, &out.join(format!("{stem}.png")))?;
        if dump_chain {
            let dir = out.join("chain");
            ensure_dir(&dir)?;
            for (k, c) in chain.iter().enumerate() {
                save_png(c, &dir.join(format!("{stem}_cond{}.png", k + 1)))?;
            }
        }
    }
    eprintln!("{} images, {} denoiser evaluations each", files.len(), sampler.evaluations());
    Ok(())
}

fn degrade(cfg: RunConfig, input: &Path, out: &Path, pipeline: Option<&str>, seed: u64) -> Result<()> {
    ensure_dir(out)?;
    RunManifest::new("degrade", &cfg, seed)?.write(out)?;
    let files = list_images(input)?;
    for (i, f) in files.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let pipe = match pipeline {
            Some("random") => random_training_pipeline(s, &cfg.degradation)?,
            Some(name) => DegradationPipeline::named(name, s)?,
            None => match &cfg.eval_pipeline {
                Some(p) => DegradationPipeline { seed: s, ..p.clone() },
                None => return Err(Error::Config("no --pipeline given and no [DegradationPipeline] configured".into()).into()),
            },
        };
        let lr = apply_pipeline(&load_image(f)?, &pipe)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_png(&lr, &out.join(format!("{stem}.png")))?;
    }
    eprintln!("degraded {} images", files.len());
    Ok(())
}

fn eval(pred: &Path, reference: &Path, out: &Path) -> Result<()> {
    let rows = evaluate_dirs(pred, reference)?;
    let mean = write_eval_csv(out, &rows)?;
    println!("images {} psnr {:.4} ssim {:.4} hf_energy {:.4}", rows.len(), mean.psnr, mean.ssim, mean.hf_energy);
    Ok(())
}

fn sweep(cfg: RunConfig, teacher: &Path, param: &str, values: &[f64], out: &Path) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let (teacher, _) = load_denoiser(teacher, &cfg.schedule, &cfg.anchors)?;
    ensure_dir(out)?;
    RunManifest::new("sweep", &cfg, cfg.distill.seed)?.write(out)?;
    let train = training_set(&cfg)?;
    let eval = eval_set(&cfg)?;
    let rows = run_sweep(&cfg, &teacher, &train, &eval, param, values, |r| {
        eprintln!("{}={} steps {} psnr {:.4} ssim {:.4} hf {:.4}", r.param, r.value, r.steps, r.psnr, r.ssim, r.hf_energy)
    })?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    let table = format_sweep_table(&rows);
    fs::write(out.join("sweep.txt"), &table).with_context(|| format!("writing {}", out.display()))?;
    print!("{table}");
    Ok(())
}

fn plot_weighting(cfg: RunConfig, out: &Path, stride: usize) -> Result<()> {
    ensure_dir(out)?;
    let points = weighting_grid(&cfg.weighting, &cfg.noise_schedule()?, &cfg.anchors, stride)?;
    write_weighting_csv(&out.join("weighting.csv"), &points)?;
    render_weighting_png(&points, &out.join("weighting.png"))?;
    eprintln!("wrote {} points", points.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::PretrainTeacher { out, steps, seed } => pretrain_teacher(cfg, &out, steps, seed),
        Command::Distill { teacher, resume, out, steps, seed, mu, nu, lambda } => {
            distill(cfg, teacher.as_deref(), resume.as_deref(), &out, steps, seed, mu, nu, lambda)
        }
        Command::Infer { ckpt, input, out, steps, blend_r, seed, baseline, dump_chain } => {
            infer(cfg, &ckpt, &input, &out, steps, blend_r, seed, baseline, dump_chain)
        }
        Command::Degrade { input, out, pipeline, seed } => degrade(cfg, &input, &out, pipeline.as_deref(), seed),
        Command::Eval { pred, reference, out } => eval(&pred, &reference, &out),
        Command::Sweep { teacher, param, values, out } => sweep(cfg, &teacher, &param, &values, &out),
        Command::PlotWeighting { out, stride } => plot_weighting(cfg, &out, stride),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
