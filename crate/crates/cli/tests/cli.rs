use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn srdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srdistill")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: &str = r#"
[Dataset]
patch = 16
count = 100
eval_count = 2

[TeacherConfig]
steps = 3
batch_size = 2

[TeacherConfig.arch]
channels = [2, 4, 4]
time_dim = 4

[DistillConfig]
steps = 2
batch_size = 2

[DistillConfig.disc_arch]
channels = 2
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn write_pngs(dir: &Path, size: u32) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in srdistill::dataset::procedural_textures(2, size, 8).iter().enumerate() {
        srdistill::imaging::save_png(img, &dir.join(format!("img{i}.png"))).unwrap();
    }
}

#[test]
fn plot_weighting_writes_table_and_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig");
    let o = srdistill(&["plot-weighting", "--out", out.to_str().unwrap(), "--stride", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("weighting.csv")).unwrap().starts_with("mode,p,s,t,ratio"));
    assert!(out.join("weighting.png").exists());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[WeightingParams]\nmu = -1.0\n").unwrap();
    for args in [
        vec!["--config", bad.to_str().unwrap(), "plot-weighting", "--out", out],
        vec!["--config", "/nonexistent.toml", "plot-weighting", "--out", out],
        vec!["--preset", "vivid", "plot-weighting", "--out", out],
        vec!["--teacher-cond", "noise", "plot-weighting", "--out", out],
        vec!["--set", "Sampler.steps=7", "plot-weighting", "--out", out],
        vec!["sweep", "--teacher", "x.ckpt", "--param", "lambda", "--values", "1", "--out", out],
    ] {
        let o = srdistill(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = srdistill(&[
        "--config",
        &cfg,
        "--set",
        "TeacherConfig.optimizer.lr=1e30",
        "pretrain-teacher",
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn degrade_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    write_pngs(&hr, 64);
    let lr = dir.path().join("lr");
    let o = srdistill(&["degrade", "--in", hr.to_str().unwrap(), "--out", lr.to_str().unwrap(), "--pipeline", "sr4_noise40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = srdistill::imaging::load_image(&lr.join("img0.png")).unwrap();
    assert_eq!(img.dimensions(), (16, 16));
    let scores = dir.path().join("scores");
    let o = srdistill(&["eval", "--pred", hr.to_str().unwrap(), "--ref", hr.to_str().unwrap(), "--out", scores.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let agg = fs::read_to_string(scores.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("count,psnr,ssim,hf_energy\n2,100,1,"), "{agg}");
    assert_eq!(fs::read_to_string(scores.join("per_image.csv")).unwrap().lines().count(), 3);
}

#[test]
fn train_distill_resume_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = srdistill(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let t = dir.path().join("teacher");
    run(&["pretrain-teacher", "--out", t.to_str().unwrap()]);
    let ckpt = t.join("teacher.ckpt");
    assert!(ckpt.exists() && t.join("manifest.json").exists());

    let s = dir.path().join("student");
    run(&["--teacher-cond", "lr", "--preset", "fidelity", "distill", "--teacher", ckpt.to_str().unwrap(), "--out", s.to_str().unwrap()]);
    let log = s.join("loss.csv");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);
    run(&["--teacher-cond", "lr", "--preset", "fidelity", "distill", "--resume", s.join("student.ckpt").to_str().unwrap(), "--out", s.to_str().unwrap()]);
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
    assert!(text.lines().nth(4).unwrap().starts_with("4,"));

    let lr = dir.path().join("lr");
    write_pngs(&lr, 4);
    let sr = dir.path().join("sr");
    run(&["infer", "--ckpt", s.join("student.ckpt").to_str().unwrap(), "--steps", "2", "--blend-r", "0.5", "--seed", "3", "--in", lr.to_str().unwrap(), "--out", sr.to_str().unwrap(), "--dump-chain"]);
    let img = srdistill::imaging::load_image(&sr.join("img1.png")).unwrap();
    assert_eq!(img.dimensions(), (16, 16));
    assert!(sr.join("chain/img1_cond2.png").exists());

    let sweep = dir.path().join("sweep");
    run(&["sweep", "--teacher", ckpt.to_str().unwrap(), "--param", "blend_r", "--values", "0,1", "--out", sweep.to_str().unwrap()]);
    let rows = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 4, "{rows}");
}
