mod common;

use common::{relative_error, GradientProblem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srdistill::dataset::{procedural_textures, PairedDataset};
use srdistill::degradation::TrainingDegradation;
use srdistill::networks::Denoiser;
use srdistill::objective::WeightingParams;
use srdistill::schedule::StudentTimestepSet;
use srdistill::trainer::{distill_step, DistillConfig, TeacherCond, TrainState};

fn cases() -> Vec<(&'static str, WeightingParams)> {
    let mut out = Vec::new();
    for lambda in [0.0, 0.02] {
        out.push(("exponential", WeightingParams::exponential(0.5, 2.1).with_lambda(lambda)));
        out.push(("linear", WeightingParams::linear(0.4, 0.5).with_lambda(lambda)));
    }
    out
}

#[test]
fn problem_fits_parameter_budget() {
    let p = GradientProblem::new(&WeightingParams::default());
    assert!(p.num_params() <= 1000, "{} parameters", p.num_params());
}

#[test]
fn generator_gradients_match_finite_differences() {
    for (form, wp) in cases() {
        let p = GradientProblem::new(&wp);
        let fd = p.finite_difference(&wp, 1e-5);
        let single = relative_error(&p.analytic::<f32>(&wp), &fd);
        let double = relative_error(&p.analytic::<f64>(&wp), &fd);
        assert!(single <= 1e-3, "{form} lambda={}: f32 relative error {single}", wp.lambda);
        assert!(double <= 1e-6, "{form} lambda={}: f64 relative error {double}", wp.lambda);
    }
}

#[test]
fn adversarial_term_contributes_only_with_lambda() {
    let wp0 = WeightingParams::default().with_lambda(0.0);
    let wp = WeightingParams::default();
    let p = GradientProblem::new(&wp);
    let a0 = p.analytic::<f64>(&wp0);
    let a = p.analytic::<f64>(&wp);
    assert!(relative_error(&a, &a0) > 1e-6);
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let p = GradientProblem::new(&WeightingParams::default());
    let (analytic, fd) = p.disc_gradients(1e-5);
    let err = relative_error(&analytic, &fd);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn distillation_never_touches_teacher() {
    let ds = PairedDataset::synthesize(procedural_textures(6, 16, 2), &TrainingDegradation::default(), 3).unwrap();
    let teacher = Denoiser::new(common::tiny_denoiser_arch(), 4).unwrap();
    let before = teacher.params.checksum();
    let cfg = DistillConfig { disc_arch: common::tiny_disc_arch(), ..Default::default() };
    let mut state = TrainState::new(teacher, &cfg).unwrap();
    let sched = common::default_schedule();
    let sts = StudentTimestepSet::default();
    for (i, cond) in [TeacherCond::Hr, TeacherCond::Lr, TeacherCond::Hr].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let batch = ds.sample_batch(3, &mut rng).unwrap();
        distill_step(&mut state, &batch, &WeightingParams::default(), &sched, &sts, cond, &mut rng).unwrap();
    }
    assert_eq!(state.teacher.params.checksum(), before);
    assert_ne!(state.student.params.checksum(), before);
    state.verify_teacher().unwrap();
}
