mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srdistill::checkpoint::{load_denoiser, load_state, read_archive, save_state, save_teacher, write_archive};
use srdistill::dataset::{procedural_textures, PairedDataset};
use srdistill::degradation::TrainingDegradation;
use srdistill::networks::Denoiser;
use srdistill::objective::WeightingParams;
use srdistill::schedule::{ScheduleConfig, StudentTimestepSet};
use srdistill::trainer::{distill, distill_step, DistillConfig, TeacherCond, TrainState};
use srdistill::Error;

fn trained_state() -> (TrainState, DistillConfig, PairedDataset) {
    let ds = PairedDataset::synthesize(procedural_textures(6, 16, 1), &TrainingDegradation::default(), 2).unwrap();
    let cfg = DistillConfig { steps: 2, batch_size: 2, disc_arch: common::tiny_disc_arch(), seed: 9, ..Default::default() };
    let teacher = Denoiser::new(common::tiny_denoiser_arch(), 3).unwrap();
    let mut state = TrainState::new(teacher, &cfg).unwrap();
    let sched = common::default_schedule();
    distill(&mut state, &ds, &WeightingParams::default(), &sched, &StudentTimestepSet::default(), &cfg, |_, _| Ok(()))
        .unwrap();
    (state, cfg, ds)
}

#[test]
fn state_roundtrip_is_bit_exact() {
    let (state, _, _) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let (sc, sts) = (ScheduleConfig::default(), StudentTimestepSet::default());
    save_state(&path, &state, &sc, &sts, &WeightingParams::fidelity()).unwrap();
    let (back, meta) = load_state(&path, &sc, &sts).unwrap();
    assert_eq!(back.student.params, state.student.params);
    assert_eq!(back.teacher.params, state.teacher.params);
    assert_eq!(back.disc.params, state.disc.params);
    assert_eq!(back.student_opt, state.student_opt);
    assert_eq!(back.disc_opt, state.disc_opt);
    assert_eq!(back.step, state.step);
    assert_eq!(back.teacher_checksum(), state.teacher_checksum());
    assert_eq!(meta.weighting, Some(WeightingParams::fidelity()));
    assert_eq!(meta.step, 2);
    // re-saving the loaded state reproduces the archive byte for byte
    let again = dir.path().join("t.ckpt");
    save_state(&again, &back, &sc, &sts, &WeightingParams::fidelity()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (mut state, cfg, ds) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let (sc, sts) = (ScheduleConfig::default(), StudentTimestepSet::default());
    let sched = common::default_schedule();
    let wp = WeightingParams::default();
    save_state(&path, &state, &sc, &sts, &wp).unwrap();
    let (mut resumed, _) = load_state(&path, &sc, &sts).unwrap();
    for s in [&mut state, &mut resumed] {
        distill(s, &ds, &wp, &sched, &sts, &cfg, |_, _| Ok(())).unwrap();
    }
    assert_eq!(state.student.params.checksum(), resumed.student.params.checksum());
    assert_eq!(state.disc.params.checksum(), resumed.disc.params.checksum());
}

#[test]
fn teacher_roundtrip_and_student_extraction() {
    let (state, _, _) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let (sc, sts) = (ScheduleConfig::default(), StudentTimestepSet::default());
    let tpath = dir.path().join("teacher.ckpt");
    save_teacher(&tpath, &state.teacher, &sc, &sts, 3).unwrap();
    let (t, meta) = load_denoiser(&tpath, &sc, &sts).unwrap();
    assert_eq!(t.params.checksum(), state.teacher.params.checksum());
    assert_eq!(meta.seed, 3);
    let spath = dir.path().join("student.ckpt");
    save_state(&spath, &state, &sc, &sts, &WeightingParams::default()).unwrap();
    let (s, _) = load_denoiser(&spath, &sc, &sts).unwrap();
    assert_eq!(s.params, state.student.params);
    assert!(matches!(load_state(&tpath, &sc, &sts), Err(Error::Config(_))));
}

#[test]
fn schedule_or_anchor_mismatch_is_a_version_error() {
    let (state, _, _) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let (sc, sts) = (ScheduleConfig::default(), StudentTimestepSet::default());
    save_state(&path, &state, &sc, &sts, &WeightingParams::default()).unwrap();
    let other = ScheduleConfig { beta_end: 0.012, ..sc };
    match load_state(&path, &other, &sts) {
        Err(e @ Error::VersionMismatch { .. }) => {
            assert!(e.to_string().contains("schedule"));
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
    let anchors = StudentTimestepSet::new(vec![1000, 750, 500, 250]).unwrap();
    assert!(matches!(load_denoiser(&path, &sc, &anchors), Err(Error::VersionMismatch { field, .. }) if field == "anchors"));
}

#[test]
fn missing_or_damaged_members_are_named() {
    let (state, _, _) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let (sc, sts) = (ScheduleConfig::default(), StudentTimestepSet::default());
    save_state(&path, &state, &sc, &sts, &WeightingParams::default()).unwrap();

    let mut archive = read_archive(&path).unwrap();
    let mut pruned = srdistill::params::ParamStore::new();
    for (k, v) in archive.arrays.iter().filter(|(k, _)| k.as_str() != "disc/d2.w") {
        pruned.insert(k.clone(), v.clone());
    }
    archive.arrays = pruned;
    let partial = dir.path().join("partial.ckpt");
    write_archive(&partial, &archive).unwrap();
    match load_state(&partial, &sc, &sts) {
        Err(Error::MissingMember(name)) => assert_eq!(name, "disc/d2.w"),
        other => panic!("expected a missing member, got {other:?}"),
    }

    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x55;
    let damaged = dir.path().join("damaged.ckpt");
    fs::write(&damaged, &bytes).unwrap();
    match read_archive(&damaged) {
        Err(Error::CorruptMember { name, .. }) => assert!(name.contains('/'), "{name}"),
        other => panic!("expected a corrupt member, got {other:?}"),
    }

    let truncated = dir.path().join("truncated.ckpt");
    fs::write(&truncated, &fs::read(&path).unwrap()[..100]).unwrap();
    assert!(matches!(read_archive(&truncated), Err(Error::CorruptMember { .. })));
}

#[test]
fn loaded_student_keeps_training_deterministically() {
    let (state, _, ds) = trained_state();
    let sched = common::default_schedule();
    let sts = StudentTimestepSet::default();
    let step = |mut s: TrainState| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = ds.sample_batch(2, &mut rng).unwrap();
        distill_step(&mut s, &batch, &WeightingParams::default(), &sched, &sts, TeacherCond::Lr, &mut rng).unwrap()
    };
    assert_eq!(step(state.clone()), step(state));
}
