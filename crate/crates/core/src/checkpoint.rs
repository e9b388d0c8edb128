//! Self-describing archive of named `f32` arrays plus a JSON metadata record.
//!
//! Layout: the magic line `SRDCKPT1\n`, a little-endian `u64` header length,
//! the JSON header, then every array's raw little-endian bytes back to back.
//! Each array entry in the header carries its offset, shape and a SHA-256 of
//! its bytes so truncation and corruption are reported per member.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{Denoiser, DenoiserArch, Discriminator, DiscriminatorArch};
use crate::objective::WeightingParams;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedule::{ScheduleConfig, StudentTimestepSet};
use crate::trainer::{DistillConfig, TrainState};

const MAGIC: &[u8] = b"SRDCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Teacher,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub schedule: ScheduleConfig,
    pub anchors: Vec<usize>,
    pub weighting: Option<WeightingParams>,
    pub step: u64,
    pub seed: u64,
    pub denoiser: DenoiserArch,
    pub discriminator: Option<DiscriminatorArch>,
    pub student_optimizer: Option<AdamConfig>,
    pub disc_optimizer: Option<AdamConfig>,
    pub student_opt_steps: u64,
    pub disc_opt_steps: u64,
    pub teacher_checksum: String,
    pub codecs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<Entry>,
}

/// Metadata plus every named array.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: CheckpointMeta,
    pub arrays: ParamStore<f32>,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in archive.arrays.iter() {
        let start = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: start as u64,
            sha256: hex(&payload[start..]),
        });
    }
    let header = serde_json::to_vec(&Header { meta: archive.meta.clone(), arrays: entries })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |name: &str, reason: &str| Error::CorruptMember { name: name.into(), reason: reason.into() };
    if !bytes.starts_with(MAGIC) {
        return Err(corrupt("header", "not a checkpoint archive"));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(corrupt("header", "truncated"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(corrupt("header", "truncated"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt("header", &e.to_string()))?;
    if header.meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            field: "format_version".into(),
            found: header.meta.format_version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let payload = &rest[hlen..];
    let mut arrays = ParamStore::new();
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = payload.get(start..end).ok_or_else(|| corrupt(&e.name, "data truncated"))?;
        if hex(raw) != e.sha256 {
            return Err(corrupt(&e.name, "checksum mismatch"));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        arrays.insert(e.name.clone(), crate::tensor::Tensor::from_vec(e.shape.clone(), data)?);
    }
    Ok(Archive { meta: header.meta, arrays })
}

fn prefixed(out: &mut ParamStore<f32>, prefix: &str, store: &ParamStore<f32>) {
    for (k, v) in store.iter() {
        out.insert(format!("{prefix}/{k}"), v.clone());
    }
}

/// Members under `prefix/`, checked against the names and shapes in `template`.
fn extract(archive: &ParamStore<f32>, prefix: &str, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (k, t) in template.iter() {
        let name = format!("{prefix}/{k}");
        let v = archive.get(&name).ok_or_else(|| Error::MissingMember(name.clone()))?;
        if v.shape() != t.shape() {
            return Err(Error::CorruptMember {
                name,
                reason: format!("shape {:?}, expected {:?}", v.shape(), t.shape()),
            });
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}

/// Rejects archives built for a different schedule or anchor set.
pub fn check_compat(meta: &CheckpointMeta, schedule: &ScheduleConfig, anchors: &StudentTimestepSet) -> Result<()> {
    if &meta.schedule != schedule {
        return Err(Error::VersionMismatch {
            field: "schedule".into(),
            found: format!("{:?}", meta.schedule),
            expected: format!("{schedule:?}"),
        });
    }
    if meta.anchors != anchors.anchors() {
        return Err(Error::VersionMismatch {
            field: "anchors".into(),
            found: format!("{:?}", meta.anchors),
            expected: format!("{:?}", anchors.anchors()),
        });
    }
    Ok(())
}

fn base_meta(kind: CheckpointKind, schedule: &ScheduleConfig, anchors: &StudentTimestepSet, arch: &DenoiserArch) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind,
        schedule: *schedule,
        anchors: anchors.anchors().to_vec(),
        weighting: None,
        step: 0,
        seed: 0,
        denoiser: arch.clone(),
        discriminator: None,
        student_optimizer: None,
        disc_optimizer: None,
        student_opt_steps: 0,
        disc_opt_steps: 0,
        teacher_checksum: String::new(),
        codecs: crate::imaging::codec_versions(),
    }
}

pub fn save_teacher(path: &Path, net: &Denoiser, schedule: &ScheduleConfig, anchors: &StudentTimestepSet, seed: u64) -> Result<()> {
    let mut meta = base_meta(CheckpointKind::Teacher, schedule, anchors, &net.arch);
    meta.seed = seed;
    meta.teacher_checksum = net.params.checksum();
    let mut arrays = ParamStore::new();
    prefixed(&mut arrays, "denoiser", &net.params);
    write_archive(path, &Archive { meta, arrays })
}

/// Loads a denoiser from either checkpoint kind; distillation archives yield the student.
pub fn load_denoiser(path: &Path, schedule: &ScheduleConfig, anchors: &StudentTimestepSet) -> Result<(Denoiser, CheckpointMeta)> {
    let archive = read_archive(path)?;
    check_compat(&archive.meta, schedule, anchors)?;
    let template = Denoiser::<f32>::new(archive.meta.denoiser.clone(), 0)?;
    let prefix = match archive.meta.kind {
        CheckpointKind::Teacher => "denoiser",
        CheckpointKind::Distill => "student",
    };
    let params = extract(&archive.arrays, prefix, &template.params)?;
    Ok((Denoiser::from_params(archive.meta.denoiser.clone(), params)?, archive.meta))
}

pub fn save_state(
    path: &Path,
    state: &TrainState,
    schedule: &ScheduleConfig,
    anchors: &StudentTimestepSet,
    wp: &WeightingParams,
) -> Result<()> {
    let mut meta = base_meta(CheckpointKind::Distill, schedule, anchors, &state.student.arch);
    meta.weighting = Some(wp.clone());
    meta.step = state.step;
    meta.seed = state.seed;
    meta.discriminator = Some(state.disc.arch.clone());
    meta.student_optimizer = Some(state.student_opt.cfg.clone());
    meta.disc_optimizer = Some(state.disc_opt.cfg.clone());
    meta.student_opt_steps = state.student_opt.t;
    meta.disc_opt_steps = state.disc_opt.t;
    meta.teacher_checksum = state.teacher_checksum().to_string();
    let mut arrays = ParamStore::new();
    prefixed(&mut arrays, "student", &state.student.params);
    prefixed(&mut arrays, "teacher", &state.teacher.params);
    prefixed(&mut arrays, "disc", &state.disc.params);
    prefixed(&mut arrays, "adam_student_m", &state.student_opt.m);
    prefixed(&mut arrays, "adam_student_v", &state.student_opt.v);
    prefixed(&mut arrays, "adam_disc_m", &state.disc_opt.m);
    prefixed(&mut arrays, "adam_disc_v", &state.disc_opt.v);
    write_archive(path, &Archive { meta, arrays })
}

pub fn load_state(path: &Path, schedule: &ScheduleConfig, anchors: &StudentTimestepSet) -> Result<(TrainState, CheckpointMeta)> {
    let archive = read_archive(path)?;
    let meta = archive.meta.clone();
    check_compat(&meta, schedule, anchors)?;
    if meta.kind != CheckpointKind::Distill {
        return Err(Error::Config(format!("{} is a teacher checkpoint, not a distillation state", path.display())));
    }
    let missing = |f: &str| Error::MissingMember(format!("metadata.{f}"));
    let disc_arch = meta.discriminator.clone().ok_or_else(|| missing("discriminator"))?;
    let s_cfg = meta.student_optimizer.clone().ok_or_else(|| missing("student_optimizer"))?;
    let d_cfg = meta.disc_optimizer.clone().ok_or_else(|| missing("disc_optimizer"))?;
    let d_template = Denoiser::<f32>::new(meta.denoiser.clone(), 0)?;
    let disc_template = Discriminator::<f32>::new(disc_arch.clone(), 0)?;
    let student = Denoiser::from_params(meta.denoiser.clone(), extract(&archive.arrays, "student", &d_template.params)?)?;
    let teacher = Denoiser::from_params(meta.denoiser.clone(), extract(&archive.arrays, "teacher", &d_template.params)?)?;
    if teacher.params.checksum() != meta.teacher_checksum {
        return Err(Error::CorruptMember { name: "teacher".into(), reason: "checksum differs from metadata".into() });
    }
    let disc = Discriminator::from_params(disc_arch.clone(), extract(&archive.arrays, "disc", &disc_template.params)?)?;
    let cfg = DistillConfig {
        student_optimizer: s_cfg.clone(),
        disc_optimizer: d_cfg.clone(),
        disc_arch,
        seed: meta.seed,
        ..Default::default()
    };
    let mut state = TrainState::from_parts(student, teacher, disc, &cfg, meta.step)?;
    state.student_opt = Adam {
        cfg: s_cfg,
        m: extract(&archive.arrays, "adam_student_m", &d_template.params)?,
        v: extract(&archive.arrays, "adam_student_v", &d_template.params)?,
        t: meta.student_opt_steps,
    };
    state.disc_opt = Adam {
        cfg: d_cfg,
        m: extract(&archive.arrays, "adam_disc_m", &disc_template.params)?,
        v: extract(&archive.arrays, "adam_disc_v", &disc_template.params)?,
        t: meta.disc_opt_steps,
    };
    Ok((state, meta))
}
