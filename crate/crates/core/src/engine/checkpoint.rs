//! Binary checkpoint archive.
//!
//! ```text
//! "SSLWB" | format_version u32 | config digest [32]
//! meta_len u32 | meta (TOML, UTF-8)
//! array_count u32 | arrays...
//! sha256 of everything above [32]
//! ```
//!
//! Each array is `name_len u16 | name | ndim u8 | dims u64 × ndim | f32 × Π dims`.
//! All integers and floats are little-endian. Arrays are grouped by a name
//! prefix: `student/`, `teacher/`, `adam.m/`, `adam.v/`, plus the
//! singletons `teacher.center` and `deepcluster.assignments`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, Method};
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, HeadConfig, Model, ModelParameters, TeacherState};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSLWB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the random streams of a run stand: every stream is derived from
/// `seed` and the epoch/step indices, so these counters are sufficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
    pub global_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method: Method,
    /// Completed epochs.
    pub epoch: usize,
    pub encoder: EncoderConfig,
    pub heads: Vec<HeadConfig>,
    pub student: ModelParameters,
    pub teacher: Option<TeacherState>,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub config_digest: [u8; 32],
    /// Cluster assignments of the latest reclustering.
    pub assignments: Option<Vec<usize>>,
}

impl Checkpoint {
    /// Archive of a trained model without optimizer or teacher state.
    pub fn from_model(model: &Model, method: Method, epoch: usize, seed: u64, config_digest: [u8; 32]) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            method,
            epoch,
            encoder: model.encoder.clone(),
            heads: model.heads.clone(),
            student: model.params.clone(),
            teacher: None,
            optimizer: AdamW::new(0.0),
            rng: RngState {
                seed,
                next_epoch: epoch,
                global_step: 0,
            },
            config_digest,
            assignments: None,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
            params: self.student.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            method: self.method,
            epoch: self.epoch,
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
            rng: self.rng,
            teacher_momentum: self.teacher.as_ref().map(|t| t.momentum),
            adam: AdamMeta {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                weight_decay: self.optimizer.weight_decay,
                steps: self.optimizer.steps.clone(),
            },
        };
        let meta = toml::to_string(&meta).map_err(|e| Error::invalid(format!("checkpoint metadata: {e}")))?;

        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let mut group = |prefix: &str, p: &ModelParameters| {
            for (name, a) in p.iter() {
                arrays.push((format!("{prefix}/{name}"), a.shape.clone(), a.data.clone()));
            }
        };
        group("student", &self.student);
        if let Some(t) = &self.teacher {
            group("teacher", &t.params);
        }
        group("adam.m", &self.optimizer.m);
        group("adam.v", &self.optimizer.v);
        if let Some(t) = &self.teacher {
            let c = t.center.iter().map(|&v| v as f32).collect();
            arrays.push(("teacher.center".into(), vec![t.center.len()], c));
        }
        if let Some(a) = &self.assignments {
            arrays.push((
                "deepcluster.assignments".into(),
                vec![a.len()],
                a.iter().map(|&v| v as f32).collect(),
            ));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |msg: &str| Error::Corrupt {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        let header = CHECKPOINT_MAGIC.len() + 4 + 32;
        if bytes.len() < header || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < header + 32 {
            return Err(corrupt("file is truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("content digest mismatch (truncated or modified file)"));
        }
        let mut r = Reader {
            buf: body,
            pos: 9,
            corrupt: &corrupt,
        };
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let meta: Meta = toml::from_str(meta).map_err(|e| corrupt(&format!("metadata: {e}")))?;

        let mut groups: BTreeMap<String, ModelParameters> = BTreeMap::new();
        let mut center = None;
        let mut assignments = None;
        let count = r.u32()?;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("array name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("array too large"))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            match name.as_str() {
                "teacher.center" => center = Some(data.iter().map(|&v| v as f64).collect::<Vec<_>>()),
                "deepcluster.assignments" => assignments = Some(data.iter().map(|&v| v as usize).collect()),
                _ => {
                    let (group, param) = name
                        .split_once('/')
                        .ok_or_else(|| corrupt(&format!("array {name} has no group")))?;
                    groups.entry(group.to_string()).or_default().insert(param, shape, data)?;
                }
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last array"));
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();
        let student = take("student");
        let teacher = match meta.teacher_momentum {
            Some(momentum) => Some(TeacherState {
                params: take("teacher"),
                momentum,
                center: center.ok_or_else(|| corrupt("teacher without center"))?,
            }),
            None => None,
        };
        let optimizer = AdamW {
            beta1: meta.adam.beta1,
            beta2: meta.adam.beta2,
            eps: meta.adam.eps,
            weight_decay: meta.adam.weight_decay,
            m: take("adam.m"),
            v: take("adam.v"),
            steps: meta.adam.steps,
        };
        Ok(Self {
            format_version: version,
            method: meta.method,
            epoch: meta.epoch,
            encoder: meta.encoder,
            heads: meta.heads,
            student,
            teacher,
            optimizer,
            rng: meta.rng,
            config_digest,
            assignments,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    method: Method,
    epoch: usize,
    rng: RngState,
    teacher_momentum: Option<f64>,
    encoder: EncoderConfig,
    heads: Vec<HeadConfig>,
    adam: AdamMeta,
}

struct Reader<'a, F: Fn(&str) -> Error> {
    buf: &'a [u8],
    pos: usize,
    corrupt: &'a F,
}

impl<'a, F: Fn(&str) -> Error> Reader<'a, F> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| (self.corrupt)("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
