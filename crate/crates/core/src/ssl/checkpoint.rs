//! Binary checkpoint blob.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configuration, counters, centres and a tensor directory), then
//! every tensor of the directory as little-endian `f64` in order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, Moments, OptState};
use crate::params::ParamSet;
use crate::ssl::center::CenterState;
use crate::ssl::model::{ArchConfig, Method, StudentTeacher};
use crate::ssl::train::{CollapseMonitor, LossStats, RunCounters, RunState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CDCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    method: Method,
    iteration: u64,
    seed: u64,
    loss_stats: LossStats,
    centers: CenterState,
    monitor: CollapseMonitor,
    counters: RunCounters,
    warnings: Vec<String>,
    opt_config: AdamWConfig,
    opt_step: u64,
    has_teacher: bool,
    tensors: Vec<TensorEntry>,
}

const STUDENT: &str = "student";
const TEACHER: &str = "teacher";
const FIRST_MOMENT: &str = "adam_m";
const SECOND_MOMENT: &str = "adam_v";

pub fn encode_checkpoint(model: &StudentTeacher, state: &RunState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(&str, &str, &Tensor)> = Vec::new();
    for (name, p) in model.student.iter() {
        tensors.push((STUDENT, name, &p.value));
    }
    if let Some(t) = &model.teacher {
        for (name, p) in t.iter() {
            tensors.push((TEACHER, name, &p.value));
        }
    }
    for (name, m) in &state.opt.moments {
        tensors.push((FIRST_MOMENT, name, &m.first));
        tensors.push((SECOND_MOMENT, name, &m.second));
    }
    let header = Header {
        arch: model.arch.clone(),
        method: model.method,
        iteration: state.iteration,
        seed: state.seed,
        loss_stats: state.loss_stats,
        centers: state.centers.clone(),
        monitor: state.monitor,
        counters: state.counters,
        warnings: state.warnings.clone(),
        opt_config: state.opt.config,
        opt_step: state.opt.step,
        has_teacher: model.teacher.is_some(),
        tensors: tensors
            .iter()
            .map(|(g, n, t)| TensorEntry {
                group: g.to_string(),
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * tensors.iter().map(|t| t.2.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<(StudentTeacher, RunState)> {
    let cur = &mut bytes;
    if take(cur, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(cur, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(cur, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(cur, len)?)?;

    let mut student = ParamSet::new();
    let mut teacher = ParamSet::new();
    let mut firsts = std::collections::BTreeMap::new();
    let mut seconds = std::collections::BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(cur, 8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data)
            .map_err(|e| Error::Format(format!("tensor {}/{}: {e}", entry.group, entry.name)))?;
        match entry.group.as_str() {
            STUDENT => student.insert(entry.name.clone(), t)?,
            TEACHER => teacher.insert(entry.name.clone(), t)?,
            FIRST_MOMENT => {
                firsts.insert(entry.name.clone(), t);
            }
            SECOND_MOMENT => {
                seconds.insert(entry.name.clone(), t);
            }
            other => return Err(Error::Format(format!("unknown tensor group `{other}`"))),
        }
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let mut moments = std::collections::BTreeMap::new();
    for (name, first) in firsts {
        let second = seconds
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing second moment for `{name}`")))?;
        moments.insert(name, Moments { first, second });
    }
    let model = StudentTeacher {
        arch: header.arch,
        method: header.method,
        student,
        teacher: header.has_teacher.then_some(teacher),
    };
    let state = RunState {
        iteration: header.iteration,
        seed: header.seed,
        loss_stats: header.loss_stats,
        centers: header.centers,
        opt: OptState {
            config: header.opt_config,
            step: header.opt_step,
            moments,
        },
        monitor: header.monitor,
        counters: header.counters,
        warnings: header.warnings,
    };
    Ok((model, state))
}

pub fn write_checkpoint(path: &Path, model: &StudentTeacher, state: &RunState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, state)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(StudentTeacher, RunState)> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::model::{LossConfig, MethodLabel};
    use crate::ssl::train::TrainConfig;

    #[test]
    fn round_trip_is_exact() {
        let arch = ArchConfig::new(6, 3);
        for label in [MethodLabel::Cdcl, MethodLabel::SslByol, MethodLabel::Supervised] {
            let loss: LossConfig = label.loss_config();
            let model = StudentTeacher::init(&arch, loss.method, 11).unwrap();
            let mut state = RunState::new(&model, &loss, &TrainConfig::new(10, 4, 11)).unwrap();
            state.iteration = 7;
            state.centers.centers.insert(2, vec![0.1 / 3.0; arch.out_dim]);
            state.warnings.push("w".into());
            let bytes = encode_checkpoint(&model, &state).unwrap();
            let (m2, s2) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(m2, model);
            assert_eq!(s2, state);
            assert_eq!(encode_checkpoint(&m2, &s2).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_foreign_and_future_files() {
        assert!(matches!(decode_checkpoint(b"hello"), Err(Error::Format(_))));
        let arch = ArchConfig::new(4, 2);
        let model = StudentTeacher::init(&arch, Method::Dino, 0).unwrap();
        let state = RunState::new(&model, &LossConfig::dino(), &TrainConfig::new(5, 2, 0)).unwrap();
        let mut bytes = encode_checkpoint(&model, &state).unwrap();
        bytes[8] = 99;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(m)) if m.contains("version")));
    }
}
