//! Versioned binary container for checkpoints, latents and trajectories.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "MASA1"
//! version u32
//! records until EOF:
//!   tag     4 ASCII bytes
//!   length  u64 (payload bytes)
//!   payload
//! ```
//!
//! Record payloads:
//!
//! - `CONF` — UTF-8 JSON: [`CheckpointMeta`].
//! - `TENS` — named tensor: u16 name length, name bytes, u8 ndim,
//!   ndim × u32 dims, u8 dtype (0 = f32), raw f32 data.
//! - `TRAJ` — named trajectory: u16 name length, name bytes, u32 entry
//!   count, each entry u32 step_index, i64 timestep (−1 encodes the ᾱ = 1
//!   boundary), u8 ndim, ndim × u32 dims, raw f32 data.
//! - `META` — UTF-8 JSON free-form (loss history, optimizer state tag).
//!
//! Optimizer moments ride along as `TENS` records named `opt.m.*` /
//! `opt.v.*`. Save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::ScheduleParams;

const MAGIC: &[u8; 5] = b"MASA1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajEntry {
    pub step_index: u32,
    /// Schedule timestep; −1 encodes the clean (ᾱ = 1) boundary.
    pub timestep: i64,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajRecord {
    pub name: String,
    pub entries: Vec<TrajEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Conf(String),
    Tensor(NamedTensor),
    Traj(TrajRecord),
    Meta(String),
}

/// Model identity stored in the `CONF` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub model_seed: u64,
    /// Trainer provenance: optimizer name, hyperparameters, budget.
    pub train: TrainInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    pub optimizer: String,
    pub lr: f64,
    pub batch: usize,
    pub steps_trained: u64,
    pub grad_clip: f64,
    pub uncond_prob: f64,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub dataset_size: usize,
}

impl Default for TrainInfo {
    fn default() -> Self {
        TrainInfo {
            optimizer: "adam".into(),
            lr: 2e-3,
            batch: 8,
            steps_trained: 0,
            grad_clip: 1.0,
            uncond_prob: 0.1,
            dataset_seed: 0,
            train_seed: 0,
            dataset_size: 0,
        }
    }
}

/// Extra per-checkpoint state in the `META` record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointExtras {
    pub loss_history: Vec<f64>,
    pub adam_step: u64,
    pub has_optimizer_state: bool,
}

fn write_record<W: Write>(w: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    w.write_all(tag)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

fn tensor_payload(t: &NamedTensor) -> Vec<u8> {
    let mut p = Vec::with_capacity(16 + t.name.len() + 4 * t.data.len());
    p.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
    p.extend_from_slice(t.name.as_bytes());
    p.push(t.dims.len() as u8);
    for &d in &t.dims {
        p.extend_from_slice(&(d as u32).to_le_bytes());
    }
    p.push(0u8); // dtype f32
    for &v in &t.data {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse_tensor(payload: &[u8]) -> Result<NamedTensor> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    let name_len = c.u16()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
    let ndim = c.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u32()? as usize);
    }
    let dtype = c.u8()?;
    if dtype != 0 {
        return Err(Error::Format(format!("unknown tensor dtype {dtype}")));
    }
    let numel: usize = dims.iter().product();
    let data = c.f32s(numel)?;
    Ok(NamedTensor { name, dims, data })
}

fn traj_payload(t: &TrajRecord) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
    p.extend_from_slice(t.name.as_bytes());
    p.extend_from_slice(&(t.entries.len() as u32).to_le_bytes());
    for e in &t.entries {
        p.extend_from_slice(&e.step_index.to_le_bytes());
        p.extend_from_slice(&e.timestep.to_le_bytes());
        p.push(e.dims.len() as u8);
        for &d in &e.dims {
            p.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            p.extend_from_slice(&v.to_le_bytes());
        }
    }
    p
}

fn parse_traj(payload: &[u8]) -> Result<TrajRecord> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    let name_len = c.u16()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("trajectory name not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let step_index = c.u32()?;
        let timestep = c.i64()?;
        let ndim = c.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = c.f32s(numel)?;
        entries.push(TrajEntry {
            step_index,
            timestep,
            dims,
            data,
        });
    }
    Ok(TrajRecord { name, entries })
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        match r {
            Record::Conf(json) => write_record(&mut w, b"CONF", json.as_bytes())?,
            Record::Tensor(t) => write_record(&mut w, b"TENS", &tensor_payload(t))?,
            Record::Traj(t) => write_record(&mut w, b"TRAJ", &traj_payload(t))?,
            Record::Meta(json) => write_record(&mut w, b"META", json.as_bytes())?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Record>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"MASA1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut vbuf = [0u8; 4];
    f.read_exact(&mut vbuf)
        .map_err(|_| Error::Format("missing version".into()))?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(Error::Format(format!(
            "container version {version} unsupported (expected {VERSION})"
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut tag = [0u8; 4];
        match f.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut lbuf = [0u8; 8];
        f.read_exact(&mut lbuf)?;
        let len = u64::from_le_bytes(lbuf) as usize;
        let mut payload = vec![0u8; len];
        f.read_exact(&mut payload)?;
        let record = match &tag {
            b"CONF" => Record::Conf(
                String::from_utf8(payload).map_err(|_| Error::Format("CONF not UTF-8".into()))?,
            ),
            b"TENS" => Record::Tensor(parse_tensor(&payload)?),
            b"TRAJ" => Record::Traj(parse_traj(&payload)?),
            b"META" => Record::Meta(
                String::from_utf8(payload).map_err(|_| Error::Format("META not UTF-8".into()))?,
            ),
            other => {
                return Err(Error::Format(format!(
                    "unknown record tag {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// A loaded (or about-to-be-saved) checkpoint.
pub struct Checkpoint<F: Real> {
    pub meta: CheckpointMeta,
    pub denoiser: Denoiser<F>,
    pub extras: CheckpointExtras,
    /// Adam moment tensors in parameter order, when saved.
    pub opt_m: Option<Vec<ArrayD<F>>>,
    pub opt_v: Option<Vec<ArrayD<F>>>,
}

fn tensor_from_array<F: Real>(name: &str, a: &ArrayD<F>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        dims: a.shape().to_vec(),
        data: a.iter().map(|v| v.to_f32c()).collect(),
    }
}

fn array_from_tensor<F: Real>(t: &NamedTensor) -> Result<ArrayD<F>> {
    let arr = ArrayD::from_shape_vec(
        ndarray::IxDyn(&t.dims),
        t.data.iter().map(|&v| F::from_f32c(v)).collect(),
    )
    .map_err(|e| Error::Format(format!("tensor {}: {e}", t.name)))?;
    Ok(arr)
}

pub fn save_checkpoint<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let mut records = Vec::new();
    records.push(Record::Conf(serde_json::to_string(&ckpt.meta)?));
    for (name, tensor) in ckpt.denoiser.params().iter() {
        records.push(Record::Tensor(tensor_from_array(name, tensor)));
    }
    if let (Some(ms), Some(vs)) = (&ckpt.opt_m, &ckpt.opt_v) {
        for ((name, _), (m, v)) in ckpt.denoiser.params().iter().zip(ms.iter().zip(vs.iter())) {
            records.push(Record::Tensor(tensor_from_array(&format!("opt.m.{name}"), m)));
            records.push(Record::Tensor(tensor_from_array(&format!("opt.v.{name}"), v)));
        }
    }
    records.push(Record::Meta(serde_json::to_string(&ckpt.extras)?));
    write_container(path, &records)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let records = read_container(path)?;
    let mut meta: Option<CheckpointMeta> = None;
    let mut extras = CheckpointExtras::default();
    let mut tensors: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for r in records {
        match r {
            Record::Conf(json) => {
                meta = Some(
                    serde_json::from_str(&json)
                        .map_err(|e| Error::Format(format!("CONF parse: {e}")))?,
                );
            }
            Record::Meta(json) => {
                extras = serde_json::from_str(&json)
                    .map_err(|e| Error::Format(format!("META parse: {e}")))?;
            }
            Record::Tensor(t) => {
                tensors.insert(t.name.clone(), t);
            }
            Record::Traj(_) => {}
        }
    }
    let meta = meta.ok_or_else(|| Error::Format("checkpoint missing CONF record".into()))?;
    let mut denoiser = Denoiser::<F>::build(meta.model.clone(), meta.model_seed)?;
    let names: Vec<String> = denoiser
        .params()
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &names {
        let t = tensors.remove(name).ok_or_else(|| {
            Error::Format(format!("checkpoint missing parameter tensor {name}"))
        })?;
        let arr = array_from_tensor::<F>(&t)?;
        let id = denoiser.params().id_of(name).unwrap();
        if denoiser.params().get(id).shape() != arr.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                arr.shape(),
                denoiser.params().get(id).shape()
            )));
        }
        *denoiser.params_mut().get_mut(id) = arr;
    }
    let (mut opt_m, mut opt_v) = (None, None);
    if extras.has_optimizer_state {
        let mut ms = Vec::with_capacity(names.len());
        let mut vs = Vec::with_capacity(names.len());
        for name in &names {
            let tm = tensors
                .remove(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name}")))?;
            let tv = tensors
                .remove(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Format(format!("missing optimizer variance for {name}")))?;
            ms.push(array_from_tensor::<F>(&tm)?);
            vs.push(array_from_tensor::<F>(&tv)?);
        }
        opt_m = Some(ms);
        opt_v = Some(vs);
    }
    if !tensors.is_empty() {
        let extra: Vec<&String> = tensors.keys().take(3).collect();
        return Err(Error::Format(format!(
            "checkpoint carries unknown tensors (e.g. {extra:?})"
        )));
    }
    Ok(Checkpoint {
        meta,
        denoiser,
        extras,
        opt_m,
        opt_v,
    })
}
