//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `LTUCKER\0` |
//! | format version | u32 |
//! | metadata | u64 length + UTF-8 JSON (config, task list, core flags) |
//! | tensor count | u64 |
//! | per tensor | u32 name length, name, u8 dtype tag (1 = f64), u32 rank, u64 per dim, f64 payload |
//! | checksum | CRC-64/XZ of every preceding byte, u64 |
//!
//! Tensors are written in a fixed order (cores, then tasks by name, then the
//! architecture's parameter order), so saving the same model twice yields the
//! same bytes.

use crate::error::{Error, Result};
use crate::network::{ArchConfig, BatchNormState, BnSite, Model, ParamId, TaskState};
use crate::param::{SharedCore, TaskFactorSet, GROUP_ORDER};
use crate::tensor::DenseTensor;
use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LTUCKER\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ArchConfig,
    frozen: Vec<bool>,
    tasks: Vec<TaskMeta>,
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    name: String,
    num_classes: usize,
}

fn core_name(b: usize) -> String {
    format!("core.{b}")
}

fn task_name(task: &str, what: &str) -> String {
    format!("task/{task}/{what}")
}

fn bn_sites(config: &ArchConfig, num_classes: usize) -> Result<Vec<BnSite>> {
    Ok(config
        .parameter_shapes(num_classes)?
        .into_iter()
        .filter_map(|(id, _)| match id {
            ParamId::BnGamma(site) => Some(site),
            _ => None,
        })
        .collect())
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = model.config();
    let meta = Metadata {
        config: config.clone(),
        frozen: model.cores.iter().map(SharedCore::is_frozen).collect(),
        tasks: model
            .tasks()
            .iter()
            .map(|(name, s)| TaskMeta { name: name.clone(), num_classes: s.num_classes })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;

    let mut records: Vec<(String, DenseTensor)> = Vec::new();
    for (b, core) in model.cores.iter().enumerate() {
        records.push((core_name(b), core.core().clone()));
    }
    for (name, state) in model.tasks() {
        for (id, _) in config.parameter_shapes(state.num_classes)? {
            if !id.is_core() {
                records.push((task_name(name, &id.to_string()), model.param(name, id)?.clone()));
            }
        }
        for site in bn_sites(config, state.num_classes)? {
            let bn = &state.bn[&site];
            let c = bn.running_mean.len();
            records.push((
                task_name(name, &format!("bn.{site}.running_mean")),
                DenseTensor::new(vec![c], bn.running_mean.clone())?,
            ));
            records.push((
                task_name(name, &format!("bn.{site}.running_var")),
                DenseTensor::new(vec![c], bn.running_var.clone())?,
            ));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.order() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 12 + 8 {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: &body[12..] };
    let json_len = r.len()?;
    let meta: Metadata = serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let count = r.len()?;
    let mut tensors: BTreeMap<String, DenseTensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let bytes_len = shape.iter().try_fold(8usize, |acc, &d| acc.checked_mul(d));
        let payload = r.take(bytes_len.ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if tensors.insert(name.clone(), DenseTensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format("trailing bytes before the checksum".into()));
    }

    let config = meta.config;
    config.validate()?;
    let mut take =
        |name: String| tensors.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")));
    if meta.frozen.len() != config.macro_modules {
        return Err(Error::Format("core flag count differs from the macro-module count".into()));
    }
    let mut cores = Vec::with_capacity(config.macro_modules);
    for b in 0..config.macro_modules {
        let mut core = SharedCore::new(b, config.layout(b)?, take(core_name(b))?)?;
        core.set_frozen(meta.frozen[b]);
        cores.push(core);
    }
    let mut tasks = BTreeMap::new();
    for TaskMeta { name, num_classes } in meta.tasks {
        let mut params: BTreeMap<ParamId, DenseTensor> = BTreeMap::new();
        for (id, _) in config.parameter_shapes(num_classes)? {
            if !id.is_core() {
                params.insert(id, take(task_name(&name, &id.to_string()))?);
            }
        }
        let mut get = |id: ParamId| params.remove(&id).expect("inserted above");
        let factors = (0..config.macro_modules)
            .map(|b| {
                let f = (0..GROUP_ORDER).map(|mode| get(ParamId::Factor { module: b, mode })).collect();
                TaskFactorSet::new(name.clone(), &config.layout(b)?, f)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bn = BTreeMap::new();
        for site in bn_sites(&config, num_classes)? {
            let state = BatchNormState {
                gamma: get(ParamId::BnGamma(site)),
                beta: get(ParamId::BnBeta(site)),
                running_mean: take(task_name(&name, &format!("bn.{site}.running_mean")))?.into_data(),
                running_var: take(task_name(&name, &format!("bn.{site}.running_var")))?.into_data(),
            };
            bn.insert(site, state);
        }
        let projections = (1..config.macro_modules).map(|b| (b, get(ParamId::Projection(b)))).collect();
        let state = TaskState {
            num_classes,
            factors,
            stem: get(ParamId::Stem),
            bn,
            projections,
            head_weight: get(ParamId::HeadWeight),
            head_bias: get(ParamId::HeadBias),
        };
        if tasks.insert(name.clone(), state).is_some() {
            return Err(Error::DuplicateTask(name));
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    Model::from_parts(config, cores, tasks)
}

/// Writes to a temporary file beside `path`, then renames it into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut file = tempfile::NamedTempFile::new_in(dir)?;
    file.write_all(&bytes)?;
    file.as_file().sync_all()?;
    file.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}
