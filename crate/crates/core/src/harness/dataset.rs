//! Offline datasets: a directory with `manifest.json` and `trajectories.bin`.
//!
//! The binary file starts with `MTRJ`, a u16 version and two reserved bytes.
//! Each record follows as a u32 length and that many bytes:
//! u64 sim_id, u32 param count, f64 params, u32 t_count, u32 field length,
//! f64 values step by step, then a CRC-32 of everything before it in the
//! record. Little-endian throughout.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::{sim_seed, HarnessError};
use crate::sampler::{ParamEntry, Sampler};
use crate::solvers::{Simulation, SolverSettings};
use crate::wire::crc32;

pub const MAGIC: [u8; 4] = *b"MTRJ";
pub const VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "trajectories.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub experiment: String,
    pub param_space: Vec<ParamEntry>,
    pub count: u64,
    pub field_shape: Vec<u32>,
    /// Steps per stored trajectory.
    pub t_count: u32,
    /// Stored step `i` is solver step `i · subsample_every`.
    pub subsample_every: u32,
    pub seed: u64,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sim_id: u64,
    pub params: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Dataset(msg.into())
}

pub fn encode_record(t: &Trajectory, out: &mut Vec<u8>) {
    let field_len = t.fields.first().map_or(0, Vec::len);
    let body_len = 8 + 4 + 8 * t.params.len() + 4 + 4 + 8 * field_len * t.fields.len() + 4;
    out.reserve(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    let start = out.len();
    out.extend_from_slice(&t.sim_id.to_le_bytes());
    out.extend_from_slice(&(t.params.len() as u32).to_le_bytes());
    for p in &t.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(t.fields.len() as u32).to_le_bytes());
    out.extend_from_slice(&(field_len as u32).to_le_bytes());
    for f in &t.fields {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| bad(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, HarnessError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("record size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes one record body (without its length prefix).
pub fn decode_record(body: &[u8]) -> Result<Trajectory, HarnessError> {
    if body.len() < 4 {
        return Err(bad("record shorter than its checksum"));
    }
    let (payload, tail) = body.split_at(body.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(payload) != stored {
        return Err(bad("record checksum mismatch"));
    }
    let mut c = Cursor { b: payload, pos: 0 };
    let sim_id = c.u64()?;
    let n_params = c.u32()? as usize;
    let params = c.f64s(n_params)?;
    let t_count = c.u32()? as usize;
    let field_len = c.u32()? as usize;
    let mut fields = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        fields.push(c.f64s(field_len)?);
    }
    if c.pos != payload.len() {
        return Err(bad("trailing bytes in record"));
    }
    Ok(Trajectory { sim_id, params, fields })
}

pub fn encode_records(trajectories: &[Trajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for t in trajectories {
        encode_record(t, &mut out);
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Trajectory>, HarnessError> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(bad("not a trajectory file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported trajectory file version {version}")));
    }
    let mut c = Cursor { b: bytes, pos: 8 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        out.push(decode_record(c.take(len)?)?);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), HarnessError> {
    if ds.manifest.count != ds.trajectories.len() as u64 {
        return Err(bad("manifest count differs from the number of records"));
    }
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(RECORDS))?;
    f.write_all(&encode_records(&ds.trajectories))?;
    f.sync_all()?;
    let manifest = serde_json::to_vec_pretty(&ds.manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, HarnessError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| bad(format!("manifest: {e}")))?;
    let trajectories = decode_records(&fs::read(dir.join(RECORDS))?)?;
    if manifest.count != trajectories.len() as u64 {
        return Err(bad(format!(
            "manifest announces {} trajectories, file holds {}",
            manifest.count,
            trajectories.len()
        )));
    }
    let field_len: usize = manifest.field_shape.iter().map(|&d| d as usize).product();
    for t in &trajectories {
        if t.fields.len() != manifest.t_count as usize || t.fields.iter().any(|f| f.len() != field_len) {
            return Err(bad(format!("sim {} does not match the manifest shape", t.sim_id)));
        }
    }
    Ok(Dataset { manifest, trajectories })
}

/// Keeps steps `t ≡ 0 (mod every_k)` of every trajectory.
pub fn subsample(ds: &Dataset, every_k: u32) -> Result<Dataset, HarnessError> {
    if every_k == 0 {
        return Err(bad("every_k must be >= 1"));
    }
    let k = every_k as usize;
    let trajectories: Vec<Trajectory> = ds
        .trajectories
        .iter()
        .map(|t| Trajectory {
            sim_id: t.sim_id,
            params: t.params.clone(),
            fields: t.fields.iter().step_by(k).cloned().collect(),
        })
        .collect();
    let mut manifest = ds.manifest.clone();
    manifest.t_count = trajectories.first().map_or(0, |t| t.fields.len() as u32);
    manifest.subsample_every = ds.manifest.subsample_every * every_k;
    Ok(Dataset { manifest, trajectories })
}

/// Runs `offline.trajectories` solver instances locally, with the same λ
/// and solver seeds the online ensemble would use for those sim ids.
pub fn offline_generate(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    let n = cfg.offline.trajectories;
    let sampler = Sampler::new(cfg.param_space()?, cfg.strategy.clone(), n.max(cfg.ensemble_size))?;
    let mut trajectories = Vec::with_capacity(n as usize);
    let mut field_shape = Vec::new();
    for sim_id in 0..n {
        let params = sampler.next_params(sim_id)?;
        let sim = Simulation::build(&cfg.solver, &params, sim_seed(cfg.seeds.master, sim_id))?;
        field_shape = sim.field_shape();
        trajectories.push(Trajectory {
            sim_id,
            params: params.values().to_vec(),
            fields: sim.trajectory()?,
        });
    }
    let full = Dataset {
        manifest: Manifest {
            experiment: cfg.experiment.to_string(),
            param_space: cfg.param_space.clone(),
            count: n,
            field_shape,
            t_count: cfg.solver.n_steps() + 1,
            subsample_every: 1,
            seed: cfg.seeds.master,
            solver: cfg.solver.clone(),
        },
        trajectories,
    };
    if cfg.offline.subsample_every > 1 {
        subsample(&full, cfg.offline.subsample_every)
    } else {
        Ok(full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Experiment;

    fn tiny() -> Dataset {
        let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
        cfg.offline.trajectories = 3;
        cfg.solver.t_total = 0.5;
        offline_generate(&cfg).unwrap()
    }

    #[test]
    fn records_round_trip_bitwise() {
        let ds = tiny();
        let bytes = encode_records(&ds.trajectories);
        assert_eq!(decode_records(&bytes).unwrap(), ds.trajectories);
    }

    #[test]
    fn corrupt_record_is_detected() {
        let ds = tiny();
        let mut bytes = encode_records(&ds.trajectories);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(decode_records(&bytes).is_err());
        assert!(decode_records(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn subsample_keeps_multiples() {
        let ds = tiny();
        assert_eq!(subsample(&ds, 1).unwrap().trajectories, ds.trajectories);
        let s = subsample(&ds, 10).unwrap();
        assert_eq!(s.manifest.t_count, 6);
        assert_eq!(s.manifest.count, 3);
        assert_eq!(s.trajectories[1].fields[2], ds.trajectories[1].fields[20]);
    }
}
