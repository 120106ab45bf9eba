//! Binary container of named typed arrays, used for training checkpoints
//! and compiled weights.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "GNASCKPT"
//! version  u32
//! count    u32      number of entries
//! entry:   u32 name length, UTF-8 name, u8 type tag, u64 element count, payload
//! ```
//!
//! Type tags: 1 = f32, 2 = f64, 3 = u64, 4 = u8.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use gatenas_core::rng::RngState;
use gatenas_core::train::{MetricsRow, Progress, Snapshot, StageTag};

use crate::{fsutil, Error, Result};

pub const MAGIC: &[u8; 8] = b"GNASCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Array {
    fn tag(&self) -> u8 {
        match self {
            Array::F32(_) => 1,
            Array::F64(_) => 2,
            Array::U64(_) => 3,
            Array::U8(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            Array::F32(v) => v.len(),
            Array::F64(v) => v.len(),
            Array::U64(v) => v.len(),
            Array::U8(v) => v.len(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Array::F32(_) => "f32",
            Array::F64(_) => "f64",
            Array::U64(_) => "u64",
            Array::U8(_) => "u8",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Array)>,
}

const STAGES: [StageTag; 4] = [StageTag::Pretrain, StageTag::Search, StageTag::Finetune, StageTag::Done];

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.entries.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for (name, array) in &self.entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.push(array.tag());
            out.write_u64::<LittleEndian>(array.len() as u64).unwrap();
            match array {
                Array::F32(v) => v.iter().for_each(|x| out.write_f32::<LittleEndian>(*x).unwrap()),
                Array::F64(v) => v.iter().for_each(|x| out.write_f64::<LittleEndian>(*x).unwrap()),
                Array::U64(v) => v.iter().for_each(|x| out.write_u64::<LittleEndian>(*x).unwrap()),
                Array::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Checkpoint> {
        let mut cur = Cursor::new(bytes);
        let err = |cur: &Cursor<&[u8]>, message: String| Error::Format { file: file.into(), offset: cur.position(), message };
        let truncated = |cur: &Cursor<&[u8]>| err(cur, String::from("unexpected end of file"));
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| truncated(&cur))?;
        if &magic != MAGIC {
            return Err(Error::Format { file: file.into(), offset: 0, message: String::from("not a checkpoint (bad magic)") });
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
        if version != VERSION {
            return Err(Error::Format {
                file: file.into(),
                offset: 8,
                message: format!("unsupported version {version} (expected {VERSION})"),
            });
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
            if name_len as u64 > bytes.len() as u64 - cur.position() {
                return Err(truncated(&cur));
            }
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| truncated(&cur))?;
            let name = String::from_utf8(name).map_err(|_| err(&cur, String::from("entry name is not UTF-8")))?;
            let tag_at = cur.position();
            let tag = cur.read_u8().map_err(|_| truncated(&cur))?;
            let len = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
            let width = match tag {
                1 => 4,
                2 | 3 => 8,
                4 => 1,
                t => {
                    return Err(Error::Format { file: file.into(), offset: tag_at, message: format!("unknown type tag {t} for `{name}`") })
                }
            };
            if len.saturating_mul(width) > bytes.len() as u64 - cur.position() {
                return Err(err(&cur, format!("entry `{name}` claims {len} elements past the end of file")));
            }
            let n = len as usize;
            let array = match tag {
                1 => Array::F32((0..n).map(|_| cur.read_f32::<LittleEndian>().unwrap()).collect()),
                2 => Array::F64((0..n).map(|_| cur.read_f64::<LittleEndian>().unwrap()).collect()),
                3 => Array::U64((0..n).map(|_| cur.read_u64::<LittleEndian>().unwrap()).collect()),
                _ => {
                    let mut v = vec![0u8; n];
                    cur.read_exact(&mut v).unwrap();
                    Array::U8(v)
                }
            };
            entries.push((name, array));
        }
        if cur.position() != bytes.len() as u64 {
            return Err(err(&cur, String::from("trailing bytes after the last entry")));
        }
        Ok(Checkpoint { entries })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fsutil::read(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode())
    }

    fn missing(&self, name: &str, what: &str) -> Error {
        Error::Format { file: String::from("checkpoint"), offset: 0, message: format!("entry `{name}`: {what}") }
    }

    fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Array::F64(v)) => Ok(v),
            Some(a) => Err(self.missing(name, &format!("expected f64, found {}", a.type_name()))),
            None => Err(self.missing(name, "missing")),
        }
    }

    fn u64s(&self, name: &str, len: Option<usize>) -> Result<&[u64]> {
        match self.get(name) {
            Some(Array::U64(v)) if len.is_none_or(|l| l == v.len()) => Ok(v),
            Some(Array::U64(v)) => Err(self.missing(name, &format!("expected {} values, found {}", len.unwrap(), v.len()))),
            Some(a) => Err(self.missing(name, &format!("expected u64, found {}", a.type_name()))),
            None => Err(self.missing(name, "missing")),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Array::U8(v)) => Ok(v),
            Some(a) => Err(self.missing(name, &format!("expected u8, found {}", a.type_name()))),
            None => Err(self.missing(name, "missing")),
        }
    }

    /// Named f32 arrays whose names start with `prefix`, with the prefix removed.
    pub fn f32_group(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        self.entries
            .iter()
            .filter_map(|(n, a)| match (n.strip_prefix(prefix), a) {
                (Some(rest), Array::F32(v)) => Some((rest.to_string(), v.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn from_f32_arrays(arrays: &[(String, Vec<f32>)]) -> Checkpoint {
        Checkpoint { entries: arrays.iter().map(|(n, v)| (n.clone(), Array::F32(v.clone()))).collect() }
    }

    pub fn from_snapshot(s: &Snapshot) -> Checkpoint {
        let mut c = Checkpoint::default();
        let p = &s.progress;
        c.push("progress.stage", Array::U8(p.stage.keyword().as_bytes().to_vec()));
        c.push(
            "progress.counters",
            Array::U64(vec![p.epoch as u64, p.step, p.search_epochs as u64, p.target_reached as u64]),
        );
        c.push("progress.best_resource", Array::F64(vec![p.best_resource]));
        c.push(
            "flags",
            Array::U64(vec![s.gates_frozen as u64, s.best_gates.is_some() as u64, s.optimizer_steps]),
        );
        c.push("rng.seed", Array::U8(s.rng.seed.to_vec()));
        c.push(
            "rng.position",
            Array::U64(vec![s.rng.stream, s.rng.word_pos as u64, (s.rng.word_pos >> 64) as u64]),
        );
        let stage_codes = s.metrics.iter().map(|r| STAGES.iter().position(|t| *t == r.stage).unwrap() as u8).collect();
        c.push("metrics.stage", Array::U8(stage_codes));
        c.push("metrics.counters", Array::U64(s.metrics.iter().flat_map(|r| [r.epoch as u64, r.step]).collect()));
        c.push(
            "metrics.values",
            Array::F64(s.metrics.iter().flat_map(|r| [r.task_loss, r.reg, r.total, r.resource, r.accuracy]).collect()),
        );
        for (prefix, group) in [("param/", &s.params), ("gate/", &s.gates), ("optim/", &s.optimizer)] {
            for (n, v) in group {
                c.push(format!("{prefix}{n}"), Array::F32(v.clone()));
            }
        }
        if let Some(best) = &s.best_gates {
            for (n, v) in best {
                c.push(format!("best/{n}"), Array::F32(v.clone()));
            }
        }
        c
    }

    pub fn to_snapshot(&self) -> Result<Snapshot> {
        let stage_text = String::from_utf8_lossy(self.bytes("progress.stage")?).into_owned();
        let stage: StageTag =
            stage_text.parse().map_err(|_| self.missing("progress.stage", &format!("unknown stage `{stage_text}`")))?;
        let counters = self.u64s("progress.counters", Some(4))?;
        let best_resource = *self.f64s("progress.best_resource")?.first().ok_or_else(|| self.missing("progress.best_resource", "empty"))?;
        let flags = self.u64s("flags", Some(3))?;
        let seed: [u8; 32] =
            self.bytes("rng.seed")?.try_into().map_err(|_| self.missing("rng.seed", "expected 32 bytes"))?;
        let pos = self.u64s("rng.position", Some(3))?;
        let codes = self.bytes("metrics.stage")?;
        let mc = self.u64s("metrics.counters", Some(2 * codes.len()))?;
        let mv = self.f64s("metrics.values")?;
        if mv.len() != 5 * codes.len() {
            return Err(self.missing("metrics.values", "length does not match metrics.stage"));
        }
        let mut metrics = Vec::with_capacity(codes.len());
        for (i, &code) in codes.iter().enumerate() {
            let stage = *STAGES.get(code as usize).ok_or_else(|| self.missing("metrics.stage", "unknown stage code"))?;
            let v = &mv[5 * i..5 * i + 5];
            metrics.push(MetricsRow {
                stage,
                epoch: mc[2 * i] as usize,
                step: mc[2 * i + 1],
                task_loss: v[0],
                reg: v[1],
                total: v[2],
                resource: v[3],
                accuracy: v[4],
            });
        }
        let best = self.f32_group("best/");
        Ok(Snapshot {
            progress: Progress {
                stage,
                epoch: counters[0] as usize,
                step: counters[1],
                search_epochs: counters[2] as usize,
                target_reached: counters[3] != 0,
                best_resource,
            },
            params: self.f32_group("param/"),
            gates: self.f32_group("gate/"),
            best_gates: (flags[1] != 0).then_some(best),
            gates_frozen: flags[0] != 0,
            optimizer_steps: flags[2],
            optimizer: self.f32_group("optim/"),
            rng: RngState { seed, stream: pos[0], word_pos: pos[1] as u128 | ((pos[2] as u128) << 64) },
            metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_and_rejects_damage() {
        let mut c = Checkpoint::default();
        c.push("a", Array::F32(vec![1.5, -2.0]));
        c.push("b", Array::F64(vec![f64::MIN_POSITIVE]));
        c.push("c", Array::U64(vec![u64::MAX]));
        c.push("d", Array::U8(b"xyz".to_vec()));
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, "x").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        for cut in [3, 12, 20, bytes.len() - 1] {
            assert_eq!(Checkpoint::decode(&bytes[..cut], "x").unwrap_err().category(), "format");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, "x").unwrap_err().to_string().contains("bad magic"));
    }
}
