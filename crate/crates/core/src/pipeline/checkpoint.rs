//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMOE" | version u32 | section count u32 | sections...
//! section := name_len u32 | name utf-8 | payload_len u64 | payload
//! ```
//!
//! Parameter sections (`partition`, `moe`, and their `.momentum` twins) hold
//! `count u32` records of `name_len u32 | name | rank u32 | dims u64… |
//! values f64…`. The `meta` section is `key = value` text, `rng` holds the
//! ChaCha stream position, and `log.*` sections hold metric CSV text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors with their momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSection {
    pub values: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

impl ParamSection {
    pub fn capture(store: &ParamStore) -> Self {
        Self {
            values: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            momentum: store.iter().map(|p| (p.name.clone(), p.momentum.clone())).collect(),
        }
    }

    /// Writes every stored tensor into `store`; names must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.values.len() != store.len() || self.momentum.len() != store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} parameters, model has {}",
                self.values.len(),
                store.len()
            )));
        }
        for ((name, value), (mname, momentum)) in self.values.iter().zip(&self.momentum) {
            if name != mname {
                return Err(Error::Corrupt(format!(
                    "momentum record `{mname}` does not match `{name}`"
                )));
            }
            store
                .restore(name, value.clone(), momentum.clone())
                .map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        Ok(())
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Partition,
    Moe,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::Moe => "moe",
        }
    }
}

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub stage: Stage,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub rng: RngState,
    pub partition: ParamSection,
    pub moe: Option<ParamSection>,
    pub partition_log: String,
    pub moe_log: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode_records(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor over a byte slice that reports truncation as corruption.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8 name".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_records(payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(payload);
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("`{name}`: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= payload.len() / 8)
            .ok_or_else(|| Error::Corrupt(format!("`{name}`: implausible shape {shape:?}")))?;
        let bytes = r.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    if !r.done() {
        return Err(Error::Corrupt("trailing bytes in parameter section".into()));
    }
    Ok(out)
}

impl Checkpoint {
    fn meta_text(&self) -> String {
        format!(
            "{}num_classes = {}\nstage = {}\nepoch = {}\n",
            self.config.to_text(),
            self.num_classes,
            self.stage.as_str(),
            self.epoch
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("meta", self.meta_text().into_bytes()),
            ("rng", {
                let mut b = self.rng.seed.to_vec();
                put_u64(&mut b, self.rng.stream);
                b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
                b
            }),
            ("partition", encode_records(&self.partition.values)),
            ("partition.momentum", encode_records(&self.partition.momentum)),
            ("log.partition", self.partition_log.clone().into_bytes()),
        ];
        if let Some(moe) = &self.moe {
            sections.push(("moe", encode_records(&moe.values)));
            sections.push(("moe.momentum", encode_records(&moe.momentum)));
            sections.push(("log.moe", self.moe_log.clone().into_bytes()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, sections.len() as u32);
        for (name, payload) in sections {
            put_str(&mut out, name);
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            if sections.insert(name.clone(), payload).is_some() {
                return Err(Error::Corrupt(format!("duplicate section `{name}`")));
            }
        }
        if !r.done() {
            return Err(Error::Corrupt("trailing bytes after last section".into()));
        }
        let section = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| Error::Corrupt(format!("missing section `{name}`")))
        };
        let text = |name: &str| -> Result<String> {
            String::from_utf8(section(name)?.to_vec()).map_err(|_| Error::Corrupt(format!("`{name}` is not UTF-8")))
        };

        let mut config = TrainConfig::default();
        let (mut num_classes, mut stage, mut epoch) = (None, None, None);
        for line in text("meta")?.lines() {
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Corrupt(format!("bad meta line `{line}`")))?;
            let bad = || Error::Corrupt(format!("bad meta value `{line}`"));
            match k {
                "num_classes" => num_classes = Some(v.parse().map_err(|_| bad())?),
                "epoch" => epoch = Some(v.parse().map_err(|_| bad())?),
                "stage" => {
                    stage = Some(match v {
                        "partition" => Stage::Partition,
                        "moe" => Stage::Moe,
                        _ => return Err(bad()),
                    })
                }
                _ => config.set(k, v).map_err(|e| Error::Corrupt(e.to_string()))?,
            }
        }
        config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let missing = |k: &str| Error::Corrupt(format!("meta lacks `{k}`"));

        let rng_bytes = section("rng")?;
        if rng_bytes.len() != 32 + 8 + 16 {
            return Err(Error::Corrupt("rng section has wrong length".into()));
        }
        let rng = RngState {
            seed: rng_bytes[..32].try_into().unwrap(),
            stream: u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()),
        };

        let partition = ParamSection {
            values: decode_records(section("partition")?)?,
            momentum: decode_records(section("partition.momentum")?)?,
        };
        let moe = match sections.contains_key("moe") {
            true => Some(ParamSection {
                values: decode_records(section("moe")?)?,
                momentum: decode_records(section("moe.momentum")?)?,
            }),
            false => None,
        };
        Ok(Self {
            config,
            num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
            stage: stage.ok_or_else(|| missing("stage"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            rng,
            partition,
            moe_log: if moe.is_some() { text("log.moe")? } else { String::new() },
            moe,
            partition_log: text("log.partition")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
