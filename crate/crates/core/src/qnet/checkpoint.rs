//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SQLCKPT" | u32 version | u32 len + config text (UTF-8) | u64 step
//! u32 param-set count, each: name, u32 tensor count, each tensor:
//!     name, u32 rank, u32 dims.., f32 data..
//! u32 optimizer count, each: name, u64 t, f64 beta1, f64 beta2, f64 eps
//!     (moment tensors live in param sets named "<name>.m" / "<name>.v")
//! u32 rng count, each: name, 32-byte seed, u64 stream, u128 word position
//! ```
//!
//! Names are `u32 len + UTF-8 bytes`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamState, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SQLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume a stream of random draws exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: BTreeMap<String, ParamSet<f32>>,
    pub optimizers: BTreeMap<String, AdamState>,
    pub rngs: BTreeMap<String, RngState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        put_str(&mut w, &self.config_text);
        w.extend_from_slice(&self.step.to_le_bytes());

        let mut sets: Vec<(String, &ParamSet<f32>)> =
            self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (name, adam) in &self.optimizers {
            sets.push((format!("{name}.m"), &adam.m));
            sets.push((format!("{name}.v"), &adam.v));
        }
        put_u32(&mut w, sets.len() as u32);
        for (name, set) in sets {
            put_str(&mut w, &name);
            put_u32(&mut w, set.len() as u32);
            for (tname, t) in set.iter() {
                put_str(&mut w, tname);
                put_u32(&mut w, t.shape().len() as u32);
                for &d in t.shape() {
                    put_u32(&mut w, d as u32);
                }
                for &x in t.data() {
                    w.extend_from_slice(&x.to_le_bytes());
                }
            }
        }

        put_u32(&mut w, self.optimizers.len() as u32);
        for (name, adam) in &self.optimizers {
            put_str(&mut w, name);
            w.extend_from_slice(&adam.t.to_le_bytes());
            for h in [adam.beta1, adam.beta2, adam.eps] {
                w.extend_from_slice(&h.to_le_bytes());
            }
        }

        put_u32(&mut w, self.rngs.len() as u32);
        for (name, r) in &self.rngs {
            put_str(&mut w, name);
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(7)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.string()?;
        let step = r.u64()?;

        let mut sets = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut set = ParamSet::new();
            for _ in 0..r.u32()? {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank.min(8));
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| r.err("tensor size overflows"))?;
                let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                set.insert(tname, Tensor::new(shape, data)?)
                    .map_err(|e| r.err(&e.to_string()))?;
            }
            if sets.insert(name.clone(), set).is_some() {
                return Err(r.err(&format!("duplicate parameter set `{name}`")));
            }
        }

        let mut optimizers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let t = r.u64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let m = sets
                .remove(&format!("{name}.m"))
                .ok_or_else(|| r.err(&format!("optimizer `{name}` missing first moments")))?;
            let v = sets
                .remove(&format!("{name}.v"))
                .ok_or_else(|| r.err(&format!("optimizer `{name}` missing second moments")))?;
            optimizers.insert(
                name,
                AdamState {
                    m,
                    v,
                    t,
                    beta1,
                    beta2,
                    eps,
                },
            );
        }

        let mut rngs = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.insert(
                name,
                RngState {
                    seed,
                    stream,
                    word_pos,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config_text,
            step,
            params: sets,
            optimizers,
            rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn take_params(&mut self, name: &str) -> Result<ParamSet<f32>> {
        self.params
            .remove(name)
            .ok_or_else(|| Error::InvalidState(format!("checkpoint has no `{name}` parameters")))
    }

    pub fn take_optimizer(&mut self, name: &str) -> Result<AdamState> {
        self.optimizers
            .remove(name)
            .ok_or_else(|| Error::InvalidState(format!("checkpoint has no `{name}` optimizer")))
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(&format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let pos = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: pos as u64,
            msg: "name is not UTF-8".into(),
        })
    }
}
