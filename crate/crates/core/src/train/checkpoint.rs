//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `SPOS`, `u32` format version, `u64`
//! iteration, RNG state (`[u8; 32]` seed, `u64` stream, `u128` word
//! position), `u32` tensor count, then per tensor: `u32` name length, UTF-8
//! name, `u32` rank, `u64` per dimension, `u64` element count and the `f32`
//! values.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::engine::{OptState, ParamId};
use crate::error::{bail, Error, Result};
use crate::space::Supernet;

pub const MAGIC: &[u8; 4] = b"SPOS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of weights, PACT levels, BN statistics and, when given,
    /// optimizer velocities.
    pub fn capture(net: &Supernet, opt: Option<&OptState>, iteration: u64, rng: &ChaCha8Rng) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in net.store.params.iter() {
            tensors.push(NamedTensor {
                name: format!("param/{}", p.name),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
        for (_, name, s) in net.store.stats.iter() {
            tensors.push(NamedTensor {
                name: format!("bn_mean/{name}"),
                shape: vec![s.mean.len()],
                data: s.mean.clone(),
            });
            tensors.push(NamedTensor {
                name: format!("bn_var/{name}"),
                shape: vec![s.var.len()],
                data: s.var.clone(),
            });
        }
        if let Some(opt) = opt {
            for ((_, p), v) in net.store.params.iter().zip(opt.velocities()) {
                tensors.push(NamedTensor {
                    name: format!("velocity/{}", p.name),
                    shape: p.value.shape().to_vec(),
                    data: v.clone(),
                });
            }
        }
        Self {
            iteration,
            rng: RngState::capture(rng),
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let t = self.find(name)?;
        if t.shape != shape {
            bail!(Checkpoint, "tensor {name} has shape {:?}, expected {:?}", t.shape, shape);
        }
        Ok(&t.data)
    }

    /// Loads weights and BN statistics into `net` (and velocities into `opt`
    /// when given). Every tensor is validated before anything is written.
    pub fn restore(&self, net: &mut Supernet, opt: Option<&mut OptState>) -> Result<()> {
        let mut params = Vec::new();
        for (id, p) in net.store.params.iter() {
            params.push((id, self.take(&format!("param/{}", p.name), p.value.shape())?.to_vec()));
        }
        let mut stats = Vec::new();
        for (id, name, s) in net.store.stats.iter() {
            let mean = self.take(&format!("bn_mean/{name}"), &[s.mean.len()])?.to_vec();
            let var = self.take(&format!("bn_var/{name}"), &[s.var.len()])?.to_vec();
            stats.push((id, mean, var));
        }
        let mut vel = Vec::new();
        if opt.is_some() {
            for (id, p) in net.store.params.iter() {
                vel.push((id, self.take(&format!("velocity/{}", p.name), p.value.shape())?.to_vec()));
            }
        }
        let expected = params.len() + 2 * stats.len() + vel.len();
        if opt.is_some() && self.tensors.len() != expected {
            bail!(Checkpoint, "checkpoint holds {} tensors, network needs {expected}", self.tensors.len());
        }
        for (id, data) in params {
            net.store.params.get_mut(id).data_mut().copy_from_slice(&data);
        }
        for (id, mean, var) in stats {
            let s = net.store.stats.get_mut(id);
            s.mean = mean;
            s.var = var;
        }
        if let Some(opt) = opt {
            for (id, v) in vel {
                opt.set_velocity(ParamId(id.0), v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Checkpoint, "not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            bail!(Checkpoint, "unsupported format version {version}");
        }
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = r.u64()? as usize;
            if shape.iter().product::<usize>() != numel {
                bail!(Checkpoint, "tensor {name}: shape {shape:?} disagrees with {numel} elements");
            }
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            bail!(Checkpoint, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(Self {
            iteration,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Checkpoint, "truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SgdConfig;
    use crate::space::SupernetSpec;
    use rand::RngCore;

    #[test]
    fn round_trip_bytes_and_state() {
        let net = Supernet::build(&SupernetSpec::desk(), 1).unwrap();
        let opt = OptState::new(SgdConfig::default(), &net.store.params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let ck = Checkpoint::capture(&net, Some(&opt), 17, &rng);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut r2 = back.rng.restore();
        assert_eq!(r2.next_u64(), rng.next_u64());

        let mut other = Supernet::build(&SupernetSpec::desk(), 2).unwrap();
        let mut opt2 = OptState::new(SgdConfig::default(), &other.store.params).unwrap();
        back.restore(&mut other, Some(&mut opt2)).unwrap();
        for ((_, a), (_, b)) in net.store.params.iter().zip(other.store.params.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(net.store.stats, other.store.stats);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let net = Supernet::build(&SupernetSpec::desk(), 1).unwrap();
        let bytes = Checkpoint::capture(&net, None, 0, &ChaCha8Rng::seed_from_u64(0)).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Supernet::build(&SupernetSpec::desk(), 1).unwrap();
        let ck = Checkpoint::capture(&net, None, 0, &ChaCha8Rng::seed_from_u64(0));
        let mut other = Supernet::build(&SupernetSpec::desk_joint(vec![1.0, 2.0]), 1).unwrap();
        assert!(matches!(ck.restore(&mut other, None), Err(Error::Checkpoint(_))));
    }
}
