//! STUN checkpoints: named f32 tensors sorted by name, then the run config.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, put_str, put_u32, Reader};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STUN_MAGIC: &[u8; 4] = b"STUN";
pub const STUN_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: String,
}

impl Checkpoint {
    pub fn from_params(ps: &ParamStore<f32>, config: String) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            ps.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Self { tensors, config }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sorted: Vec<&(String, Tensor<f32>)> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Usage(format!("duplicate tensor name {}", w[0].0)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(STUN_MAGIC);
        put_u32(&mut out, STUN_VERSION);
        put_u32(&mut out, sorted.len() as u32);
        for (name, t) in sorted {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        put_str(&mut out, &self.config);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "STUN");
        r.magic(STUN_MAGIC)?;
        let at = r.pos();
        let version = r.u32()?;
        if version != STUN_VERSION {
            return Err(Error::format(at, format!("unsupported STUN version {version}")));
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos();
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::format(at, format!("duplicate tensor name {name}")));
            }
            let at = r.pos();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format(at, format!("{name}: rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let at = r.pos();
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| d > 0 && n <= r.remaining() / 4)
                    .ok_or_else(|| Error::format(at, format!("{name}: dimension {d} overflows the file")))?;
                shape.push(d);
            }
            let data = r.f32s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let config = r.string()?;
        r.finish()?;
        Ok(Self { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("stun.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy every tensor into `ps`, matching by name and shape.
    pub fn restore(&self, ps: &mut ParamStore<f32>) -> Result<()> {
        ps.load_from(&self.tensors)
    }
}
