//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"IFFCKPT\0"
//! version u32
//! config  iterations u32, slope f64, pad u8, enforce_contraction u8
//! meta    seed u64, epochs u32, final_loss f64
//! count   u32
//! record  name_len u32, name bytes, rank u32, dims u64 × rank, data f64 × len
//! ```

use std::path::Path;

use iff_core::iff::IffConfig;
use iff_core::tensor::{PaddingMode, Tensor};
use iff_core::toydet::DetectorModel;
use iff_core::traingraph::ModelParams;
use iff_core::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IFFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: IffConfig,
    pub seed: u64,
    pub epochs: u32,
    pub final_loss: f64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DetectorModel> {
        DetectorModel::from_params(self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.iterations as u32).to_le_bytes());
        out.extend_from_slice(&self.config.slope.to_le_bytes());
        out.push(match self.config.pad {
            PaddingMode::Zero => 0,
            PaddingMode::Circular => 1,
        });
        out.push(self.config.enforce_contraction as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.final_loss.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let iterations = r.u32()? as usize;
        let slope = r.f64()?;
        let pad = match r.u8()? {
            0 => PaddingMode::Zero,
            1 => PaddingMode::Circular,
            p => return Err(Error::Format(format!("unknown padding tag {p}"))),
        };
        let enforce_contraction = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad flag byte {b}"))),
        };
        let config = IffConfig {
            iterations,
            slope,
            pad,
            enforce_contraction,
        };
        config.validate()?;
        let seed = r.u64()?;
        let epochs = r.u32()?;
        let final_loss = r.f64()?;
        let count = r.u32()?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Format(format!("bad rank {rank} for {name}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= r.remaining() / 8).ok_or_else(|| {
                Error::Format(format!("tensor {name} is larger than the file"))
            })?;
            let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            seed,
            epochs,
            final_loss,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
