//! `ICNN1` checkpoint container.
//!
//! Layout, all integers little-endian:
//! `ICNN1`, then `u32` input channels, points, classes and epoch, a `u64`
//! length and the UTF-8 run configuration, a `u32` tensor count and per
//! tensor a `u32`-length name followed by the tensor blob, then the
//! optimizer step (`u64`), a `u32` slot count and per slot the first and
//! second moment blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::OptimState;
use crate::error::{bail, Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const MAGIC: &[u8; 5] = b"ICNN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub in_channels: usize,
    pub points: usize,
    pub classes: usize,
    pub epoch: usize,
    pub config: String,
    /// Parameters and running statistics by name.
    pub tensors: Vec<(String, Tensor)>,
    pub optim: Option<OptimState>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("text is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.in_channels, self.points, self.classes, self.epoch] {
            put_u32(w, v)?;
        }
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        put_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        let (step, slots) = match &self.optim {
            Some(o) => (o.step, o.m.len()),
            None => (0, 0),
        };
        w.write_all(&step.to_le_bytes())?;
        put_u32(w, slots)?;
        if let Some(o) = &self.optim {
            for (m, v) in o.m.iter().zip(&o.v) {
                Tensor::from_vec(m.clone()).write_to(w)?;
                Tensor::from_vec(v.clone()).write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
            bail!(Checkpoint, "bad magic");
        }
        let in_channels = read_u32(r)? as usize;
        let points = read_u32(r)? as usize;
        let classes = read_u32(r)? as usize;
        let epoch = read_u32(r)? as usize;
        let len = read_u64(r)? as usize;
        let config = read_string(r, len)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let name = read_string(r, n)?;
            tensors.push((name, Tensor::read_from(r)?));
        }
        let step = read_u64(r)?;
        let slots = read_u32(r)? as usize;
        let optim = if slots == 0 && step == 0 {
            None
        } else {
            let mut o = OptimState {
                step,
                m: Vec::with_capacity(slots),
                v: Vec::with_capacity(slots),
            };
            for _ in 0..slots {
                o.m.push(Tensor::read_from(r)?.into_values());
                o.v.push(Tensor::read_from(r)?.into_values());
            }
            Some(o)
        };
        Ok(Self {
            in_channels,
            points,
            classes,
            epoch,
            config,
            tensors,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
