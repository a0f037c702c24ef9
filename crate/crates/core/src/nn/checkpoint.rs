//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic   b"IDSN"
//!   u32     format version (1)
//!   u32     input_dim, num_actions, num_heads
//!   u8      dist tag: 0 none, 1 categorical, 2 quantile
//!   u32     dist outputs per action (0 when tag is 0)
//!   u32     trunk layer count, then that many u32 widths
//!   u32     head hidden layer count, then that many u32 widths
//!   u64     parameter count P
//!   P f64   online parameters
//!   P f64   target parameters
//!
//! Optimizer state and counters are not part of a checkpoint.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

use super::{DistKind, EnsembleNetwork, Layout, NetworkShape};

const MAGIC: &[u8; 4] = b"IDSN";
const VERSION: u32 = 1;

fn io_err(e: io::Error) -> CoreError {
    CoreError::Numerical(format!("checkpoint I/O: {e}"))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl EnsembleNetwork {
    /// Writes the shape header plus both parameter sets.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let mut inner = || -> io::Result<()> {
            w.write_all(MAGIC)?;
            write_u32(&mut w, VERSION)?;
            write_u32(&mut w, self.shape.input_dim as u32)?;
            write_u32(&mut w, self.shape.num_actions as u32)?;
            write_u32(&mut w, self.shape.num_heads as u32)?;
            let (tag, per_action) = match self.shape.dist {
                DistKind::None => (0u8, 0u32),
                DistKind::Categorical { atoms } => (1, atoms as u32),
                DistKind::Quantile { quantiles } => (2, quantiles as u32),
            };
            w.write_all(&[tag])?;
            write_u32(&mut w, per_action)?;
            write_u32(&mut w, self.shape.trunk_hidden.len() as u32)?;
            for &d in &self.shape.trunk_hidden {
                write_u32(&mut w, d as u32)?;
            }
            write_u32(&mut w, self.shape.head_hidden.len() as u32)?;
            for &d in &self.shape.head_hidden {
                write_u32(&mut w, d as u32)?;
            }
            w.write_all(&(self.params.len() as u64).to_le_bytes())?;
            for &p in &self.params {
                w.write_all(&p.to_le_bytes())?;
            }
            for &p in &self.target_params {
                w.write_all(&p.to_le_bytes())?;
            }
            w.flush()
        };
        inner().map_err(io_err)
    }

    /// Reads a checkpoint written by [`EnsembleNetwork::save`].
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CoreError::InvalidSpec("not a network checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(io_err)?;
        if version != VERSION {
            return Err(CoreError::InvalidSpec(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let input_dim = read_u32(&mut r).map_err(io_err)? as usize;
        let num_actions = read_u32(&mut r).map_err(io_err)? as usize;
        let num_heads = read_u32(&mut r).map_err(io_err)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io_err)?;
        let per_action = read_u32(&mut r).map_err(io_err)? as usize;
        let dist = match tag[0] {
            0 => DistKind::None,
            1 => DistKind::Categorical { atoms: per_action },
            2 => DistKind::Quantile { quantiles: per_action },
            t => return Err(CoreError::InvalidSpec(format!("unknown dist tag {t}"))),
        };
        let read_dims = |r: &mut BufReader<File>| -> io::Result<Vec<usize>> {
            let count = read_u32(r)? as usize;
            (0..count).map(|_| read_u32(r).map(|d| d as usize)).collect()
        };
        let trunk_hidden = read_dims(&mut r).map_err(io_err)?;
        let head_hidden = read_dims(&mut r).map_err(io_err)?;
        let shape =
            NetworkShape { input_dim, trunk_hidden, head_hidden, num_heads, num_actions, dist };
        shape.validate()?;
        let layout = Layout::new(&shape);
        let mut count_buf = [0u8; 8];
        r.read_exact(&mut count_buf).map_err(io_err)?;
        let count = u64::from_le_bytes(count_buf) as usize;
        if count != layout.len {
            return Err(CoreError::InvalidSpec(format!(
                "checkpoint has {count} parameters, shape wants {}",
                layout.len
            )));
        }
        let read_params = |r: &mut BufReader<File>| -> io::Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let params = read_params(&mut r).map_err(io_err)?;
        let target_params = read_params(&mut r).map_err(io_err)?;
        Ok(Self { shape, layout, params, target_params, sync_count: 0, generation: 0 })
    }
}
