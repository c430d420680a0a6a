//! Binary checkpoint format.
//!
//! ```text
//! "EVIP" | version: u32 | count: u32
//! per parameter: name_len: u16 | name: UTF-8 | rank: u8 | dims: u32 * rank | data: f64 * numel
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVIP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"EVIP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter name is not UTF-8")]
    Utf8,
    #[error("parameter name longer than {} bytes", u16::MAX)]
    NameTooLong,
    #[error("parameter {name} has rank {rank}, at most 255 supported")]
    RankTooLarge { name: String, rank: usize },
}

pub fn write<W: Write>(store: &ParamStore, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(p.value.rank()).map_err(|_| CheckpointError::RankTooLarge {
            name: p.name.clone(),
            rank: p.value.rank(),
        })?;
        w.write_all(&[rank])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint. Every parameter comes back trainable.
pub fn read<R: Read>(mut r: R) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Utf8)?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut fb = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut fb)?;
            data.push(f64::from_le_bytes(fb));
        }
        let t = Tensor::new(shape, data).expect("numel matches shape");
        store.add(name, t);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    write(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore, CheckpointError> {
    read(BufReader::new(File::open(path)?))
}
