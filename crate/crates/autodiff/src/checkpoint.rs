//! Flat binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes   b"CPRLCKPT"
//! version  u32       1
//! count    u32       number of records
//! record   repeated `count` times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   ndim     u32
//!   dims     ndim × u64
//!   values   product(dims) × f64, row-major
//! ```
//!
//! Records keep the order in which they were written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPRLCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, records: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(
        &u32::try_from(records.len())
            .map_err(too_large)?
            .to_le_bytes(),
    )?;
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        out.write_all(&u32::try_from(bytes.len()).map_err(too_large)?.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(
            &u32::try_from(tensor.ndim())
                .map_err(too_large)?
                .to_le_bytes(),
        )?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut input)? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("record name is not UTF-8".into()))?;
        let ndim = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(truncated)?;
            shape.push(usize::try_from(u64::from_le_bytes(buf)).map_err(too_large)?);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf).map_err(truncated)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(AutodiffError::Checkpoint(
            "trailing bytes after last record".into(),
        ));
    }
    Ok(records)
}

pub fn save(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(_: std::io::Error) -> AutodiffError {
    AutodiffError::Checkpoint("unexpected end of file".into())
}

fn too_large<E>(_: E) -> AutodiffError {
    AutodiffError::Checkpoint("size does not fit the format".into())
}
