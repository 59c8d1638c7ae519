//! Flat binary checkpoint format.
//!
//! ```text
//! "FDCL1"
//! repeated until EOF:
//!     u32 LE   name length
//!     bytes    UTF-8 name
//!     u32 LE   rank
//!     u32 LE   dims[rank]
//!     f32 LE   payload[prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FDCL1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a checkpoint stream. `what` names the source in error messages.
pub fn read_checkpoint<R: Read>(mut r: R, what: &Path) -> Result<ParamSet> {
    let bad = |msg: String| Error::Checkpoint {
        path: what.to_path_buf(),
        msg,
    };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("reading magic: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut params = ParamSet::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let truncated = |e: std::io::Error| bad(format!("truncated record: {e}"));
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r).map_err(truncated)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r).map_err(truncated)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        params.push(name, t);
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), params)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f), path)
}
