//! Parameter checkpoints: one file of named tensors. Little-endian
//! throughout: magic `RRNT`, format version, tensor count, then a
//! `(name, rows, cols)` table followed by the row-major 64-bit payloads in
//! table order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"RRNT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let named = params.named();
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in &named {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rows() as u64).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u64).to_le_bytes())?;
    }
    for (_, tensor) in &named {
        for v in tensor.value().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into existing parameters. The parameter set must match
/// the file's name/shape table exactly; mismatches report the offending
/// tensor by name.
pub fn load_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: String| ModelError::Checkpoint(msg);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(bad(format!("implausible tensor name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        table.push((name, rows, cols));
    }

    let named = params.named();
    if named.len() != table.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, model expects {}",
            table.len(),
            named.len()
        )));
    }
    for ((name, tensor), (fname, rows, cols)) in named.iter().zip(&table) {
        if name != fname {
            return Err(bad(format!("expected tensor {name:?}, found {fname:?}")));
        }
        if tensor.rows() != *rows || tensor.cols() != *cols {
            return Err(bad(format!(
                "tensor {name:?}: checkpoint shape {rows}x{cols} does not match model {}x{}",
                tensor.rows(),
                tensor.cols()
            )));
        }
    }
    for ((name, tensor), (_, rows, cols)) in named.iter().zip(&table) {
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("tensor {name:?}: payload truncated")))?;
            *v = f64::from_le_bytes(buf);
        }
        tensor.set_data(data);
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
