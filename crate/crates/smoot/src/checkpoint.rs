//! Model checkpoints: magic "SMOT", version, then named f32 tensors
//! (name length + UTF-8 name, rank, dims, little-endian data).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SMOT";
pub const VERSION: u32 = 1;

pub fn save<T: Element, P: AsRef<Path>>(path: P, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "checkpoint: bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: version {version} unsupported (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut input)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint: non-utf8 tensor name".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let len = shape.iter().product::<usize>();
        let mut bytes = vec![0u8; len * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(tensors)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
