//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic      8 bytes  "RTRNET01"
//! spec       4 x u32  in_channels, hidden_channels, hidden_layers, classes
//! count      u32      number of parameter tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims as u64 each
//!   data     row-major f64 little-endian
//! ```

use super::{LayerSpec, ModelParams, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RTRNET01";

pub fn write_to(params: &ModelParams, mut w: impl Write) -> Result<()> {
    let spec = params.spec();
    w.write_all(MAGIC)?;
    for v in [spec.in_channels, spec.hidden_channels, spec.hidden_layers, spec.classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from(mut r: impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
    }
    let spec = LayerSpec {
        in_channels: read_u32(&mut r)? as usize,
        hidden_channels: read_u32(&mut r)? as usize,
        hidden_layers: read_u32(&mut r)? as usize,
        classes: read_u32(&mut r)? as usize,
    };
    let expected = spec.param_shapes();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Parse(format!(
            "checkpoint holds {count} tensors, spec needs {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let len = read_u32(&mut r)? as usize;
        if len > 1024 {
            return Err(Error::Parse("parameter name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Parse(format!("expected tensor {want_name}, found {name}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != want_shape {
            return Err(Error::Parse(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    ModelParams::from_tensors(spec, tensors)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_to(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = std::fs::File::open(path)?;
    read_from(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(LayerSpec::micro(3, 4), 5).unwrap();
        let mut buf = Vec::new();
        write_to(&p, &mut buf).unwrap();
        let q = read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.param_count(), q.param_count());
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init(LayerSpec::micro(1, 2), 5).unwrap();
        let mut buf = Vec::new();
        write_to(&p, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(bad.as_slice()), Err(Error::Parse(_))));
        assert!(read_from(&buf[..buf.len() - 3]).is_err());
    }
}
