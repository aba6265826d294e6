//! Binary parameter files: magic, version, a caller-supplied JSON header, then
//! per-parameter name, shape, values and Adam moments, all little-endian.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::params::Param;
use crate::{AdError, DenseArray, ParamStore};

const MAGIC: &[u8; 8] = b"SSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn r_bytes(r: &mut impl Read, n: usize, limit: usize) -> Result<Vec<u8>, AdError> {
    if n > limit {
        return Err(AdError::Checkpoint(format!("field length {n} exceeds {limit}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint(w: &mut impl Write, header: &str, store: &ParamStore) -> Result<(), AdError> {
    w.write_all(MAGIC)?;
    w_u32(w, FORMAT_VERSION)?;
    w_u64(w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    w_u64(w, store.step)?;
    w_u64(w, store.len() as u64)?;
    for (_, p) in store.iter() {
        w_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w_u32(w, shape.len() as u32)?;
        for d in shape {
            w_u64(w, *d as u64)?;
        }
        w_f64s(w, p.value.data())?;
        w_f64s(w, p.m.data())?;
        w_f64s(w, p.v.data())?;
    }
    Ok(())
}

/// Returns the header text and the stored parameters.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, ParamStore), AdError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AdError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(AdError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r_u64(r)? as usize;
    let header = String::from_utf8(r_bytes(r, hlen, 1 << 30)?).map_err(|_| AdError::Checkpoint("header is not UTF-8".into()))?;
    let mut store = ParamStore::new();
    store.step = r_u64(r)?;
    let n = r_u64(r)?;
    for _ in 0..n {
        let nlen = r_u32(r)? as usize;
        let name = String::from_utf8(r_bytes(r, nlen, 1 << 16)?).map_err(|_| AdError::Checkpoint("bad parameter name".into()))?;
        let ndim = r_u32(r)? as usize;
        if ndim > 8 {
            return Err(AdError::Checkpoint(format!("{name}: {ndim} dimensions")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r_u64(r).map(|d| d as usize)).collect::<Result<_, _>>()?;
        let size = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).filter(|s| *s <= 1 << 32);
        let size = size.ok_or_else(|| AdError::Checkpoint(format!("{name}: implausible shape {shape:?}")))?;
        let value = DenseArray::new(&shape, r_f64s(r, size)?)?;
        let m = DenseArray::new(&shape, r_f64s(r, size)?)?;
        let v = DenseArray::new(&shape, r_f64s(r, size)?)?;
        if store.id(&name).is_some() {
            return Err(AdError::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.push_raw(Param { name, value: Arc::new(value), m, v });
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_glorot("a.w", &[3, 4], &mut rng);
        s.add_filled("a.b", &[1, 4], 0.5);
        s.step = 17;
        s.get_mut(crate::ParamId(0)).m.data_mut()[2] = 0.25;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"x\":1}", &s).unwrap();
        let (h, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(h, "{\"x\":1}");
        assert_eq!(back.step, 17);
        s.check_compatible(&back).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&mut &b"garbage!garbage!"[..]).is_err());
    }
}
