//! Binary parameter container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "RELGEN1"                       7-byte magic
//! header_len, header_json         JSON metadata; the model writes {step, config, phrases}
//! n_records
//! n_records × { name_len, name, rank, extents[rank], values: f32 × prod(extents) }
//! ```

use std::io::{Read, Write};

use super::graph::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"RELGEN1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} overflows u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<F: Real>(
    w: &mut impl Write,
    header: &serde_json::Value,
    params: &ParamStore<F>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(header)?;
    put_u32(w, header.len())?;
    w.write_all(&header)?;
    put_u32(w, params.len())?;
    for (name, t) in params.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &e in t.shape() {
            put_u32(w, e)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = get_u32(r)?;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = serde_json::from_slice(&hbuf)?;
    let n = get_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = get_u32(r)?;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name =
            String::from_utf8(nb).map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &serde_json::json!({}), &p).unwrap();
        let mut expected = b"RELGEN1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"a");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);

        let (h, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(h, serde_json::json!({}));
        assert_eq!(back, p);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOTMAGIC0000".to_vec();
        assert!(matches!(
            read_checkpoint(&mut buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }
}
