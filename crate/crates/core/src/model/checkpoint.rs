//! Checkpoint files.
//!
//! ```text
//! b"UQRM" | u32 len | DecoderConfig as JSON | u32 count |
//!     count × (u32 name_len | name (UTF-8) | u32 rows | u32 cols | rows*cols f64)
//! ```
//!
//! Integers and floats are little-endian.

use std::io::{Read, Write};

use super::{DecoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UQRM";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(mut w: impl Write, cfg: &DecoderConfig, params: &ModelParams) -> Result<()> {
    params.check_layout(cfg)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    let json = serde_json::to_vec(cfg)?;
    put_u32(&mut w, json.len())?;
    w.write_all(&json)?;
    put_u32(&mut w, params.len())?;
    for (name, m) in params.iter() {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, m.rows())?;
        put_u32(&mut w, m.cols())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(DecoderConfig, ModelParams)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = get_u32(&mut r)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let cfg: DecoderConfig = serde_json::from_slice(&json)?;
    let count = get_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = get_u32(&mut r)?;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let rows = get_u32(&mut r)?;
        let cols = get_u32(&mut r)?;
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Matrix::from_vec(rows, cols, data)));
    }
    let params = ModelParams::from_entries(entries);
    params.check_layout(&cfg)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecKind, CodecSpec};

    #[test]
    fn roundtrip_is_exact() {
        let cfg = DecoderConfig {
            mask_hidden: 16,
            box_hidden: 8,
            codec: CodecSpec::new(CodecKind::Dct, 8, 10),
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &p).unwrap();
        assert_eq!(&buf[..4], b"UQRM");
        let (c2, p2) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &c2, &p2).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_garbage_and_mismatch() {
        assert!(read_checkpoint(&b"NOPE0000"[..]).is_err());
        let cfg = DecoderConfig {
            mask_hidden: 4,
            box_hidden: 4,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let other = DecoderConfig { classes: 5, ..cfg };
        assert!(write_checkpoint(Vec::new(), &other, &p).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &p).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
