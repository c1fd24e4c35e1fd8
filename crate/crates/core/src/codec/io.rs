//! Basis persistence and mask-vector CSV batches.
//!
//! Basis file layout (all little-endian):
//!
//! ```text
//! b"UQRB" | kind: u8 | N: u32 | n_k: u32 | rows: u32 | cols: u32 | rows*cols f64 (row-major)
//! ```
//!
//! `kind` is 0 DCT, 1 PCA, 2 Sparse, 3 Flatten. The persisted matrix is the DCT
//! transform `A` (N×N), the PCA projection `P` (N²×n_k), the dictionary `D`
//! (n_k×N²) or nothing for Flatten. A centered PCA basis appends its mean as one
//! extra `1 × N²` block after the projection.

use std::io::{BufRead, Read, Write};

use crate::codec::{Codec, CodecKind, CodecSpec, Dictionary, MaskVector, PcaBasis};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const BASIS_MAGIC: &[u8; 4] = b"UQRB";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    write_u32(w, m.rows())?;
    write_u32(w, m.cols())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_basis(codec: &Codec, mut w: impl Write) -> Result<()> {
    w.write_all(BASIS_MAGIC)?;
    w.write_all(&[codec.kind().tag()])?;
    write_u32(&mut w, codec.side())?;
    write_u32(&mut w, codec.nk())?;
    write_matrix(&mut w, &codec.basis_matrix())?;
    if let Some(mean) = codec.pca_basis().and_then(PcaBasis::mean) {
        write_matrix(&mut w, &Matrix::from_vec(1, mean.len(), mean.to_vec()))?;
    }
    Ok(())
}

/// Restores a codec; `spec` supplies the settings the header does not carry
/// (β, solver settings, scan order) and must agree with the header.
pub fn read_basis(spec: CodecSpec, mut r: impl Read) -> Result<Codec> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BASIS_MAGIC {
        return Err(Error::Format("not a basis file (bad magic)".into()));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let kind = CodecKind::from_tag(kind[0])?;
    let side = read_u32(&mut r)?;
    let nk = read_u32(&mut r)?;
    if kind != spec.kind || side != spec.side || nk != spec.nk {
        return Err(Error::InvalidArgument(format!(
            "basis header ({kind}, N={side}, n_k={nk}) does not match spec ({}, N={}, n_k={})",
            spec.kind, spec.side, spec.nk
        )));
    }
    let m = read_matrix(&mut r)?;
    match kind {
        CodecKind::Dct => {
            let codec = Codec::analytic(spec)?;
            let analytic = codec.basis_matrix();
            if m.shape() != analytic.shape() || m.max_abs_diff(&analytic) > 1e-12 {
                return Err(Error::Format("persisted DCT matrix does not match the analytic basis".into()));
            }
            Ok(codec)
        }
        CodecKind::Pca => {
            let mean = if spec.params.pca_center {
                Some(read_matrix(&mut r)?.into_vec())
            } else {
                None
            };
            Codec::from_pca(spec, PcaBasis::from_parts(side, m, mean)?)
        }
        CodecKind::Sparse => Codec::from_dictionary(spec, Dictionary::new(side, m, spec.params.beta)?),
        CodecKind::Flatten => Codec::analytic(spec),
    }
}

/// One row per instance: `id, c0, c1, ...` with a header line.
pub fn write_vectors_csv<'a>(
    mut w: impl Write,
    rows: impl IntoIterator<Item = (u64, &'a MaskVector)>,
) -> Result<()> {
    let mut header_written = false;
    for (id, v) in rows {
        if !header_written {
            write!(w, "id")?;
            for i in 0..v.len() {
                write!(w, ",c{i}")?;
            }
            writeln!(w)?;
            header_written = true;
        }
        write!(w, "{id}")?;
        for c in v.coeffs() {
            write!(w, ",{c:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_vectors_csv(r: impl BufRead, spec: CodecSpec) -> Result<Vec<(u64, MaskVector)>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("line {}: bad id", lineno + 1)))?;
        let coeffs = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push((id, MaskVector::new(coeffs, spec)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::SoftMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn train(side: usize) -> Vec<SoftMask> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..20)
            .map(|_| SoftMask::from_fn(side, side, |_, _| rng.random_bool(0.5) as u8 as f64))
            .collect()
    }

    #[test]
    fn basis_roundtrip_each_kind() {
        let side = 4;
        let mut centered = CodecSpec::new(CodecKind::Pca, side, 3);
        centered.params.pca_center = true;
        for spec in [
            CodecSpec::new(CodecKind::Dct, side, 5),
            CodecSpec::new(CodecKind::Pca, side, 3),
            centered,
            CodecSpec::new(CodecKind::Sparse, side, 3),
            CodecSpec::flatten(side),
        ] {
            let codec = Codec::fit(spec, &train(side)).unwrap();
            let mut buf = Vec::new();
            write_basis(&codec, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"UQRB");
            assert_eq!(buf[4], spec.kind.tag());
            assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), side as u32);
            let back = read_basis(spec, &buf[..]).unwrap();
            assert_eq!(back.basis_matrix(), codec.basis_matrix());
            let m = &train(side)[3];
            assert_eq!(
                back.encode(m).unwrap().coeffs(),
                codec.encode(m).unwrap().coeffs()
            );
        }
    }

    #[test]
    fn header_mismatch_and_bad_magic() {
        let codec = Codec::analytic(CodecSpec::new(CodecKind::Dct, 4, 5)).unwrap();
        let mut buf = Vec::new();
        write_basis(&codec, &mut buf).unwrap();
        assert!(read_basis(CodecSpec::new(CodecKind::Dct, 4, 6), &buf[..]).is_err());
        buf[0] = b'X';
        assert!(read_basis(CodecSpec::new(CodecKind::Dct, 4, 5), &buf[..]).is_err());
    }

    #[test]
    fn vector_csv_roundtrip() {
        let spec = CodecSpec::new(CodecKind::Dct, 4, 3);
        let a = MaskVector::new(vec![1.0, -0.1, 1e-17], spec).unwrap();
        let b = MaskVector::new(vec![0.0, 2.5, 3.0], spec).unwrap();
        let mut buf = Vec::new();
        write_vectors_csv(&mut buf, [(7, &a), (9, &b)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,c0,c1,c2\n7,"));
        let back = read_vectors_csv(&buf[..], spec).unwrap();
        assert_eq!(back, vec![(7, a), (9, b)]);
    }
}
