//! Orthonormal 2-D DCT-II with low-frequency coefficient sampling.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::SoftMask;

/// Order in which low-frequency coefficients are sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanOrder {
    /// JPEG-style diagonal scan from `(0,0)`, first step to `(0,1)`.
    #[default]
    ZigZag,
    /// Growing square blocks: `k²` coefficients form the top-left `k × k` block.
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    side: usize,
    transform: Matrix,
    scan: Vec<(usize, usize)>,
}

/// `A[h][l] = sqrt((1 + sign(h)) / N) · cos((l + 0.5) · π · h / N)`.
pub fn dct_matrix(side: usize) -> Matrix {
    assert!(side >= 2, "DCT side must be >= 2");
    let n = side as f64;
    Matrix::from_fn(side, side, |h, l| {
        let scale = if h == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * ((l as f64 + 0.5) * PI * h as f64 / n).cos()
    })
}

/// Full zig-zag scan of an `side × side` grid as `(row, col)` pairs.
fn zigzag_scan(side: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(side * side);
    for s in 0..(2 * side - 1) {
        let lo = s.saturating_sub(side - 1);
        let hi = s.min(side - 1);
        if s % 2 == 0 {
            // moving up-right: row decreases
            for r in (lo..=hi).rev() {
                out.push((r, s - r));
            }
        } else {
            for r in lo..=hi {
                out.push((r, s - r));
            }
        }
    }
    out
}

fn block_scan(side: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<(usize, usize)> = (0..side)
        .flat_map(|r| (0..side).map(move |c| (r, c)))
        .collect();
    idx.sort_by_key(|&(r, c)| (r.max(c), r, c));
    idx
}

fn scan(side: usize, order: ScanOrder) -> Vec<(usize, usize)> {
    match order {
        ScanOrder::ZigZag => zigzag_scan(side),
        ScanOrder::Block => block_scan(side),
    }
}

/// First `nk` positions of the zig-zag scan.
pub fn zigzag_indices(side: usize, nk: usize) -> Result<Vec<(usize, usize)>> {
    if nk == 0 || nk > side * side {
        return Err(Error::InvalidArgument(format!(
            "n_k must be in [1, {}], got {nk}",
            side * side
        )));
    }
    let mut z = zigzag_scan(side);
    z.truncate(nk);
    Ok(z)
}

impl DctBasis {
    pub fn new(side: usize, order: ScanOrder) -> Self {
        Self {
            side,
            transform: dct_matrix(side),
            scan: scan(side, order),
        }
    }

    pub fn from_transform(transform: Matrix, order: ScanOrder) -> Result<Self> {
        if transform.rows() != transform.cols() || transform.rows() < 2 {
            return Err(Error::Format(format!("bad DCT matrix shape {:?}", transform.shape())));
        }
        let side = transform.rows();
        Ok(Self {
            side,
            transform,
            scan: scan(side, order),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn transform(&self) -> &Matrix {
        &self.transform
    }

    pub fn scan(&self) -> &[(usize, usize)] {
        &self.scan
    }

    fn check(&self, m: &SoftMask) -> Result<()> {
        if m.width() != self.side || m.height() != self.side {
            return Err(Error::dims(
                format!("{0}x{0}", self.side),
                format!("{}x{}", m.width(), m.height()),
            ));
        }
        Ok(())
    }

    /// Full coefficient grid `f = A·m·Aᵀ`.
    pub fn forward(&self, m: &SoftMask) -> Result<Matrix> {
        self.check(m)?;
        let mm = Matrix::from_vec(self.side, self.side, m.values().to_vec());
        Ok(self.transform.matmul(&mm).matmul_nt(&self.transform))
    }

    /// `m = Aᵀ·f·A`.
    pub fn inverse(&self, f: &Matrix) -> SoftMask {
        let m = self.transform.matmul_tn(f).matmul(&self.transform);
        SoftMask::new(self.side, self.side, m.into_vec()).expect("finite inverse DCT")
    }

    pub fn encode(&self, m: &SoftMask, nk: usize) -> Result<Vec<f64>> {
        if nk == 0 || nk > self.side * self.side {
            return Err(Error::InvalidArgument(format!("n_k {nk} out of range")));
        }
        let f = self.forward(m)?;
        Ok(self.scan[..nk].iter().map(|&(r, c)| f[(r, c)]).collect())
    }

    pub fn decode(&self, coeffs: &[f64]) -> Result<SoftMask> {
        if coeffs.is_empty() || coeffs.len() > self.side * self.side {
            return Err(Error::InvalidArgument(format!("n_k {} out of range", coeffs.len())));
        }
        let mut f = Matrix::zeros(self.side, self.side);
        for (&(r, c), &v) in self.scan.iter().zip(coeffs) {
            f[(r, c)] = v;
        }
        Ok(self.inverse(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{binarize, mask_iou, BinaryMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook O(N⁴) 2-D DCT-II, independent of the matrix route.
    fn brute_dct(m: &SoftMask) -> Vec<Vec<f64>> {
        let n = m.width();
        let nf = n as f64;
        let alpha = |k: usize| if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        let mut out = vec![vec![0.0; n]; n];
        for (u, row) in out.iter_mut().enumerate() {
            for (v, cell) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for y in 0..n {
                    for x in 0..n {
                        s += m.get(x, y)
                            * ((2 * y + 1) as f64 * u as f64 * PI / (2.0 * nf)).cos()
                            * ((2 * x + 1) as f64 * v as f64 * PI / (2.0 * nf)).cos();
                    }
                }
                *cell = alpha(u) * alpha(v) * s;
            }
        }
        out
    }

    #[test]
    fn matrix_rows_and_small_case() {
        for n in [2, 5, 8] {
            let a = dct_matrix(n);
            for l in 0..n {
                assert!((a[(0, l)] - (1.0 / n as f64).sqrt()).abs() < 1e-15);
            }
        }
        let a = dct_matrix(2);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [[s, s], [s, -s]];
        for h in 0..2 {
            for l in 0..2 {
                assert!((a[(h, l)] - expect[h][l]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn matrix_is_orthonormal() {
        for n in [2, 4, 8, 128] {
            let a = dct_matrix(n);
            let g = a.matmul_nt(&a);
            assert!(g.max_abs_diff(&Matrix::identity(n)) < 1e-10, "N={n}");
        }
    }

    #[test]
    fn zigzag_fixtures() {
        assert_eq!(zigzag_indices(4, 3).unwrap(), vec![(0, 0), (0, 1), (1, 0)]);
        assert_eq!(zigzag_indices(7, 1).unwrap(), vec![(0, 0)]);
        assert_eq!(
            zigzag_indices(2, 4).unwrap(),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(
            zigzag_indices(3, 9).unwrap(),
            vec![(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2)]
        );
        assert!(zigzag_indices(4, 0).is_err());
        assert!(zigzag_indices(4, 17).is_err());
    }

    #[test]
    fn zigzag_is_a_permutation() {
        for n in [2, 3, 6, 9] {
            let mut z = zigzag_indices(n, n * n).unwrap();
            z.sort();
            z.dedup();
            assert_eq!(z.len(), n * n);
        }
    }

    #[test]
    fn block_scan_forms_square_blocks() {
        let b = block_scan(5);
        let mut first9 = b[..9].to_vec();
        first9.sort();
        assert_eq!(first9, (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect::<Vec<_>>());
    }

    #[test]
    fn encode_constant_and_zero() {
        let n = 8;
        let basis = DctBasis::new(n, ScanOrder::ZigZag);
        let v = basis.encode(&SoftMask::filled(n, n, 1.0), 10).unwrap();
        assert!((v[0] - n as f64).abs() < 1e-12);
        assert!(v[1..].iter().all(|c| c.abs() < 1e-12));
        let z = basis.encode(&SoftMask::filled(n, n, 0.0), 10).unwrap();
        assert!(z.iter().all(|&c| c == 0.0));
        assert!(basis.decode(&z).unwrap().values().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn encode_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = BinaryMask::from_fn(4, 4, |_, _| rng.random_bool(0.5)).to_soft();
        let basis = DctBasis::new(4, ScanOrder::ZigZag);
        let coeffs = basis.encode(&m, 16).unwrap();
        let brute = brute_dct(&m);
        for (&(r, c), &v) in basis.scan().iter().zip(&coeffs) {
            assert!((brute[r][c] - v).abs() < 1e-10);
        }
    }

    #[test]
    fn full_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = SoftMask::from_fn(6, 6, |_, _| rng.random::<f64>());
        let basis = DctBasis::new(6, ScanOrder::ZigZag);
        let back = basis.decode(&basis.encode(&m, 36).unwrap()).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-9);
        assert!(basis.encode(&SoftMask::filled(5, 6, 0.0), 4).is_err());
    }

    #[test]
    fn disk_reconstruction_at_default_size() {
        let n = 128;
        let disk = BinaryMask::from_fn(n, n, |x, y| {
            let dx = x as f64 + 0.5 - 64.0;
            let dy = y as f64 + 0.5 - 64.0;
            dx * dx + dy * dy <= 40.0 * 40.0
        });
        let basis = DctBasis::new(n, ScanOrder::ZigZag);
        let rec = basis.decode(&basis.encode(&disk.to_soft(), 256).unwrap()).unwrap();
        let iou = mask_iou(&binarize(&rec, 0.5), &disk).unwrap();
        assert!(iou >= 0.95, "iou {iou}");
    }
}
