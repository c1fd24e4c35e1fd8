//! Projection basis minimizing `Σ‖m − m·P·Pᵀ‖²` over orthonormal `P`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    side: usize,
    /// `N² × n_k`, orthonormal columns.
    projection: Matrix,
    mean: Option<Vec<f64>>,
    /// Number of columns that had to be filled by orthonormal completion.
    padded: usize,
}

impl PcaBasis {
    pub fn from_parts(side: usize, projection: Matrix, mean: Option<Vec<f64>>) -> Result<Self> {
        if projection.rows() != side * side {
            return Err(Error::dims(side * side, projection.rows()));
        }
        if let Some(m) = &mean {
            if m.len() != side * side {
                return Err(Error::dims(side * side, m.len()));
            }
        }
        Ok(Self {
            side,
            projection,
            mean,
            padded: 0,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn nk(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    /// True when the data had rank below `n_k` and the basis was completed.
    pub fn is_rank_deficient(&self) -> bool {
        self.padded > 0
    }

    pub fn padded_columns(&self) -> usize {
        self.padded
    }

    pub fn encode(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let d = self.side * self.side;
        if flat.len() != d {
            return Err(Error::dims(d, flat.len()));
        }
        let centered: Vec<f64> = match &self.mean {
            Some(mu) => flat.iter().zip(mu).map(|(a, b)| a - b).collect(),
            None => flat.to_vec(),
        };
        let row = Matrix::from_vec(1, d, centered);
        Ok(row.matmul(&self.projection).into_vec())
    }

    /// Encodes every row of `data` (one flattened mask per row).
    pub fn encode_rows(&self, data: &Matrix) -> Result<Matrix> {
        let d = self.side * self.side;
        if data.cols() != d {
            return Err(Error::dims(d, data.cols()));
        }
        Ok(match &self.mean {
            Some(mu) => Matrix::from_fn(data.rows(), d, |r, c| data[(r, c)] - mu[c]).matmul(&self.projection),
            None => data.matmul(&self.projection),
        })
    }

    /// Decodes every row of `coeffs`.
    pub fn decode_rows(&self, coeffs: &Matrix) -> Result<Matrix> {
        if coeffs.cols() != self.nk() {
            return Err(Error::dims(self.nk(), coeffs.cols()));
        }
        let mut out = coeffs.matmul_nt(&self.projection);
        if let Some(mu) = &self.mean {
            for r in 0..out.rows() {
                out.row_mut(r).iter_mut().zip(mu).for_each(|(o, m)| *o += m);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.nk() {
            return Err(Error::dims(self.nk(), coeffs.len()));
        }
        let v = Matrix::from_vec(1, coeffs.len(), coeffs.to_vec());
        let mut out = v.matmul_nt(&self.projection).into_vec();
        if let Some(mu) = &self.mean {
            out.iter_mut().zip(mu).for_each(|(o, m)| *o += m);
        }
        Ok(out)
    }
}

/// Two passes of modified Gram-Schmidt against the already accepted columns.
/// Returns `false` if `v` is (numerically) inside their span.
fn orthonormalize_against(cols: &[Vec<f64>], v: &mut [f64]) -> bool {
    let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm0 == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for c in cols {
            let dot: f64 = c.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-10 * norm0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Indices of the `k` largest values, largest first.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

/// Orthonormalizes the rows of `v` in order by two rounds of Cholesky QR. Row
/// `i` of the result depends only on rows `0..=i`, as with Gram-Schmidt.
/// `None` when the rows are too close to dependent for this to be accurate.
fn cholesky_qr_rows(v: &Matrix) -> Option<Matrix> {
    let k = v.rows();
    let mut q = v.clone();
    for _ in 0..2 {
        let g = q.matmul_nt(&q);
        let l = DMatrix::from_row_slice(k, k, g.as_slice()).cholesky()?.unpack();
        let linv = l.solve_lower_triangular(&DMatrix::identity(k, k))?;
        q = Matrix::from_fn(k, k, |r, c| linv[(r, c)]).matmul(&q);
    }
    let g = q.matmul_nt(&q);
    let err = (0..k)
        .flat_map(|r| (0..k).map(move |c| (r, c)))
        .map(|(r, c)| (g[(r, c)] - f64::from(u8::from(r == c))).abs())
        .fold(0.0, f64::max);
    (err < 1e-10).then_some(q)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best.abs() + 1e-15 {
            best = x;
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fits the top-`nk` right singular vectors of the (optionally centered) data matrix.
///
/// Each row of `data` is one flattened `side × side` mask.
pub fn pca_fit(data: &Matrix, side: usize, nk: usize, center: bool) -> Result<PcaBasis> {
    let d = side * side;
    if data.cols() != d {
        return Err(Error::dims(d, data.cols()));
    }
    if nk == 0 || nk > d {
        return Err(Error::InvalidArgument(format!("n_k {nk} out of range")));
    }
    let m = data.rows();
    if m < nk {
        return Err(Error::InsufficientSamples { needed: nk, got: m });
    }
    let mean = center.then(|| {
        let mut mu = vec![0.0; d];
        for r in 0..m {
            mu.iter_mut().zip(data.row(r)).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|a| *a /= m as f64);
        mu
    });
    let x = match &mean {
        Some(mu) => Matrix::from_fn(m, d, |r, c| data[(r, c)] - mu[c]),
        None => data.clone(),
    };

    // Right singular vectors from whichever Gram matrix is smaller.
    let (lambdas, rows): (Vec<f64>, Matrix) = if m <= d {
        let gram = x.matmul_nt(&x);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, gram.as_slice()));
        let order = top_indices(eig.eigenvalues.as_slice(), nk);
        let u = Matrix::from_fn(order.len(), m, |r, c| eig.eigenvectors[(c, order[r])]);
        (order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(), u.matmul(&x))
    } else {
        let cov = x.matmul_tn(&x);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
        let order = top_indices(eig.eigenvalues.as_slice(), nk);
        let v = Matrix::from_fn(order.len(), d, |r, c| eig.eigenvectors[(c, order[r])]);
        (order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(), v)
    };

    let top = lambdas.first().copied().unwrap_or(0.0);
    let live = lambdas.iter().take_while(|&&l| top > 0.0 && l > top * 1e-12).count();
    let rows = rows.slice_rows(0, live);
    let mut cols: Vec<Vec<f64>> = match cholesky_qr_rows(&rows) {
        Some(q) => (0..live).map(|r| q.row(r).to_vec()).collect(),
        None => {
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(nk);
            for r in 0..live {
                let mut v = rows.row(r).to_vec();
                if orthonormalize_against(&cols, &mut v) {
                    cols.push(v);
                }
            }
            cols
        }
    };
    cols.iter_mut().for_each(|c| fix_sign(c));
    let padded = nk - cols.len();
    if padded > 0 {
        log::warn!(
            "PCA data rank {} below n_k = {nk}; completing basis with {padded} orthonormal columns",
            cols.len()
        );
        let mut e = 0;
        while cols.len() < nk {
            let mut v = vec![0.0; d];
            v[e] = 1.0;
            e += 1;
            if orthonormalize_against(&cols, &mut v) {
                fix_sign(&mut v);
                cols.push(v);
            }
        }
    }
    let projection = Matrix::from_fn(d, nk, |r, c| cols[c][r]);
    Ok(PcaBasis {
        side,
        projection,
        mean,
        padded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_binary(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Matrix {
        Matrix::from_fn(m, d, |_, _| rng.random_bool(0.4) as u8 as f64)
    }

    fn total_error(basis: &PcaBasis, data: &Matrix) -> f64 {
        (0..data.rows())
            .map(|r| {
                let rec = basis.decode(&basis.encode(data.row(r)).unwrap()).unwrap();
                rec.iter().zip(data.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn rank_one_dataset() {
        let side = 4;
        let m: Vec<f64> = (0..16).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let data = Matrix::from_rows(&vec![m.clone(); 6]);
        let basis = pca_fit(&data, side, 1, false).unwrap();
        for (p, x) in basis.projection().as_slice().iter().zip(&m) {
            assert!((p - x / norm).abs() < 1e-10);
        }
        let v = basis.encode(&m).unwrap();
        assert!((v[0] - norm).abs() < 1e-10);
        let rec = basis.decode(&v).unwrap();
        assert!(rec.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(!basis.is_rank_deficient());
    }

    #[test]
    fn orthonormal_columns_and_monotone_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_binary(&mut rng, 40, 64);
        let mut prev = f64::INFINITY;
        for nk in [1, 4, 8, 16, 32] {
            let basis = pca_fit(&data, 8, nk, false).unwrap();
            let g = basis.projection().matmul_tn(basis.projection());
            assert!(g.max_abs_diff(&Matrix::identity(nk)) < 1e-8);
            let err = total_error(&basis, &data);
            assert!(err <= prev + 1e-9, "nk={nk}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn more_samples_than_pixels_uses_covariance_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_binary(&mut rng, 50, 16);
        let a = pca_fit(&data, 4, 5, false).unwrap();
        // same subspace as the Gram route on the transposed problem size
        let g = a.projection().matmul_tn(a.projection());
        assert!(g.max_abs_diff(&Matrix::identity(5)) < 1e-8);
        assert!(total_error(&a, &data) < data.sum_sq());
    }

    #[test]
    fn span_identity_and_orthogonal_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_binary(&mut rng, 12, 36);
        let basis = pca_fit(&data, 6, 5, false).unwrap();
        let p = basis.projection();
        // a combination of basis columns
        let m: Vec<f64> = (0..36).map(|r| 0.7 * p[(r, 0)] - 1.3 * p[(r, 3)]).collect();
        let rec = basis.decode(&basis.encode(&m).unwrap()).unwrap();
        assert!(rec.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-8));
        // component orthogonal to all columns
        let mut o: Vec<f64> = (0..36).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let cols: Vec<Vec<f64>> = (0..5).map(|c| (0..36).map(|r| p[(r, c)]).collect()).collect();
        assert!(orthonormalize_against(&cols, &mut o));
        assert!(basis.encode(&o).unwrap().iter().all(|c| c.abs() < 1e-10));
        let zero = vec![0.0; 36];
        let v = basis.encode(&zero).unwrap();
        assert!(v.iter().all(|&c| c == 0.0));
        assert!(basis.decode(&v).unwrap().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn sign_convention_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_binary(&mut rng, 10, 16);
        let basis = pca_fit(&data, 4, 3, false).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..16).map(|r| basis.projection()[(r, c)]).collect();
            let best = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(best > 0.0);
        }
        assert!(matches!(
            pca_fit(&data, 4, 11, false),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn rank_deficient_is_padded_and_flagged() {
        let row: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let data = Matrix::from_rows(&vec![row; 5]);
        let basis = pca_fit(&data, 4, 3, false).unwrap();
        assert!(basis.is_rank_deficient());
        assert_eq!(basis.padded_columns(), 2);
        let g = basis.projection().matmul_tn(basis.projection());
        assert!(g.max_abs_diff(&Matrix::identity(3)) < 1e-8);
    }

    #[test]
    fn centered_variant_reconstructs_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_binary(&mut rng, 20, 16);
        let basis = pca_fit(&data, 4, 2, true).unwrap();
        let mu = basis.mean().unwrap().to_vec();
        let rec = basis.decode(&basis.encode(&mu).unwrap()).unwrap();
        assert!(rec.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn cholesky_qr_matches_gram_schmidt_and_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Matrix::from_fn(6, 20, |_, _| rng.random_range(-1.0..1.0));
        let q = cholesky_qr_rows(&v).unwrap();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for r in 0..6 {
            let mut x = v.row(r).to_vec();
            assert!(orthonormalize_against(&cols, &mut x));
            cols.push(x);
        }
        for (r, c) in cols.iter().enumerate() {
            assert!(q.row(r).iter().zip(c).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        // dependent rows are refused
        let dup = Matrix::from_fn(2, 20, |_, c| v[(0, c)]);
        assert!(cholesky_qr_rows(&dup).is_none());

        let data = random_binary(&mut rng, 40, 36);
        let small = pca_fit(&data, 6, 5, false).unwrap();
        let big = pca_fit(&data, 6, 12, false).unwrap();
        for r in 0..36 {
            for c in 0..5 {
                assert!((small.projection()[(r, c)] - big.projection()[(r, c)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn row_batches_match_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_binary(&mut rng, 30, 16);
        let basis = pca_fit(&data, 4, 6, true).unwrap();
        let enc = basis.encode_rows(&data).unwrap();
        let dec = basis.decode_rows(&enc).unwrap();
        for r in 0..30 {
            let e = basis.encode(data.row(r)).unwrap();
            assert!(e.iter().zip(enc.row(r)).all(|(a, b)| (a - b).abs() < 1e-12));
            let d = basis.decode(&e).unwrap();
            assert!(d.iter().zip(dec.row(r)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(basis.encode_rows(&Matrix::zeros(2, 15)).is_err());
        assert!(basis.decode_rows(&Matrix::zeros(2, 5)).is_err());
    }
}
