//! Sparse coding: `min ½‖m − v·D‖² + β‖v‖₁` with unit-norm dictionary rows.
//!
//! Codes are found with ISTA at step `1/L`, `L` the top eigenvalue of `D·Dᵀ`.
//! Dictionaries are learned by alternating ISTA code updates with a least-squares
//! atom update followed by row renormalization.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    side: usize,
    /// `n_k × N²`, one atom per row.
    atoms: Matrix,
    beta: f64,
    gram: Matrix,
    lipschitz: f64,
}

#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn lipschitz_of(gram: &Matrix) -> f64 {
    match power_iteration(gram, 10_000, 1e-12) {
        Some(l) => l,
        None => {
            let trace: f64 = (0..gram.rows()).map(|i| gram[(i, i)]).sum();
            log::warn!("power iteration did not converge; using trace(DDᵀ) = {trace} as step bound");
            trace
        }
    }
}

impl Dictionary {
    /// Validates unit-norm rows (within 1e-8) and `β ≥ 0`.
    pub fn new(side: usize, atoms: Matrix, beta: f64) -> Result<Self> {
        if atoms.cols() != side * side || atoms.rows() == 0 {
            return Err(Error::dims(format!("n_k x {}", side * side), format!("{:?}", atoms.shape())));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        for r in 0..atoms.rows() {
            let n = atoms.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!("atom {r} has norm {n}")));
            }
        }
        let gram = atoms.matmul_nt(&atoms);
        let lipschitz = lipschitz_of(&gram);
        Ok(Self {
            side,
            atoms,
            beta,
            gram,
            lipschitz,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn nk(&self) -> usize {
        self.atoms.rows()
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.side, self.atoms.clone(), beta)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// ISTA for one flattened mask.
    pub fn encode(&self, flat: &[f64], iters: usize, tol: f64) -> Result<Vec<f64>> {
        let d = self.side * self.side;
        if flat.len() != d {
            return Err(Error::dims(d, flat.len()));
        }
        let x = Matrix::from_vec(1, d, flat.to_vec());
        let b = x.matmul_nt(&self.atoms);
        let mut v = Matrix::zeros(1, self.nk());
        ista(&mut v, &b, &self.gram, self.lipschitz, self.beta, iters, tol);
        Ok(v.into_vec())
    }

    pub fn decode(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.nk() {
            return Err(Error::dims(self.nk(), coeffs.len()));
        }
        Ok(Matrix::from_vec(1, coeffs.len(), coeffs.to_vec())
            .matmul(&self.atoms)
            .into_vec())
    }
}

/// Batched ISTA on codes `v` (rows are samples) given `b = X·Dᵀ` and `G = D·Dᵀ`.
/// Returns the number of iterations run.
fn ista(v: &mut Matrix, b: &Matrix, gram: &Matrix, lipschitz: f64, beta: f64, iters: usize, tol: f64) -> usize {
    if lipschitz <= 0.0 {
        return 0;
    }
    let eta = 1.0 / lipschitz;
    let thresh = eta * beta;
    for it in 0..iters {
        let grad = v.matmul(gram);
        let mut max_step = 0.0f64;
        for r in 0..v.rows() {
            let mut step_sq = 0.0;
            let (vr, gr, br) = (r * v.cols(), grad.row(r), b.row(r));
            for c in 0..v.cols() {
                let old = v.as_slice()[vr + c];
                let new = soft_threshold(old - eta * (gr[c] - br[c]), thresh);
                step_sq += (new - old) * (new - old);
                v.as_mut_slice()[vr + c] = new;
            }
            max_step = max_step.max(step_sq.sqrt());
        }
        if max_step < tol {
            return it + 1;
        }
    }
    iters
}

#[derive(Clone, Copy, Debug)]
pub struct DictLearnParams {
    pub beta: f64,
    pub alternations: usize,
    pub ista_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DictLearnOutput {
    pub dictionary: Dictionary,
    /// Objective after each alternation.
    pub objective_trace: Vec<f64>,
}

fn objective(x_sq: f64, v: &Matrix, b: &Matrix, gram: &Matrix, beta: f64) -> f64 {
    // ‖X − V·D‖² = ‖X‖² − 2⟨V, X·Dᵀ⟩ + ⟨VᵀV, D·Dᵀ⟩
    let cross: f64 = v.as_slice().iter().zip(b.as_slice()).map(|(a, c)| a * c).sum();
    let vtv = v.matmul_tn(v);
    let quad: f64 = vtv.as_slice().iter().zip(gram.as_slice()).map(|(a, c)| a * c).sum();
    let l1: f64 = v.as_slice().iter().map(|a| a.abs()).sum();
    0.5 * (x_sq - 2.0 * cross + quad).max(0.0) + beta * l1
}

fn normalize_rows(m: &mut Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let row = m.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
            n
        })
        .collect()
}

/// Alternating minimization over codes and atoms.
///
/// Each row of `data` is one flattened mask.
pub fn dict_learn(data: &Matrix, side: usize, nk: usize, params: &DictLearnParams) -> Result<DictLearnOutput> {
    let d = side * side;
    if data.cols() != d {
        return Err(Error::dims(d, data.cols()));
    }
    if nk == 0 || nk > d {
        return Err(Error::InvalidArgument(format!("n_k {nk} out of range")));
    }
    if data.rows() < nk {
        return Err(Error::InsufficientSamples {
            needed: nk,
            got: data.rows(),
        });
    }
    if !(params.beta >= 0.0) || params.alternations == 0 {
        return Err(Error::InvalidArgument("beta must be >= 0 and iters >= 1".into()));
    }
    let x_sq = data.sum_sq();
    if x_sq == 0.0 {
        return Err(Error::InvalidArgument("degenerate all-zero dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    order.shuffle(&mut rng);
    let mut atoms = Matrix::zeros(nk, d);
    for (k, &i) in order.iter().take(nk).enumerate() {
        let src = data.row(i);
        if src.iter().any(|&v| v != 0.0) {
            atoms.row_mut(k).copy_from_slice(src);
        } else {
            for v in atoms.row_mut(k) {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    }
    normalize_rows(&mut atoms);

    let mut v = Matrix::zeros(data.rows(), nk);
    let mut trace = Vec::with_capacity(params.alternations);
    for _ in 0..params.alternations {
        // code step
        let gram = atoms.matmul_nt(&atoms);
        let lip = lipschitz_of(&gram);
        let b = data.matmul_nt(&atoms);
        ista(&mut v, &b, &gram, lip, params.beta, params.ista_iters, params.tol);

        // atom step: (VᵀV + δI)·D = VᵀX
        let vtv = v.matmul_tn(&v);
        let max_diag = (0..nk).map(|i| vtv[(i, i)]).fold(0.0, f64::max);
        if max_diag == 0.0 {
            trace.push(objective(x_sq, &v, &b, &gram, params.beta));
            continue;
        }
        let delta = 1e-12 * max_diag;
        let mut lhs = DMatrix::from_row_slice(nk, nk, vtv.as_slice());
        for i in 0..nk {
            lhs[(i, i)] += delta;
        }
        let rhs_m = v.matmul_tn(data);
        let rhs = DMatrix::from_row_slice(nk, d, rhs_m.as_slice());
        let solved = match lhs.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => lhs
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular code Gram matrix".into()))?,
        };
        let unused: Vec<bool> = (0..nk).map(|i| vtv[(i, i)] == 0.0).collect();
        let mut next = Matrix::zeros(nk, d);
        for r in 0..nk {
            if unused[r] {
                next.row_mut(r).copy_from_slice(atoms.row(r));
            } else {
                for c in 0..d {
                    next[(r, c)] = solved[(r, c)];
                }
            }
        }
        let norms = normalize_rows(&mut next);
        for (r, &n) in norms.iter().enumerate() {
            if n == 0.0 {
                next.row_mut(r).copy_from_slice(atoms.row(r));
            } else if !unused[r] {
                // keep V·D unchanged under the renormalization
                for i in 0..v.rows() {
                    v[(i, r)] *= n;
                }
            }
        }
        atoms = next;
        let gram = atoms.matmul_nt(&atoms);
        let b = data.matmul_nt(&atoms);
        trace.push(objective(x_sq, &v, &b, &gram, params.beta));
    }
    Ok(DictLearnOutput {
        dictionary: Dictionary::new(side, atoms, params.beta)?,
        objective_trace: trace,
    })
}
