//! Mask compression codecs: spatial `N × N` masks to `n_k`-dimensional vectors and back.
//!
//! Four codecs share one interface:
//!
//! - **DCT**: orthonormal 2-D DCT-II, low-frequency coefficients in scan order.
//! - **PCA**: projection onto the top right singular vectors of the training masks.
//! - **Sparse**: Lasso codes over a learned unit-norm dictionary.
//! - **Flatten**: row-major reshape, no compression (baseline).
//!
//! DCT and Flatten are analytic; PCA and Sparse must be fitted with [`Codec::fit`].

pub mod dct;
pub mod io;
pub mod pca;
pub mod sparse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::SoftMask;

pub use dct::{dct_matrix, zigzag_indices, DctBasis, ScanOrder};
pub use pca::{pca_fit, PcaBasis};
pub use sparse::{dict_learn, soft_threshold, DictLearnOutput, DictLearnParams, Dictionary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Dct,
    Pca,
    Sparse,
    Flatten,
}

impl CodecKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CodecKind::Dct => "dct",
            CodecKind::Pca => "pca",
            CodecKind::Sparse => "sparse",
            CodecKind::Flatten => "flatten",
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            CodecKind::Dct => 0,
            CodecKind::Pca => 1,
            CodecKind::Sparse => 2,
            CodecKind::Flatten => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => CodecKind::Dct,
            1 => CodecKind::Pca,
            2 => CodecKind::Sparse,
            3 => CodecKind::Flatten,
            t => return Err(Error::Format(format!("unknown codec kind byte {t}"))),
        })
    }

    pub fn needs_fitting(&self) -> bool {
        matches!(self, CodecKind::Pca | CodecKind::Sparse)
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dct" => Ok(CodecKind::Dct),
            "pca" => Ok(CodecKind::Pca),
            "sparse" => Ok(CodecKind::Sparse),
            "flatten" => Ok(CodecKind::Flatten),
            other => Err(Error::InvalidArgument(format!("unknown codec {other:?}"))),
        }
    }
}

/// Kind-specific settings. Fields irrelevant to a kind are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecParams {
    /// Sparse coding L1 weight.
    pub beta: f64,
    /// Dictionary-learning alternations.
    pub alternations: usize,
    /// ISTA steps per code solve.
    pub ista_iters: usize,
    pub tol: f64,
    /// Subtract the training mean before projecting (PCA).
    pub pca_center: bool,
    /// DCT coefficient sampling order.
    pub scan: ScanOrder,
    pub seed: u64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            beta: 0.2,
            alternations: 30,
            ista_iters: 200,
            tol: 1e-6,
            pca_center: false,
            scan: ScanOrder::ZigZag,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: CodecKind,
    /// Mask side `N` (for Flatten, the flatten side).
    pub side: usize,
    /// Vector dimension `n_k`.
    pub nk: usize,
    #[serde(default)]
    pub params: CodecParams,
}

/// Spatial resolution used by codec sweeps.
pub const DEFAULT_SIDE: usize = 128;
/// Mask vector dimension used by codec sweeps.
pub const DEFAULT_NK: usize = 256;
/// Side of the Flatten baseline.
pub const DEFAULT_FLATTEN_SIDE: usize = 28;

impl Default for CodecSpec {
    fn default() -> Self {
        Self::new(CodecKind::Dct, DEFAULT_SIDE, DEFAULT_NK)
    }
}

impl CodecSpec {
    pub fn new(kind: CodecKind, side: usize, nk: usize) -> Self {
        Self {
            kind,
            side,
            nk,
            params: CodecParams::default(),
        }
    }

    pub fn flatten(side: usize) -> Self {
        Self::new(CodecKind::Flatten, side, side * side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::InvalidArgument(format!("N must be >= 2, got {}", self.side)));
        }
        let d = self.side * self.side;
        if self.nk == 0 || self.nk > d {
            return Err(Error::InvalidArgument(format!(
                "n_k must be in [1, {d}], got {}",
                self.nk
            )));
        }
        if self.kind == CodecKind::Flatten && self.nk != d {
            return Err(Error::InvalidArgument(format!(
                "flatten requires n_k = N² = {d}, got {}",
                self.nk
            )));
        }
        if !(self.params.beta >= 0.0) {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    coeffs: Vec<f64>,
    spec: CodecSpec,
}

impl MaskVector {
    pub fn new(coeffs: Vec<f64>, spec: CodecSpec) -> Result<Self> {
        if coeffs.len() != spec.nk {
            return Err(Error::dims(spec.nk, coeffs.len()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite mask vector coefficient".into()));
        }
        Ok(Self { coeffs, spec })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Backend {
    Dct(DctBasis),
    Pca(PcaBasis),
    Sparse(Dictionary),
    Flatten,
}

/// A ready-to-use codec: analytic or fitted basis plus its spec.
#[derive(Clone, Debug)]
pub struct Codec {
    spec: CodecSpec,
    backend: Backend,
}

impl Codec {
    /// Analytic codecs (DCT, Flatten). Fitted kinds need [`Codec::fit`].
    pub fn analytic(spec: CodecSpec) -> Result<Self> {
        spec.validate()?;
        let backend = match spec.kind {
            CodecKind::Dct => Backend::Dct(DctBasis::new(spec.side, spec.params.scan)),
            CodecKind::Flatten => Backend::Flatten,
            k => {
                return Err(Error::InvalidArgument(format!("codec {k} must be fitted")));
            }
        };
        Ok(Self { spec, backend })
    }

    /// Fits on `side × side` training masks. DCT and Flatten ignore the data.
    pub fn fit(spec: CodecSpec, masks: &[SoftMask]) -> Result<Self> {
        spec.validate()?;
        if !spec.kind.needs_fitting() {
            return Self::analytic(spec);
        }
        let data = stack_masks(masks, spec.side)?;
        let backend = match spec.kind {
            CodecKind::Pca => Backend::Pca(pca_fit(&data, spec.side, spec.nk, spec.params.pca_center)?),
            CodecKind::Sparse => {
                let p = DictLearnParams {
                    beta: spec.params.beta,
                    alternations: spec.params.alternations,
                    ista_iters: spec.params.ista_iters,
                    tol: spec.params.tol,
                    seed: spec.params.seed,
                };
                Backend::Sparse(dict_learn(&data, spec.side, spec.nk, &p)?.dictionary)
            }
            _ => unreachable!(),
        };
        Ok(Self { spec, backend })
    }

    pub fn from_pca(spec: CodecSpec, basis: PcaBasis) -> Result<Self> {
        spec.validate()?;
        if spec.kind != CodecKind::Pca || basis.side() != spec.side || basis.nk() != spec.nk {
            return Err(Error::InvalidArgument("PCA basis does not match spec".into()));
        }
        Ok(Self {
            spec,
            backend: Backend::Pca(basis),
        })
    }

    pub fn from_dictionary(spec: CodecSpec, dict: Dictionary) -> Result<Self> {
        spec.validate()?;
        if spec.kind != CodecKind::Sparse || dict.side() != spec.side || dict.nk() != spec.nk {
            return Err(Error::InvalidArgument("dictionary does not match spec".into()));
        }
        Ok(Self {
            spec,
            backend: Backend::Sparse(dict),
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn kind(&self) -> CodecKind {
        self.spec.kind
    }

    pub fn side(&self) -> usize {
        self.spec.side
    }

    pub fn nk(&self) -> usize {
        self.spec.nk
    }

    pub fn dct_basis(&self) -> Option<&DctBasis> {
        match &self.backend {
            Backend::Dct(b) => Some(b),
            _ => None,
        }
    }

    pub fn pca_basis(&self) -> Option<&PcaBasis> {
        match &self.backend {
            Backend::Pca(b) => Some(b),
            _ => None,
        }
    }

    pub fn dictionary(&self) -> Option<&Dictionary> {
        match &self.backend {
            Backend::Sparse(d) => Some(d),
            _ => None,
        }
    }

    /// Matrix persisted by [`io::write_basis`].
    pub fn basis_matrix(&self) -> Matrix {
        match &self.backend {
            Backend::Dct(b) => b.transform().clone(),
            Backend::Pca(b) => b.projection().clone(),
            Backend::Sparse(d) => d.atoms().clone(),
            Backend::Flatten => Matrix::zeros(0, 0),
        }
    }

    fn check(&self, m: &SoftMask) -> Result<()> {
        if m.width() != self.spec.side || m.height() != self.spec.side {
            return Err(Error::dims(
                format!("{0}x{0}", self.spec.side),
                format!("{}x{}", m.width(), m.height()),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, m: &SoftMask) -> Result<MaskVector> {
        self.check(m)?;
        let coeffs = match &self.backend {
            Backend::Dct(b) => b.encode(m, self.spec.nk)?,
            Backend::Pca(b) => b.encode(m.values())?,
            Backend::Sparse(d) => d.encode(m.values(), self.spec.params.ista_iters, self.spec.params.tol)?,
            Backend::Flatten => m.values().to_vec(),
        };
        MaskVector::new(coeffs, self.spec)
    }

    /// [`Codec::encode`] over many masks; PCA encodes them with one matrix product.
    pub fn encode_batch(&self, masks: &[SoftMask]) -> Result<Vec<MaskVector>> {
        match &self.backend {
            Backend::Pca(b) => {
                let coeffs = b.encode_rows(&stack_masks(masks, self.spec.side)?)?;
                (0..coeffs.rows()).map(|r| MaskVector::new(coeffs.row(r).to_vec(), self.spec)).collect()
            }
            _ => masks.iter().map(|m| self.encode(m)).collect(),
        }
    }

    /// [`Codec::decode`] over many vectors; PCA decodes them with one matrix product.
    pub fn decode_batch(&self, vs: &[MaskVector]) -> Result<Vec<SoftMask>> {
        match &self.backend {
            Backend::Pca(b) => {
                let nk = self.spec.nk;
                let mut data = Vec::with_capacity(vs.len() * nk);
                for v in vs {
                    if v.spec.kind != self.spec.kind || v.spec.side != self.spec.side || v.spec.nk != nk {
                        return Err(Error::InvalidArgument("vector does not match codec".into()));
                    }
                    data.extend_from_slice(&v.coeffs);
                }
                let out = b.decode_rows(&Matrix::from_vec(vs.len(), nk, data))?;
                let side = self.spec.side;
                (0..out.rows()).map(|r| SoftMask::new(side, side, out.row(r).to_vec())).collect()
            }
            _ => vs.iter().map(|v| self.decode(v)).collect(),
        }
    }

    /// Decodes raw coefficients, as produced by a network head.
    pub fn decode_coeffs(&self, coeffs: &[f64]) -> Result<SoftMask> {
        if coeffs.len() != self.spec.nk {
            return Err(Error::dims(self.spec.nk, coeffs.len()));
        }
        let side = self.spec.side;
        match &self.backend {
            Backend::Dct(b) => b.decode(coeffs),
            Backend::Pca(b) => SoftMask::new(side, side, b.decode(coeffs)?),
            Backend::Sparse(d) => SoftMask::new(side, side, d.decode(coeffs)?),
            Backend::Flatten => SoftMask::new(side, side, coeffs.to_vec()),
        }
    }

    pub fn decode(&self, v: &MaskVector) -> Result<SoftMask> {
        if v.spec.kind != self.spec.kind || v.spec.side != self.spec.side || v.spec.nk != self.spec.nk {
            return Err(Error::InvalidArgument(format!(
                "vector from {:?} does not match codec {:?}",
                v.spec.kind, self.spec.kind
            )));
        }
        self.decode_coeffs(&v.coeffs)
    }
}

/// Rows of the returned matrix are the flattened masks.
pub fn stack_masks(masks: &[SoftMask], side: usize) -> Result<Matrix> {
    let d = side * side;
    let mut data = Vec::with_capacity(masks.len() * d);
    for m in masks {
        if m.width() != side || m.height() != side {
            return Err(Error::dims(
                format!("{side}x{side}"),
                format!("{}x{}", m.width(), m.height()),
            ));
        }
        data.extend_from_slice(m.values());
    }
    Ok(Matrix::from_vec(masks.len(), d, data))
}
