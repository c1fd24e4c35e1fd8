//! Set prediction: pairwise matching cost, optimal assignment and the instance loss.

mod hungarian;
pub mod losses;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian, Assignment};
pub use losses::{
    dice_loss, focal_neg, focal_pos, giou, giou_flagged, giou_loss, l1_loss, sigmoid, sigmoid_focal_loss,
    softplus, FocalParams,
};

use crate::codec::MaskVector;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::{cxcywh_to_xyxy, BinaryMask, BoxCxCyWh};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub category: usize,
    pub bbox: BoxCxCyWh,
    pub mask_vector: MaskVector,
    pub raw_mask: BinaryMask,
}

impl GroundTruthInstance {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.category >= num_classes {
            return Err(Error::UnknownCategory(self.category as i64));
        }
        self.bbox.validate()
    }
}

/// Per-query outputs of one decoder layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `J × S` pre-sigmoid scores.
    pub logits: Matrix,
    /// `J × 4` normalized `(cx, cy, w, h)`.
    pub boxes: Matrix,
    /// `J × n_k`.
    pub vectors: Matrix,
}

impl PredictionSet {
    pub fn new(logits: Matrix, boxes: Matrix, vectors: Matrix) -> Result<Self> {
        let j = logits.rows();
        if boxes.shape() != (j, 4) {
            return Err(Error::dims(format!("{j}x4"), format!("{:?}", boxes.shape())));
        }
        if vectors.rows() != j {
            return Err(Error::dims(j, vectors.rows()));
        }
        if !(logits.is_finite() && boxes.is_finite() && vectors.is_finite()) {
            return Err(Error::Numerical("prediction set contains non-finite values".into()));
        }
        Ok(Self { logits, boxes, vectors })
    }

    pub fn num_queries(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn box_array(&self, i: usize) -> [f64; 4] {
        let r = self.boxes.row(i);
        [r[0], r[1], r[2], r[3]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub vec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            vec: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("l1", self.l1), ("giou", self.giou), ("vec", self.vec)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted, per-ground-truth normalized terms plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub vec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(cls: f64, l1: f64, giou: f64, vec: f64, w: &LossWeights) -> Self {
        Self {
            cls,
            l1,
            giou,
            vec,
            total: w.cls * cls + w.l1 * l1 + w.giou * giou + w.vec * vec,
        }
    }

    /// Term-wise mean (the total is averaged too, so it stays consistent).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.cls += b.cls;
            acc.l1 += b.l1;
            acc.giou += b.giou;
            acc.vec += b.vec;
            acc.total += b.total;
        }
        LossBreakdown {
            cls: acc.cls / n,
            l1: acc.l1 / n,
            giou: acc.giou / n,
            vec: acc.vec / n,
            total: acc.total / n,
        }
    }

    pub const CSV_HEADER: &'static str = "step,cls,l1,giou,vec,total";

    pub fn write_csv_row(&self, mut w: impl Write, step: usize) -> Result<()> {
        writeln!(w, "{step},{:?},{:?},{:?},{:?},{:?}", self.cls, self.l1, self.giou, self.vec, self.total)?;
        Ok(())
    }
}

/// `cost[j][i]` for ground truth `j` and prediction `i`; the vector term is not part of matching.
pub fn pairwise_cost(
    pred: &PredictionSet,
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<Matrix> {
    let s = pred.num_classes();
    for g in gts {
        g.validate(s)?;
    }
    let preds: Vec<([f64; 4], _)> = (0..pred.num_queries())
        .map(|i| {
            let b = pred.box_array(i);
            (b, cxcywh_to_xyxy(b))
        })
        .collect();
    Ok(Matrix::from_fn(gts.len(), pred.num_queries(), |j, i| {
        let gt = &gts[j];
        let logit = pred.logits[(i, gt.category)];
        let cls = focal_pos(logit, fp) - focal_neg(logit, fp);
        let (pb, pxy) = &preds[i];
        let gb = gt.bbox.as_array();
        let l1: f64 = pb.iter().zip(&gb).map(|(a, b)| (a - b).abs()).sum();
        let g = giou(pxy, &gt.bbox.to_unit_xyxy());
        weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - g)
    }))
}

/// Detection-plus-vector loss for a fixed assignment, normalized by `max(#gt, 1)`.
pub fn instance_loss(
    pred: &PredictionSet,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<LossBreakdown> {
    let (j, s) = pred.logits.shape();
    Assignment::new(assignment.pairs().to_vec(), gts.len(), j)?;
    for g in gts {
        g.validate(s)?;
    }
    let owner = assignment.inverse(j);
    let mut cls = 0.0;
    for (i, own) in owner.iter().enumerate() {
        let target = own.map(|g| gts[g].category);
        for c in 0..s {
            cls += sigmoid_focal_loss(pred.logits[(i, c)], target == Some(c), fp);
        }
    }
    let (mut l1, mut gl, mut vec) = (0.0, 0.0, 0.0);
    for &(g, i) in assignment.pairs() {
        let gt = &gts[g];
        let pb = pred.box_array(i);
        l1 += l1_loss(&pb, &gt.bbox.as_array())?;
        gl += giou_loss(&cxcywh_to_xyxy(pb), &gt.bbox.to_unit_xyxy());
        vec += l1_loss(pred.vectors.row(i), gt.mask_vector.coeffs())?;
    }
    let n = gts.len().max(1) as f64;
    Ok(LossBreakdown::from_terms(cls / n, l1 / n, gl / n, vec / n, weights))
}

/// The same loss with the vector term switched off.
pub fn detection_loss(
    pred: &PredictionSet,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<f64> {
    let b = instance_loss(pred, gts, assignment, weights, fp)?;
    Ok(weights.cls * b.cls + weights.l1 * b.l1 + weights.giou * b.giou)
}

/// Matches with [`pairwise_cost`] and [`hungarian`], then evaluates [`instance_loss`].
pub fn match_and_loss(
    pred: &PredictionSet,
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<(Assignment, LossBreakdown)> {
    let cost = pairwise_cost(pred, gts, weights, fp)?;
    let a = hungarian(&cost)?;
    let loss = instance_loss(pred, gts, &a, weights, fp)?;
    Ok((a, loss))
}
