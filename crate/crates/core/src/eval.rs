//! COCO-style average precision for boxes and masks.

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask, BoxXyxy};
use crate::model::{predict, DecoderConfig, Detection, ModelParams, Sample};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub category: usize,
    pub bbox: BoxXyxy,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub gts: Vec<EvalGt>,
    pub dets: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApPair {
    /// AP at IoU 0.5.
    pub ap50: f64,
    /// AP averaged over IoU 0.50:0.95.
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub num_gt: usize,
    pub bbox: ApPair,
    pub mask: ApPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Means over categories that have ground truth.
    pub bbox: ApPair,
    pub mask: ApPair,
    pub per_category: Vec<CategoryAp>,
}

impl ApReport {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.bbox, self.mask]
            .into_iter()
            .chain(self.per_category.iter().flat_map(|c| [c.bbox, c.mask]))
            .flat_map(|p| [p.ap50, p.ap])
    }
}

/// 101-point interpolated AP from detections sorted by descending score.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let at = recall.partition_point(|&x| x < r);
            precision.get(at).copied().unwrap_or(0.0)
        })
        .sum();
    sum / RECALL_POINTS as f64
}

fn iou(kind: IouKind, d: &Detection, g: &EvalGt) -> Result<f64> {
    match kind {
        IouKind::Box => Ok(d.bbox.iou(&g.bbox)),
        IouKind::Mask => mask_iou(&d.mask, &g.mask),
    }
}

/// AP of one category at each threshold. Within an image detections are taken in
/// descending score order and each claims the best-IoU unclaimed ground truth.
fn category_ap(images: &[EvalImage], category: usize, kind: IouKind, thresholds: &[f64]) -> Result<Vec<f64>> {
    let num_gt: usize = images.iter().map(|im| im.gts.iter().filter(|g| g.category == category).count()).sum();
    // (score, image, tp per threshold)
    let mut scored: Vec<(f64, usize, Vec<bool>)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        let gts: Vec<&EvalGt> = im.gts.iter().filter(|g| g.category == category).collect();
        let mut dets: Vec<&Detection> = im.dets.iter().filter(|d| d.category == category).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ious = dets
            .iter()
            .map(|d| gts.iter().map(|g| iou(kind, d, g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut tps = vec![Vec::with_capacity(thresholds.len()); dets.len()];
        for &t in thresholds {
            let mut used = vec![false; gts.len()];
            for (di, row) in ious.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (gi, &v) in row.iter().enumerate() {
                    if !used[gi] && v >= t && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    used[gi] = true;
                }
                tps[di].push(best.is_some());
            }
        }
        scored.extend(dets.iter().zip(tps).map(|(d, tp)| (d.score, ii, tp)));
    }
    // stable: equal scores keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((0..thresholds.len())
        .map(|ti| {
            let tp: Vec<bool> = scored.iter().map(|s| s.2[ti]).collect();
            interpolated_ap(&tp, num_gt)
        })
        .collect())
}

pub fn evaluate(images: &[EvalImage], num_classes: usize) -> Result<ApReport> {
    for im in images {
        if let Some(c) = im
            .gts
            .iter()
            .map(|g| g.category)
            .chain(im.dets.iter().map(|d| d.category))
            .find(|&c| c >= num_classes)
        {
            return Err(Error::InvalidArgument(format!("category {c} out of range for {num_classes} classes")));
        }
    }
    let ts = iou_thresholds();
    let pair = |v: Vec<f64>| ApPair {
        ap50: v[0],
        ap: v.iter().sum::<f64>() / v.len() as f64,
    };
    let mut per_category = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        per_category.push(CategoryAp {
            category: c,
            num_gt: images.iter().map(|im| im.gts.iter().filter(|g| g.category == c).count()).sum(),
            bbox: pair(category_ap(images, c, IouKind::Box, &ts)?),
            mask: pair(category_ap(images, c, IouKind::Mask, &ts)?),
        });
    }
    let present: Vec<&CategoryAp> = per_category.iter().filter(|c| c.num_gt > 0).collect();
    let mean = |f: &dyn Fn(&CategoryAp) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(ApReport {
        bbox: ApPair {
            ap50: mean(&|c| c.bbox.ap50),
            ap: mean(&|c| c.bbox.ap),
        },
        mask: ApPair {
            ap50: mean(&|c| c.mask.ap50),
            ap: mean(&|c| c.mask.ap),
        },
        per_category,
    })
}

/// Ground truth of a sample in pixel coordinates.
pub fn sample_gts(s: &Sample) -> Vec<EvalGt> {
    let (w, h) = (s.image.width(), s.image.height());
    s.targets
        .iter()
        .map(|t| EvalGt {
            category: t.category,
            bbox: t.bbox.to_xyxy(w, h),
            mask: t.raw_mask.clone(),
        })
        .collect()
}

/// Runs `predict` on every sample with the given score threshold.
pub fn predict_all(
    params: &ModelParams,
    cfg: &DecoderConfig,
    codec: &Codec,
    samples: &[Sample],
    score_thresh: f64,
) -> Result<Vec<EvalImage>> {
    samples
        .iter()
        .map(|s| {
            Ok(EvalImage {
                gts: sample_gts(s),
                dets: predict(params, cfg, &s.image, codec, score_thresh)?,
            })
        })
        .collect()
}

/// Every query is kept for AP; low-score detections only lengthen the tail of
/// the precision-recall curve.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.0;

pub fn evaluate_model(
    params: &ModelParams,
    cfg: &DecoderConfig,
    codec: &Codec,
    samples: &[Sample],
) -> Result<ApReport> {
    evaluate(&predict_all(params, cfg, codec, samples, EVAL_SCORE_THRESHOLD)?, cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: usize, y: usize, s: usize) -> (BoxXyxy, BinaryMask) {
        let m = BinaryMask::from_fn(32, 32, |px, py| (x..x + s).contains(&px) && (y..y + s).contains(&py));
        (m.bounding_box().unwrap(), m)
    }

    fn gt(c: usize, x: usize, y: usize, s: usize) -> EvalGt {
        let (bbox, mask) = square(x, y, s);
        EvalGt { category: c, bbox, mask }
    }

    fn det(c: usize, score: f64, x: usize, y: usize, s: usize) -> Detection {
        let (bbox, mask) = square(x, y, s);
        Detection { category: c, score, bbox, mask }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![gt(0, 1, 1, 6), gt(1, 10, 10, 8), gt(0, 20, 3, 5)];
        let dets = gts
            .iter()
            .enumerate()
            .map(|(i, g)| Detection { category: g.category, score: 0.9 - 0.1 * i as f64, bbox: g.bbox, mask: g.mask.clone() })
            .collect();
        let r = evaluate(&[EvalImage { gts: gts.clone(), dets }], 3).unwrap();
        assert_eq!((r.bbox.ap50, r.bbox.ap, r.mask.ap50, r.mask.ap), (1.0, 1.0, 1.0, 1.0));
        // category 2 has no ground truth and is left out of the mean
        assert_eq!(r.per_category[2].num_gt, 0);

        let r = evaluate(&[EvalImage { gts, dets: vec![] }], 3).unwrap();
        assert!(r.values().all(|v| v == 0.0));
    }

    #[test]
    fn hand_walked_three_predictions() {
        // gts A and B; detections by score: hit A, miss, hit B
        let gts = vec![gt(0, 0, 0, 8), gt(0, 16, 16, 8)];
        let dets = vec![det(0, 0.9, 0, 0, 8), det(0, 0.8, 24, 0, 6), det(0, 0.7, 16, 16, 7)];
        let r = evaluate(&[EvalImage { gts, dets }], 1).unwrap();
        // PR points (0.5, 1), (0.5, 1/2), (1, 2/3); envelope is 1 up to recall 0.5
        // (51 of the 101 points) and 2/3 after
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((r.bbox.ap50 - expected).abs() < 1e-12);
        assert!((r.mask.ap50 - expected).abs() < 1e-12);
        // the 7-px box has IoU 49/64 < 0.8, so from 0.8 on only A is found:
        // precision 1 up to recall 0.5
        let strict = 51.0 / 101.0;
        let v: Vec<f64> = iou_thresholds().iter().map(|&t| if t <= 49.0 / 64.0 { expected } else { strict }).collect();
        assert!((r.bbox.ap - v.iter().sum::<f64>() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_are_false_positives() {
        let gts = vec![gt(0, 0, 0, 8)];
        let dets = vec![det(0, 0.9, 0, 0, 8), det(0, 0.95, 0, 0, 8)];
        assert_eq!(interpolated_ap(&[true, false], 1), 1.0);
        let r = evaluate(&[EvalImage { gts, dets }], 1).unwrap();
        assert_eq!(r.bbox.ap50, 1.0);
        assert_eq!(interpolated_ap(&[false, true], 1), 0.5);
    }

    #[test]
    fn values_in_unit_interval_and_rejects_bad_category() {
        let gts = vec![gt(0, 0, 0, 8), gt(1, 10, 10, 8)];
        let dets = vec![det(1, 0.3, 0, 0, 8), det(0, 0.6, 1, 1, 8), det(1, 0.2, 11, 9, 8)];
        let r = evaluate(&[EvalImage { gts: gts.clone(), dets }], 2).unwrap();
        assert!(r.values().all(|v| (0.0..=1.0).contains(&v)));
        assert!(evaluate(&[EvalImage { gts, dets: vec![det(5, 0.1, 0, 0, 4)] }], 2).is_err());
    }
}
