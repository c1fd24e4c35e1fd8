//! Toy query decoder with category, box and mask-vector heads.
//!
//! The image is cut into non-overlapping patches, projected to width `d` and
//! tagged with 2-D sinusoidal position codes. `J` learnable queries pass
//! through `K` decoder layers (self-attention, cross-attention to the patch
//! features, feed-forward; residual connections only) and every layer's query
//! states feed the same three heads.

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;
pub mod train;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecKind, CodecSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::data::CropMode;
use crate::mask::{binarize, cxcywh_to_xyxy, paste_into_box, resize, BinaryMask, BoxXyxy, GrayImage, SoftMask};
use crate::matching::losses::sigmoid;
use crate::matching::{
    hungarian, pairwise_cost, Assignment, FocalParams, GroundTruthInstance, LossBreakdown, LossWeights,
    PredictionSet,
};
use tape::{BranchRecord, OpKind, Tape, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, primitive_checks, GradCheckReport, PrimitiveReport};
pub use train::{train, train_step, AdamState, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    /// Model width `d`.
    pub d_model: usize,
    pub heads: usize,
    /// Decoder layers `K`.
    pub layers: usize,
    /// Object queries `J`.
    pub queries: usize,
    /// Categories `S`.
    pub classes: usize,
    pub ffn_hidden: usize,
    pub box_hidden: usize,
    pub mask_hidden: usize,
    /// Mask targets: codec kind, `N` and `n_k` (the mask head's output width).
    pub codec: CodecSpec,
    /// Frame the mask vectors live in.
    pub crop_mode: CropMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            d_model: 64,
            heads: 4,
            layers: 2,
            queries: 16,
            classes: 3,
            ffn_hidden: 128,
            box_hidden: 256,
            mask_hidden: 1024,
            codec: CodecSpec::new(CodecKind::Dct, 32, 64),
            crop_mode: CropMode::Box,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!("image side {} not divisible by patch side {}", self.image_side, self.patch_side));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be a multiple of 4 for 2-D position codes", self.d_model));
        }
        if self.layers == 0 || self.queries == 0 || self.classes == 0 {
            return bad("layers, queries and classes must be positive".into());
        }
        if self.ffn_hidden == 0 || self.box_hidden == 0 || self.mask_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        self.codec.validate()
    }

    /// Sequence length `T` of the patch features.
    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    /// `(name, rows, cols)` of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let mut out = vec![
            ("query".to_string(), self.queries, d),
            ("patch.w".to_string(), self.patch_side * self.patch_side, d),
            ("patch.b".to_string(), 1, d),
        ];
        let linear = |out: &mut Vec<_>, name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), i, o));
            out.push((format!("{name}.b"), 1, o));
        };
        for l in 0..self.layers {
            for att in ["self", "cross"] {
                for p in ["q", "k", "v", "o"] {
                    linear(&mut out, format!("dec{l}.{att}.{p}"), d, d);
                }
            }
            linear(&mut out, format!("dec{l}.ffn.0"), d, self.ffn_hidden);
            linear(&mut out, format!("dec{l}.ffn.1"), self.ffn_hidden, d);
        }
        linear(&mut out, "cls".into(), d, self.classes);
        let bh = self.box_hidden;
        for (i, (a, b)) in [(d, bh), (bh, bh), (bh, 4)].into_iter().enumerate() {
            linear(&mut out, format!("box.{i}"), a, b);
        }
        let mh = self.mask_hidden;
        for (i, (a, b)) in [(d, mh), (mh, mh), (mh, self.codec.nk)].into_iter().enumerate() {
            linear(&mut out, format!("mask.{i}"), a, b);
        }
        out
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Uniform `±1/√fan_in` weights, zero biases, standard-normal queries.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let m = if name == "query" {
                    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
                } else if name.ends_with(".b") {
                    Matrix::zeros(r, c)
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound))
                };
                (name, m)
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<(String, Matrix)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_layout(&self, cfg: &DecoderConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::dims(layout.len(), self.tensors.len()));
        }
        for ((name, r, c), (n, m)) in layout.iter().zip(self.iter()) {
            if name != n || m.shape() != (*r, *c) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {n} {:?} does not match expected {name} ({r}, {c})",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// One training or evaluation image with its encoded targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: GrayImage,
    pub targets: Vec<GroundTruthInstance>,
}

/// Fixed 2-D sinusoidal codes: the first `d/2` channels encode the patch row,
/// the rest the patch column. Wavelengths run geometrically from 2 to `4·grid`
/// cells so every channel varies across the grid.
pub fn position_encoding(grid: usize, d: usize) -> Matrix {
    let half = d / 2;
    let pairs = half / 2;
    let span = (pairs.max(2) - 1) as f64;
    let mut pe = Matrix::zeros(grid * grid, d);
    for py in 0..grid {
        for px in 0..grid {
            let row = pe.row_mut(py * grid + px);
            for (off, pos) in [(0, py), (half, px)] {
                for i in 0..pairs {
                    let freq = std::f64::consts::TAU / (2.0 * (2.0 * grid as f64).powf(i as f64 / span));
                    row[off + 2 * i] = (pos as f64 * freq).sin();
                    row[off + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    pe
}

/// `T × patch²` matrix of flattened patches in raster order.
pub fn patchify(image: &GrayImage, cfg: &DecoderConfig) -> Result<Matrix> {
    if image.width() != cfg.image_side || image.height() != cfg.image_side {
        return Err(Error::dims(
            format!("{0}x{0}", cfg.image_side),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    let p = cfg.patch_side;
    let g = cfg.image_side / p;
    let mut out = Matrix::zeros(g * g, p * p);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for y in 0..p {
                for x in 0..p {
                    row[y * p + x] = image.get(gx * p + x, gy * p + y);
                }
            }
        }
    }
    Ok(out)
}

/// Parameters placed on a tape, addressable by name.
pub(crate) struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
    /// Drop rate and mask source; `None` at inference.
    dropout: Option<RefCell<(f64, ChaCha8Rng)>>,
}

impl Bound<'_> {
    pub(crate) fn bind<'a>(tape: &mut Tape, params: &'a ModelParams, trainable: bool) -> Bound<'a> {
        let vars = params
            .tensors
            .iter()
            .map(|m| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        Bound { params, vars, dropout: None }
    }

    fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some(RefCell::new((rate, rng)));
        }
        self
    }

    /// Inverted dropout.
    fn drop(&self, t: &mut Tape, x: Var) -> Var {
        let Some(cell) = &self.dropout else { return x };
        let (rate, rng) = &mut *cell.borrow_mut();
        let keep = 1.0 / (1.0 - *rate);
        let (r, c) = (t.value(x).rows(), t.value(x).cols());
        let m = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < *rate { 0.0 } else { keep });
        t.mul_const(x, m)
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        let w = self.var(&format!("{name}.w"));
        let b = self.var(&format!("{name}.b"));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    fn mlp3(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        let h = self.linear(t, x, &format!("{name}.0"));
        let h = t.relu(h);
        let h = self.linear(t, h, &format!("{name}.1"));
        let h = t.relu(h);
        self.linear(t, h, &format!("{name}.2"))
    }

    fn attention(&self, t: &mut Tape, cfg: &DecoderConfig, q_in: Var, kv: Var, name: &str) -> Var {
        let q = self.linear(t, q_in, &format!("{name}.q"));
        let k = self.linear(t, kv, &format!("{name}.k"));
        let v = self.linear(t, kv, &format!("{name}.v"));
        let dh = cfg.d_model / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let s = t.matmul_nt(qh, kh);
            let s = t.scale(s, scale);
            let a = t.softmax_rows(s);
            outs.push(t.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.linear(t, o, &format!("{name}.o"))
    }

    /// Patch features `x` (`T × d`).
    pub(crate) fn encode(&self, t: &mut Tape, cfg: &DecoderConfig, image: &GrayImage) -> Result<Var> {
        let patches = t.constant(patchify(image, cfg)?);
        let proj = self.linear(t, patches, "patch");
        let pe = t.constant(position_encoding(cfg.image_side / cfg.patch_side, cfg.d_model));
        Ok(t.add(proj, pe))
    }

    /// Query states after each decoder layer.
    pub(crate) fn decode(&self, t: &mut Tape, cfg: &DecoderConfig, x: Var) -> Vec<Var> {
        let mut q = self.var("query");
        let mut states = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let sa = self.attention(t, cfg, q, q, &format!("dec{l}.self"));
            let sa = self.drop(t, sa);
            q = t.add(q, sa);
            let ca = self.attention(t, cfg, q, x, &format!("dec{l}.cross"));
            let ca = self.drop(t, ca);
            q = t.add(q, ca);
            let h = self.linear(t, q, &format!("dec{l}.ffn.0"));
            let h = t.relu(h);
            let h = self.drop(t, h);
            let f = self.linear(t, h, &format!("dec{l}.ffn.1"));
            let f = self.drop(t, f);
            q = t.add(q, f);
            states.push(q);
        }
        states
    }

    pub(crate) fn class_head(&self, t: &mut Tape, q: Var) -> Var {
        self.linear(t, q, "cls")
    }

    pub(crate) fn box_head(&self, t: &mut Tape, q: Var) -> Var {
        let b = self.mlp3(t, q, "box");
        t.sigmoid(b)
    }

    pub(crate) fn mask_head(&self, t: &mut Tape, q: Var) -> Var {
        self.mlp3(t, q, "mask")
    }
}

/// Patch projection plus position codes for one image (`T × d`).
pub fn encode_image(params: &ModelParams, cfg: &DecoderConfig, image: &GrayImage) -> Result<Matrix> {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params, false);
    let x = b.encode(&mut t, cfg, image)?;
    Ok(t.value(x).clone())
}

/// Query states `q¹ … q^K` for features `x`.
pub fn decoder_forward(params: &ModelParams, cfg: &DecoderConfig, x: &Matrix) -> Vec<Matrix> {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params, false);
    let xv = t.constant(x.clone());
    b.decode(&mut t, cfg, xv).into_iter().map(|v| t.value(v).clone()).collect()
}

/// The three heads applied row-wise to query states `q` (`J × d`).
pub fn heads_forward(params: &ModelParams, q: &Matrix) -> Result<PredictionSet> {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params, false);
    let qv = t.constant(q.clone());
    let logits = b.class_head(&mut t, qv);
    let boxes = b.box_head(&mut t, qv);
    let vectors = b.mask_head(&mut t, qv);
    PredictionSet::new(t.value(logits).clone(), t.value(boxes).clone(), t.value(vectors).clone())
}

/// Final-layer predictions for one image.
pub fn infer(params: &ModelParams, cfg: &DecoderConfig, image: &GrayImage) -> Result<PredictionSet> {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params, false);
    let x = b.encode(&mut t, cfg, image)?;
    let q = *b.decode(&mut t, cfg, x).last().expect("at least one layer");
    let logits = b.class_head(&mut t, q);
    let boxes = b.box_head(&mut t, q);
    let vectors = b.mask_head(&mut t, q);
    PredictionSet::new(t.value(logits).clone(), t.value(boxes).clone(), t.value(vectors).clone())
}

/// Soft `N × N` mask for a raw head output. Flatten outputs are logits, so they go through a sigmoid.
pub fn decode_vector(codec: &Codec, coeffs: &[f64]) -> Result<SoftMask> {
    if codec.kind() == CodecKind::Flatten {
        let probs: Vec<f64> = coeffs.iter().map(|&c| sigmoid(c)).collect();
        codec.decode_coeffs(&probs)
    } else {
        codec.decode_coeffs(coeffs)
    }
}

/// Decodes `coeffs`, resamples onto the image grid (into `bbox` in box mode,
/// over the whole image otherwise) and binarizes at 0.5.
pub fn vector_to_mask(
    codec: &Codec,
    coeffs: &[f64],
    bbox: &BoxXyxy,
    image_w: usize,
    image_h: usize,
    mode: CropMode,
) -> Result<BinaryMask> {
    let soft = decode_vector(codec, coeffs)?;
    let pasted = match mode {
        CropMode::Box => paste_into_box(&soft, bbox, image_w, image_h)?,
        CropMode::Full => resize(&soft, image_w, image_h),
    };
    Ok(binarize(&pasted, crate::mask::DEFAULT_THRESHOLD))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub bbox: BoxXyxy,
    pub mask: BinaryMask,
}

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

/// Per query: best sigmoid score and its category, box scaled to the image and
/// the decoded mask pasted into that box. No suppression of any kind.
pub fn predict(
    params: &ModelParams,
    cfg: &DecoderConfig,
    image: &GrayImage,
    codec: &Codec,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    if codec.spec().nk != cfg.codec.nk || codec.kind() != cfg.codec.kind || codec.side() != cfg.codec.side {
        return Err(Error::InvalidArgument(format!(
            "codec ({}, N={}, n_k={}) does not match the model ({}, N={}, n_k={})",
            codec.kind(),
            codec.side(),
            codec.nk(),
            cfg.codec.kind,
            cfg.codec.side,
            cfg.codec.nk
        )));
    }
    let pred = infer(params, cfg, image)?;
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::new();
    for i in 0..pred.num_queries() {
        let row = pred.logits.row(i);
        let (category, logit) = row
            .iter()
            .cloned()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best });
        let score = sigmoid(logit);
        if score < score_thresh {
            continue;
        }
        let u = cxcywh_to_xyxy(pred.box_array(i));
        let bbox = BoxXyxy::new(u.x1 * w as f64, u.y1 * h as f64, u.x2 * w as f64, u.y2 * h as f64);
        let mask = if cfg.crop_mode == CropMode::Full || (bbox.width() > 0.0 && bbox.height() > 0.0) {
            vector_to_mask(codec, pred.vectors.row(i), &bbox, w, h, cfg.crop_mode)?
        } else {
            BinaryMask::zeros(w, h)
        };
        out.push(Detection { category, score, bbox, mask });
    }
    Ok(out)
}

/// Training switch for the detection-only baseline: the vector weight drops to 0,
/// which also keeps the mask head out of the graph.
pub fn detection_only_mode(mut cfg: TrainConfig) -> TrainConfig {
    cfg.weights.vec = 0.0;
    cfg
}

/// Scalar loss of one batch with everything needed to differentiate it.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub param_vars: Vec<Var>,
    pub breakdown: LossBreakdown,
    /// One assignment per (image, layer), image-major.
    pub assignments: Vec<Assignment>,
}

#[derive(Clone, Debug, Default)]
pub enum BranchMode {
    #[default]
    Free,
    /// Record the kink branches on the returned tape.
    Record,
    /// Evaluate kinked nodes on previously recorded branches.
    Pinned(Arc<BranchRecord>),
}

#[derive(Clone, Debug, Default)]
pub struct LossOptions<'a> {
    /// Reuse earlier assignments instead of matching (for finite differences).
    pub fixed: Option<&'a [Assignment]>,
    pub fault: Option<(OpKind, f64)>,
    /// Enables dropout at `TrainConfig::dropout`.
    pub dropout_rng: Option<ChaCha8Rng>,
    pub branches: BranchMode,
}

/// Which layers (0-based) receive the vector loss.
pub fn vec_layers(layers: usize, vec_loss_layers: Option<usize>) -> std::ops::Range<usize> {
    let n = vec_loss_layers.unwrap_or(layers).min(layers);
    layers - n..layers
}

/// Builds the batch loss: every (image, layer) is matched on its own
/// detection cost and contributes its instance loss; the total is the mean.
///
pub fn build_loss(
    params: &ModelParams,
    cfg: &DecoderConfig,
    batch: &[&Sample],
    tcfg: &TrainConfig,
    opts: LossOptions<'_>,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let fixed = opts.fixed;
    let mut t = Tape::new();
    if let Some((k, f)) = opts.fault {
        t.inject_fault(k, f);
    }
    match opts.branches {
        BranchMode::Free => {}
        BranchMode::Record => t.record_branches(),
        BranchMode::Pinned(r) => t.pin_branches(r),
    }
    let mut b = Bound::bind(&mut t, params, true);
    if let Some(rng) = opts.dropout_rng {
        b = b.with_dropout(tcfg.dropout, rng);
    }
    let (jq, s) = (cfg.queries, cfg.classes);
    let with_vec = tcfg.weights.vec > 0.0;
    let vrange = vec_layers(cfg.layers, tcfg.vec_loss_layers);

    let mut all_states = Vec::with_capacity(batch.len() * cfg.layers);
    for sample in batch {
        if sample.targets.len() > jq {
            return Err(Error::InvalidArgument(format!(
                "{} ground truths exceed {jq} queries",
                sample.targets.len()
            )));
        }
        let x = b.encode(&mut t, cfg, &sample.image)?;
        all_states.extend(b.decode(&mut t, cfg, x));
    }
    let stacked = t.concat_rows(&all_states);
    let logits = b.class_head(&mut t, stacked);
    let boxes = b.box_head(&mut t, stacked);
    // mask head only on the layers with a vector loss, image-major
    let vec_rows: Vec<usize> = (0..all_states.len()).filter(|u| vrange.contains(&(u % cfg.layers))).collect();
    let vectors = if with_vec && !vec_rows.is_empty() {
        let sel: Vec<Var> = vec_rows.iter().map(|&u| all_states[u]).collect();
        let h = if sel.len() == 1 { sel[0] } else { t.concat_rows(&sel) };
        Some(b.mask_head(&mut t, h))
    } else {
        None
    };

    let w = &tcfg.weights;
    let fp = tcfg.focal;
    let units = all_states.len();
    let mut terms: Vec<Var> = Vec::new();
    let mut coeffs: Vec<f64> = Vec::new();
    let mut parts = Vec::with_capacity(units);
    let mut assignments = Vec::with_capacity(units);
    for u in 0..units {
        let gts = &batch[u / cfg.layers].targets;
        let n = gts.len().max(1) as f64;
        let lg = t.slice_rows(logits, u * jq, jq);
        let bx = t.slice_rows(boxes, u * jq, jq);
        let vec_slot = vec_rows.iter().position(|&r| r == u);
        let vs = match (vectors, vec_slot) {
            (Some(v), Some(k)) => Some(t.slice_rows(v, k * jq, jq)),
            _ => None,
        };

        let assignment = match fixed {
            Some(f) => f[u].clone(),
            None => {
                let p = PredictionSet::new(t.value(lg).clone(), t.value(bx).clone(), Matrix::zeros(jq, 0))?;
                hungarian(&pairwise_cost(&p, gts, w, fp)?)?
            }
        };
        let mut targets = Matrix::zeros(jq, s);
        for &(g, i) in assignment.pairs() {
            targets[(i, gts[g].category)] = 1.0;
        }
        let cls = t.focal_sum(lg, targets, fp);
        let mut part = [t.value(cls).item(), 0.0, 0.0, 0.0];
        terms.push(cls);
        coeffs.push(w.cls / n);
        if !gts.is_empty() {
            let preds: Vec<usize> = assignment.pairs().iter().map(|p| p.1).collect();
            let gt_boxes = Matrix::from_fn(gts.len(), 4, |r, c| gts[assignment.pairs()[r].0].bbox.as_array()[c]);
            let gb = t.gather_rows(bx, &preds);
            let l1 = t.l1_sum(gb, gt_boxes.clone());
            let gi = t.giou_loss_sum(gb, gt_boxes);
            part[1] = t.value(l1).item();
            part[2] = t.value(gi).item();
            terms.extend([l1, gi]);
            coeffs.extend([w.l1 / n, w.giou / n]);
            if let Some(vs) = vs {
                let nk = cfg.codec.nk;
                let gt_vecs = Matrix::from_fn(gts.len(), nk, |r, c| {
                    gts[assignment.pairs()[r].0].mask_vector.coeffs()[c]
                });
                let gv = t.gather_rows(vs, &preds);
                let (v, value) = vector_loss(&mut t, cfg.codec.kind, gv, gt_vecs);
                part[3] = value;
                terms.push(v);
                coeffs.push(w.vec / n);
            }
        }
        parts.push(LossBreakdown::from_terms(part[0] / n, part[1] / n, part[2] / n, part[3] / n, w));
        assignments.push(assignment);
    }
    let row = t.concat_cols(&terms);
    let k = 1.0 / units as f64;
    let weights = Matrix::from_vec(1, coeffs.len(), coeffs.iter().map(|c| c * k).collect());
    let loss = t.weighted_sum(row, weights);
    let breakdown = LossBreakdown::mean(&parts);
    if !t.value(loss).item().is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {breakdown:?}")));
    }
    let param_vars = b.vars().to_vec();
    Ok(LossGraph {
        tape: t,
        loss,
        param_vars,
        breakdown,
        assignments,
    })
}

/// L1 on the vector for compressing codecs; per-pixel mean squared error plus dice on
/// sigmoid outputs for the Flatten baseline.
fn vector_loss(t: &mut Tape, kind: CodecKind, pred: Var, target: Matrix) -> (Var, f64) {
    if kind == CodecKind::Flatten {
        let pixels = target.cols() as f64;
        let p = t.sigmoid(pred);
        let se = t.squared_error_sum(p, target.clone());
        let mse = t.scale(se, 1.0 / pixels);
        let dice = t.dice_sum(p, target);
        let both = t.concat_cols(&[mse, dice]);
        let v = t.sum(both);
        let value = t.value(v).item();
        (v, value)
    } else {
        let v = t.l1_sum(pred, target);
        let value = t.value(v).item();
        (v, value)
    }
}

/// Matches final-layer predictions to ground truth, pastes each matched vector into its
/// ground-truth box and returns the mask IoUs (one per ground truth).
pub fn matched_mask_ious(
    params: &ModelParams,
    cfg: &DecoderConfig,
    codec: &Codec,
    samples: &[Sample],
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let pred = infer(params, cfg, &s.image)?;
        let a = hungarian(&pairwise_cost(&pred, &s.targets, weights, FocalParams::default())?)?;
        let (w, h) = (s.image.width(), s.image.height());
        for &(g, i) in a.pairs() {
            let gt = &s.targets[g];
            let m = vector_to_mask(codec, pred.vectors.row(i), &gt.bbox.to_xyxy(w, h), w, h, cfg.crop_mode)?;
            out.push(crate::mask::mask_iou(&m, &gt.raw_mask)?);
        }
    }
    Ok(out)
}
