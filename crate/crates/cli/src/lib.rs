//! Experiment commands behind the `uqr` binary: codec sweeps, training,
//! evaluation and gradient checks. Each command writes its resolved config
//! next to its outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use uqr_core::codec::io::{read_basis, write_basis};
use uqr_core::codec::{Codec, CodecKind, CodecSpec, DEFAULT_NK, DEFAULT_SIDE};
use uqr_core::data::{codec_input, fit_codecs, gen_synthetic, load_scenes, scene_to_sample, CropMode, Scene, SceneConfig};
use uqr_core::eval::{evaluate, predict_all, ApReport, EvalImage, EVAL_SCORE_THRESHOLD};
use uqr_core::mask::{binarize, mask_iou, BinaryMask, BoxXyxy, SoftMask, DEFAULT_THRESHOLD};
use uqr_core::matching::LossBreakdown;
use uqr_core::model::checkpoint::{read_checkpoint, write_checkpoint};
use uqr_core::model::gradcheck::{grad_check, primitive_checks, GradCheckReport, PrimitiveReport};
use uqr_core::model::tape::OpKind;
use uqr_core::model::{matched_mask_ious, train, DecoderConfig, ModelParams, Sample, TrainConfig};
use uqr_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_TIMING_CSV: &str = "sweep_timing.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.uqrm";
pub const CODEC_FILE: &str = "codec.uqrb";
pub const AP_CSV: &str = "ap_report.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const PRIMITIVES_CSV: &str = "gradcheck_primitives.csv";
pub const PARAMS_CSV: &str = "gradcheck_params.csv";

pub const SWEEP_HEADER: &str = "codec,n,nk,masks,mean_iou,median_iou";
pub const SWEEP_TIMING_HEADER: &str = "codec,n,nk,fit_s,encode_ms_per_mask,decode_ms_per_mask";
pub const AP_HEADER: &str = "category,num_gt,box_ap50,box_ap,mask_ap50,mask_ap";
pub const PREDICTIONS_HEADER: &str = "image,category,score,x1,y1,x2,y2,mask_area";

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "UQR_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Instance masks used by codec sweeps.
    pub sweep_masks: usize,
    /// Read scenes from a saved dataset instead of generating them; the first
    /// `train_scenes` train and the next `val_scenes` validate.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_scenes: 300,
            val_scenes: 100,
            sweep_masks: 500,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub codecs: Vec<CodecKind>,
    pub sides: Vec<usize>,
    pub nks: Vec<usize>,
    /// Cells outside the `codecs × sides × nks` grid, as `(codec, N, n_k)`.
    pub extra_cells: Vec<(CodecKind, usize, usize)>,
    /// Sparse-coding settings shared by every sparse cell.
    pub sparse_params: uqr_core::codec::CodecParams,
    /// Masks PCA and sparse cells are fitted on, drawn after the evaluation masks.
    pub fit_masks: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            codecs: vec![CodecKind::Dct, CodecKind::Pca],
            sides: vec![64, 96, DEFAULT_SIDE, 256],
            nks: vec![144, DEFAULT_NK, 300, 400],
            extra_cells: vec![(CodecKind::Sparse, DEFAULT_SIDE, DEFAULT_NK)],
            sparse_params: Default::default(),
            fit_masks: 1000,
        }
    }
}

impl SweepConfig {
    /// Grid cells in report order: grid first (codec, N, n_k nesting), then extras.
    pub fn cells(&self) -> Vec<CodecSpec> {
        let mut out = Vec::new();
        for &kind in &self.codecs {
            for &n in &self.sides {
                for &nk in &self.nks {
                    out.push(self.spec(kind, n, nk));
                }
            }
        }
        out.extend(self.extra_cells.iter().map(|&(k, n, nk)| self.spec(k, n, nk)));
        out
    }

    fn spec(&self, kind: CodecKind, n: usize, nk: usize) -> CodecSpec {
        let mut s = CodecSpec::new(kind, n, nk);
        if kind == CodecKind::Sparse {
            s.params = self.sparse_params;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub params: usize,
    pub h: f64,
    pub pipeline_tol: f64,
    pub primitive_tol: f64,
    /// Required fraction of sampled parameters under `pipeline_tol`.
    pub pass_fraction: f64,
    pub batch: usize,
    /// Test hook: scale the adjoint of every node of one primitive kind,
    /// e.g. `["softmax_rows", 1.05]`.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            params: 500,
            h: 1e-5,
            pipeline_tol: 1e-4,
            primitive_tol: 1e-6,
            pass_fraction: 0.99,
            batch: 2,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Dataset seed. Model initialization and batching use `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
}


impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.train_scenes == 0 || self.data.val_scenes == 0 || self.data.sweep_masks == 0 {
            return Err(Error::InvalidArgument("scene and mask counts must be >= 1".into()));
        }
        for c in self.sweep.cells() {
            c.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.gradcheck;
        if self.sweep.fit_masks == 0 {
            return Err(Error::InvalidArgument("sweep.fit_masks must be >= 1".into()));
        }
        if g.params == 0 || !(g.h > 0.0) || g.batch == 0 || !(0.0..=1.0).contains(&g.pass_fraction) {
            return Err(Error::InvalidArgument(format!("invalid gradcheck settings {g:?}")));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join(CONFIG_FILE))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

// ---------------------------------------------------------------------------
// data

/// Train and validation scenes.
pub fn scenes(cfg: &ExperimentConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let (nt, nv) = (cfg.data.train_scenes, cfg.data.val_scenes);
    let mut all = match &cfg.data.dir {
        Some(dir) => load_scenes(dir)?,
        None => gen_synthetic(cfg.seed, nt + nv, &cfg.data.scene)?,
    };
    if all.len() < nt + nv {
        return Err(Error::InsufficientSamples { needed: nt + nv, got: all.len() });
    }
    all.truncate(nt + nv);
    let val = all.split_off(nt);
    Ok((all, val))
}

pub fn to_samples(scenes: &[Scene], codec: &Codec, mode: CropMode) -> Result<Vec<Sample>> {
    scenes.iter().map(|s| scene_to_sample(s, codec, mode)).collect()
}

/// The first `count` instances of the seeded synthetic stream.
pub fn sweep_instances(seed: u64, count: usize, scene: &SceneConfig) -> Result<Vec<(BinaryMask, BoxXyxy)>> {
    let mut out = Vec::with_capacity(count);
    let mut n = count.div_ceil(2).max(1);
    while out.len() < count {
        out.clear();
        for s in gen_synthetic(seed, n, scene)? {
            out.extend(s.instances.into_iter().map(|i| (i.mask, i.bbox)));
        }
        n *= 2;
    }
    out.truncate(count);
    Ok(out)
}

// ---------------------------------------------------------------------------
// codec-sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub codec: CodecKind,
    pub n: usize,
    pub nk: usize,
    pub masks: usize,
    pub mean_iou: f64,
    pub median_iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepTiming {
    pub codec: CodecKind,
    pub n: usize,
    pub nk: usize,
    pub fit_s: f64,
    pub encode_ms_per_mask: f64,
    pub decode_ms_per_mask: f64,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Masks per batched encode/decode call in sweeps.
const SWEEP_CHUNK: usize = 32;

fn box_crops(pool: &rayon::ThreadPool, instances: &[(BinaryMask, BoxXyxy)], side: usize) -> Result<Vec<BinaryMask>> {
    pool.install(|| {
        instances
            .par_iter()
            .map(|(m, b)| codec_input(m, b, side, CropMode::Box))
            .collect()
    })
}

/// Reconstruction IoU of every codec cell on `data.sweep_masks` box-crop masks.
/// PCA and sparse cells are fitted on the next `sweep.fit_masks` masks of the
/// same synthetic stream, so evaluation is on held-out masks.
pub fn codec_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, Vec<SweepTiming>)> {
    let cells = cfg.sweep.cells();
    let fitting = cells.iter().any(|c| c.kind.needs_fitting());
    let n_eval = cfg.data.sweep_masks;
    let n_fit = if fitting { cfg.sweep.fit_masks } else { 0 };
    let mut instances = sweep_instances(cfg.seed, n_eval + n_fit, &cfg.data.scene)?;
    let fit_instances = instances.split_off(n_eval);
    let pool = thread_pool()?;
    let mut rows = Vec::with_capacity(cells.len());
    let mut timing = Vec::with_capacity(cells.len());
    let mut crops: Option<(usize, Vec<BinaryMask>, Vec<SoftMask>)> = None;
    for spec in cells {
        if crops.as_ref().is_none_or(|(n, _, _)| *n != spec.side) {
            let eval = box_crops(&pool, &instances, spec.side)?;
            let fit = if fitting {
                box_crops(&pool, &fit_instances, spec.side)?.iter().map(BinaryMask::to_soft).collect()
            } else {
                Vec::new()
            };
            crops = Some((spec.side, eval, fit));
        }
        let (_, masks, fit_set) = crops.as_ref().expect("set above");
        let soft: Vec<_> = masks.iter().map(BinaryMask::to_soft).collect();
        let t0 = Instant::now();
        let codec = if spec.kind.needs_fitting() {
            Codec::fit(spec, fit_set)?
        } else {
            Codec::analytic(spec)?
        };
        let fit_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let vectors: Vec<_> = pool
            .install(|| soft.par_chunks(SWEEP_CHUNK).map(|c| codec.encode_batch(c)).collect::<Result<Vec<_>>>())?
            .concat();
        let enc = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let decoded: Vec<_> = pool
            .install(|| vectors.par_chunks(SWEEP_CHUNK).map(|c| codec.decode_batch(c)).collect::<Result<Vec<_>>>())?
            .concat();
        let dec = t2.elapsed().as_secs_f64();
        let mut ious = decoded
            .iter()
            .zip(masks)
            .map(|(d, m)| mask_iou(&binarize(d, DEFAULT_THRESHOLD), m))
            .collect::<Result<Vec<_>>>()?;
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let row = SweepRow {
            codec: spec.kind,
            n: spec.side,
            nk: spec.nk,
            masks: ious.len(),
            mean_iou: mean,
            median_iou: median(&mut ious),
        };
        log::info!("{} N={} n_k={}: mean IoU {:.4} (fit {fit_s:.2}s)", row.codec, row.n, row.nk, row.mean_iou);
        let per = 1e3 / masks.len() as f64;
        timing.push(SweepTiming {
            codec: spec.kind,
            n: spec.side,
            nk: spec.nk,
            fit_s,
            encode_ms_per_mask: enc * per,
            decode_ms_per_mask: dec * per,
        });
        rows.push(row);
    }
    Ok((rows, timing))
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:?},{:?}", r.codec, r.n, r.nk, r.masks, r.mean_iou, r.median_iou)?;
    }
    Ok(())
}

pub fn cmd_codec_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    cfg.write(out)?;
    let (rows, timing) = codec_sweep(cfg)?;
    let mut f = create(out, SWEEP_CSV)?;
    write_sweep_csv(&mut f, &rows)?;
    f.flush()?;
    let mut t = create(out, SWEEP_TIMING_CSV)?;
    writeln!(t, "{SWEEP_TIMING_HEADER}")?;
    for r in &timing {
        writeln!(t, "{},{},{},{:.4},{:.4},{:.4}", r.codec, r.n, r.nk, r.fit_s, r.encode_ms_per_mask, r.decode_ms_per_mask)?;
    }
    t.flush()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// train / eval

pub fn write_ap_csv(mut w: impl Write, r: &ApReport) -> Result<()> {
    writeln!(w, "{AP_HEADER}")?;
    let gt: usize = r.per_category.iter().map(|c| c.num_gt).sum();
    writeln!(w, "mean,{gt},{:?},{:?},{:?},{:?}", r.bbox.ap50, r.bbox.ap, r.mask.ap50, r.mask.ap)?;
    for c in &r.per_category {
        writeln!(w, "{},{},{:?},{:?},{:?},{:?}", c.category, c.num_gt, c.bbox.ap50, c.bbox.ap, c.mask.ap50, c.mask.ap)?;
    }
    Ok(())
}

pub fn write_predictions_csv(mut w: impl Write, images: &[EvalImage]) -> Result<()> {
    writeln!(w, "{PREDICTIONS_HEADER}")?;
    for (i, im) in images.iter().enumerate() {
        for d in &im.dets {
            let b = d.bbox;
            writeln!(w, "{i},{},{:?},{:?},{:?},{:?},{:?},{}", d.category, d.score, b.x1, b.y1, b.x2, b.y2, d.mask.area())?;
        }
    }
    Ok(())
}

/// Codec for the model's mask targets, fitted on the training scenes when needed.
pub fn model_codec(cfg: &ExperimentConfig, train_scenes: &[Scene]) -> Result<Codec> {
    Ok(fit_codecs(train_scenes, &[cfg.model.codec])?.remove(0))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LossBreakdown>,
    pub report: ApReport,
    /// Mean IoU of final-layer matched vectors pasted into their ground-truth boxes.
    pub matched_mask_iou: f64,
    /// Mean total loss over the last 100 steps divided by that over the first 100.
    pub loss_ratio: f64,
}

pub fn loss_ratio(log: &[LossBreakdown]) -> f64 {
    let w = 100.min(log.len());
    let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
    mean(&log[log.len() - w..]) / mean(&log[..w])
}

/// Trains on the train split, evaluates on the validation split and writes
/// config, checkpoint, codec, training log, AP report and metrics to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.write(out)?;
    let (train_scenes, val_scenes) = scenes(cfg)?;
    let codec = model_codec(cfg, &train_scenes)?;
    if cfg.model.codec.kind.needs_fitting() {
        write_basis(&codec, create(out, CODEC_FILE)?)?;
    }
    let train_samples = to_samples(&train_scenes, &codec, cfg.model.crop_mode)?;
    let val_samples = to_samples(&val_scenes, &codec, cfg.model.crop_mode)?;

    let mut log_w = create(out, TRAIN_LOG_CSV)?;
    writeln!(log_w, "{}", LossBreakdown::CSV_HEADER)?;
    let mut io_err = None;
    let (params, log) = train(&cfg.model, &cfg.train, &train_samples, |step, b| {
        if io_err.is_none() {
            io_err = b.write_csv_row(&mut log_w, step).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log_w.flush()?;
    write_checkpoint(create(out, CHECKPOINT_FILE)?, &cfg.model, &params)?;

    let images = predict_all(&params, &cfg.model, &codec, &val_samples, EVAL_SCORE_THRESHOLD)?;
    let report = evaluate(&images, cfg.model.classes)?;
    let mut f = create(out, AP_CSV)?;
    write_ap_csv(&mut f, &report)?;
    f.flush()?;
    let ious = if cfg.train.weights.vec > 0.0 {
        matched_mask_ious(&params, &cfg.model, &codec, &val_samples, &cfg.train.weights)?
    } else {
        Vec::new()
    };
    let matched_mask_iou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    let ratio = loss_ratio(&log);
    let mut m = create(out, METRICS_CSV)?;
    writeln!(m, "metric,value")?;
    writeln!(m, "loss_ratio,{ratio:?}")?;
    writeln!(m, "matched_mask_iou,{matched_mask_iou:?}")?;
    m.flush()?;
    Ok(TrainOutcome {
        params,
        log,
        report,
        matched_mask_iou,
        loss_ratio: ratio,
    })
}

/// Evaluates a checkpoint on the validation split of `cfg`'s dataset.
/// `codec_path` is required when the checkpoint's codec needs fitting.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, codec_path: Option<&Path>, out: &Path) -> Result<ApReport> {
    let (model, params) = read_checkpoint(std::io::BufReader::new(File::open(checkpoint)?))?;
    let mut cfg = cfg.clone();
    if cfg.model != model {
        log::info!("using the model config stored in {}", checkpoint.display());
        cfg.model = model;
    }
    cfg.validate()?;
    cfg.write(out)?;
    let codec = match codec_path {
        Some(p) => read_basis(model.codec, std::io::BufReader::new(File::open(p)?))?,
        None if model.codec.kind.needs_fitting() => {
            return Err(Error::InvalidArgument(format!(
                "checkpoint uses a fitted {} codec; pass its basis file",
                model.codec.kind
            )))
        }
        None => Codec::analytic(model.codec)?,
    };
    if codec.spec().kind != model.codec.kind || codec.side() != model.codec.side || codec.nk() != model.codec.nk {
        return Err(Error::InvalidArgument("codec does not match the checkpoint".into()));
    }
    let (_, val_scenes) = scenes(&cfg)?;
    let val = to_samples(&val_scenes, &codec, model.crop_mode)?;
    let images = predict_all(&params, &model, &codec, &val, EVAL_SCORE_THRESHOLD)?;
    let report = evaluate(&images, model.classes)?;
    let mut f = create(out, AP_CSV)?;
    write_ap_csv(&mut f, &report)?;
    f.flush()?;
    let mut p = create(out, PREDICTIONS_CSV)?;
    write_predictions_csv(&mut p, &images)?;
    p.flush()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub primitives: Vec<PrimitiveReport>,
    pub pipeline: GradCheckReport,
    pub passed: bool,
}

/// Checks every primitive in isolation and `gradcheck.params` sampled parameters
/// through the full loss on the first `gradcheck.batch` training scenes. Fitted
/// codecs are fitted on the whole training split, as for training.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    cfg.write(out)?;
    let g = &cfg.gradcheck;
    let primitives = primitive_checks(cfg.seed, g.h, g.primitive_tol, g.fault);
    let (train_scenes, _) = scenes(cfg)?;
    let codec = model_codec(cfg, &train_scenes)?;
    let samples = to_samples(&train_scenes[..g.batch.min(train_scenes.len())], &codec, cfg.model.crop_mode)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let params = ModelParams::init(&cfg.model, cfg.train.seed)?;
    let pipeline = grad_check(&params, &cfg.model, &batch, &cfg.train, g.params, g.h, g.pipeline_tol, cfg.seed, g.fault)?;

    let mut f = create(out, PRIMITIVES_CSV)?;
    writeln!(f, "primitive,max_rel_err,passed")?;
    for r in &primitives {
        writeln!(f, "{},{:e},{}", r.name, r.max_rel_err, r.passed)?;
    }
    f.flush()?;
    let mut f = create(out, PARAMS_CSV)?;
    writeln!(f, "param,index,analytic,numeric,rel_err,passed")?;
    for c in &pipeline.checks {
        let ok = pipeline.passes(c);
        writeln!(f, "{},{},{:e},{:e},{:e},{ok}", c.name, c.index, c.analytic, c.numeric, c.rel_err)?;
    }
    f.flush()?;
    let passed = primitives.iter().all(|r| r.passed) && pipeline.pass_fraction() >= g.pass_fraction;
    Ok(GradcheckOutcome { primitives, pipeline, passed })
}

/// Process exit code for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}
