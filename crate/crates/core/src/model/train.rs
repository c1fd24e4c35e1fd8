//! Adam training loop with decoupled weight decay and a single step decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_loss, LossOptions, DecoderConfig, ModelParams, Sample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::matching::{FocalParams, LossBreakdown, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// The learning rate is multiplied by `lr_decay_factor` from this fraction of `steps` on.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Number of final decoder layers receiving the vector loss; `None` means all.
    pub vec_loss_layers: Option<usize>,
    /// Dropout rate on decoder sublayer outputs and the FFN hidden layer.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            steps: 2000,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            clip_norm: None,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            vec_loss_layers: None,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.lr_decay_at * self.steps as f64 {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

/// One optimization step on `batch`; returns the breakdown of the loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &DecoderConfig,
    batch: &[&Sample],
    tcfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    // a fresh mask stream per step keeps runs reproducible
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(2 + state.t as u64);
    let graph = build_loss(
        params,
        cfg,
        batch,
        tcfg,
        LossOptions {
            dropout_rng: Some(rng),
            ..Default::default()
        },
    )?;
    let mut grads = graph.tape.backward(graph.loss);
    let mut g: Vec<Option<Matrix>> = graph.param_vars.iter().map(|&v| grads.take(v)).collect();
    if let Some(clip) = tcfg.clip_norm {
        let norm = g.iter().flatten().map(Matrix::sum_sq).sum::<f64>().sqrt();
        if norm > clip {
            for m in g.iter_mut().flatten() {
                m.scale_in_place(clip / norm);
            }
        }
    }
    state.t += 1;
    let bc1 = 1.0 - tcfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - tcfg.beta2.powi(state.t as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let gi = g[i].as_ref();
        for k in 0..p.len() {
            let gk = gi.map_or(0.0, |g| g.as_slice()[k]);
            let mk = &mut m.as_mut_slice()[k];
            let vk = &mut v.as_mut_slice()[k];
            *mk = tcfg.beta1 * *mk + (1.0 - tcfg.beta1) * gk;
            *vk = tcfg.beta2 * *vk + (1.0 - tcfg.beta2) * gk * gk;
            let update = (*mk / bc1) / ((*vk / bc2).sqrt() + tcfg.eps);
            let w = &mut p.as_mut_slice()[k];
            *w -= lr * (update + tcfg.weight_decay * *w);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!(
            "parameters became non-finite at step {} (loss {:?})",
            state.t, graph.breakdown
        )));
    }
    Ok(graph.breakdown)
}

/// Trains from a seeded initialization. Batches are drawn by reshuffling the
/// sample indices every epoch. `on_step` sees each step's breakdown.
pub fn train(
    cfg: &DecoderConfig,
    tcfg: &TrainConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(ModelParams, Vec<LossBreakdown>)> {
    cfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut params = ModelParams::init(cfg, tcfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size.min(samples.len()) {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&samples[order.pop().unwrap()]);
        }
        let b = train_step(&mut params, &mut state, cfg, &batch, tcfg, tcfg.lr_at(step))?;
        on_step(step, &b);
        if step % 100 == 0 {
            log::info!("step {step}: total {:.4} (cls {:.4}, l1 {:.4}, giou {:.4}, vec {:.4})", b.total, b.cls, b.l1, b.giou, b.vec);
        }
        log.push(b);
    }
    Ok((params, log))
}
