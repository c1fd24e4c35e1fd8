//! Central-difference verification of the tape, per primitive and through the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{check_gradients, rel_err, OpKind, Tape, Var};
use std::sync::Arc;

use super::{build_loss, BranchMode, LossOptions, DecoderConfig, ModelParams, Sample, TrainConfig};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::matching::FocalParams;

#[derive(Clone, Debug, Serialize)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Entries in `±[0.1, 1]`, away from the kinks of relu and |·|.
fn off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Each case: name, inputs and a scalar-valued graph over them. Matrix-valued
/// ops are reduced with a fixed random weighting so every output entry matters.
fn cases(seed: u64) -> Vec<(&'static str, Vec<Matrix>, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = |r, c| uniform(&mut rng, r, c, -1.0, 1.0);
    let (w34, w35, w36, w33, w64, w26, w42) = (w(3, 4), w(3, 5), w(3, 6), w(3, 3), w(6, 4), w(2, 6), w(4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = &mut rng;
    let fp = FocalParams::default();
    // targets shifted down-right by more than the size change, so no box contains
    // another along either axis and no partial vanishes
    let boxes = Matrix::from_fn(3, 4, |_, c| if c < 2 { r.random_range(0.3..0.6) } else { r.random_range(0.15..0.3) });
    let box_t = Matrix::from_fn(3, 4, |i, c| {
        if c < 2 {
            boxes[(i, c)] + r.random_range(0.05..0.1)
        } else {
            boxes[(i, c)] + r.random_range(-0.02..0.02)
        }
    });
    let l1_a = off_zero(r, 3, 4);
    let l1_t = l1_a.map(|v| v - 0.5);
    let focal_t = Matrix::from_fn(3, 4, |_, _| f64::from(r.random_bool(0.3)));
    let dice_t = Matrix::from_fn(2, 6, |_, _| f64::from(r.random_bool(0.5)));
    let sq_t = uniform(r, 3, 4, -1.0, 1.0);

    let ws = |w: &Matrix| {
        let w = w.clone();
        move |t: &mut Tape, v: Var| t.weighted_sum(v, w.clone())
    };
    let mut out: Vec<(&'static str, Vec<Matrix>, Builder)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            out.push(($name, vec![$($inp),*], Box::new($f)));
        };
    }
    let red = ws(&w34);
    case!("matmul", [uniform(r, 3, 5, -1.0, 1.0), uniform(r, 5, 4, -1.0, 1.0)], move |t, v| {
        let y = t.matmul(v[0], v[1]);
        red(t, y)
    });
    let red = ws(&w35);
    case!("matmul_nt", [uniform(r, 3, 4, -1.0, 1.0), uniform(r, 5, 4, -1.0, 1.0)], move |t, v| {
        let y = t.matmul_nt(v[0], v[1]);
        red(t, y)
    });
    let red = ws(&w34);
    case!("add", [uniform(r, 3, 4, -1.0, 1.0), uniform(r, 3, 4, -1.0, 1.0)], move |t, v| {
        let y = t.add(v[0], v[1]);
        red(t, y)
    });
    let red = ws(&w34);
    case!("add_row", [uniform(r, 3, 4, -1.0, 1.0), uniform(r, 1, 4, -1.0, 1.0)], move |t, v| {
        let y = t.add_row(v[0], v[1]);
        red(t, y)
    });
    let red = ws(&w34);
    case!("scale", [uniform(r, 3, 4, -1.0, 1.0)], move |t, v| {
        let y = t.scale(v[0], -1.7);
        red(t, y)
    });
    let red = ws(&w34);
    let mul_m = uniform(r, 3, 4, -2.0, 2.0);
    case!("mul_const", [uniform(r, 3, 4, -1.0, 1.0)], move |t, v| {
        let y = t.mul_const(v[0], mul_m.clone());
        red(t, y)
    });
    let red = ws(&w34);
    case!("relu", [off_zero(r, 3, 4)], move |t, v| {
        let y = t.relu(v[0]);
        red(t, y)
    });
    let red = ws(&w34);
    case!("sigmoid", [uniform(r, 3, 4, -4.0, 4.0)], move |t, v| {
        let y = t.sigmoid(v[0]);
        red(t, y)
    });
    let red = ws(&w36);
    case!("softmax_rows", [uniform(r, 3, 6, -3.0, 3.0)], move |t, v| {
        let y = t.softmax_rows(v[0]);
        red(t, y)
    });
    let red = ws(&w33);
    case!("slice_cols", [uniform(r, 3, 6, -1.0, 1.0)], move |t, v| {
        let y = t.slice_cols(v[0], 2, 3);
        red(t, y)
    });
    let red = ws(&w36);
    case!("concat_cols", [uniform(r, 3, 2, -1.0, 1.0), uniform(r, 3, 4, -1.0, 1.0)], move |t, v| {
        let y = t.concat_cols(&[v[0], v[1]]);
        red(t, y)
    });
    let red = ws(&w26);
    case!("slice_rows", [uniform(r, 5, 6, -1.0, 1.0)], move |t, v| {
        let y = t.slice_rows(v[0], 1, 2);
        red(t, y)
    });
    let red = ws(&w64);
    case!("concat_rows", [uniform(r, 2, 4, -1.0, 1.0), uniform(r, 4, 4, -1.0, 1.0)], move |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]);
        red(t, y)
    });
    let red = ws(&w42);
    case!("gather_rows", [uniform(r, 3, 2, -1.0, 1.0)], move |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 1]);
        red(t, y)
    });
    case!("sum", [uniform(r, 3, 4, -1.0, 1.0)], |t, v| t.sum(v[0]));
    case!("focal_sum", [uniform(r, 3, 4, -4.0, 4.0)], move |t, v| t.focal_sum(v[0], focal_t.clone(), fp));
    case!("l1_sum", [l1_a], move |t, v| t.l1_sum(v[0], l1_t.clone()));
    case!("giou_loss_sum", [boxes], move |t, v| t.giou_loss_sum(v[0], box_t.clone()));
    case!("dice_sum", [uniform(r, 2, 6, 0.05, 0.95)], move |t, v| t.dice_sum(v[0], dice_t.clone()));
    case!("squared_error_sum", [uniform(r, 3, 4, -1.0, 1.0)], move |t, v| t.squared_error_sum(v[0], sq_t.clone()));
    // residual attention block: q + softmax(q kᵀ/√d) v
    let red = ws(&w34);
    case!("attention_residual", [uniform(r, 3, 4, -1.0, 1.0), uniform(r, 5, 4, -1.0, 1.0), uniform(r, 5, 4, -1.0, 1.0)], move |t, v| {
        let s = t.matmul_nt(v[0], v[1]);
        let s = t.scale(s, 0.5);
        let a = t.softmax_rows(s);
        let o = t.matmul(a, v[2]);
        let y = t.add(v[0], o);
        red(t, y)
    });
    out
}

/// Checks every tape primitive on small random inputs with step `h`.
pub fn primitive_checks(seed: u64, h: f64, tol: f64, fault: Option<(OpKind, f64)>) -> Vec<PrimitiveReport> {
    cases(seed)
        .into_iter()
        .map(|(name, inputs, build)| {
            let e = check_gradients(&inputs, h, fault, build);
            PrimitiveReport {
                name,
                max_rel_err: e,
                passed: e < tol,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tol: f64,
    pub h: f64,
    /// Resolution of the central difference, `10·ε·|loss| / h`. Entries whose
    /// analytic and numeric values agree to within it pass regardless of
    /// relative error (exactly-zero gradients measure as pure rounding noise).
    pub roundoff: f64,
}

/// Safety factor on `ε·|loss| / h` for [`GradCheckReport::roundoff`].
const ROUNDOFF_FACTOR: f64 = 10.0;

impl GradCheckReport {
    pub fn passes(&self, c: &ParamCheck) -> bool {
        c.rel_err < self.tol || (c.analytic - c.numeric).abs() <= self.roundoff
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        self.checks.iter().filter(|c| self.passes(c)).count() as f64 / self.checks.len() as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// Reverse-mode gradient of the full batch loss against central differences
/// for `count` parameters, chosen round-robin over tensors with a random entry
/// in each. Matching and the branch of every relu and L1 entry are taken at
/// the unperturbed point and held fixed while perturbing.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams,
    cfg: &DecoderConfig,
    batch: &[&Sample],
    tcfg: &TrainConfig,
    count: usize,
    h: f64,
    tol: f64,
    seed: u64,
    fault: Option<(OpKind, f64)>,
) -> Result<GradCheckReport> {
    let opts = LossOptions {
        fault,
        branches: BranchMode::Record,
        ..Default::default()
    };
    let mut graph = build_loss(params, cfg, batch, tcfg, opts)?;
    let grads = graph.tape.backward(graph.loss);
    let branches = Arc::new(graph.tape.take_branches());
    let roundoff = ROUNDOFF_FACTOR * f64::EPSILON * graph.tape.value(graph.loss).item().abs() / h;
    let assignments = graph.assignments.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(count);
    for k in 0..count {
        let ti = k % params.len();
        let idx = rng.random_range(0..params.tensors()[ti].len());
        let analytic = grads.get(graph.param_vars[ti]).map_or(0.0, |g| g.as_slice()[idx]);
        let orig = work.tensors()[ti].as_slice()[idx];
        let eval = |x: f64, work: &mut ModelParams| -> Result<f64> {
            work.tensors_mut()[ti].as_mut_slice()[idx] = x;
            let opts = LossOptions {
                fixed: Some(&assignments),
                branches: BranchMode::Pinned(branches.clone()),
                ..Default::default()
            };
            let g = build_loss(work, cfg, batch, tcfg, opts)?;
            Ok(g.tape.value(g.loss).item())
        };
        let up = eval(orig + h, &mut work)?;
        let down = eval(orig - h, &mut work)?;
        work.tensors_mut()[ti].as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        checks.push(ParamCheck {
            name: params.names()[ti].clone(),
            index: idx,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(GradCheckReport { checks, tol, h, roundoff })
}
