//! Central finite-difference verification of the analytic gradients of the
//! full pipeline (encoder, sampler, attention, decoder) under the L1 loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, ModelConfig, Sample};
use crate::synthetic::smooth_random_field;
use crate::volume::{make_query_grid, QueryPoint, Volume};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub dims: [usize; 3],
    pub k: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dims: [4, 4, 3],
            k: 2,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Elements whose stencil at the nominal step straddled a kink and were
    /// re-checked at a smaller step.
    pub refined: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// A fixed regression problem: one random LR volume, every query of its
/// `k`-grid, random targets.
pub struct GradProblem {
    pub lr: Volume,
    pub pairs: Vec<(QueryPoint, f64)>,
}

impl GradProblem {
    pub fn new(cfg: &GradCheckConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let lr = smooth_random_field(cfg.dims, 4, [0.25; 3], &mut rng)?;
        let pairs = make_query_grid(cfg.dims, cfg.k)?
            .into_iter()
            .map(|q| (q, rng.gen_range(0.0..1.0)))
            .collect();
        Ok(Self { lr, pairs })
    }

    pub fn sample(&self) -> Sample<'_> {
        Sample {
            lr: &self.lr,
            pairs: &self.pairs,
        }
    }

    pub fn loss(&self, model: &Model) -> Result<f64> {
        Ok(model.loss_and_grad(&[self.sample()])?.0)
    }
}

/// Compares `analytic` against central differences of `problem.loss` for
/// every element of every tensor of `model`.
///
/// ReLU and L1 have kinks. When the forward and backward one-sided
/// differences disagree by more than `tolerance`, the stencil may straddle a
/// kink and the element is retried at `step / 10`, then `step / 100`; the
/// last attempt is used regardless.
pub fn check_gradients(
    model: &Model,
    problem: &GradProblem,
    analytic: &Model,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names: Vec<(String, usize)> = model.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let base = problem.loss(model)?;
    let ladder = [step, step / 10.0, step / 100.0];
    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let (mut max_rel, mut max_abs, mut refined) = (0.0f64, 0.0f64, 0);
        for i in 0..len {
            let orig = probe.tensors_mut()[ti].data[i];
            let mut numeric = 0.0;
            for (attempt, &h) in ladder.iter().enumerate() {
                probe.tensors_mut()[ti].data[i] = orig + h;
                let plus = problem.loss(&probe)?;
                probe.tensors_mut()[ti].data[i] = orig - h;
                let minus = problem.loss(&probe)?;
                probe.tensors_mut()[ti].data[i] = orig;
                numeric = (plus - minus) / (2.0 * h);
                let smooth = relative_error((plus - base) / h, (base - minus) / h) <= tolerance;
                if smooth || attempt + 1 == ladder.len() {
                    refined += usize::from(attempt > 0);
                    break;
                }
            }
            let a = grads[ti][i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        tensors.push(TensorCheck {
            name,
            len,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            refined,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, tensors })
}

/// Builds a randomly initialized model (no zero-residual init, so every
/// tensor receives gradient) and checks it on a [`GradProblem`].
pub fn gradient_check(model_config: &ModelConfig, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut mc = *model_config;
    mc.zero_residual_init = false;
    let model = Model::new(mc, seed)?;
    let problem = GradProblem::new(cfg, seed)?;
    let (_, analytic) = model.loss_and_grad(&[problem.sample()])?;
    check_gradients(&model, &problem, &analytic, cfg.step, cfg.tolerance)
}
