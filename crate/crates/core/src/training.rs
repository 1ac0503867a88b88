//! Patch-based training with a random scaling factor per batch, L1 loss on
//! HR coordinate pairs and Adam.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Sample};
use crate::optim::{Adam, AdamConfig};
use crate::volume::{crop_patch, PatchPair, PatchShape, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub k_set: Vec<usize>,
    pub patch_in_plane: usize,
    pub patch_lr_depth: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Uniformly subsample at most this many HR pairs per patch; 0 keeps all.
    pub max_pairs_per_patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            epochs: 50,
            steps_per_epoch: 10,
            k_set: vec![1, 2, 3, 4],
            patch_in_plane: 64,
            patch_lr_depth: 17,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_pairs_per_patch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be >= 1");
        }
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return bad("k_set must be non-empty with every k >= 1");
        }
        if self.patch_in_plane == 0 || self.patch_lr_depth < 2 {
            return bad("patch needs in-plane size >= 1 and LR depth >= 2");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    pub fn patch_shape(&self) -> PatchShape {
        PatchShape {
            in_plane: self.patch_in_plane,
            lr_depth: self.patch_lr_depth,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("l1 loss inputs"));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

fn check_dataset(dataset: &[Volume], cfg: &TrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let k_max = *cfg.k_set.iter().max().expect("validated non-empty");
    let need = cfg.patch_shape().hr_extent(k_max);
    for vol in dataset {
        let dims = vol.dims();
        if (0..3).any(|a| dims[a] < need[a]) {
            return Err(Error::TooSmall {
                dims,
                reason: format!("a {need:?} crop at k={k_max} does not fit"),
            });
        }
    }
    Ok(())
}

/// Draws one batch: a single `k` for the whole batch, then a uniformly random
/// volume and valid origin per patch.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &[Volume], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<PatchPair>> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let k = cfg.k_set[rng.gen_range(0..cfg.k_set.len())];
    let shape = cfg.patch_shape();
    let extent = shape.hr_extent(k);
    (0..cfg.batch_size)
        .map(|_| {
            let vol = &dataset[rng.gen_range(0..dataset.len())];
            let dims = vol.dims();
            let origin = [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - extent[a]));
            let mut patch = crop_patch(vol, origin, k, shape)?;
            let cap = cfg.max_pairs_per_patch;
            if cap > 0 && patch.hr_pairs.len() > cap {
                let mut keep = index::sample(rng, patch.hr_pairs.len(), cap).into_vec();
                keep.sort_unstable();
                patch.hr_pairs = keep.into_iter().map(|i| patch.hr_pairs[i]).collect();
            }
            Ok(patch)
        })
        .collect()
}

/// One optimizer step; returns the loss before the update.
pub fn train_step(model: &mut Model, batch: &[PatchPair], opt: &mut Adam) -> Result<f64> {
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .map(|p| Sample {
            lr: &p.lr_patch,
            pairs: &p.hr_pairs,
        })
        .collect();
    let (loss, grads) = model.loss_and_grad(&samples)?;
    opt.step_model(model, &grads)?;
    Ok(loss)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub k: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
}

/// Model, optimizer state and the batch RNG: everything a checkpoint must
/// hold to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Stream of the batch RNG; stream 0 of the same seed initializes the model.
const BATCH_STREAM: u64 = 1;

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, seed)?;
        Ok(Self::from_model(model, config, seed))
    }

    pub fn from_model(model: Model, config: TrainConfig, seed: u64) -> Self {
        let adam = Adam::new(config.adam(), &model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Self {
            model,
            adam,
            config,
            seed,
            rng,
            epoch: 0,
            step: 0,
        }
    }

    pub fn train_batch(&mut self, batch: &[PatchPair]) -> Result<f64> {
        let loss = train_step(&mut self.model, batch, &mut self.adam)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `epochs` more epochs of `steps_per_epoch` steps each, reporting
    /// every step to `on_step`.
    pub fn run_epochs(
        &mut self,
        dataset: &[Volume],
        epochs: u64,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<EpochSummary>> {
        check_dataset(dataset, &self.config)?;
        let mut summaries = Vec::with_capacity(epochs as usize);
        for _ in 0..epochs {
            let mut total = 0.0;
            for _ in 0..self.config.steps_per_epoch {
                let batch = sample_batch(dataset, &self.config, &mut self.rng)?;
                let k = batch[0].ratio;
                let loss = self.train_batch(&batch)?;
                total += loss;
                on_step(&StepRecord {
                    epoch: self.epoch,
                    step: self.step,
                    k,
                    loss,
                });
            }
            summaries.push(EpochSummary {
                epoch: self.epoch,
                mean_loss: total / self.config.steps_per_epoch as f64,
            });
            self.epoch += 1;
        }
        Ok(summaries)
    }
}
