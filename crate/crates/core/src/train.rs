//! Mini-batch training loop shared by every compression pass.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{self, Dataset};
use crate::loss;
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Model, ModelSpec, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, adam: AdamConfig::default(), seed: 1234 }
    }
}

/// What the logits are fitted to.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Cross-entropy against the dataset labels.
    Hard,
    /// `α·T²·CE(soft teacher, soft student) + (1−α)·CE(labels)`.
    /// `teacher_logits` has one row per training example.
    Distill { teacher_logits: &'a Tensor<f32>, temperature: f64, soft_weight: f64 },
}

impl Objective<'_> {
    fn validate(&self, data: &Dataset) -> Result<()> {
        if let Objective::Distill { teacher_logits, temperature, soft_weight } = *self {
            if teacher_logits.rows() != data.len() {
                return Err(Error::Config(format!(
                    "{} teacher rows for {} training examples",
                    teacher_logits.rows(),
                    data.len()
                )));
            }
            if !(temperature > 0.0) {
                return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
            }
            if !(0.0..=1.0).contains(&soft_weight) {
                return Err(Error::Argument(format!("soft weight {soft_weight} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Loss and logit gradient for one batch.
    fn evaluate(&self, logits: &Tensor<f32>, batch: &data::Batch) -> Result<(f64, Tensor<f32>)> {
        match *self {
            Objective::Hard => loss::cross_entropy_hard(logits, &batch.labels),
            Objective::Distill { teacher_logits, temperature, soft_weight } => {
                let soft = |()| -> Result<(f64, Tensor<f32>)> {
                    let probs = loss::softmax_with_temperature(&teacher_logits.gather_rows(&batch.indices), temperature)?;
                    loss::cross_entropy_soft(logits, &probs, temperature)
                };
                if soft_weight == 0.0 {
                    loss::cross_entropy_hard(logits, &batch.labels)
                } else if soft_weight == 1.0 {
                    // Never touches the labels.
                    soft(())
                } else {
                    let (ls, gs) = soft(())?;
                    let (lh, gh) = loss::cross_entropy_hard(logits, &batch.labels)?;
                    let (a, b) = (soft_weight as f32, (1.0 - soft_weight) as f32);
                    let g = gs.data().iter().zip(gh.data()).map(|(&s, &h)| a * s + b * h).collect();
                    Ok((soft_weight * ls + (1.0 - soft_weight) * lh, Tensor::new(gs.shape().to_vec(), g)?))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Optimizer steps completed after this epoch.
    pub steps: u64,
    pub validation_accuracy: Option<f64>,
}

/// Hook run before each optimizer step with the global step index.
pub type StepHook<'h> = dyn FnMut(u64, &mut Model) -> Result<()> + 'h;

/// Optimizer state and shuffling stream that persist across epochs.
pub struct Trainer {
    opt: Adam<f32>,
    rng: Rng,
    batch_size: usize,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            opt: Adam::new(cfg.adam),
            rng: Rng::new(cfg.seed).fork("shuffle"),
            batch_size: cfg.batch_size,
            epochs_done: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    pub fn steps_per_epoch(&self, examples: usize) -> u64 {
        examples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn run_epoch(
        &mut self,
        model: &mut Model,
        train: &Dataset,
        validation: Option<&Dataset>,
        objective: &Objective<'_>,
        hook: &mut StepHook<'_>,
    ) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        objective.validate(train)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in data::batches(train, self.batch_size, &mut self.rng)? {
            hook(self.opt.steps(), model)?;
            let logits = model.forward(&batch.images)?;
            let (loss, grad) = objective.evaluate(&logits, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {}", self.opt.steps())));
            }
            model.backward(&grad)?;
            self.opt.step_model(model)?;
            total += loss * batch.labels.len() as f64;
            count += batch.labels.len();
        }
        self.epochs_done += 1;
        let validation_accuracy = match validation {
            Some(v) if !v.is_empty() => Some(accuracy(model, v)?),
            _ => None,
        };
        let stats = EpochStats {
            epoch: self.epochs_done,
            mean_loss: if count > 0 { total / count as f64 } else { 0.0 },
            steps: self.opt.steps(),
            validation_accuracy,
        };
        log::info!(
            "{} epoch {}: loss {:.4}{}",
            model.spec().name,
            stats.epoch,
            stats.mean_loss,
            match stats.validation_accuracy {
                Some(a) => format!(", val acc {a:.2}%"),
                None => alloc::string::String::new(),
            }
        );
        Ok(stats)
    }
}

/// Runs `cfg.epochs` epochs of `objective` on `model`.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    objective: &Objective<'_>,
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::new(cfg);
    (0..cfg.epochs)
        .map(|_| trainer.run_epoch(model, train, validation, objective, &mut |_, _| Ok(())))
        .collect()
}

/// Seeded Glorot initialization shared by every training entry point.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::init(spec, &mut Rng::new(seed).fork("init"))
}

/// Supervised training from scratch.
pub fn train_supervised(spec: &ModelSpec, train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<Model> {
    let mut model = init_model(spec, cfg.seed)?;
    fit(&mut model, train, validation, cfg, &Objective::Hard)?;
    Ok(model)
}

const EVAL_BATCH: usize = 256;

/// Logits for every row of `images`, batched.
pub fn predict_logits(model: &Model, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.rows();
    let mut out = Vec::with_capacity(n * crate::NUM_CLASSES);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        out.extend_from_slice(model.predict(&images.gather_rows(&idx))?.data());
        start = end;
    }
    Tensor::new(alloc::vec![n, crate::NUM_CLASSES], out)
}

/// Percentage of examples whose argmax logit equals the label.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let preds = predict_logits(model, &ds.images)?.argmax_rows();
    let correct = preds.iter().zip(&ds.labels).filter(|(&p, &l)| p == l as usize).count();
    Ok(100.0 * correct as f64 / ds.len() as f64)
}
