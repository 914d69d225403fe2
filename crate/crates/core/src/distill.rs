//! Knowledge distillation: teacher→student, teacher→assistant→student
//! chains, and temperature sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::train::{self, Objective, TrainConfig};
use crate::{loss, Error, Model, ModelSpec, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight α of the softened-teacher term; `1 − α` goes to the labels.
    pub soft_weight: f64,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 1.0, soft_weight: 1.0, train: TrainConfig { epochs: 3, ..TrainConfig::default() } }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Argument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.soft_weight) {
            return Err(Error::Argument(format!("soft weight {} outside [0, 1]", self.soft_weight)));
        }
        Ok(())
    }
}

/// Teacher logits for every training example. Temperature is applied when
/// the labels are served, so one cache covers a whole sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelCache {
    pub logits: Tensor<f32>,
    pub fingerprint: u64,
}

impl SoftLabelCache {
    pub fn build(teacher: &Model, data: &Dataset) -> Result<Self> {
        Ok(Self { logits: train::predict_logits(teacher, &data.images)?, fingerprint: teacher.fingerprint() })
    }

    /// Whether this cache was produced by `teacher` over a set of `rows` examples.
    pub fn is_valid_for(&self, teacher: &Model, rows: usize) -> bool {
        self.fingerprint == teacher.fingerprint() && self.logits.rows() == rows
    }

    pub fn soft_labels(&self, temperature: f64) -> Result<Tensor<f32>> {
        loss::softmax_with_temperature(&self.logits, temperature)
    }
}

fn check_compatible(teacher: &ModelSpec, student: &ModelSpec) -> Result<()> {
    if teacher.input != student.input {
        return Err(Error::Config(format!(
            "teacher {} takes {:?} but student {} takes {:?}",
            teacher.name, teacher.input, student.name, student.input
        )));
    }
    Ok(())
}

/// Trains a fresh `student_spec` on the cached teacher logits.
pub fn distill_from_cache(
    cache: &SoftLabelCache,
    student_spec: &ModelSpec,
    train_data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<Model> {
    cfg.validate()?;
    let mut student = train::init_model(student_spec, cfg.train.seed)?;
    let objective =
        Objective::Distill { teacher_logits: &cache.logits, temperature: cfg.temperature, soft_weight: cfg.soft_weight };
    train::fit(&mut student, train_data, validation, &cfg.train, &objective)?;
    Ok(student)
}

pub fn distill(
    teacher: &Model,
    student_spec: &ModelSpec,
    train_data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<Model> {
    cfg.validate()?;
    check_compatible(teacher.spec(), student_spec)?;
    let cache = SoftLabelCache::build(teacher, train_data)?;
    distill_from_cache(&cache, student_spec, train_data, validation, cfg)
}

#[derive(Clone, Debug)]
pub struct ChainStage {
    pub model: Model,
    pub test_accuracy: Option<f64>,
}

/// How the head of a chain is obtained.
pub enum ChainHead<'a> {
    Trained(&'a Model),
    /// Trained in place with hard labels.
    Train(TrainConfig),
}

/// Distills each spec from its predecessor. `specs[0]` is the teacher.
pub fn chain_distill(
    specs: &[ModelSpec],
    head: ChainHead<'_>,
    train_data: &Dataset,
    validation: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<Vec<ChainStage>> {
    if specs.len() < 2 {
        return Err(Error::Argument(format!("a distillation chain needs at least 2 models, got {}", specs.len())));
    }
    cfg.validate()?;
    for pair in specs.windows(2) {
        check_compatible(&pair[0], &pair[1])?;
    }
    let first = match head {
        ChainHead::Trained(m) => {
            if m.spec() != &specs[0] {
                return Err(Error::Config(format!("chain head is {}, expected {}", m.spec().name, specs[0].name)));
            }
            m.clone()
        }
        ChainHead::Train(tc) => train::train_supervised(&specs[0], train_data, validation, &tc)?,
    };
    let score = |m: &Model| test.map(|t| train::accuracy(m, t)).transpose();
    let mut stages = Vec::with_capacity(specs.len());
    stages.push(ChainStage { test_accuracy: score(&first)?, model: first });
    for spec in &specs[1..] {
        let prev = &stages.last().expect("non-empty").model;
        let next = distill(prev, spec, train_data, validation, cfg)?;
        stages.push(ChainStage { test_accuracy: score(&next)?, model: next });
    }
    Ok(stages)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub temperature: f64,
    pub pipeline: String,
    pub accuracy_percent: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "temperature,pipeline,accuracy_percent";

    pub fn to_csv(&self) -> String {
        format!("{},{},{:.2}", self.temperature, self.pipeline, self.accuracy_percent)
    }
}

/// One distillation chain per temperature, starting from `teacher` and
/// passing through `specs` (assistants then the student). Every run reuses
/// the same seed; the teacher's logits are computed once.
pub fn temperature_sweep(
    teacher: &Model,
    specs: &[ModelSpec],
    pipeline: &str,
    train_data: &Dataset,
    test: &Dataset,
    temperatures: &[f64],
    cfg: &DistillConfig,
) -> Result<Vec<SweepRow>> {
    if temperatures.is_empty() {
        return Err(Error::Argument("temperature list is empty".into()));
    }
    if specs.is_empty() {
        return Err(Error::Argument("sweep needs a student spec".into()));
    }
    let cache = SoftLabelCache::build(teacher, train_data)?;
    let mut rows = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let stage_cfg = DistillConfig { temperature: t, ..*cfg };
        stage_cfg.validate()?;
        let mut model = distill_from_cache(&cache, &specs[0], train_data, None, &stage_cfg)?;
        for spec in &specs[1..] {
            model = distill(&model, spec, train_data, None, &stage_cfg)?;
        }
        let accuracy_percent = train::accuracy(&model, test)?;
        log::info!("sweep {pipeline} T={t}: {accuracy_percent:.2}%");
        rows.push(SweepRow { temperature: t, pipeline: pipeline.into(), accuracy_percent });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(DistillConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { soft_weight: 1.5, ..Default::default() }.validate().is_err());
        assert_eq!(DistillConfig::default().train.epochs, 3);
    }

    #[test]
    fn sweep_row_csv() {
        let r = SweepRow { temperature: 20.0, pipeline: "kd".into(), accuracy_percent: 97.6123 };
        assert_eq!(r.to_csv(), "20,kd,97.61");
    }

    #[test]
    fn incompatible_inputs_rejected() {
        let t = crate::zoo::build("mnist_student").unwrap();
        let s = crate::zoo::build("cifar_student").unwrap();
        assert!(matches!(check_compatible(&t, &s), Err(Error::Config(_))));
    }
}
