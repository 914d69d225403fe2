//! Pipeline runner, metrics rows, report tables and the paper suite.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nncomp_core::data::{self, Dataset, DatasetKind, SplitSpec};
use nncomp_core::distill::{self, DistillConfig, SoftLabelCache, SweepRow};
use nncomp_core::prune::{self, PruneConfig, PruneScope, ScheduleKind};
use nncomp_core::quant::{self, QatConfig, QatStart, QuantizedModel};
use nncomp_core::train::{self, TrainConfig};
use nncomp_core::{fnv1a64, zoo, Model};

use crate::config::{ExperimentConfig, Stage, DEFAULT_STUDENT_EPOCHS, DEFAULT_TEACHER_EPOCHS};
use crate::error::{Error, Result};
use crate::ingest;
use crate::store::{self, Policy, SizeReport};

/// Bump when stage semantics change so stale disk caches are ignored.
const CACHE_VERSION: &str = "v1";

pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    /// Only read for final evaluation.
    pub test: Dataset,
}

impl Splits {
    /// Deterministic validation split of `train_full`, then the optional
    /// training subset.
    pub fn new(train_full: &Dataset, test: Dataset, train_subset: Option<usize>, validation_fraction: f64) -> Result<Self> {
        let (mut train, mut validation) = data::split(train_full, SplitSpec { validation_fraction, ..SplitSpec::default() })?;
        if let Some(n) = train_subset {
            train = train.take(n);
            let v = (n as f64 * validation_fraction).ceil() as usize;
            validation = validation.take(v);
        }
        Ok(Self { train, validation, test })
    }

    pub fn load(kind: DatasetKind, root: &Path, train_subset: Option<usize>, validation_fraction: f64) -> Result<Self> {
        let (train, test) = ingest::load(kind, root)?;
        Self::new(&train, test, train_subset, validation_fraction)
    }
}

/// Result of a pipeline prefix: the model used for evaluation and as the
/// input of later stages, and its stored form.
#[derive(Clone, Debug)]
pub struct StageState {
    pub model: Model,
    pub stored: QuantizedModel,
    /// Scope of the last pruning stage whose masks still apply.
    pub prune_scope: Option<PruneScope>,
}

impl StageState {
    fn float(mut model: Model, prune_scope: Option<PruneScope>) -> Result<Self> {
        model.clear_caches();
        let stored = quant::ptq(&model, 32)?;
        Ok(Self { model, stored, prune_scope })
    }

    fn from_stored(stored: QuantizedModel, prune_scope: Option<PruneScope>) -> Result<Self> {
        let mut model = stored.dequantize()?;
        if let Some(scope) = prune_scope {
            for layer in scope.layers(&model) {
                let keep = model.param_layer(layer).expect("weight layer").weight.data().iter().map(|&w| w != 0.0).collect();
                model.set_weight_mask(layer, Some(keep))?;
            }
        }
        Ok(Self { model, stored, prune_scope })
    }
}

/// Percentage change of `new` relative to `old`.
pub fn delta_pct(new: f64, old: f64) -> f64 {
    100.0 * (new - old) / old
}

/// Accuracy per megabyte.
pub fn efficacy(accuracy_percent: f64, size_mb: f64) -> Result<f64> {
    if !(size_mb > 0.0) {
        return Err(Error::Core(nncomp_core::Error::Argument(format!("efficacy needs a positive size, got {size_mb}"))));
    }
    Ok(accuracy_percent / size_mb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub pipeline: String,
    pub accuracy: f64,
    pub size_mb: f64,
    pub raw_mb: f64,
    pub efficacy: f64,
    pub acc_delta_pct: Option<f64>,
    pub size_delta_pct: Option<f64>,
}

impl MetricsRow {
    pub fn new(pipeline: &str, accuracy: f64, size: &SizeReport) -> Result<Self> {
        Ok(Self {
            pipeline: pipeline.into(),
            accuracy,
            size_mb: size.size_mb(),
            raw_mb: size.raw_mb(),
            efficacy: efficacy(accuracy, size.size_mb())?,
            acc_delta_pct: None,
            size_delta_pct: None,
        })
    }
}

pub struct RunOutput {
    pub row: MetricsRow,
    pub size: SizeReport,
    pub state: Arc<StageState>,
}

/// Executes pipelines over one dataset, sharing every computed prefix.
///
/// Stage `k > 0` trains with seed `seed ^ fnv1a64(prefix)`, where the
/// prefix names the dataset, model, seed and stages `0..=k`. Equal prefixes
/// therefore always produce equal models, whatever order pipelines run in.
pub struct Runner {
    kind: DatasetKind,
    train_subset: Option<usize>,
    validation_fraction: f64,
    splits: Splits,
    states: HashMap<String, Arc<StageState>>,
    accuracies: HashMap<String, f64>,
    soft_labels: HashMap<String, Arc<SoftLabelCache>>,
    cache_dir: Option<PathBuf>,
}

impl Runner {
    pub fn new(kind: DatasetKind, splits: Splits, train_subset: Option<usize>, validation_fraction: f64) -> Self {
        Self {
            kind,
            train_subset,
            validation_fraction,
            splits,
            states: HashMap::new(),
            accuracies: HashMap::new(),
            soft_labels: HashMap::new(),
            cache_dir: None,
        }
    }

    pub fn load(kind: DatasetKind, root: &Path, train_subset: Option<usize>, validation_fraction: f64) -> Result<Self> {
        Ok(Self::new(kind, Splits::load(kind, root, train_subset, validation_fraction)?, train_subset, validation_fraction))
    }

    /// Persist stage results under `dir` and reuse them on later runs.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    fn root_prefix(&self, cfg: &ExperimentConfig) -> String {
        format!(
            "{CACHE_VERSION}|{}|{}|seed={}|subset={:?}|val={}",
            self.kind.name(),
            cfg.model,
            cfg.seed,
            self.train_subset,
            self.validation_fraction
        )
    }

    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<RunOutput> {
        cfg.validate()?;
        if cfg.dataset != self.kind || cfg.train_subset != self.train_subset || cfg.validation_fraction != self.validation_fraction {
            return Err(Error::Config(format!(
                "runner holds {} (subset {:?}, val {}), config wants {} (subset {:?}, val {})",
                self.kind.name(),
                self.train_subset,
                self.validation_fraction,
                cfg.dataset.name(),
                cfg.train_subset,
                cfg.validation_fraction
            )));
        }
        if let Some(out) = &cfg.out {
            std::fs::create_dir_all(out).map_err(Error::io(out))?;
        }
        let label = cfg.label();
        let mut prefix = self.root_prefix(cfg);
        let mut state: Option<Arc<StageState>> = None;
        for (k, stage) in cfg.stages.iter().enumerate() {
            let parent = prefix.clone();
            prefix = format!("{prefix}|{}", stage.key());
            let seed = if k == 0 { cfg.seed } else { cfg.seed ^ fnv1a64(prefix.as_bytes()) };
            let next = match self.lookup(&prefix)? {
                Some(s) => s,
                None => {
                    log::info!("[{label}] stage {}: {}", k + 1, stage.key());
                    let s = self
                        .execute(stage, state.as_deref(), &cfg.model, seed, &parent)
                        .map_err(|e| Error::Stage { stage: format!("{} (#{})", stage.name(), k + 1), source: Box::new(e) })?;
                    self.persist(&prefix, &s)?;
                    Arc::new(s)
                }
            };
            self.states.insert(prefix.clone(), next.clone());
            if let Some(out) = &cfg.out {
                store::save_file(&out.join(format!("{:02}_{}.nncm", k + 1, stage.name())), &next.stored, &Policy::Auto)?;
            }
            state = Some(next);
        }
        let state = state.expect("validated non-empty pipeline");
        let accuracy = match self.accuracies.get(&prefix) {
            Some(&a) => a,
            None => {
                let a = train::accuracy(&state.model, &self.splits.test)?;
                self.accuracies.insert(prefix.clone(), a);
                self.persist_accuracy(&prefix, a)?;
                a
            }
        };
        let size = store::model_size(&state.stored)?;
        let row = MetricsRow::new(&label, accuracy, &size)?;
        log::info!("[{label}] accuracy {accuracy:.2}%, size {:.4} MB", row.size_mb);
        if let Some(out) = &cfg.out {
            std::fs::write(out.join("config.txt"), cfg.to_text()).map_err(Error::io(out))?;
            std::fs::write(out.join("metrics.csv"), metrics_csv(std::slice::from_ref(&row))).map_err(Error::io(out))?;
        }
        Ok(RunOutput { row, size, state })
    }

    fn cache_path(&self, prefix: &str, ext: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{:016x}.{ext}", fnv1a64(prefix.as_bytes()))))
    }

    fn lookup(&mut self, prefix: &str) -> Result<Option<Arc<StageState>>> {
        if let Some(s) = self.states.get(prefix) {
            return Ok(Some(s.clone()));
        }
        let (Some(model), Some(key)) = (self.cache_path(prefix, "nncm"), self.cache_path(prefix, "key")) else {
            return Ok(None);
        };
        let Ok(text) = std::fs::read_to_string(&key) else { return Ok(None) };
        let mut lines = text.lines();
        if lines.next() != Some(prefix) || !model.exists() {
            return Ok(None);
        }
        let scope = match lines.next() {
            Some("-") | None => None,
            Some(s) => Some(s.parse()?),
        };
        log::info!("reusing cached {}", model.display());
        let state = Arc::new(StageState::from_stored(store::load_file(&model)?, scope)?);
        if let Some(acc) = lines.next().and_then(|a| a.parse().ok()) {
            self.accuracies.insert(prefix.to_string(), acc);
        }
        Ok(Some(state))
    }

    fn persist(&self, prefix: &str, state: &StageState) -> Result<()> {
        let (Some(model), Some(key)) = (self.cache_path(prefix, "nncm"), self.cache_path(prefix, "key")) else {
            return Ok(());
        };
        store::save_file(&model, &state.stored, &Policy::Auto)?;
        let scope = state.prune_scope.map_or("-", |s| s.name());
        std::fs::write(&key, format!("{prefix}\n{scope}\n")).map_err(Error::io(&key))?;
        Ok(())
    }

    /// Appends the test accuracy to an existing key file.
    fn persist_accuracy(&self, prefix: &str, accuracy: f64) -> Result<()> {
        let Some(key) = self.cache_path(prefix, "key") else { return Ok(()) };
        let Ok(text) = std::fs::read_to_string(&key) else { return Ok(()) };
        let head: Vec<&str> = text.lines().take(2).collect();
        if head.first() != Some(&prefix) || head.len() < 2 {
            return Ok(());
        }
        std::fs::write(&key, format!("{}\n{}\n{accuracy}\n", head[0], head[1])).map_err(Error::io(&key))
    }

    /// Teacher logits over the training split, memoized per teacher prefix.
    fn soft_labels(&mut self, prefix: &str, teacher: &Model) -> Result<Arc<SoftLabelCache>> {
        if let Some(c) = self.soft_labels.get(prefix) {
            if c.is_valid_for(teacher, self.splits.train.len()) {
                return Ok(c.clone());
            }
        }
        let path = self.cache_path(prefix, "soft.nncm");
        let from_disk = path
            .as_ref()
            .and_then(|p| std::fs::read(p).ok())
            .and_then(|b| store::load_soft_labels(&b).ok())
            .filter(|c| c.is_valid_for(teacher, self.splits.train.len()));
        let cache = match from_disk {
            Some(c) => c,
            None => {
                let c = SoftLabelCache::build(teacher, &self.splits.train)?;
                if let Some(p) = &path {
                    std::fs::write(p, store::save_soft_labels(&c)?).map_err(Error::io(p))?;
                }
                c
            }
        };
        let cache = Arc::new(cache);
        self.soft_labels.insert(prefix.to_string(), cache.clone());
        Ok(cache)
    }

    fn execute(&mut self, stage: &Stage, prev: Option<&StageState>, model: &str, seed: u64, parent: &str) -> Result<StageState> {
        let tc = |epochs: usize| TrainConfig { epochs, seed, ..TrainConfig::default() };
        let need_prev = || prev.ok_or_else(|| Error::Config(format!("{} needs a trained model", stage.name())));
        match stage {
            Stage::Train { epochs } => {
                let spec = zoo::build(model)?;
                let m = train::train_supervised(&spec, &self.splits.train, Some(&self.splits.validation), &tc(*epochs))?;
                StageState::float(m, None)
            }
            Stage::Qat { epochs, activations } => {
                let spec = zoo::build(model)?;
                let start = match prev {
                    Some(p) => QatStart::Pretrained(&p.model),
                    None => QatStart::Spec(&spec),
                };
                let qc = QatConfig { train: tc(*epochs), quantize_activations: *activations, bits: 8 };
                let out = quant::qat_train(start, &self.splits.train, Some(&self.splits.validation), &qc)?;
                StageState::from_stored(out.quantized, prev.and_then(|p| p.prune_scope))
            }
            Stage::Distill { student, temperature, soft_weight, epochs } => {
                let teacher = need_prev()?.model.clone();
                let cache = self.soft_labels(parent, &teacher)?;
                let dc = DistillConfig { temperature: *temperature, soft_weight: *soft_weight, train: tc(*epochs) };
                let s = distill::distill_from_cache(&cache, &zoo::build(student)?, &self.splits.train, Some(&self.splits.validation), &dc)?;
                StageState::float(s, None)
            }
            Stage::ChainDistill { models, temperature, soft_weight, epochs } => {
                let mut teacher = need_prev()?.model.clone();
                let mut step_prefix = parent.to_string();
                let dc = DistillConfig { temperature: *temperature, soft_weight: *soft_weight, train: tc(*epochs) };
                for name in models {
                    let cache = self.soft_labels(&step_prefix, &teacher)?;
                    teacher = distill::distill_from_cache(&cache, &zoo::build(name)?, &self.splits.train, Some(&self.splits.validation), &dc)?;
                    teacher.clear_caches();
                    step_prefix = format!("{step_prefix}|chain-step({name},T={temperature},a={soft_weight},e={epochs},seed={seed})");
                }
                StageState::float(teacher, None)
            }
            Stage::Prune { kind, scope, prune_epochs, finetune_epochs, frequency } => {
                let mut pc = PruneConfig::new(*kind, *scope);
                pc.prune_epochs = *prune_epochs;
                pc.finetune_epochs = *finetune_epochs;
                pc.frequency = *frequency;
                pc.train = tc(0);
                let m = prune::prune_and_finetune(&need_prev()?.model, &self.splits.train, Some(&self.splits.validation), &pc)?;
                StageState::float(m, Some(*scope))
            }
            Stage::Ptq { bits } => {
                let p = need_prev()?;
                StageState::from_stored(quant::ptq(&p.model, *bits)?, p.prune_scope)
            }
        }
    }
}

// ---- reports ----

pub const CSV_HEADER: &str = "pipeline,accuracy,size_mb,efficacy,acc_delta_pct,size_delta_pct";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.pipeline,
            r.accuracy,
            r.size_mb,
            r.efficacy,
            opt(r.acc_delta_pct),
            opt(r.size_delta_pct)
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Report(format!("expected header `{CSV_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Report(format!("line {}: malformed row {line:?}", n + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let maybe = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
        let size_mb = num(f[2])?;
        rows.push(MetricsRow {
            pipeline: f[0].to_string(),
            accuracy: num(f[1])?,
            size_mb,
            raw_mb: f64::NAN,
            efficacy: num(f[3])?,
            acc_delta_pct: maybe(f[4])?,
            size_delta_pct: maybe(f[5])?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct Report {
    /// Sorted by pipeline label, deltas filled in against the baseline.
    pub rows: Vec<MetricsRow>,
    pub markdown: String,
    pub csv: String,
}

/// Absolute and baseline-relative tables.
pub fn report(rows: &[MetricsRow], baseline: &str) -> Result<Report> {
    let base = rows
        .iter()
        .find(|r| r.pipeline == baseline)
        .cloned()
        .ok_or_else(|| Error::Report(format!("baseline row {baseline:?} not found")))?;
    let mut rows: Vec<MetricsRow> = rows
        .iter()
        .map(|r| MetricsRow {
            acc_delta_pct: Some(delta_pct(r.accuracy, base.accuracy)),
            size_delta_pct: Some(delta_pct(r.size_mb, base.size_mb)),
            ..r.clone()
        })
        .collect();
    rows.sort_by(|a, b| a.pipeline.cmp(&b.pipeline));
    let mut md = String::from("| Pipeline | Accuracy (%) | Size (MB) | Efficacy |\n|---|---:|---:|---:|\n");
    for r in &rows {
        let _ = writeln!(md, "| {} | {:.2} | {:.4} | {:.2} |", r.pipeline, r.accuracy, r.size_mb, r.efficacy);
    }
    let _ = writeln!(md, "\nChange relative to `{baseline}`:\n\n| Pipeline | Acc (%) | Size (%) |\n|---|---:|---:|");
    for r in &rows {
        let _ = writeln!(md, "| {} | {:+.2} | {:+.0} |", r.pipeline, r.acc_delta_pct.unwrap_or(0.0), r.size_delta_pct.unwrap_or(0.0));
    }
    let csv = metrics_csv(&rows);
    Ok(Report { rows, markdown: md, csv })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{}\n", SweepRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

// ---- paper suite ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Full MNIST matrix and sweep, CIFAR smoke tier.
    Desk,
    /// Adds the full CIFAR matrix.
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale {other:?} (expected desk|full)"))),
        }
    }
}

pub const PAPER_TEMPERATURES: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0];
pub const BASELINE_LABEL: &str = "Original (Teacher)";
pub const CIFAR_SMOKE_SUBSET: usize = 5000;
pub const CIFAR_SMOKE_EPOCHS: usize = 2;

/// Registry names of the teacher, assistant and student for a dataset.
pub fn family(kind: DatasetKind) -> (&'static str, &'static str, &'static str) {
    match kind {
        DatasetKind::Mnist => ("mnist_teacher", "mnist_ta", "mnist_student"),
        DatasetKind::Cifar10 => ("cifar_teacher", "cifar_ta", "cifar_student"),
    }
}

pub fn train_stage() -> Stage {
    Stage::Train { epochs: DEFAULT_TEACHER_EPOCHS }
}

pub fn distill_stage(student: &str, temperature: f64) -> Stage {
    Stage::Distill { student: student.into(), temperature, soft_weight: 1.0, epochs: DEFAULT_STUDENT_EPOCHS }
}

pub fn chain_stage(models: &[&str], temperature: f64) -> Stage {
    Stage::ChainDistill {
        models: models.iter().map(|m| m.to_string()).collect(),
        temperature,
        soft_weight: 1.0,
        epochs: DEFAULT_STUDENT_EPOCHS,
    }
}

pub fn prune_stage(kind: ScheduleKind, scope: PruneScope) -> Stage {
    Stage::Prune { kind, scope, prune_epochs: 2, finetune_epochs: 2, frequency: 100 }
}

pub fn qat_stage() -> Stage {
    Stage::Qat { epochs: crate::config::DEFAULT_QAT_EPOCHS, activations: true }
}

pub fn cs(s: f64) -> ScheduleKind {
    ScheduleKind::Constant { final_sparsity: s }
}

pub fn pd(i: f64, f: f64) -> ScheduleKind {
    ScheduleKind::PolynomialDecay { initial_sparsity: i, final_sparsity: f }
}

/// The schedules studied: three constant and three polynomial-decay.
pub fn schedules() -> [ScheduleKind; 6] {
    [cs(0.2), cs(0.5), cs(0.8), pd(0.0, 0.8), pd(0.0, 0.5), pd(0.5, 0.8)]
}

/// Every single-technique and combined pipeline of the study for one
/// dataset. `t_kd` / `t_ta` are the distillation temperatures.
pub fn matrix(kind: DatasetKind, seed: u64, t_kd: f64, t_ta: f64, local_schedules: &[ScheduleKind]) -> Vec<ExperimentConfig> {
    let (teacher, ta, student) = family(kind);
    let cfg = |label: &str, stages: Vec<Stage>| {
        let mut c = ExperimentConfig::new(kind, teacher, stages).labeled(label);
        c.seed = seed;
        c
    };
    let t = train_stage;
    let kd = || distill_stage(student, t_kd);
    let cs80 = || prune_stage(cs(0.8), PruneScope::Global);
    let mut out = vec![
        cfg(BASELINE_LABEL, vec![t()]),
        cfg("Quantization Aware Training", vec![t(), qat_stage()]),
        cfg("Model + 8-bit PTQ", vec![t(), Stage::Ptq { bits: 8 }]),
        cfg("Model + 16-bit PTQ", vec![t(), Stage::Ptq { bits: 16 }]),
        cfg("Teacher -> Student", vec![t(), kd()]),
        cfg("QAT Teacher -> Student", vec![t(), qat_stage(), kd()]),
        cfg("Teacher -> QAT Student", vec![t(), kd(), qat_stage()]),
        cfg("Teacher -> Student + 8-bit PTQ", vec![t(), kd(), Stage::Ptq { bits: 8 }]),
        cfg("Teacher -> Student + 16-bit PTQ", vec![t(), kd(), Stage::Ptq { bits: 16 }]),
        cfg("Teacher -> TA -> Student", vec![t(), chain_stage(&[ta, student], t_ta)]),
        cfg("Teacher -> Pruning -> Student", vec![t(), cs80(), kd()]),
        cfg("Teacher -> Student -> Pruning", vec![t(), kd(), cs80()]),
    ];
    for k in schedules() {
        out.push(cfg(&format!("Global {}", k.label()), vec![t(), prune_stage(k, PruneScope::Global)]));
    }
    for k in local_schedules {
        for (scope, name) in [(PruneScope::DenseOnly, "Dense"), (PruneScope::ConvOnly, "Conv")] {
            out.push(cfg(&format!("{name} {}", k.label()), vec![t(), prune_stage(*k, scope)]));
        }
    }
    out
}

/// Teacher→student and teacher→assistant→student distillation at every
/// temperature, via the shared runner.
pub fn temperature_sweep(runner: &mut Runner, seed: u64, temperatures: &[f64]) -> Result<Vec<SweepRow>> {
    let (teacher, ta, student) = family(runner.kind);
    let mut rows = Vec::new();
    for (pipeline, chain) in [("kd", false), ("ta_kd", true)] {
        for &t in temperatures {
            let stage = if chain { chain_stage(&[ta, student], t) } else { distill_stage(student, t) };
            let mut c = ExperimentConfig::new(runner.kind, teacher, vec![train_stage(), stage]).labeled(&format!("{pipeline} T={t}"));
            c.seed = seed;
            c.train_subset = runner.train_subset;
            c.validation_fraction = runner.validation_fraction;
            let out = runner.run(&c)?;
            rows.push(SweepRow { temperature: t, pipeline: pipeline.into(), accuracy_percent: out.row.accuracy });
        }
    }
    Ok(rows)
}

/// Temperature with the highest accuracy for `pipeline` (first on ties).
pub fn best_temperature(rows: &[SweepRow], pipeline: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.pipeline == pipeline)
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.accuracy_percent >= r.accuracy_percent => Some(b),
            _ => Some(r),
        })
        .map(|r| r.temperature)
}

/// Rows of the accuracy-per-megabyte summary, keyed by matrix label.
pub const EFFICACY_ROWS: [(&str, &str); 9] = [
    ("Original (Teacher)", BASELINE_LABEL),
    ("Knowledge Distillation", "Teacher -> Student"),
    ("KD with Teaching Assistant", "Teacher -> TA -> Student"),
    ("Global Pruning", "Global CS 80%"),
    ("Local Pruning (Dense)", "Dense CS 80%"),
    ("Local Pruning (Conv)", "Conv CS 80%"),
    ("Quant. Aware Training", "Quantization Aware Training"),
    ("KD + Pruning", "Teacher -> Student -> Pruning"),
    ("KD + 8-bit Post-train Quant.", "Teacher -> Student + 8-bit PTQ"),
];

/// Markdown efficacy summary; rows missing from `rows` are skipped.
pub fn efficacy_table(rows: &[MetricsRow]) -> String {
    let mut md = String::from("| Method | Accuracy (%) | Size (MB) | Efficacy |\n|---|---:|---:|---:|\n");
    for (name, label) in EFFICACY_ROWS {
        if let Some(r) = rows.iter().find(|r| r.pipeline == label) {
            let _ = writeln!(md, "| {name} | {:.2} | {:.4} | {:.2} |", r.accuracy, r.size_mb, r.efficacy);
        }
    }
    md
}

pub struct SuiteOutput {
    pub mnist: Report,
    pub sweep: Vec<SweepRow>,
    pub cifar: Report,
}

impl SuiteOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let files = [
            ("mnist.csv", self.mnist.csv.clone()),
            ("mnist.md", self.mnist.markdown.clone()),
            ("mnist_efficacy.md", efficacy_table(&self.mnist.rows)),
            ("sweep.csv", sweep_csv(&self.sweep)),
            ("cifar10.csv", self.cifar.csv.clone()),
            ("cifar10.md", self.cifar.markdown.clone()),
            ("cifar10_efficacy.md", efficacy_table(&self.cifar.rows)),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(Error::io(&p))?;
        }
        Ok(())
    }
}

/// Runs the whole study. Desk scale: MNIST matrix and sweep plus a CIFAR
/// smoke tier (5,000 training images, 2 epochs); full scale adds the
/// CIFAR matrix at full size.
pub fn paper_suite(scale: Scale, data_root: &Path, cache_dir: Option<&Path>, seed: u64) -> Result<SuiteOutput> {
    let runner_for = |kind, subset| -> Result<Runner> {
        let r = Runner::load(kind, data_root, subset, 0.1)?;
        Ok(match cache_dir {
            Some(d) => r.with_cache_dir(d.join(kind.name())),
            None => r,
        })
    };
    let (mnist, sweep) = {
        let mut runner = runner_for(DatasetKind::Mnist, None)?;
        let sweep = temperature_sweep(&mut runner, seed, &PAPER_TEMPERATURES)?;
        let t_kd = best_temperature(&sweep, "kd").expect("non-empty sweep");
        let t_ta = best_temperature(&sweep, "ta_kd").expect("non-empty sweep");
        let mut rows = Vec::new();
        for c in matrix(DatasetKind::Mnist, seed, t_kd, t_ta, &[cs(0.8)]) {
            rows.push(runner.run(&c)?.row);
        }
        (report(&rows, BASELINE_LABEL)?, sweep)
    };
    let cifar = match scale {
        Scale::Desk => {
            let mut runner = runner_for(DatasetKind::Cifar10, Some(CIFAR_SMOKE_SUBSET))?;
            let (teacher, _, student) = family(DatasetKind::Cifar10);
            let smoke = |label: &str, stages| {
                let mut c = ExperimentConfig::new(DatasetKind::Cifar10, teacher, stages).labeled(label);
                c.seed = seed;
                c.train_subset = Some(CIFAR_SMOKE_SUBSET);
                c
            };
            let t = || Stage::Train { epochs: CIFAR_SMOKE_EPOCHS };
            let configs = [
                smoke(BASELINE_LABEL, vec![t()]),
                smoke("Model + 8-bit PTQ", vec![t(), Stage::Ptq { bits: 8 }]),
                smoke(
                    "Teacher -> Student",
                    vec![t(), Stage::Distill { student: student.into(), temperature: 20.0, soft_weight: 1.0, epochs: CIFAR_SMOKE_EPOCHS }],
                ),
            ];
            let rows = configs.iter().map(|c| runner.run(c).map(|o| o.row)).collect::<Result<Vec<_>>>()?;
            report(&rows, BASELINE_LABEL)?
        }
        Scale::Full => {
            let mut runner = runner_for(DatasetKind::Cifar10, None)?;
            let sweep = temperature_sweep(&mut runner, seed, &PAPER_TEMPERATURES)?;
            let t_kd = best_temperature(&sweep, "kd").expect("non-empty sweep");
            let t_ta = best_temperature(&sweep, "ta_kd").expect("non-empty sweep");
            let mut rows = Vec::new();
            for c in matrix(DatasetKind::Cifar10, seed, t_kd, t_ta, &schedules()) {
                rows.push(runner.run(&c)?.row);
            }
            report(&rows, BASELINE_LABEL)?
        }
    };
    Ok(SuiteOutput { mnist, sweep, cifar })
}
