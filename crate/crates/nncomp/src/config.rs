//! Experiment configuration files.
//!
//! A flat text format: `[section]` headers and `key = value` lines, `#`
//! comments. `[experiment]` comes first; every later section is one
//! pipeline stage, applied in file order.
//!
//! ```text
//! [experiment]
//! dataset = mnist
//! model = mnist_teacher
//! seed = 1234
//!
//! [train]
//! epochs = 5
//!
//! [distill]
//! student = mnist_student
//! temperature = 20
//!
//! [ptq8]
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use nncomp_core::data::DatasetKind;
use nncomp_core::prune::{PruneScope, ScheduleKind};
use nncomp_core::zoo;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Train { epochs: usize },
    Distill { student: String, temperature: f64, soft_weight: f64, epochs: usize },
    /// Distills through each named model in turn (assistants, then student).
    ChainDistill { models: Vec<String>, temperature: f64, soft_weight: f64, epochs: usize },
    Prune { kind: ScheduleKind, scope: PruneScope, prune_epochs: usize, finetune_epochs: usize, frequency: u64 },
    Ptq { bits: u32 },
    Qat { epochs: usize, activations: bool },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Train { .. } => "train",
            Stage::Distill { .. } => "distill",
            Stage::ChainDistill { .. } => "chain_distill",
            Stage::Prune { .. } => "prune",
            Stage::Ptq { bits: 16 } => "ptq16",
            Stage::Ptq { .. } => "ptq8",
            Stage::Qat { .. } => "qat",
        }
    }

    /// Canonical description; two stages with equal keys compute the same thing.
    pub fn key(&self) -> String {
        match self {
            Stage::Train { epochs } => format!("train(e={epochs})"),
            Stage::Distill { student, temperature, soft_weight, epochs } => {
                format!("distill({student},T={temperature},a={soft_weight},e={epochs})")
            }
            Stage::ChainDistill { models, temperature, soft_weight, epochs } => {
                format!("chain({},T={temperature},a={soft_weight},e={epochs})", models.join(">"))
            }
            Stage::Prune { kind, scope, prune_epochs, finetune_epochs, frequency } => {
                format!("prune({kind},{},e={prune_epochs}+{finetune_epochs},f={frequency})", scope.name())
            }
            Stage::Ptq { bits } => format!("ptq{bits}"),
            Stage::Qat { epochs, activations } => format!("qat(e={epochs},act={activations})"),
        }
    }

    fn is_training_origin(&self) -> bool {
        matches!(self, Stage::Train { .. } | Stage::Qat { .. })
    }

    fn write(&self, out: &mut String) {
        let _ = writeln!(out, "\n[{}]", self.name());
        match self {
            Stage::Train { epochs } => {
                let _ = writeln!(out, "epochs = {epochs}");
            }
            Stage::Distill { student, temperature, soft_weight, epochs } => {
                let _ = writeln!(out, "student = {student}\ntemperature = {temperature}\nsoft_weight = {soft_weight}\nepochs = {epochs}");
            }
            Stage::ChainDistill { models, temperature, soft_weight, epochs } => {
                let _ = writeln!(
                    out,
                    "models = {}\ntemperature = {temperature}\nsoft_weight = {soft_weight}\nepochs = {epochs}",
                    models.join(", ")
                );
            }
            Stage::Prune { kind, scope, prune_epochs, finetune_epochs, frequency } => {
                let _ = writeln!(
                    out,
                    "schedule = {kind}\nscope = {}\nprune_epochs = {prune_epochs}\nfinetune_epochs = {finetune_epochs}\nfrequency = {frequency}",
                    scope.name()
                );
            }
            Stage::Ptq { .. } => {}
            Stage::Qat { epochs, activations } => {
                let _ = writeln!(out, "epochs = {epochs}\nactivations = {activations}");
            }
        }
    }
}

pub const DEFAULT_TEACHER_EPOCHS: usize = 5;
pub const DEFAULT_STUDENT_EPOCHS: usize = 3;
pub const DEFAULT_QAT_EPOCHS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub model: String,
    pub seed: u64,
    /// Report label; defaults to the stage names joined by ` -> `.
    pub label: Option<String>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    /// Train on only the first N examples of the training split.
    pub train_subset: Option<usize>,
    pub validation_fraction: f64,
    pub stages: Vec<Stage>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetKind, model: &str, stages: Vec<Stage>) -> Self {
        Self {
            dataset,
            model: model.into(),
            seed: 1234,
            label: None,
            out: None,
            data_dir: None,
            train_subset: None,
            validation_fraction: 0.1,
            stages,
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let names: Vec<&str> = self.stages.iter().map(Stage::name).collect();
            format!("{} {}", self.model, names.join(" -> "))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.dataset.image_shape();
        let check_model = |name: &str| -> Result<()> {
            let spec = zoo::build(name)?;
            if spec.input != input {
                return Err(Error::Config(format!("model {name} does not take {} images", self.dataset.name())));
            }
            Ok(())
        };
        check_model(&self.model)?;
        let Some(first) = self.stages.first() else {
            return Err(Error::Config("pipeline has no stages".into()));
        };
        if !first.is_training_origin() {
            return Err(Error::Config(format!("pipeline starts with {} before any training", first.name())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            match s {
                Stage::Train { .. } if i > 0 => {
                    return Err(Error::Config("train may only be the first stage".into()));
                }
                Stage::Distill { student, temperature, soft_weight, .. } => {
                    check_model(student)?;
                    check_kd(*temperature, *soft_weight)?;
                }
                Stage::ChainDistill { models, temperature, soft_weight, .. } => {
                    if models.is_empty() {
                        return Err(Error::Config("chain_distill needs at least one model".into()));
                    }
                    models.iter().try_for_each(|m| check_model(m))?;
                    check_kd(*temperature, *soft_weight)?;
                }
                Stage::Ptq { bits } if *bits != 8 && *bits != 16 => {
                    return Err(Error::Config(format!("ptq supports 8 or 16 bits, got {bits}")));
                }
                Stage::Prune { frequency: 0, .. } => {
                    return Err(Error::Config("prune frequency must be positive".into()));
                }
                _ => {}
            }
        }
        if let Some(l) = &self.label {
            if l.contains([',', '\n', '|']) {
                return Err(Error::Config(format!("label {l:?} may not contain ',', '|' or newlines")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut it = sections.into_iter().filter(|s| s.name != "fetch");
        let head = it.next().filter(|s| s.name == "experiment").ok_or_else(|| Error::Config("file must start with [experiment]".into()))?;
        let mut cfg = ExperimentConfig::new(DatasetKind::Mnist, "", Vec::new());
        let mut dataset = None;
        for (k, v, line) in &head.entries {
            match k.as_str() {
                "dataset" => dataset = Some(DatasetKind::from_str(v).map_err(|e| at(*line, e))?),
                "model" => cfg.model = v.clone(),
                "seed" => cfg.seed = num(v, *line)?,
                "label" => cfg.label = Some(v.clone()),
                "out" => cfg.out = Some(v.into()),
                "data_dir" => cfg.data_dir = Some(v.into()),
                "train_subset" => cfg.train_subset = Some(num(v, *line)?),
                "validation_fraction" => cfg.validation_fraction = num(v, *line)?,
                other => return Err(unknown(other, "experiment", *line)),
            }
        }
        cfg.dataset = dataset.ok_or_else(|| Error::Config("[experiment] needs dataset".into()))?;
        if cfg.model.is_empty() {
            return Err(Error::Config("[experiment] needs model".into()));
        }
        for s in it {
            cfg.stages.push(parse_stage(&s)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[experiment]\n");
        let _ = writeln!(out, "dataset = {}\nmodel = {}\nseed = {}", self.dataset.name(), self.model, self.seed);
        if let Some(l) = &self.label {
            let _ = writeln!(out, "label = {l}");
        }
        if let Some(o) = &self.out {
            let _ = writeln!(out, "out = {}", o.display());
        }
        if let Some(d) = &self.data_dir {
            let _ = writeln!(out, "data_dir = {}", d.display());
        }
        if let Some(n) = self.train_subset {
            let _ = writeln!(out, "train_subset = {n}");
        }
        let _ = writeln!(out, "validation_fraction = {}", self.validation_fraction);
        for s in &self.stages {
            s.write(&mut out);
        }
        out
    }
}

fn check_kd(temperature: f64, soft_weight: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&soft_weight) {
        return Err(Error::Config(format!("soft_weight {soft_weight} outside [0, 1]")));
    }
    Ok(())
}

pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<(String, String, usize)>,
}

pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            sections.push(Section { name: name.trim().to_string(), line, entries: Vec::new() });
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let s = sections.last_mut().ok_or_else(|| Error::Config(format!("line {line}: entry outside a section")))?;
        s.entries.push((k.trim().to_string(), v.trim().to_string(), line));
    }
    Ok(sections)
}

fn at(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {e}"))
}

fn num<T: FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| at(line, format!("cannot parse {v:?}")))
}

fn unknown(key: &str, section: &str, line: usize) -> Error {
    at(line, format!("unknown key {key:?} in [{section}]"))
}

fn parse_stage(s: &Section) -> Result<Stage> {
    let get = |key: &str| s.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, l)| (v.as_str(), *l));
    let allowed: &[&str] = match s.name.as_str() {
        "train" => &["epochs"],
        "distill" => &["student", "temperature", "soft_weight", "epochs"],
        "chain_distill" => &["models", "temperature", "soft_weight", "epochs"],
        "prune" => &["schedule", "scope", "prune_epochs", "finetune_epochs", "frequency"],
        "ptq8" | "ptq16" => &[],
        "qat" => &["epochs", "activations"],
        other => return Err(at(s.line, format!("unknown stage [{other}]"))),
    };
    if let Some((k, _, l)) = s.entries.iter().find(|(k, _, _)| !allowed.contains(&k.as_str())) {
        return Err(unknown(k, &s.name, *l));
    }
    let usize_or = |key: &str, d: usize| get(key).map_or(Ok(d), |(v, l)| num(v, l));
    let f64_or = |key: &str, d: f64| get(key).map_or(Ok(d), |(v, l)| num(v, l));
    let required = |key: &str| get(key).map(|(v, _)| v.to_string()).ok_or_else(|| at(s.line, format!("[{}] needs {key}", s.name)));
    Ok(match s.name.as_str() {
        "train" => Stage::Train { epochs: usize_or("epochs", DEFAULT_TEACHER_EPOCHS)? },
        "distill" => Stage::Distill {
            student: required("student")?,
            temperature: f64_or("temperature", 1.0)?,
            soft_weight: f64_or("soft_weight", 1.0)?,
            epochs: usize_or("epochs", DEFAULT_STUDENT_EPOCHS)?,
        },
        "chain_distill" => Stage::ChainDistill {
            models: required("models")?.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect(),
            temperature: f64_or("temperature", 1.0)?,
            soft_weight: f64_or("soft_weight", 1.0)?,
            epochs: usize_or("epochs", DEFAULT_STUDENT_EPOCHS)?,
        },
        "prune" => Stage::Prune {
            kind: required("schedule")?.parse().map_err(|e| at(s.line, e))?,
            scope: get("scope").map_or(Ok(PruneScope::Global), |(v, l)| v.parse().map_err(|e| at(l, e)))?,
            prune_epochs: usize_or("prune_epochs", 2)?,
            finetune_epochs: usize_or("finetune_epochs", 2)?,
            frequency: get("frequency").map_or(Ok(100), |(v, l)| num(v, l))?,
        },
        "ptq8" => Stage::Ptq { bits: 8 },
        "ptq16" => Stage::Ptq { bits: 16 },
        "qat" => Stage::Qat {
            epochs: usize_or("epochs", DEFAULT_QAT_EPOCHS)?,
            activations: get("activations").map_or(Ok(true), |(v, l)| num(v, l))?,
        },
        _ => unreachable!("checked above"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KD: &str = "[experiment]\ndataset = mnist\nmodel = mnist_teacher\n\n[train]\n[distill]\nstudent = mnist_student\ntemperature = 20 # warm\n[ptq8]\n";

    #[test]
    fn parses_defaults() {
        let c = ExperimentConfig::parse(KD).unwrap();
        assert_eq!(c.seed, 1234);
        assert_eq!(c.stages[0], Stage::Train { epochs: 5 });
        assert_eq!(
            c.stages[1],
            Stage::Distill { student: "mnist_student".into(), temperature: 20.0, soft_weight: 1.0, epochs: 3 }
        );
        assert_eq!(c.stages[2], Stage::Ptq { bits: 8 });
        assert_eq!(c.label(), "mnist_teacher train -> distill -> ptq8");
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ExperimentConfig::parse(KD).unwrap();
        c.stages.push(Stage::Prune {
            kind: "poly:0.5:0.8".parse().unwrap(),
            scope: PruneScope::ConvOnly,
            prune_epochs: 1,
            finetune_epochs: 1,
            frequency: 50,
        });
        c.stages.push(Stage::Qat { epochs: 2, activations: false });
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn composition_errors() {
        let prune_first = "[experiment]\ndataset = mnist\nmodel = mnist_teacher\n[prune]\nschedule = const:0.8\n";
        assert!(matches!(ExperimentConfig::parse(prune_first), Err(Error::Config(_))));
        let wrong_input = "[experiment]\ndataset = mnist\nmodel = cifar_teacher\n[train]\n";
        assert!(ExperimentConfig::parse(wrong_input).is_err());
        let typo = "[experiment]\ndataset = mnist\nmodel = mnist_teacher\n[train]\nepoch = 3\n";
        assert!(ExperimentConfig::parse(typo).unwrap_err().to_string().contains("line 5"));
        assert!(ExperimentConfig::parse("[experiment]\ndataset = mnist\nmodel = mnist_teacher\n").is_err());
    }
}
