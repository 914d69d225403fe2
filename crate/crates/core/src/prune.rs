//! Unstructured magnitude pruning with constant and cubic polynomial-decay
//! schedules.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::data::Dataset;
use crate::train::{Objective, TrainConfig, Trainer};
use crate::zoo::LayerSpec;
use crate::{Error, Model, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Constant { final_sparsity: f64 },
    PolynomialDecay { initial_sparsity: f64, final_sparsity: f64 },
}

impl ScheduleKind {
    pub fn final_sparsity(&self) -> f64 {
        match *self {
            ScheduleKind::Constant { final_sparsity } | ScheduleKind::PolynomialDecay { final_sparsity, .. } => final_sparsity,
        }
    }

    /// Short label used in reports, e.g. `CS 80%` or `PD 50%-80%`.
    pub fn label(&self) -> String {
        let pct = |s: f64| num_traits::Float::round(s * 100.0) as i64;
        match *self {
            ScheduleKind::Constant { final_sparsity } => format!("CS {}%", pct(final_sparsity)),
            ScheduleKind::PolynomialDecay { initial_sparsity, final_sparsity } => {
                format!("PD {}%-{}%", pct(initial_sparsity), pct(final_sparsity))
            }
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    /// `const:S` or `poly:SI:SF`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad sparsity {p:?} in schedule {s:?}")))
        };
        let kind = match parts.as_slice() {
            ["const", f] => ScheduleKind::Constant { final_sparsity: num(f)? },
            ["poly", i, f] => ScheduleKind::PolynomialDecay { initial_sparsity: num(i)?, final_sparsity: num(f)? },
            _ => return Err(Error::Config(format!("schedule {s:?} is not const:S or poly:SI:SF"))),
        };
        validate_kind(&kind)?;
        Ok(kind)
    }
}

impl core::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ScheduleKind::Constant { final_sparsity } => write!(f, "const:{final_sparsity}"),
            ScheduleKind::PolynomialDecay { initial_sparsity, final_sparsity } => {
                write!(f, "poly:{initial_sparsity}:{final_sparsity}")
            }
        }
    }
}

fn validate_kind(kind: &ScheduleKind) -> Result<()> {
    let ok = |s: f64| (0.0..1.0).contains(&s);
    match *kind {
        ScheduleKind::Constant { final_sparsity } if ok(final_sparsity) => Ok(()),
        ScheduleKind::PolynomialDecay { initial_sparsity, final_sparsity }
            if ok(initial_sparsity) && ok(final_sparsity) && initial_sparsity <= final_sparsity =>
        {
            Ok(())
        }
        _ => Err(Error::Config(format!("sparsities must satisfy 0 <= initial <= final < 1, got {kind:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    pub kind: ScheduleKind,
    pub begin_step: u64,
    pub end_step: u64,
    /// Optimizer steps between mask updates.
    pub frequency: u64,
    pub exponent: i32,
}

impl PruneSchedule {
    pub fn new(kind: ScheduleKind, begin_step: u64, end_step: u64) -> Result<Self> {
        let s = Self { kind, begin_step, end_step, frequency: 100, exponent: 3 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_kind(&self.kind)?;
        if self.begin_step >= self.end_step {
            return Err(Error::Config(format!("schedule begin {} must precede end {}", self.begin_step, self.end_step)));
        }
        if self.frequency == 0 {
            return Err(Error::Config("mask update frequency must be positive".into()));
        }
        if self.exponent < 1 {
            return Err(Error::Config(format!("polynomial exponent must be >= 1, got {}", self.exponent)));
        }
        Ok(())
    }

    /// Whether the mask is recomputed before optimizer step `step`.
    pub fn updates_at(&self, step: u64) -> bool {
        step >= self.begin_step
            && step <= self.end_step
            && ((step - self.begin_step).is_multiple_of(self.frequency) || step == self.end_step)
    }
}

/// Target sparsity at `step`. Zero before `begin_step`.
pub fn sparsity_at(schedule: &PruneSchedule, step: u64) -> Result<f64> {
    schedule.validate()?;
    if step < schedule.begin_step {
        return Ok(0.0);
    }
    Ok(match schedule.kind {
        ScheduleKind::Constant { final_sparsity } => final_sparsity,
        ScheduleKind::PolynomialDecay { initial_sparsity, final_sparsity } => {
            let span = (schedule.end_step - schedule.begin_step) as f64;
            let u = ((step - schedule.begin_step) as f64 / span).min(1.0);
            final_sparsity + (initial_sparsity - final_sparsity) * num_traits::Float::powi(1.0 - u, schedule.exponent)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PruneScope {
    Global,
    DenseOnly,
    ConvOnly,
}

impl PruneScope {
    pub fn contains(&self, kind: LayerSpec) -> bool {
        match self {
            PruneScope::Global => kind.has_params(),
            PruneScope::DenseOnly => matches!(kind, LayerSpec::Dense { .. }),
            PruneScope::ConvOnly => matches!(kind, LayerSpec::Conv2d { .. }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PruneScope::Global => "global",
            PruneScope::DenseOnly => "dense",
            PruneScope::ConvOnly => "conv",
        }
    }

    /// Indices of the in-scope weight layers of `model`.
    pub fn layers<T: Real>(&self, model: &Model<T>) -> Vec<usize> {
        model.param_layers().map(|(i, _)| i).filter(|&i| model.layer_kind(i).is_some_and(|k| self.contains(k))).collect()
    }
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "global" => Ok(PruneScope::Global),
            "dense" => Ok(PruneScope::DenseOnly),
            "conv" => Ok(PruneScope::ConvOnly),
            other => Err(Error::Config(format!("unknown prune scope {other:?} (expected global|dense|conv)"))),
        }
    }
}

/// Keep-flags per in-scope tensor, in the order the tensors were given.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub keep: Vec<Vec<bool>>,
}

impl Mask {
    pub fn pruned(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| !k).count()
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }
}

/// Ranks every weight of `tensors` jointly by magnitude and prunes the
/// lowest `⌊target·|W|⌋`. Ties go to the earlier (tensor, index).
pub fn select_mask<T: Real>(tensors: &[&[T]], target: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("target sparsity must lie in [0, 1), got {target}")));
    }
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let n_prune = num_traits::Float::floor(target * total as f64 + 1e-9) as usize;
    let mut keep: Vec<Vec<bool>> = tensors.iter().map(|t| alloc::vec![true; t.len()]).collect();
    if n_prune == 0 {
        return Ok(Mask { keep });
    }
    let mut ranked: Vec<(T, u32, u32)> = Vec::with_capacity(total);
    for (l, t) in tensors.iter().enumerate() {
        ranked.extend(t.iter().enumerate().map(|(i, w)| (w.abs(), l as u32, i as u32)));
    }
    let cmp = |a: &(T, u32, u32), b: &(T, u32, u32)| {
        a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if n_prune < total {
        ranked.select_nth_unstable_by(n_prune, cmp);
    }
    for &(_, l, i) in &ranked[..n_prune] {
        keep[l as usize][i as usize] = false;
    }
    Ok(Mask { keep })
}

/// Recomputes and installs the mask over `scope` at sparsity `target`.
pub fn apply_pruning<T: Real>(model: &mut Model<T>, scope: PruneScope, target: f64) -> Result<Mask> {
    let layers = scope.layers(model);
    let mask = {
        let tensors: Vec<&[T]> =
            layers.iter().map(|&i| model.param_layer(i).expect("in-scope layer").weight.data()).collect();
        select_mask(&tensors, target)?
    };
    for (&i, keep) in layers.iter().zip(&mask.keep) {
        model.set_weight_mask(i, Some(keep.clone()))?;
    }
    Ok(mask)
}

/// Fraction of exactly-zero weights in scope; 0 for an empty scope.
pub fn measure_sparsity<T: Real>(model: &Model<T>, scope: PruneScope) -> f64 {
    let (zeros, total) = scope.layers(model).iter().fold((0usize, 0usize), |(z, n), &i| {
        let w = &model.param_layer(i).expect("in-scope layer").weight;
        (z + w.count_zeros(), n + w.len())
    });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneConfig {
    pub kind: ScheduleKind,
    pub scope: PruneScope,
    /// Epochs over which the schedule ramps (masks update during these).
    pub prune_epochs: usize,
    /// Epochs of training with the final mask frozen.
    pub finetune_epochs: usize,
    pub frequency: u64,
    pub exponent: i32,
    /// Explicit schedule bounds; default spans the pruning epochs.
    pub begin_step: Option<u64>,
    pub end_step: Option<u64>,
    pub train: TrainConfig,
}

impl PruneConfig {
    pub fn new(kind: ScheduleKind, scope: PruneScope) -> Self {
        Self {
            kind,
            scope,
            prune_epochs: 2,
            finetune_epochs: 2,
            frequency: 100,
            exponent: 3,
            begin_step: None,
            end_step: None,
            train: TrainConfig::default(),
        }
    }

    pub fn schedule(&self, steps_per_epoch: u64) -> Result<PruneSchedule> {
        let begin = self.begin_step.unwrap_or(0);
        let end = self.end_step.unwrap_or(steps_per_epoch * self.prune_epochs as u64).max(begin + 1);
        let mut s = PruneSchedule::new(self.kind, begin, end)?;
        s.frequency = self.frequency;
        s.exponent = self.exponent;
        s.validate()?;
        Ok(s)
    }
}

/// Trains `model` while pruning to the schedule, then fine-tunes with the
/// final mask frozen. Masked weights stay exactly zero throughout.
pub fn prune_and_finetune(model: &Model, train: &Dataset, validation: Option<&Dataset>, cfg: &PruneConfig) -> Result<Model> {
    let mut model = model.clone();
    let mut trainer = Trainer::new(&cfg.train);
    let schedule = cfg.schedule(trainer.steps_per_epoch(train.len()))?;
    let scope = cfg.scope;
    let mut last_target = None;
    {
        let mut hook = |step: u64, m: &mut Model| -> Result<()> {
            if schedule.updates_at(step) {
                let target = sparsity_at(&schedule, step)?;
                apply_pruning(m, scope, target)?;
                last_target = Some(target);
            }
            Ok(())
        };
        for _ in 0..cfg.prune_epochs + cfg.finetune_epochs {
            trainer.run_epoch(&mut model, train, validation, &Objective::Hard, &mut hook)?;
        }
    }
    let final_target = sparsity_at(&schedule, schedule.end_step)?;
    if last_target != Some(final_target) || trainer.steps() <= schedule.end_step {
        apply_pruning(&mut model, scope, final_target)?;
    }
    log::info!(
        "pruned {} ({} {}): sparsity {:.4}",
        model.spec().name,
        cfg.kind.label(),
        scope.name(),
        measure_sparsity(&model, scope)
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn poly(i: f64, f: f64) -> PruneSchedule {
        PruneSchedule::new(ScheduleKind::PolynomialDecay { initial_sparsity: i, final_sparsity: f }, 0, 1000).unwrap()
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        let s = poly(0.0, 0.8);
        assert_eq!(sparsity_at(&s, 0).unwrap(), 0.0);
        assert_eq!(sparsity_at(&s, 1000).unwrap(), 0.8);
        assert!((sparsity_at(&s, 500).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(sparsity_at(&s, 5000).unwrap(), 0.8);
    }

    #[test]
    fn invalid_schedules() {
        assert!(PruneSchedule::new(ScheduleKind::Constant { final_sparsity: 1.0 }, 0, 10).is_err());
        assert!(PruneSchedule::new(ScheduleKind::Constant { final_sparsity: 0.5 }, 10, 10).is_err());
        assert!("poly:0.8:0.5".parse::<ScheduleKind>().is_err());
        assert!("cubic:0.5".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn parse_schedule_and_scope() {
        assert_eq!("const:0.8".parse::<ScheduleKind>().unwrap(), ScheduleKind::Constant { final_sparsity: 0.8 });
        assert_eq!(
            "poly:0.5:0.8".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::PolynomialDecay { initial_sparsity: 0.5, final_sparsity: 0.8 }
        );
        assert_eq!("dense".parse::<PruneScope>().unwrap(), PruneScope::DenseOnly);
        assert!("local".parse::<PruneScope>().is_err());
    }

    #[test]
    fn select_mask_example() {
        let w = [0.1f32, -0.5, 0.3, 0.05];
        let m = select_mask(&[&w[..]], 0.5).unwrap();
        assert_eq!(m.keep, vec![vec![false, true, true, false]]);
        assert!(select_mask(&[&w[..]], 0.0).unwrap().keep[0].iter().all(|&k| k));
    }

    #[test]
    fn pooled_scope_can_empty_one_tensor() {
        let small = [0.01f32, -0.02, 0.03, 0.04];
        let large = [1.0f32, -2.0, 3.0, 4.0];
        let m = select_mask(&[&small[..], &large[..]], 0.5).unwrap();
        assert_eq!(m.keep, vec![vec![false; 4], vec![true; 4]]);
    }

    #[test]
    fn ties_prune_earliest_first() {
        let a = [1.0f32; 3];
        let b = [1.0f32; 3];
        let m = select_mask(&[&a[..], &b[..]], 0.5).unwrap();
        assert_eq!(m.keep, vec![vec![false; 3], vec![true; 3]]);
    }

    #[test]
    fn all_zero_tensor_is_fully_sparse() {
        let spec = crate::zoo::build("mnist_student").unwrap();
        let mut m: Model = Model::init(&spec, &mut crate::Rng::new(1)).unwrap();
        assert_eq!(measure_sparsity(&m, PruneScope::Global), 0.0);
        for (_, p) in m.param_layers_mut() {
            p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(measure_sparsity(&m, PruneScope::Global), 1.0);
    }

    #[test]
    fn half_pruning_measures_half() {
        let spec = crate::zoo::build("mnist_student").unwrap();
        let mut m: Model = Model::init(&spec, &mut crate::Rng::new(2)).unwrap();
        apply_pruning(&mut m, PruneScope::Global, 0.5).unwrap();
        let n = m.param_layers().map(|(_, p)| p.weight.len()).sum::<usize>() as f64;
        assert!((measure_sparsity(&m, PruneScope::Global) - 0.5).abs() <= 1.0 / n);
        // dense-only pruning leaves conv weights untouched
        let mut d: Model = Model::init(&spec, &mut crate::Rng::new(2)).unwrap();
        apply_pruning(&mut d, PruneScope::DenseOnly, 0.5).unwrap();
        assert_eq!(measure_sparsity(&d, PruneScope::ConvOnly), 0.0);
    }

    proptest! {
        #[test]
        fn poly_schedule_monotone(i in 0.0f64..0.9, d in 0.0f64..0.09, a in 0u64..2000, b in 0u64..2000) {
            let s = poly(i, i + d);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(sparsity_at(&s, lo).unwrap() <= sparsity_at(&s, hi).unwrap() + 1e-15);
        }

        #[test]
        fn select_mask_count_matches_brute_force(v in proptest::collection::vec(-1.0f32..1.0, 1..300), s in 0.0f64..0.99) {
            let m = select_mask(&[&v[..]], s).unwrap();
            let n = v.len();
            let kept = m.keep[0].iter().filter(|&&k| k).count();
            prop_assert_eq!(kept, n - (s * n as f64 + 1e-9).floor() as usize);
            // brute force: every pruned magnitude <= every kept magnitude
            let max_pruned = v.iter().zip(&m.keep[0]).filter(|(_, &k)| !k).map(|(w, _)| w.abs()).fold(0.0f32, f32::max);
            let min_kept = v.iter().zip(&m.keep[0]).filter(|(_, &k)| k).map(|(w, _)| w.abs()).fold(f32::INFINITY, f32::min);
            prop_assert!(max_pruned <= min_kept);
        }
    }
}
