//! Central-difference gradient checks of the 64-bit path.
//!
//! Random small architectures covering every layer kind; each trial
//! compares analytic parameter and input gradients with numeric ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::loss;
use crate::model::init_weights;
use crate::{LayerSpec, Model, ModelSpec, Rng, Tensor};

/// Finite-difference step.
pub const H: f64 = 1e-6;

/// ‖a − n‖ / max(‖a‖ + ‖n‖, tiny)
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| Float::sqrt(v.sum::<f64>());
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)));
    let scale = norm(&mut a.iter().map(|x| x * x)) + norm(&mut n.iter().map(|x| x * x));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_spec(rng: &mut Rng, trial: usize) -> ModelSpec {
    let side = [2usize, 4, 6][rng.below(3) as usize];
    let channels = 1 + rng.below(3) as usize;
    let mut layers = vec![LayerSpec::Conv2d { filters: 1 + rng.below(4) as usize }, LayerSpec::Relu];
    if rng.below(2) == 0 {
        layers.push(LayerSpec::MaxPool2d);
    }
    if rng.below(2) == 0 {
        layers.push(LayerSpec::Conv2d { filters: 1 + rng.below(3) as usize });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Flatten);
    if rng.below(2) == 0 {
        layers.push(LayerSpec::Dense { units: 2 + rng.below(6) as usize });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: 10 });
    ModelSpec::new(format!("gradcheck{trial}"), (side, side, channels), layers)
}

struct Problem {
    x: Tensor<f64>,
    labels: Vec<u8>,
    soft: Option<(Tensor<f64>, f64)>,
}

impl Problem {
    fn loss(&self, model: &mut Model<f64>) -> (f64, Tensor<f64>) {
        let logits = model.forward(&self.x).unwrap();
        match &self.soft {
            None => loss::cross_entropy_hard(&logits, &self.labels).unwrap(),
            Some((q, t)) => loss::cross_entropy_soft(&logits, q, *t).unwrap(),
        }
    }
}

pub fn check_trial(trial: usize, rng: &mut Rng) -> Vec<(String, f64)> {
    let spec = random_spec(rng, trial);
    let mut model: Model<f64> = init_weights(&spec, rng).unwrap();
    for (_, p) in model.param_layers_mut() {
        p.bias.data_mut().iter_mut().for_each(|b| *b = rng.uniform(-0.3, 0.3));
    }
    let batch = 1 + rng.below(3) as usize;
    let (h, w, c) = spec.input;
    let x = Tensor::new(vec![batch, h, w, c], (0..batch * h * w * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let labels: Vec<u8> = (0..batch).map(|_| rng.below(10) as u8).collect();
    let soft = (trial % 2 == 1).then(|| {
        let t = rng.uniform(0.5, 20.0);
        let z = Tensor::new(vec![batch, 10], (0..batch * 10).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        (loss::softmax_with_temperature(&z, t).unwrap(), t)
    });
    let problem = Problem { x, labels, soft };

    let (_, g) = problem.loss(&mut model);
    let input_grad = model.backward_with_input(&g).unwrap();
    let layers: Vec<usize> = model.param_layers().map(|(i, _)| i).collect();
    let mut out = Vec::new();

    for &i in &layers {
        for bias in [false, true] {
            let analytic: Vec<f64> = {
                let p = model.param_layer(i).unwrap();
                if bias { p.bias_grad.data().to_vec() } else { p.weight_grad.data().to_vec() }
            };
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let probe = |delta: f64, m: &mut Model<f64>| {
                    let p = m.param_layer_mut(i).unwrap();
                    let t = if bias { &mut p.bias } else { &mut p.weight };
                    t.data_mut()[k] += delta;
                };
                let mut plus = model.clone();
                probe(H, &mut plus);
                let mut minus = model.clone();
                probe(-H, &mut minus);
                numeric.push((problem.loss(&mut plus).0 - problem.loss(&mut minus).0) / (2.0 * H));
            }
            let what = if bias { "bias" } else { "weight" };
            out.push((format!("trial {trial} layer {i} {what}"), rel_err(&analytic, &numeric)));
        }
    }

    let mut numeric = Vec::with_capacity(problem.x.len());
    for k in 0..problem.x.len() {
        let shifted = |delta: f64| {
            let mut p = Problem { x: problem.x.clone(), labels: problem.labels.clone(), soft: problem.soft.clone() };
            p.x.data_mut()[k] += delta;
            p.loss(&mut model.clone()).0
        };
        numeric.push((shifted(H) - shifted(-H)) / (2.0 * H));
    }
    out.push((format!("trial {trial} input"), rel_err(input_grad.data(), &numeric)));
    out
}


/// Largest relative error seen over a run, and where.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checks: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// `trials` random architectures, seeded from `seed`.
pub fn run(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = Rng::new(seed).fork("gradient-check");
    let mut report = GradCheckReport { trials, checks: 0, worst: 0.0, worst_at: String::new() };
    for trial in 0..trials {
        for (what, err) in check_trial(trial, &mut rng) {
            report.checks += 1;
            if !(err <= report.worst) {
                report.worst = err;
                report.worst_at = what;
            }
        }
    }
    report
}
