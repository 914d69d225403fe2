//! Layer graph with parameters, pruning masks and activation caches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{self, Nhwc};
use crate::quant::{FakeQuantConfig, FakeQuantState};
use crate::zoo::{FeatureShape, LayerSpec, ModelSpec};
use crate::{Error, Real, Result, Rng, Tensor};

/// Weight and bias of a convolution or dense layer, with their gradients
/// from the last backward pass and an optional pruning mask over the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayer<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub weight_grad: Tensor<T>,
    pub bias_grad: Tensor<T>,
    mask: Option<Vec<bool>>,
}

impl<T: Real> ParamLayer<T> {
    fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight_grad: Tensor::zeros(weight.shape().to_vec()),
            bias_grad: Tensor::zeros(bias.shape().to_vec()),
            weight,
            bias,
            mask: None,
        }
    }

    /// `true` entries are kept, `false` entries are pruned.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &keep) in self.weight.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Conv { cols: Vec<T>, geometry: Nhwc, weight: Option<Vec<T>>, in_range: Option<Vec<bool>> },
    Dense { input: Vec<T>, batch: usize, weight: Option<Vec<T>>, in_range: Option<Vec<bool>> },
    Pool { argmax: Vec<u32>, input_len: usize },
    Relu { active: Vec<bool> },
    Flatten,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    shapes: Vec<FeatureShape>,
    params: Vec<Option<ParamLayer<T>>>,
    caches: Vec<Option<Cache<T>>>,
    fake_quant: Option<FakeQuantConfig>,
    act_states: Vec<FakeQuantState>,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_weights<T: Real>(spec: &ModelSpec, rng: &mut Rng) -> Result<Model<T>> {
    Model::init(spec, rng)
}

impl<T: Real> Model<T> {
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let mut tensors = Vec::new();
        for (_, (wshape, bias_len)) in spec.param_shapes()? {
            let (fan_in, fan_out) = if wshape.len() == 4 {
                (9 * wshape[2], 9 * wshape[3])
            } else {
                (wshape[0], wshape[1])
            };
            let limit = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
            let n: usize = wshape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.uniform(-limit, limit))).collect();
            tensors.push(Tensor::new(wshape, data)?);
            tensors.push(Tensor::zeros(vec![bias_len]));
        }
        Self::from_tensors(spec.clone(), tensors)
    }

    /// Builds a model from weight/bias tensors listed in layer order.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.feature_shapes()?;
        let param_shapes = spec.param_shapes()?;
        if tensors.len() != 2 * param_shapes.len() {
            return Err(Error::Config(format!(
                "{} expects {} parameter tensors, got {}",
                spec.name,
                2 * param_shapes.len(),
                tensors.len()
            )));
        }
        let mut params: Vec<Option<ParamLayer<T>>> = vec![None; spec.layers.len()];
        let mut it = tensors.into_iter();
        for (layer, (wshape, bias_len)) in param_shapes {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != wshape.as_slice() || b.shape() != [bias_len] {
                return Err(Error::Config(format!(
                    "layer {layer}: expected weight {:?} / bias [{bias_len}], got {:?} / {:?}",
                    wshape,
                    w.shape(),
                    b.shape()
                )));
            }
            params[layer] = Some(ParamLayer::new(w, b));
        }
        let n = spec.layers.len();
        Ok(Self {
            spec,
            shapes,
            params,
            caches: vec![None; n],
            fake_quant: None,
            act_states: vec![FakeQuantState::new(8); n],
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_kind(&self, layer: usize) -> Option<LayerSpec> {
        self.spec.layers.get(layer).copied()
    }

    /// Parameterized layers in order.
    pub fn param_layers(&self) -> impl Iterator<Item = (usize, &ParamLayer<T>)> {
        self.params.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn param_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut ParamLayer<T>)> {
        self.params.iter_mut().enumerate().filter_map(|(i, p)| p.as_mut().map(|p| (i, p)))
    }

    pub fn param_layer(&self, layer: usize) -> Option<&ParamLayer<T>> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn param_layer_mut(&mut self, layer: usize) -> Option<&mut ParamLayer<T>> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    /// Weight and bias tensors in layer order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.param_layers() {
            out.push((format!("layer{i}.weight"), &p.weight));
            out.push((format!("layer{i}.bias"), &p.bias));
        }
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.params.into_iter().flatten().flat_map(|p| [p.weight, p.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_layers().map(|(_, p)| p.weight.len() + p.bias.len()).sum()
    }

    /// Hash of the architecture and every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.spec.name.as_bytes());
        for (_, t) in self.named_tensors() {
            for &v in t.data() {
                bytes.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        crate::fnv1a64(&bytes)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let tensors = self.param_layers().flat_map(|(_, p)| [p.weight.cast(), p.bias.cast()]).collect();
        let mut m = Model::from_tensors(self.spec.clone(), tensors).expect("same spec");
        for (i, p) in self.param_layers() {
            m.params[i].as_mut().unwrap().mask = p.mask.clone();
        }
        m.fake_quant = self.fake_quant;
        m.act_states = self.act_states.clone();
        m
    }

    // ---- pruning masks ----

    /// Installs (or clears) the pruning mask of one layer's weight and zeroes
    /// the pruned weights.
    pub fn set_weight_mask(&mut self, layer: usize, mask: Option<Vec<bool>>) -> Result<()> {
        let p = self
            .param_layer_mut(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} has no weights")))?;
        if let Some(m) = &mask {
            if m.len() != p.weight.len() {
                return Err(Error::Config(format!(
                    "mask for layer {layer} has {} entries, weight has {}",
                    m.len(),
                    p.weight.len()
                )));
            }
        }
        p.mask = mask;
        p.apply_mask();
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        for (_, p) in self.param_layers_mut() {
            p.mask = None;
        }
    }

    pub fn has_masks(&self) -> bool {
        self.param_layers().any(|(_, p)| p.mask.is_some())
    }

    /// Re-zeroes every pruned weight.
    pub fn apply_masks(&mut self) {
        for (_, p) in self.param_layers_mut() {
            p.apply_mask();
        }
    }

    // ---- fake quantization ----

    pub fn set_fake_quant(&mut self, config: Option<FakeQuantConfig>) {
        if let Some(c) = config {
            for s in &mut self.act_states {
                *s = FakeQuantState::new(c.bits);
            }
        }
        self.fake_quant = config;
    }

    pub fn fake_quant(&self) -> Option<FakeQuantConfig> {
        self.fake_quant
    }

    /// Observed output ranges of the parameterized layers.
    pub fn activation_ranges(&self) -> Vec<(usize, FakeQuantState)> {
        self.param_layers().map(|(i, _)| (i, self.act_states[i])).collect()
    }

    pub fn set_activation_ranges(&mut self, ranges: &[(usize, FakeQuantState)]) {
        for &(i, s) in ranges {
            if i < self.act_states.len() {
                self.act_states[i] = s;
            }
        }
    }

    // ---- forward / backward ----

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize> {
        let (h, w, c) = self.spec.input;
        let s = batch.shape();
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
            return Err(Error::Config(format!(
                "{} expects input [N, {h}, {w}, {c}], got {:?}",
                self.spec.name, s
            )));
        }
        Ok(s[0])
    }

    /// Training forward pass: returns logits and caches what
    /// [`Model::backward`] needs. Updates fake-quant ranges when enabled.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut caches = core::mem::take(&mut self.caches);
        let mut states = core::mem::take(&mut self.act_states);
        caches.iter_mut().for_each(|c| *c = None);
        let out = self.run(batch, Some(&mut caches), Some(&mut states));
        self.caches = caches;
        self.act_states = states;
        if out.is_err() {
            self.caches.iter_mut().for_each(|c| *c = None);
        }
        out
    }

    /// Inference pass; no caches, ranges are read but not updated.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(batch, None, None)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        mut caches: Option<&mut Vec<Option<Cache<T>>>>,
        mut states: Option<&mut Vec<FakeQuantState>>,
    ) -> Result<Tensor<T>> {
        let batch = self.check_input(input)?;
        let fq = self.fake_quant;
        let mut x = input.data().to_vec();
        let mut shape = self.spec.input_shape();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let geometry = match shape {
                FeatureShape::Spatial { height, width, channels } => Nhwc { batch, height, width, channels },
                FeatureShape::Flat(n) => Nhwc { batch, height: 1, width: 1, channels: n },
            };
            let recording = caches.is_some();
            let (mut out, cache) = match *layer {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("parameterized layer");
                    let qweight = match fq {
                        Some(c) if c.weights => Some(crate::quant::fake_quantize_own_range(p.weight.data(), c.bits)),
                        _ => None,
                    };
                    let w = qweight.as_deref().unwrap_or(p.weight.data());
                    let keep_weight = if recording { qweight.clone() } else { None };
                    if matches!(layer, LayerSpec::Conv2d { .. }) {
                        let mut cols = Vec::new();
                        let out = layers::conv_forward(&x, geometry, w, p.bias.data(), &mut cols);
                        (out, Cache::Conv { cols, geometry, weight: keep_weight, in_range: None })
                    } else {
                        let out = layers::dense_forward(&x, batch, geometry.channels, w, p.bias.data());
                        let input = if recording { core::mem::take(&mut x) } else { Vec::new() };
                        (out, Cache::Dense { input, batch, weight: keep_weight, in_range: None })
                    }
                }
                LayerSpec::MaxPool2d => {
                    let (out, argmax) = layers::maxpool_forward(&x, geometry);
                    (out, Cache::Pool { argmax, input_len: x.len() })
                }
                LayerSpec::Relu => {
                    let (out, active) = layers::relu_forward(&x);
                    (out, Cache::Relu { active })
                }
                LayerSpec::Flatten => (core::mem::take(&mut x), Cache::Flatten),
            };
            let mut cache = cache;
            if let (Some(c), true) = (fq, layer.has_params()) {
                if c.activations {
                    let state = match states.as_deref_mut() {
                        Some(states) => {
                            if !c.frozen {
                                states[i].observe(&out, c.momentum);
                            }
                            states[i]
                        }
                        None => self.act_states[i],
                    };
                    let in_range = state.fake_quantize(&mut out);
                    match &mut cache {
                        Cache::Conv { in_range: r, .. } | Cache::Dense { in_range: r, .. } => *r = Some(in_range),
                        _ => {}
                    }
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i, context: "in activations" });
            }
            if let Some(caches) = caches.as_deref_mut() {
                caches[i] = Some(cache);
            }
            x = out;
            shape = self.shapes[i];
        }
        Tensor::new(shape.batch_shape(batch), x)
    }

    /// Backpropagates `loss_grad` (gradient w.r.t. the logits) and stores
    /// parameter gradients in each [`ParamLayer`]. Pruned positions receive
    /// exactly zero gradient. Consumes the caches of the preceding forward.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<()> {
        self.backward_impl(loss_grad, false).map(|_| ())
    }

    /// Like [`Model::backward`], also returning the gradient w.r.t. the
    /// model input.
    pub fn backward_with_input(&mut self, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = loss_grad.rows();
        let g = self.backward_impl(loss_grad, true)?.expect("input gradient requested");
        Tensor::new(self.spec.input_shape().batch_shape(batch), g)
    }

    fn backward_impl(&mut self, loss_grad: &Tensor<T>, need_input: bool) -> Result<Option<Vec<T>>> {
        if self.caches.iter().any(Option::is_none) {
            return Err(Error::State("backward called without a preceding forward".into()));
        }
        let out_shape = self.shapes.last().copied().unwrap_or_else(|| self.spec.input_shape());
        let batch = loss_grad.rows();
        if loss_grad.shape() != out_shape.batch_shape(batch).as_slice() {
            return Err(Error::Config(format!(
                "loss gradient shape {:?} does not match model output {:?}",
                loss_grad.shape(),
                out_shape
            )));
        }
        let mut g = loss_grad.data().to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let want_input = i > 0 || need_input;
            let cache = self.caches[i].take().expect("checked above");
            g = match cache {
                Cache::Conv { cols, geometry, weight, in_range } => {
                    mask_in_range(&mut g, in_range.as_deref());
                    let p = self.params[i].as_mut().expect("conv params");
                    let w = weight.as_deref().unwrap_or(p.weight.data());
                    let grads = layers::conv_backward(&cols, geometry, w, p.bias.len(), &g, want_input);
                    store_grads(p, grads.weight, grads.bias);
                    grads.input.unwrap_or_default()
                }
                Cache::Dense { input, batch, weight, in_range } => {
                    mask_in_range(&mut g, in_range.as_deref());
                    let p = self.params[i].as_mut().expect("dense params");
                    let w = weight.as_deref().unwrap_or(p.weight.data());
                    let in_dim = p.weight.shape()[0];
                    let grads = layers::dense_backward(&input, batch, in_dim, w, &g, want_input);
                    store_grads(p, grads.weight, grads.bias);
                    grads.input.unwrap_or_default()
                }
                Cache::Pool { argmax, input_len } => layers::maxpool_backward(&argmax, &g, input_len),
                Cache::Relu { active } => layers::relu_backward(&active, &g),
                Cache::Flatten => g,
            };
            if !want_input {
                return Ok(None);
            }
        }
        Ok(Some(g))
    }

    /// Drops activations cached by the last forward pass.
    pub fn clear_caches(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
    }

    /// Zeroes all stored gradients.
    pub fn zero_grads(&mut self) {
        for (_, p) in self.param_layers_mut() {
            p.weight_grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
            p.bias_grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn mask_in_range<T: Real>(g: &mut [T], in_range: Option<&[bool]>) {
    if let Some(r) = in_range {
        for (v, &ok) in g.iter_mut().zip(r) {
            if !ok {
                *v = T::zero();
            }
        }
    }
}

fn store_grads<T: Real>(p: &mut ParamLayer<T>, weight: Vec<T>, bias: Vec<T>) {
    p.weight_grad.data_mut().copy_from_slice(&weight);
    p.bias_grad.data_mut().copy_from_slice(&bias);
    if let Some(mask) = &p.mask {
        for (g, &keep) in p.weight_grad.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn identity_dense() {
        let spec = ModelSpec::new("id", (1, 1, 1), vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1 }]);
        let w = Tensor::new(vec![1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let m = Model::from_tensors(spec, vec![w, b]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.375f32]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[0.375]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let spec = zoo::build("mnist_student").unwrap();
        let m: Model = Model::init(&spec, &mut Rng::new(5)).unwrap();
        let x = Tensor::zeros(vec![2, 28, 28, 1]);
        assert!(m.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn teacher_logits_shape() {
        let spec = zoo::build("mnist_teacher").unwrap();
        let mut rng = Rng::new(1);
        let m: Model = Model::init(&spec, &mut rng).unwrap();
        let x = Tensor::new(vec![4, 28, 28, 1], (0..4 * 784).map(|_| rng.next_f64() as f32).collect()).unwrap();
        assert_eq!(m.predict(&x).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn wrong_input_shape_is_config_error() {
        let m: Model = Model::init(&zoo::build("mnist_student").unwrap(), &mut Rng::new(1)).unwrap();
        let x = Tensor::zeros(vec![1, 32, 32, 3]);
        assert!(matches!(m.predict(&x), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let m: Model = Model::init(&zoo::build("mnist_student").unwrap(), &mut Rng::new(1)).unwrap();
        let mut x = Tensor::zeros(vec![1, 28, 28, 1]);
        x.data_mut()[0] = f32::NAN;
        assert_eq!(m.predict(&x), Err(Error::NonFinite { layer: 0, context: "in activations" }));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut m: Model = Model::init(&zoo::build("mnist_student").unwrap(), &mut Rng::new(1)).unwrap();
        let g = Tensor::zeros(vec![1, 10]);
        assert!(matches!(m.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::new("d", (1, 1, 100), vec![LayerSpec::Flatten, LayerSpec::Dense { units: 10 }]);
        let a: Model = Model::init(&spec, &mut Rng::new(9)).unwrap();
        let b: Model = Model::init(&spec, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 110.0).sqrt() as f32;
        let p = a.param_layer(1).unwrap();
        assert!(p.weight.data().iter().all(|w| w.abs() <= limit));
        assert!(p.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let spec = zoo::build("mnist_student").unwrap();
        let mut rng = Rng::new(2);
        let mut m: Model = Model::init(&spec, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 28, 28, 1], (0..2 * 784).map(|_| rng.next_f64() as f32).collect()).unwrap();
        m.forward(&x).unwrap();
        m.backward(&Tensor::zeros(vec![2, 10])).unwrap();
        for (_, p) in m.param_layers() {
            assert!(p.weight_grad.data().iter().all(|&g| g == 0.0));
            assert!(p.bias_grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn masked_positions_get_exactly_zero_gradient() {
        let spec = ModelSpec::new("d", (1, 1, 6), vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3 }]);
        let mut m: Model = Model::init(&spec, &mut Rng::new(3)).unwrap();
        let mask: Vec<bool> = (0..18).map(|i| i % 3 != 0).collect();
        m.set_weight_mask(1, Some(mask.clone())).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 6], (0..12).map(|i| i as f32 * 0.1 + 0.05).collect()).unwrap();
        m.forward(&x).unwrap();
        m.backward(&Tensor::filled(vec![2, 3], 1.0)).unwrap();
        let p = m.param_layer(1).unwrap();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                assert_eq!(p.weight_grad.data()[i], 0.0);
                assert_eq!(p.weight.data()[i], 0.0);
            } else {
                assert_ne!(p.weight_grad.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let spec = zoo::build("mnist_student").unwrap();
        let a: Model = Model::init(&spec, &mut Rng::new(1)).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.param_layer_mut(0).unwrap().weight.data_mut()[0] += 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
