//! Affine 8-bit and half-precision weight codecs, post-training
//! quantization, and quantization-aware training with straight-through
//! gradients.

use alloc::format;
use alloc::vec::Vec;

use half::f16;

use crate::data::Dataset;
use crate::train::{self, Objective, TrainConfig, Trainer};
use crate::{Error, Model, ModelSpec, Real, Result, Tensor};

/// `x̂ = offset + scale·(q − zero_point)`, `q ∈ [0, 2^bits − 1]`.
///
/// For a non-degenerate range the offset is 0 and the range is widened to
/// include zero so that 0.0 maps to an integer code. A constant range is
/// stored as `scale = 1, zero_point = 0, offset = value` and round-trips
/// exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCodec {
    pub scale: f32,
    pub zero_point: u8,
    pub offset: f32,
    pub bits: u8,
}

impl AffineCodec {
    pub fn from_range(min: f64, max: f64, bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Argument(format!("affine codec supports 1..=8 bits, got {bits}")));
        }
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(Error::Numeric(format!("invalid calibration range [{min}, {max}]")));
        }
        let degenerate = Self { scale: 1.0, zero_point: 0, offset: min as f32, bits };
        if min == max {
            return Ok(degenerate);
        }
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let qmax = ((1u32 << bits) - 1) as f64;
        let scale = ((hi - lo) / qmax) as f32;
        if !(scale >= f32::MIN_POSITIVE) {
            return Ok(degenerate);
        }
        let zp = num_traits::Float::round(-lo / scale as f64).clamp(0.0, qmax);
        Ok(Self { scale, zero_point: zp as u8, offset: 0.0, bits })
    }

    pub fn qmax(&self) -> u8 {
        ((1u32 << self.bits) - 1) as u8
    }

    pub fn quantize(&self, x: f32) -> u8 {
        let q = num_traits::Float::round((x as f64 - self.offset as f64) / self.scale as f64) + self.zero_point as f64;
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        self.offset + self.scale * (q as f32 - self.zero_point as f32)
    }

    /// Dequantized bounds of the representable range.
    pub fn representable(&self) -> (f32, f32) {
        (self.dequantize(0), self.dequantize(self.qmax()))
    }

    pub fn is_degenerate(&self) -> bool {
        self.offset != 0.0 || (self.scale == 1.0 && self.zero_point == 0)
    }
}

/// Affine-quantized tensor: integer payload plus codec parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codec: AffineCodec,
    pub payload: Vec<u8>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Per-tensor asymmetric quantization calibrated on `x`'s own range.
pub fn quantize_affine(x: &Tensor<f32>, bits: u8) -> Result<QuantizedTensor> {
    if !x.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite values".into()));
    }
    let (min, max) = x.min_max().unwrap_or((0.0, 0.0));
    let codec = AffineCodec::from_range(min as f64, max as f64, bits)?;
    Ok(QuantizedTensor { shape: x.shape().to_vec(), codec, payload: x.data().iter().map(|&v| codec.quantize(v)).collect() })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    let data = q.payload.iter().map(|&v| q.codec.dequantize(v)).collect();
    Tensor::new(q.shape.clone(), data).expect("payload matches shape")
}

/// IEEE binary16 payload, rounded to nearest even.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfTensor {
    pub shape: Vec<usize>,
    pub payload: Vec<u16>,
}

impl HalfTensor {
    pub fn from_tensor(x: &Tensor<f32>) -> Self {
        Self { shape: x.shape().to_vec(), payload: x.data().iter().map(|&v| f16::from_f32(v).to_bits()).collect() }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.payload.iter().map(|&b| f16::from_bits(b).to_f32()).collect();
        Tensor::new(self.shape.clone(), data).expect("payload matches shape")
    }
}

// ---- fake quantization ----

/// Settings for quantize→dequantize emulation in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeQuantConfig {
    pub bits: u8,
    pub weights: bool,
    pub activations: bool,
    /// EMA factor for activation ranges.
    pub momentum: f64,
    /// Read ranges without updating them.
    pub frozen: bool,
}

impl Default for FakeQuantConfig {
    fn default() -> Self {
        Self { bits: 8, weights: true, activations: true, momentum: 0.99, frozen: false }
    }
}

/// Running activation range of one layer output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeQuantState {
    pub min: f64,
    pub max: f64,
    pub bits: u8,
    initialized: bool,
}

impl FakeQuantState {
    pub fn new(bits: u8) -> Self {
        Self { min: 0.0, max: 0.0, bits, initialized: false }
    }

    pub fn with_range(min: f64, max: f64, bits: u8) -> Self {
        Self { min, max, bits, initialized: true }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Folds a batch's range into the running range (first batch sets it).
    pub fn observe<T: Real>(&mut self, values: &[T], momentum: f64) {
        let Some((lo, hi)) = min_max(values) else { return };
        if self.initialized {
            self.min = momentum * self.min + (1.0 - momentum) * lo;
            self.max = momentum * self.max + (1.0 - momentum) * hi;
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }

    /// Snaps `values` onto the grid of the running range. Returns the
    /// straight-through mask: `true` where the input was inside the
    /// representable range (gradient passes), `false` where it was clamped.
    pub fn fake_quantize<T: Real>(&self, values: &mut [T]) -> Vec<bool> {
        if !self.initialized {
            return alloc::vec![true; values.len()];
        }
        match AffineCodec::from_range(self.min, self.max, self.bits) {
            Ok(codec) if !codec.is_degenerate() => fake_quantize_with(values, &codec),
            _ => alloc::vec![true; values.len()],
        }
    }
}

fn min_max<T: Real>(values: &[T]) -> Option<(f64, f64)> {
    let mut it = values.iter().map(|v| v.as_f64());
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

fn fake_quantize_with<T: Real>(values: &mut [T], codec: &AffineCodec) -> Vec<bool> {
    let (lo, hi) = codec.representable();
    let (lo, hi) = (lo as f64, hi as f64);
    values
        .iter_mut()
        .map(|v| {
            let x = v.as_f64();
            *v = T::from_f64(codec.dequantize(codec.quantize(x as f32)) as f64);
            x >= lo && x <= hi
        })
        .collect()
}

/// Weight fake-quantization against the tensor's own current range.
pub fn fake_quantize_own_range<T: Real>(values: &[T], bits: u8) -> Vec<T> {
    let mut out = values.to_vec();
    if let Some((lo, hi)) = min_max(values) {
        if let Ok(codec) = AffineCodec::from_range(lo, hi, bits) {
            if !codec.is_degenerate() {
                fake_quantize_with(&mut out, &codec);
            }
        }
    }
    out
}

// ---- post-training quantization ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F16,
    U8,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            16 => Ok(Precision::F16),
            8 => Ok(Precision::U8),
            other => Err(Error::Argument(format!("unsupported precision {other} bits (expected 8, 16 or 32)"))),
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F16 => 16,
            Precision::U8 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncodedTensor {
    F32(Tensor<f32>),
    F16(HalfTensor),
    U8(QuantizedTensor),
}

impl EncodedTensor {
    pub fn decode(&self) -> Tensor<f32> {
        match self {
            EncodedTensor::F32(t) => t.clone(),
            EncodedTensor::F16(h) => h.to_tensor(),
            EncodedTensor::U8(q) => dequantize(q),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            EncodedTensor::F32(t) => t.shape(),
            EncodedTensor::F16(h) => &h.shape,
            EncodedTensor::U8(q) => &q.shape,
        }
    }
}

/// Stored form of a model: weight/bias tensors in layer order, each with
/// its own encoding, plus activation ranges when trained with them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub precision: Precision,
    pub tensors: Vec<EncodedTensor>,
    pub activation_ranges: Vec<(usize, FakeQuantState)>,
}

impl QuantizedModel {
    /// Float model for inference. Weights are dequantized to `f32`;
    /// recorded activation ranges are applied as frozen fake-quant.
    pub fn dequantize(&self) -> Result<Model> {
        let mut model = Model::from_tensors(self.spec.clone(), self.tensors.iter().map(EncodedTensor::decode).collect())?;
        if !self.activation_ranges.is_empty() {
            let bits = self.activation_ranges[0].1.bits;
            model.set_fake_quant(Some(FakeQuantConfig { bits, weights: false, activations: true, frozen: true, ..Default::default() }));
            model.set_activation_ranges(&self.activation_ranges);
        }
        Ok(model)
    }
}

/// Encodes every weight tensor of `model`: 8 → affine u8 weights with f32
/// biases, 16 → binary16 everywhere, 32 → unchanged.
pub fn ptq(model: &Model, bits: u32) -> Result<QuantizedModel> {
    let precision = Precision::from_bits(bits)?;
    let mut tensors = Vec::new();
    for (_, p) in model.param_layers() {
        match precision {
            Precision::F32 => {
                tensors.push(EncodedTensor::F32(p.weight.clone()));
                tensors.push(EncodedTensor::F32(p.bias.clone()));
            }
            Precision::F16 => {
                tensors.push(EncodedTensor::F16(HalfTensor::from_tensor(&p.weight)));
                tensors.push(EncodedTensor::F16(HalfTensor::from_tensor(&p.bias)));
            }
            Precision::U8 => {
                tensors.push(EncodedTensor::U8(quantize_affine(&p.weight, 8)?));
                tensors.push(EncodedTensor::F32(p.bias.clone()));
            }
        }
    }
    let activation_ranges = match model.fake_quant() {
        // Stored ranges are single precision; round now so in-memory and
        // reloaded models evaluate identically.
        Some(c) if c.activations => model
            .activation_ranges()
            .into_iter()
            .filter(|(_, s)| s.is_initialized())
            .map(|(i, s)| (i, FakeQuantState::with_range(s.min as f32 as f64, s.max as f32 as f64, s.bits)))
            .collect(),
        _ => Vec::new(),
    };
    Ok(QuantizedModel { spec: model.spec().clone(), precision, tensors, activation_ranges })
}

/// Sets activation ranges of `model` from up to `batches` training batches
/// and freezes them, enabling full fake-quant evaluation.
pub fn calibrate_activations(model: &mut Model, data: &Dataset, batches: usize, batch_size: usize, bits: u8) -> Result<()> {
    model.set_fake_quant(Some(FakeQuantConfig { bits, weights: false, activations: true, momentum: 0.99, frozen: false }));
    let mut rng = crate::Rng::new(0).fork("calibration");
    for batch in crate::data::batches(data, batch_size, &mut rng)?.take(batches) {
        model.forward(&batch.images)?;
    }
    let ranges = model.activation_ranges();
    model.set_fake_quant(Some(FakeQuantConfig { bits, weights: false, activations: true, momentum: 0.99, frozen: true }));
    model.set_activation_ranges(&ranges);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QatConfig {
    pub train: TrainConfig,
    pub quantize_activations: bool,
    pub bits: u8,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), quantize_activations: true, bits: 8 }
    }
}

pub enum QatStart<'a> {
    /// Train from a fresh initialization.
    Spec(&'a ModelSpec),
    /// Fine-tune an already trained model.
    Pretrained(&'a Model),
}

pub struct QatOutcome {
    /// Float weights after training, fake-quant settings attached.
    pub model: Model,
    /// The trained weights stored through 8-bit PTQ.
    pub quantized: QuantizedModel,
}

/// Trains with fake-quantized weights (and optionally layer outputs) in the
/// forward pass. Gradients pass straight through inside the observed range
/// and are zeroed where the forward pass clamped.
pub fn qat_train(start: QatStart<'_>, train_data: &Dataset, validation: Option<&Dataset>, cfg: &QatConfig) -> Result<QatOutcome> {
    if cfg.bits != 8 {
        return Err(Error::Argument(format!("quantization-aware training supports 8 bits, got {}", cfg.bits)));
    }
    let mut model = match start {
        QatStart::Spec(spec) => train::init_model(spec, cfg.train.seed)?,
        QatStart::Pretrained(m) => m.clone(),
    };
    model.set_fake_quant(Some(FakeQuantConfig {
        bits: cfg.bits,
        weights: true,
        activations: cfg.quantize_activations,
        ..Default::default()
    }));
    let mut trainer = Trainer::new(&cfg.train);
    for _ in 0..cfg.train.epochs {
        trainer.run_epoch(&mut model, train_data, validation, &Objective::Hard, &mut |_, _| Ok(()))?;
    }
    let quantized = ptq(&model, 8)?;
    Ok(QatOutcome { model, quantized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn unit_range_codec() {
        let q = quantize_affine(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), 8).unwrap();
        assert_eq!(q.codec.scale, 1.0 / 255.0);
        assert_eq!(q.codec.zero_point, 0);
        assert_eq!(q.payload, vec![0, 255]);
    }

    #[test]
    fn constant_tensor_roundtrips_exactly() {
        for c in [0.0f32, 0.731, -42.5] {
            let x = Tensor::filled(vec![5], c);
            let q = quantize_affine(&x, 8).unwrap();
            assert!(q.payload.iter().all(|&v| v == 0));
            assert_eq!(dequantize(&q), x);
        }
    }

    #[test]
    fn zero_point_codes_decode_to_zero() {
        let codec = AffineCodec::from_range(-1.0, 3.0, 8).unwrap();
        let q = QuantizedTensor { shape: vec![4], codec, payload: vec![codec.zero_point; 4] };
        assert!(dequantize(&q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_range_keeps_zero_exact() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 1.0]).unwrap();
        let back = dequantize(&quantize_affine(&x, 8).unwrap());
        assert_eq!(back.data()[1], 0.0);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let x = Tensor::new(vec![2], vec![1.0f32, f32::INFINITY]).unwrap();
        assert!(matches!(quantize_affine(&x, 8), Err(Error::Numeric(_))));
    }

    #[test]
    fn half_roundtrip_of_short_dyadics_is_exact() {
        let x = Tensor::new(vec![4], vec![0.5f32, 0.25, 1.375, -3.0]).unwrap();
        assert_eq!(HalfTensor::from_tensor(&x).to_tensor(), x);
    }

    #[test]
    fn fake_quant_fixes_grid_points() {
        let codec = AffineCodec::from_range(-0.8, 1.2, 8).unwrap();
        let grid: Vec<f32> = (0..=255u8).map(|q| codec.dequantize(q)).collect();
        let mut state = FakeQuantState::new(8);
        state.observe(&[-0.8f64, 1.2], 0.99);
        let mut v = grid.clone();
        let mask = state.fake_quantize(&mut v);
        assert_eq!(v, grid);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn ptq_32_is_identity() {
        let spec = crate::zoo::build("mnist_student").unwrap();
        let m: Model = Model::init(&spec, &mut crate::Rng::new(3)).unwrap();
        assert_eq!(ptq(&m, 32).unwrap().dequantize().unwrap(), m);
        assert!(matches!(ptq(&m, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn straight_through_gradient_inside_range() {
        use crate::zoo::LayerSpec;
        // Dense layer with fake-quantized outputs: in-range outputs pass the
        // upstream gradient unchanged, so grads equal the float model's.
        let spec = ModelSpec::new("d", (1, 1, 4), vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3 }]);
        let float: Model = Model::init(&spec, &mut crate::Rng::new(8)).unwrap();
        let mut fq = float.clone();
        fq.set_fake_quant(Some(FakeQuantConfig { weights: false, frozen: true, ..Default::default() }));
        fq.set_activation_ranges(&[(1, FakeQuantState::with_range(-10.0, 10.0, 8))]);
        let mut float = float;
        let x = Tensor::new(vec![2, 1, 1, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
        float.forward(&x).unwrap();
        fq.forward(&x).unwrap();
        let g = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.25, 1.5, -1.0]).unwrap();
        float.backward(&g).unwrap();
        fq.backward(&g).unwrap();
        assert_eq!(float.param_layer(1).unwrap().weight_grad, fq.param_layer(1).unwrap().weight_grad);
    }

    proptest! {
        #[test]
        fn roundtrip_error_within_half_step(v in proptest::collection::vec(-4.0f32..4.0, 1..200)) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let q = quantize_affine(&x, 8).unwrap();
            let back = dequantize(&q);
            let bound = q.codec.scale as f64 / 2.0 + 1e-7;
            for (a, b) in x.data().iter().zip(back.data()) {
                prop_assert!((*a as f64 - *b as f64).abs() <= bound);
            }
        }

        #[test]
        fn quantization_is_idempotent(v in proptest::collection::vec(-4.0f32..4.0, 1..200)) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let q1 = quantize_affine(&x, 8).unwrap();
            let q2 = quantize_affine(&dequantize(&q1), 8).unwrap();
            prop_assert_eq!(q1.payload, q2.payload);
        }

        #[test]
        fn half_relative_error_bound(x in prop_oneof![-6.0e4f32..-6.2e-5, 6.2e-5f32..6.0e4]) {
            let t = Tensor::new(vec![1], vec![x]).unwrap();
            let back = HalfTensor::from_tensor(&t).to_tensor().data()[0];
            prop_assert!(((x - back).abs() as f64) <= (x.abs() as f64) * 2f64.powi(-11));
        }
    }
}
