//! Named architectures and parameter-count arithmetic.
//!
//! Convolutions are 3×3, stride 1, zero "same" padding; pooling is 2×2 max
//! with stride 2. Under this geometry the registry reproduces the published
//! parameter totals exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv2d { filters: usize },
    MaxPool2d,
    Dense { units: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

/// Shape of one example as it flows between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureShape {
    Spatial { height: usize, width: usize, channels: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Spatial { height, width, channels } => height * width * channels,
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor shape for a batch of `batch` examples.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            FeatureShape::Spatial { height, width, channels } => vec![batch, height, width, channels],
            FeatureShape::Flat(n) => vec![batch, n],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub name: String,
    /// `(height, width, channels)` of one input image.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Parameter shapes of one layer: `(weight_shape, bias_len)`.
pub type ParamShape = (Vec<usize>, usize);

impl ModelSpec {
    pub fn new(name: impl Into<String>, input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Self {
        Self { name: name.into(), input, layers }
    }

    pub fn input_shape(&self) -> FeatureShape {
        let (height, width, channels) = self.input;
        FeatureShape::Spatial { height, width, channels }
    }

    /// Per-layer output shapes, validating the layer sequence.
    pub fn feature_shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut shape = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (LayerSpec::Conv2d { filters }, FeatureShape::Spatial { height, width, .. }) if filters > 0 => {
                    FeatureShape::Spatial { height, width, channels: filters }
                }
                (LayerSpec::MaxPool2d, FeatureShape::Spatial { height, width, channels })
                    if height >= 2 && width >= 2 =>
                {
                    FeatureShape::Spatial { height: height / 2, width: width / 2, channels }
                }
                (LayerSpec::Dense { units }, FeatureShape::Flat(_)) if units > 0 => FeatureShape::Flat(units),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => FeatureShape::Flat(s.len()),
                (l, s) => {
                    return Err(Error::Config(format!(
                        "{}: layer {} ({:?}) cannot follow shape {:?}",
                        self.name, i, l, s
                    )))
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(self.feature_shapes()?.last().copied().unwrap_or_else(|| self.input_shape()))
    }

    /// Weight and bias shapes for every parameterized layer, keyed by layer
    /// index. Conv weights are `[3, 3, c_in, c_out]`, dense `[in, out]`.
    pub fn param_shapes(&self) -> Result<Vec<(usize, ParamShape)>> {
        let shapes = self.feature_shapes()?;
        let mut prev = self.input_shape();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match (*layer, prev) {
                (LayerSpec::Conv2d { filters }, FeatureShape::Spatial { channels, .. }) => {
                    out.push((i, (vec![3, 3, channels, filters], filters)));
                }
                (LayerSpec::Dense { units }, FeatureShape::Flat(n)) => {
                    out.push((i, (vec![n, units], units)));
                }
                _ => {}
            }
            prev = shapes[i];
        }
        Ok(out)
    }
}

/// Weights plus biases over all layers.
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    let mut prev = spec.input_shape();
    let mut total = 0;
    for (layer, shape) in spec.layers.iter().zip(spec.feature_shapes()?) {
        total += match (*layer, prev) {
            (LayerSpec::Conv2d { filters }, FeatureShape::Spatial { channels, .. }) => 9 * channels * filters + filters,
            (LayerSpec::Dense { units }, FeatureShape::Flat(n)) => n * units + units,
            _ => 0,
        };
        prev = shape;
    }
    Ok(total)
}

pub const MNIST_INPUT: (usize, usize, usize) = (28, 28, 1);
pub const CIFAR_INPUT: (usize, usize, usize) = (32, 32, 3);

pub const REGISTRY: [&str; 6] = [
    "mnist_teacher",
    "mnist_ta",
    "mnist_student",
    "cifar_teacher",
    "cifar_ta",
    "cifar_student",
];

fn conv_stack(convs: &[usize], hidden: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &filters in convs {
        layers.extend([LayerSpec::Conv2d { filters }, LayerSpec::Relu, LayerSpec::MaxPool2d]);
    }
    layers.push(LayerSpec::Flatten);
    for &units in hidden {
        layers.extend([LayerSpec::Dense { units }, LayerSpec::Relu]);
    }
    layers.push(LayerSpec::Dense { units: NUM_CLASSES });
    layers
}

/// Looks up a registry architecture.
pub fn build(name: &str) -> Result<ModelSpec> {
    let (input, convs, hidden): (_, &[usize], &[usize]) = match name {
        "mnist_teacher" => (MNIST_INPUT, &[128, 256], &[100]),
        "mnist_ta" => (MNIST_INPUT, &[32, 64], &[50]),
        "mnist_student" => (MNIST_INPUT, &[16, 32], &[]),
        "cifar_teacher" => (CIFAR_INPUT, &[128, 128, 256, 256], &[256, 256]),
        // 1,112,662 parameters.
        "cifar_ta" => (CIFAR_INPUT, &[124, 124, 248, 248], &[124, 124]),
        "cifar_student" => (CIFAR_INPUT, &[64, 64, 128, 128], &[128, 128]),
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    Ok(ModelSpec::new(name, input, conv_stack(convs, hidden)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parameter_counts() {
        let expected = [
            ("mnist_teacher", 1_551_958),
            ("mnist_ta", 176_176),
            ("mnist_student", 20_490),
            ("cifar_teacher", 1_367_178),
            ("cifar_student", 343_626),
        ];
        for (name, count) in expected {
            assert_eq!(count_params(&build(name).unwrap()).unwrap(), count, "{name}");
        }
    }

    #[test]
    fn cifar_ta_lands_near_published_total() {
        let n = count_params(&build("cifar_ta").unwrap()).unwrap() as f64;
        assert!((n - 1.11e6).abs() / 1.11e6 < 0.02, "{n}");
        assert_eq!(n as usize, 1_112_662);
    }

    #[test]
    fn layer_arithmetic() {
        let dense = ModelSpec::new("d", (1, 1, 100), vec![LayerSpec::Flatten, LayerSpec::Dense { units: 10 }]);
        assert_eq!(count_params(&dense).unwrap(), 1010);
        let conv = ModelSpec::new("c", (28, 28, 1), vec![LayerSpec::Conv2d { filters: 128 }]);
        assert_eq!(count_params(&conv).unwrap(), 1280);
        let empty = ModelSpec::new("e", (28, 28, 1), vec![]);
        assert_eq!(count_params(&empty).unwrap(), 0);
    }

    #[test]
    fn student_has_no_hidden_dense() {
        let spec = build("mnist_student").unwrap();
        let dense = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Dense { .. })).count();
        assert_eq!(dense, 1);
    }

    #[test]
    fn unknown_name_is_a_registry_error() {
        assert_eq!(build("resnet50"), Err(Error::UnknownModel("resnet50".into())));
    }

    #[test]
    fn invalid_sequence_is_rejected() {
        let bad = ModelSpec::new("bad", (28, 28, 1), vec![LayerSpec::Dense { units: 10 }]);
        assert!(matches!(count_params(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn every_registry_model_outputs_ten_logits() {
        for name in REGISTRY {
            assert_eq!(build(name).unwrap().output_shape().unwrap(), FeatureShape::Flat(NUM_CLASSES));
        }
    }
}
