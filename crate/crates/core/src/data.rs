//! In-memory labelled image sets, validation splits and shuffled batching.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Mnist => (28, 28, 1),
            DatasetKind::Cifar10 => (32, 32, 3),
        }
    }
}

impl core::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// `images` is `N×H×W×C` with values in `[0, 1]`; `labels` has length `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let (h, w, c) = kind.image_shape();
        if images.shape() != [labels.len(), h, w, c] {
            return Err(Error::Data(format!(
                "{}: images {:?} do not match {} labels of {h}x{w}x{c}",
                kind.name(),
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { kind, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { validation_fraction: 0.1, seed: 1234 }
    }
}

/// Index partition behind [`split`]: `(train, validation)`.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let f = spec.validation_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Config(format!("validation fraction {f} outside [0, 1)")));
    }
    let train_len = num_traits::Float::ceil(n as f64 * (1.0 - f)) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    if train_len == n {
        return Ok((idx, Vec::new()));
    }
    Rng::new(spec.seed).fork("split").shuffle(&mut idx);
    let val = idx.split_off(train_len);
    Ok((idx, val))
}

/// Deterministic shuffled split into `⌈N(1−f)⌉` training and the remaining
/// validation examples. `f = 0` returns the input unchanged.
pub fn split(train: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (t, v) = split_indices(train.len(), spec)?;
    if v.is_empty() {
        return Ok((train.clone(), train.subset(&[])));
    }
    Ok((train.subset(&t), train.subset(&v)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset rows in this batch.
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Shuffled batch order for one epoch; the final partial batch is kept.
pub fn batch_order(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of shuffled batches, materialized lazily.
pub fn batches<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<impl Iterator<Item = Batch> + 'a> {
    let order = batch_order(ds.len(), batch_size, rng)?;
    Ok(order.into_iter().map(move |indices| Batch {
        images: ds.images.gather_rows(&indices),
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        indices,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 28, 28, 1], (0..n * 784).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        Dataset::new(DatasetKind::Mnist, images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn mnist_sized_split() {
        let (t, v) = split_indices(60_000, SplitSpec::default()).unwrap();
        assert_eq!((t.len(), v.len()), (54_000, 6_000));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..60_000).collect::<Vec<_>>());
    }

    #[test]
    fn zero_fraction_is_identity() {
        let ds = toy(7);
        let (t, v) = split(&ds, SplitSpec { validation_fraction: 0.0, seed: 1 }).unwrap();
        assert_eq!(t, ds);
        assert!(v.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let spec = SplitSpec { validation_fraction: 0.3, seed: 99 };
        assert_eq!(split_indices(100, spec).unwrap(), split_indices(100, spec).unwrap());
        assert!(split_indices(10, SplitSpec { validation_fraction: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn batch_sizes_include_partial_tail() {
        let ds = toy(10);
        let sizes: Vec<usize> = batches(&ds, 3, &mut Rng::new(0)).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let ds = toy(10);
        let all: Vec<Batch> = batches(&ds, 10, &mut Rng::new(4)).unwrap().collect();
        assert_eq!(all.len(), 1);
        let mut idx = all[0].indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        for (k, &i) in all[0].indices.iter().enumerate() {
            assert_eq!(all[0].labels[k], ds.labels[i]);
            assert_eq!(all[0].images.row(k), ds.images.row(i));
        }
    }

    #[test]
    fn same_rng_state_same_order() {
        let a = batch_order(50, 8, &mut Rng::new(12)).unwrap();
        let b = batch_order(50, 8, &mut Rng::new(12)).unwrap();
        assert_eq!(a, b);
        assert!(batch_order(5, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rejects_mismatched_labels() {
        let images = Tensor::zeros(vec![2, 28, 28, 1]);
        assert!(Dataset::new(DatasetKind::Mnist, images, vec![0]).is_err());
    }
}
