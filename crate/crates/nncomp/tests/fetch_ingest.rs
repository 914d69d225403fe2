//! Mirror fetch through `file://` URLs and the on-disk loaders.

use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use nncomp::fetch::{self, FetchConfig};
use nncomp::ingest::{self, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES};
use nncomp::Error;
use nncomp_core::data::DatasetKind;

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

/// Four tiny IDX files: 3 training and 2 test images.
fn mnist_files() -> Vec<(&'static str, Vec<u8>)> {
    let img = |n: u32| idx(IDX_IMAGES_MAGIC, &[n, 28, 28], &(0..n as usize * 784).map(|i| (i % 256) as u8).collect::<Vec<_>>());
    let [ti, tl, vi, vl] = MNIST_FILES;
    vec![
        (ti, img(3)),
        (tl, idx(IDX_LABELS_MAGIC, &[3], &[7, 0, 9])),
        (vi, img(2)),
        (vl, idx(IDX_LABELS_MAGIC, &[2], &[1, 2])),
    ]
}

fn config_for(files: &[(&str, Vec<u8>)], mirror: &Path) -> FetchConfig {
    let url = format!("file://{}", mirror.display());
    FetchConfig {
        mnist_mirror: url.clone(),
        cifar_mirror: url,
        sha256: files.iter().map(|(f, b)| (f.to_string(), fetch::sha256_hex(b))).collect(),
    }
}

#[test]
fn mnist_fetch_verifies_and_loads() {
    let mirror = tempfile::tempdir().unwrap();
    let files = mnist_files();
    for (name, bytes) in &files {
        std::fs::write(mirror.path().join(format!("{name}.gz")), gz(bytes)).unwrap();
    }
    let root = tempfile::tempdir().unwrap();
    let cfg = config_for(&files, mirror.path());
    let dir = fetch::fetch(DatasetKind::Mnist, root.path(), &cfg).unwrap();
    assert_eq!(dir, root.path().join("mnist"));
    let (train, test) = ingest::load(DatasetKind::Mnist, root.path()).unwrap();
    assert_eq!((train.len(), test.len()), (3, 2));
    assert_eq!(train.labels, vec![7, 0, 9]);
    assert_eq!(train.images.data()[255], 1.0);

    // Present and valid: nothing is downloaded again.
    drop(mirror);
    fetch::fetch(DatasetKind::Mnist, root.path(), &cfg).unwrap();
}

#[test]
fn checksum_mismatch_is_reported_and_nothing_written() {
    let mirror = tempfile::tempdir().unwrap();
    let files = mnist_files();
    for (name, bytes) in &files {
        std::fs::write(mirror.path().join(format!("{name}.gz")), gz(bytes)).unwrap();
    }
    let mut cfg = config_for(&files, mirror.path());
    cfg.sha256[0].1 = "0".repeat(64);
    let root = tempfile::tempdir().unwrap();
    match fetch::fetch(DatasetKind::Mnist, root.path(), &cfg).unwrap_err() {
        Error::Checksum { file, actual, .. } => {
            assert_eq!(file, MNIST_FILES[0]);
            assert_eq!(actual, fetch::sha256_hex(&files[0].1));
        }
        e => panic!("{e}"),
    }
    assert!(!root.path().join("mnist").join(MNIST_FILES[0]).exists());
}

#[test]
fn missing_mirror_file_is_a_fetch_or_io_error() {
    let mirror = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let cfg = config_for(&mnist_files(), mirror.path());
    assert!(matches!(fetch::fetch(DatasetKind::Mnist, root.path(), &cfg), Err(Error::Io { .. } | Error::Fetch(_))));
}

fn cifar_batch(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        b.push(l);
        b.extend((0..3072).map(|p| ((p / 1024) * 100 + i) as u8));
    }
    b
}

#[test]
fn cifar_fetch_extracts_the_archive() {
    let mut files: Vec<(&str, Vec<u8>)> = CIFAR_TRAIN_FILES.iter().map(|&f| (f, cifar_batch(&[1, 2]))).collect();
    files.push((CIFAR_TEST_FILE, cifar_batch(&[3])));
    let mut tar = tar::Builder::new(Vec::new());
    for (name, bytes) in &files {
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(0o644);
        h.set_cksum();
        tar.append_data(&mut h, format!("cifar-10-batches-bin/{name}"), bytes.as_slice()).unwrap();
    }
    let mirror = tempfile::tempdir().unwrap();
    std::fs::write(mirror.path().join(fetch::CIFAR_ARCHIVE), gz(&tar.into_inner().unwrap())).unwrap();
    let root = tempfile::tempdir().unwrap();
    fetch::fetch(DatasetKind::Cifar10, root.path(), &config_for(&files, mirror.path())).unwrap();
    let (train, test) = ingest::load(DatasetKind::Cifar10, root.path()).unwrap();
    assert_eq!((train.len(), test.len()), (10, 1));
    assert_eq!(test.labels, vec![3]);
    // Pixel (0,0) of record 0: R=0, G=100, B=200 after planar→HWC.
    let px = &test.images.data()[..3];
    assert_eq!(px, &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
}

#[test]
fn fetch_section_overrides_defaults() {
    let text = "[experiment]\ndataset = mnist\nmodel = mnist_student\n\n[fetch]\nmnist_mirror = file:///srv/m\nsha256.test_batch.bin = ABCDEF0123456789abcdef0123456789abcdef0123456789abcdef0123456789\n";
    let cfg = FetchConfig::from_text(text).unwrap();
    assert_eq!(cfg.mnist_mirror, "file:///srv/m");
    assert_eq!(cfg.cifar_mirror, fetch::DEFAULT_CIFAR_MIRROR);
    assert_eq!(cfg.expected("test_batch.bin").unwrap(), "abcdef0123456789abcdef0123456789abcdef0123456789abcdef0123456789");
    assert!(cfg.expected("train-images-idx3-ubyte").is_some());
    assert!(FetchConfig::from_text("[fetch]\nsha256.x = 12\n").is_err());
    assert!(FetchConfig::from_text("[fetch]\nmirror = x\n").is_err());
}

#[test]
fn truncated_cifar_batch_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = cifar_batch(&[0, 1]);
    bytes.truncate(CIFAR_RECORD + 100);
    for f in CIFAR_TRAIN_FILES {
        std::fs::write(dir.path().join(f), cifar_batch(&[0])).unwrap();
    }
    std::fs::write(dir.path().join(CIFAR_TEST_FILE), &bytes).unwrap();
    match ingest::load_cifar10(dir.path()).unwrap_err() {
        Error::Format { file, offset, .. } => {
            assert_eq!(file, CIFAR_TEST_FILE);
            assert_eq!(offset as usize, CIFAR_RECORD);
        }
        e => panic!("{e}"),
    }
}
