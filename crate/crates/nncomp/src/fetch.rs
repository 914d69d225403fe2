//! Mirror download with SHA-256 verification.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use nncomp_core::data::DatasetKind;
use sha2::{Digest, Sha256};

use crate::config::parse_sections;
use crate::error::{Error, Result};
use crate::ingest::{CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, MNIST_FILES};

pub const DEFAULT_MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
pub const DEFAULT_CIFAR_MIRROR: &str = "https://www.cs.toronto.edu/~kriz";
pub const CIFAR_ARCHIVE: &str = "cifar-10-binary.tar.gz";

/// SHA-256 of the decompressed files. The CIFAR entries were recorded from
/// the local copy this project was developed against; override them in the
/// config if a mirror serves byte-different batches.
const DEFAULT_SHA256: [(&str, &str); 10] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
    ("data_batch_1.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"),
    ("data_batch_2.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"),
    ("data_batch_3.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"),
    ("data_batch_4.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"),
    ("data_batch_5.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"),
    ("test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"),
];

#[derive(Clone, Debug)]
pub struct FetchConfig {
    pub mnist_mirror: String,
    pub cifar_mirror: String,
    /// `(file, hex digest)`; later entries win.
    pub sha256: Vec<(String, String)>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            mnist_mirror: DEFAULT_MNIST_MIRROR.into(),
            cifar_mirror: DEFAULT_CIFAR_MIRROR.into(),
            sha256: DEFAULT_SHA256.iter().map(|(f, h)| (f.to_string(), h.to_string())).collect(),
        }
    }
}

impl FetchConfig {
    /// Reads the `[fetch]` section of a config file; other sections are ignored.
    ///
    /// ```text
    /// [fetch]
    /// mnist_mirror = file:///srv/mnist
    /// sha256.test_batch.bin = 8e2e...
    /// ```
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for s in parse_sections(text)?.into_iter().filter(|s| s.name == "fetch") {
            for (k, v, line) in s.entries {
                match k.as_str() {
                    "mnist_mirror" => cfg.mnist_mirror = v,
                    "cifar_mirror" => cfg.cifar_mirror = v,
                    _ => match k.strip_prefix("sha256.") {
                        Some(file) if v.len() == 64 && v.bytes().all(|b| b.is_ascii_hexdigit()) => {
                            cfg.sha256.push((file.to_string(), v.to_ascii_lowercase()))
                        }
                        Some(_) => return Err(Error::Config(format!("line {line}: sha256 must be 64 hex digits"))),
                        None => return Err(Error::Config(format!("line {line}: unknown key {k:?} in [fetch]"))),
                    },
                }
            }
        }
        Ok(cfg)
    }

    pub fn expected(&self, file: &str) -> Option<&str> {
        self.sha256.iter().rev().find(|(f, _)| f == file).map(|(_, h)| h.as_str())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fails with a checksum error unless `bytes` hash to the configured value.
pub fn verify(cfg: &FetchConfig, file: &str, bytes: &[u8]) -> Result<()> {
    let expected = cfg.expected(file).ok_or_else(|| Error::Fetch(format!("no sha256 recorded for {file}")))?;
    let actual = sha256_hex(bytes);
    if actual != expected {
        return Err(Error::Checksum { file: file.into(), expected: expected.into(), actual });
    }
    Ok(())
}

/// GET over http(s), or a plain read for `file://` mirrors.
fn download(url: &str) -> Result<Vec<u8>> {
    if let Some(path) = url.strip_prefix("file://") {
        return std::fs::read(path).map_err(Error::io(path));
    }
    log::info!("downloading {url}");
    let resp = ureq::get(url).call().map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    let mut buf = Vec::new();
    resp.into_reader().read_to_end(&mut buf).map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    Ok(buf)
}

fn gunzip(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| Error::Fetch(format!("{name}: gunzip: {e}")))?;
    Ok(out)
}

fn already_present(cfg: &FetchConfig, path: &Path, file: &str) -> bool {
    std::fs::read(path).is_ok_and(|b| verify(cfg, file, &b).is_ok())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(Error::io(path))
}

/// Places verified dataset files under `root/mnist` or
/// `root/cifar-10-batches-bin`, skipping files already present and valid.
/// Returns the dataset directory.
pub fn fetch(kind: DatasetKind, root: &Path, cfg: &FetchConfig) -> Result<PathBuf> {
    match kind {
        DatasetKind::Mnist => {
            let dir = root.join("mnist");
            for file in MNIST_FILES {
                let path = dir.join(file);
                if already_present(cfg, &path, file) {
                    continue;
                }
                let url = format!("{}/{file}.gz", cfg.mnist_mirror.trim_end_matches('/'));
                let bytes = gunzip(&download(&url)?, file)?;
                verify(cfg, file, &bytes)?;
                write(&path, &bytes)?;
            }
            Ok(dir)
        }
        DatasetKind::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let wanted: Vec<&str> = CIFAR_TRAIN_FILES.iter().copied().chain([CIFAR_TEST_FILE]).collect();
            if wanted.iter().all(|f| already_present(cfg, &dir.join(f), f)) {
                return Ok(dir);
            }
            let url = format!("{}/{CIFAR_ARCHIVE}", cfg.cifar_mirror.trim_end_matches('/'));
            let tarball = gunzip(&download(&url)?, CIFAR_ARCHIVE)?;
            let mut found = Vec::new();
            let mut archive = tar::Archive::new(tarball.as_slice());
            let entries = archive.entries().map_err(|e| Error::Fetch(format!("{CIFAR_ARCHIVE}: {e}")))?;
            for entry in entries {
                let mut entry = entry.map_err(|e| Error::Fetch(format!("{CIFAR_ARCHIVE}: {e}")))?;
                let name = entry
                    .path()
                    .ok()
                    .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                    .unwrap_or_default();
                if let Some(file) = wanted.iter().find(|f| **f == name) {
                    let mut bytes = Vec::new();
                    entry.read_to_end(&mut bytes).map_err(|e| Error::Fetch(format!("{CIFAR_ARCHIVE}: {e}")))?;
                    verify(cfg, file, &bytes)?;
                    write(&dir.join(file), &bytes)?;
                    found.push(*file);
                }
            }
            if let Some(missing) = wanted.iter().find(|f| !found.contains(f)) {
                return Err(Error::Fetch(format!("{CIFAR_ARCHIVE} has no {missing}")));
            }
            Ok(dir)
        }
    }
}
