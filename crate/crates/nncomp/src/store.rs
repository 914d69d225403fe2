//! NNCM model container and the size metric.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NNCM" | version u16 | name: u16 len + utf8 | layer count u16
//! per layer:  kind u8 | width u32
//! input:      height u16 | width u16 | channels u16
//! tensor count u32
//! per tensor: name (u16 len + utf8) | rank u8 | dims u32 × rank
//!             | tag u8 | payload len u32 | payload
//! ```
//!
//! Affine payloads start with `scale f32 | offset f32 | zero_point u8 | bits u8`.
//! Sparse payloads carry a `⌈n/8⌉`-byte LSB-first occupancy bitmap followed
//! by the occupied values in flattened order.

use std::io::Write;
use std::path::Path;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use nncomp_core::distill::SoftLabelCache;
use nncomp_core::quant::{AffineCodec, EncodedTensor, FakeQuantState, HalfTensor, Precision, QuantizedModel, QuantizedTensor};
use nncomp_core::{LayerSpec, Model, ModelSpec, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NNCM";
pub const VERSION: u16 = 1;
/// AUTO switches to a bitmap encoding above this zero fraction.
pub const SPARSE_THRESHOLD: f64 = 0.4;
const CODEC_HEADER: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Encoding {
    DenseF32 = 0,
    DenseF16 = 1,
    AffineU8 = 2,
    SparseBitmapF32 = 3,
    SparseBitmapU8 = 4,
}

impl Encoding {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Encoding::DenseF32,
            1 => Encoding::DenseF16,
            2 => Encoding::AffineU8,
            3 => Encoding::SparseBitmapF32,
            4 => Encoding::SparseBitmapU8,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// u8 for quantized tensors, bitmap when the zero fraction exceeds
    /// [`SPARSE_THRESHOLD`], dense otherwise.
    Auto,
    /// Never sparse.
    Dense,
    /// One encoding per stored tensor, in record order.
    PerTensor(Vec<Encoding>),
}

fn zero_fraction(t: &EncodedTensor) -> f64 {
    let (zeros, n) = match t {
        EncodedTensor::F32(x) => (x.count_zeros(), x.len()),
        EncodedTensor::F16(h) => (h.payload.iter().filter(|&&b| b & 0x7fff == 0).count(), h.payload.len()),
        EncodedTensor::U8(q) => (q.payload.iter().filter(|&&v| v == q.codec.zero_point).count(), q.payload.len()),
    };
    if n == 0 {
        0.0
    } else {
        zeros as f64 / n as f64
    }
}

fn choose(t: &EncodedTensor, policy: &Policy, index: usize) -> Result<Encoding> {
    let sparse = zero_fraction(t) > SPARSE_THRESHOLD;
    let natural = match t {
        EncodedTensor::F32(_) if sparse && *policy == Policy::Auto => Encoding::SparseBitmapF32,
        EncodedTensor::F32(_) => Encoding::DenseF32,
        EncodedTensor::F16(_) => Encoding::DenseF16,
        EncodedTensor::U8(_) if sparse && *policy == Policy::Auto => Encoding::SparseBitmapU8,
        EncodedTensor::U8(_) => Encoding::AffineU8,
    };
    let Policy::PerTensor(list) = policy else { return Ok(natural) };
    let want = *list.get(index).ok_or_else(|| Error::Policy(format!("no encoding given for tensor {index}")))?;
    let ok = matches!(
        (t, want),
        (EncodedTensor::F32(_), Encoding::DenseF32 | Encoding::SparseBitmapF32)
            | (EncodedTensor::F16(_), Encoding::DenseF16)
            | (EncodedTensor::U8(_), Encoding::AffineU8 | Encoding::SparseBitmapU8)
    );
    if !ok {
        return Err(Error::Policy(format!("tensor {index} cannot be stored as {want:?}")));
    }
    Ok(want)
}

// ---- writing ----

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::Policy(format!("name too long: {} bytes", s.len())))?;
        self.u16(len);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

fn small<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Policy(format!("{what} {v} does not fit the container field")))
}

fn bitmap(occupied: impl Iterator<Item = bool>, n: usize) -> Vec<u8> {
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, on) in occupied.enumerate() {
        if on {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    bits
}

fn codec_header(c: &AffineCodec, out: &mut Vec<u8>) {
    out.extend_from_slice(&c.scale.to_le_bytes());
    out.extend_from_slice(&c.offset.to_le_bytes());
    out.push(c.zero_point);
    out.push(c.bits);
}

fn payload(t: &EncodedTensor, enc: Encoding) -> Vec<u8> {
    match (t, enc) {
        (EncodedTensor::F32(x), Encoding::DenseF32) => x.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        (EncodedTensor::F32(x), Encoding::SparseBitmapF32) => {
            let mut out = bitmap(x.data().iter().map(|v| v.to_bits() != 0), x.len());
            out.extend(x.data().iter().filter(|v| v.to_bits() != 0).flat_map(|v| v.to_le_bytes()));
            out
        }
        (EncodedTensor::F16(h), Encoding::DenseF16) => h.payload.iter().flat_map(|v| v.to_le_bytes()).collect(),
        (EncodedTensor::U8(q), Encoding::AffineU8) => {
            let mut out = Vec::with_capacity(CODEC_HEADER + q.payload.len());
            codec_header(&q.codec, &mut out);
            out.extend_from_slice(&q.payload);
            out
        }
        (EncodedTensor::U8(q), Encoding::SparseBitmapU8) => {
            let zp = q.codec.zero_point;
            let mut out = Vec::new();
            codec_header(&q.codec, &mut out);
            out.extend(bitmap(q.payload.iter().map(|&v| v != zp), q.payload.len()));
            out.extend(q.payload.iter().filter(|&&v| v != zp));
            out
        }
        _ => unreachable!("encoding checked by choose()"),
    }
}

fn layer_code(l: &LayerSpec) -> (u8, u32) {
    match *l {
        LayerSpec::Conv2d { filters } => (0, filters as u32),
        LayerSpec::MaxPool2d => (1, 0),
        LayerSpec::Dense { units } => (2, units as u32),
        LayerSpec::Relu => (3, 0),
        LayerSpec::Flatten => (4, 0),
    }
}

/// A record ready to be written.
pub struct Record<'a> {
    pub name: String,
    pub tensor: &'a EncodedTensor,
}

fn write_container(spec: &ModelSpec, records: &[Record<'_>], policy: &Policy) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.str(&spec.name)?;
    w.u16(small(spec.layers.len(), "layer count")?);
    for l in &spec.layers {
        let (kind, width) = layer_code(l);
        w.u8(kind);
        w.u32(width);
    }
    let (h, wd, c) = spec.input;
    for d in [h, wd, c] {
        w.u16(small(d, "input dimension")?);
    }
    w.u32(small(records.len(), "tensor count")?);
    for (i, r) in records.iter().enumerate() {
        let enc = choose(r.tensor, policy, i)?;
        w.str(&r.name)?;
        let shape = r.tensor.shape();
        w.u8(small(shape.len(), "rank")?);
        for &d in shape {
            w.u32(small(d, "dimension")?);
        }
        w.u8(enc as u8);
        let p = payload(r.tensor, enc);
        w.u32(small(p.len(), "payload length")?);
        w.0.extend_from_slice(&p);
    }
    Ok(w.0)
}

fn range_tensor(s: &FakeQuantState) -> EncodedTensor {
    EncodedTensor::F32(Tensor::new(vec![3], vec![s.min as f32, s.max as f32, s.bits as f32]).expect("3 values"))
}

/// Serializes `model` under `policy`. Deterministic for a given model.
pub fn save(model: &QuantizedModel, policy: &Policy) -> Result<Vec<u8>> {
    let layers: Vec<usize> = model.spec.param_shapes()?.into_iter().map(|(i, _)| i).collect();
    if model.tensors.len() != 2 * layers.len() {
        return Err(Error::Policy(format!("{} tensors for {} weight layers", model.tensors.len(), layers.len())));
    }
    let ranges: Vec<(usize, EncodedTensor)> = model.activation_ranges.iter().map(|(i, s)| (*i, range_tensor(s))).collect();
    let mut records = Vec::new();
    for (k, &layer) in layers.iter().enumerate() {
        records.push(Record { name: format!("layer{layer}.weight"), tensor: &model.tensors[2 * k] });
        records.push(Record { name: format!("layer{layer}.bias"), tensor: &model.tensors[2 * k + 1] });
    }
    for (layer, t) in &ranges {
        records.push(Record { name: format!("layer{layer}.act_range"), tensor: t });
    }
    write_container(&model.spec, &records, policy)
}

/// Float model stored at full precision.
pub fn save_model(model: &Model, policy: &Policy) -> Result<Vec<u8>> {
    save(&nncomp_core::quant::ptq(model, 32)?, policy)
}

// ---- reading ----

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.file, self.pos as u64, msg)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format(self.file, at as u64, "name is not utf-8"))
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

fn read_codec(r: &mut Reader<'_>) -> Result<AffineCodec> {
    let at = r.pos;
    let scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let offset = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let zero_point = r.u8()?;
    let bits = r.u8()?;
    let codec = AffineCodec { scale, zero_point, offset, bits };
    if !(1..=8).contains(&bits) || !(scale > 0.0) || !scale.is_finite() || !offset.is_finite() || zero_point > codec.qmax() {
        return Err(Error::format(r.file, at as u64, format!("invalid codec {codec:?}")));
    }
    Ok(codec)
}

/// Reads a sparse payload: returns occupancy flags and the packed values.
fn read_bitmap<'a>(r: &mut Reader<'a>, n: usize, width: usize, end: usize) -> Result<(Vec<bool>, &'a [u8])> {
    let bits = r.take(n.div_ceil(8))?;
    let occupied: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let count = occupied.iter().filter(|&&o| o).count();
    if end != r.pos + count * width {
        return Err(r.err(format!("bitmap marks {count} values but payload holds {} bytes", end.saturating_sub(r.pos))));
    }
    Ok((occupied, r.take(count * width)?))
}

fn read_tensor(r: &mut Reader<'_>, shape: Vec<usize>, tag_at: usize, tag: u8, len: usize) -> Result<EncodedTensor> {
    let n: usize = shape.iter().product();
    let start = r.pos;
    let end = start.checked_add(len).filter(|&e| e <= r.bytes.len()).ok_or_else(|| r.err("payload runs past end of file"))?;
    let mismatch = |r: &Reader<'_>| Error::format(r.file, start as u64, format!("payload of {len} bytes does not fit shape {shape:?}"));
    let enc = Encoding::from_tag(tag).ok_or_else(|| Error::format(r.file, tag_at as u64, format!("unknown encoding tag {tag}")))?;
    let t = match enc {
        Encoding::DenseF32 => {
            if len != 4 * n {
                return Err(mismatch(r));
            }
            EncodedTensor::F32(Tensor::new(shape, f32s(r.take(len)?))?)
        }
        Encoding::DenseF16 => {
            if len != 2 * n {
                return Err(mismatch(r));
            }
            let payload = r.take(len)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            EncodedTensor::F16(HalfTensor { shape, payload })
        }
        Encoding::AffineU8 => {
            if len != CODEC_HEADER + n {
                return Err(mismatch(r));
            }
            let codec = read_codec(r)?;
            let payload = r.take(n)?.to_vec();
            if let Some(i) = payload.iter().position(|&q| q > codec.qmax()) {
                return Err(Error::format(r.file, (start + CODEC_HEADER + i) as u64, "code exceeds bit width"));
            }
            EncodedTensor::U8(QuantizedTensor { shape, codec, payload })
        }
        Encoding::SparseBitmapF32 => {
            let (occ, vals) = read_bitmap(r, n, 4, end)?;
            let mut vals = f32s(vals).into_iter();
            let data = occ.iter().map(|&o| if o { vals.next().expect("counted") } else { 0.0 }).collect();
            EncodedTensor::F32(Tensor::new(shape, data)?)
        }
        Encoding::SparseBitmapU8 => {
            if len < CODEC_HEADER {
                return Err(mismatch(r));
            }
            let codec = read_codec(r)?;
            let (occ, vals) = read_bitmap(r, n, 1, end)?;
            let mut vals = vals.iter();
            let payload = occ.iter().map(|&o| if o { *vals.next().expect("counted") } else { codec.zero_point }).collect();
            EncodedTensor::U8(QuantizedTensor { shape, codec, payload })
        }
    };
    debug_assert_eq!(r.pos, end);
    Ok(t)
}

/// Parsed container before interpretation as a model.
pub struct Container {
    pub spec: ModelSpec,
    pub records: Vec<(String, EncodedTensor)>,
}

pub fn read_container(bytes: &[u8], file: &str) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4).map_err(|_| Error::format(file, 0, "file shorter than magic"))? != MAGIC {
        return Err(Error::format(file, 0, "bad magic, not an NNCM file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(file, 4, format!("unsupported version {version}")));
    }
    let name = r.str()?;
    let nlayers = r.u16()? as usize;
    let mut layers = Vec::with_capacity(nlayers);
    for _ in 0..nlayers {
        let at = r.pos;
        let kind = r.u8()?;
        let width = r.u32()? as usize;
        layers.push(match kind {
            0 => LayerSpec::Conv2d { filters: width },
            1 => LayerSpec::MaxPool2d,
            2 => LayerSpec::Dense { units: width },
            3 => LayerSpec::Relu,
            4 => LayerSpec::Flatten,
            k => return Err(Error::format(file, at as u64, format!("unknown layer kind {k}"))),
        });
    }
    let input = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let spec = ModelSpec::new(name, input, layers);
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let tag_at = r.pos;
        let tag = r.u8()?;
        let len = r.u32()? as usize;
        records.push((name, read_tensor(&mut r, shape, tag_at, tag, len)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { spec, records })
}

/// Reads a model in its stored (possibly quantized) form.
pub fn load(bytes: &[u8]) -> Result<QuantizedModel> {
    load_named(bytes, "<nncm>")
}

fn load_named(bytes: &[u8], file: &str) -> Result<QuantizedModel> {
    let Container { spec, records } = read_container(bytes, file)?;
    let layers: Vec<usize> = spec.param_shapes()?.into_iter().map(|(i, _)| i).collect();
    let mut tensors = Vec::with_capacity(2 * layers.len());
    let mut ranges = Vec::new();
    let mut expected = layers.iter().flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")]);
    for (name, t) in records {
        if let Some(layer) = name.strip_prefix("layer").and_then(|s| s.strip_suffix(".act_range")) {
            let layer: usize = layer.parse().map_err(|_| Error::format(file, 0, format!("bad record name {name:?}")))?;
            let v = t.decode();
            if v.len() != 3 {
                return Err(Error::format(file, 0, format!("{name} holds {} values, expected 3", v.len())));
            }
            let d = v.data();
            ranges.push((layer, FakeQuantState::with_range(d[0] as f64, d[1] as f64, d[2] as u8)));
            continue;
        }
        match expected.next() {
            Some(want) if want == name => tensors.push(t),
            want => return Err(Error::format(file, 0, format!("record {name:?} where {want:?} was expected"))),
        }
    }
    if tensors.len() != 2 * layers.len() {
        return Err(Error::format(file, bytes.len() as u64, format!("{} of {} weight tensors present", tensors.len(), 2 * layers.len())));
    }
    let precision = if tensors.iter().any(|t| matches!(t, EncodedTensor::U8(_))) {
        Precision::U8
    } else if tensors.iter().any(|t| matches!(t, EncodedTensor::F16(_))) {
        Precision::F16
    } else {
        Precision::F32
    };
    let q = QuantizedModel { spec, precision, tensors, activation_ranges: ranges };
    // Shape validation against the architecture.
    q.dequantize().map_err(|e| Error::format(file, 0, e.to_string()))?;
    Ok(q)
}

/// Reads and dequantizes to a float model ready for inference.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    Ok(load(bytes)?.dequantize()?)
}

pub fn save_file(path: &Path, model: &QuantizedModel, policy: &Policy) -> Result<Vec<u8>> {
    let bytes = save(model, policy)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, &bytes).map_err(Error::io(path))?;
    Ok(bytes)
}

pub fn load_file(path: &Path) -> Result<QuantizedModel> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    load_named(&bytes, &path.display().to_string())
}

// ---- soft-label cache ----

const SOFT_LABEL_PREFIX: &str = "soft-labels-";

pub fn save_soft_labels(cache: &SoftLabelCache) -> Result<Vec<u8>> {
    let spec = ModelSpec::new(format!("{SOFT_LABEL_PREFIX}{:016x}", cache.fingerprint), (0, 0, 0), Vec::new());
    let t = EncodedTensor::F32(cache.logits.clone());
    write_container(&spec, &[Record { name: "logits".into(), tensor: &t }], &Policy::Dense)
}

pub fn load_soft_labels(bytes: &[u8]) -> Result<SoftLabelCache> {
    let c = read_container(bytes, "<soft-labels>")?;
    let fp = c
        .spec
        .name
        .strip_prefix(SOFT_LABEL_PREFIX)
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::format("<soft-labels>", 6, "not a soft-label cache"))?;
    match c.records.as_slice() {
        [(name, EncodedTensor::F32(t))] if name == "logits" && t.shape().len() == 2 => {
            Ok(SoftLabelCache { logits: t.clone(), fingerprint: fp })
        }
        _ => Err(Error::format("<soft-labels>", 0, "expected a single logits tensor")),
    }
}

// ---- size metric ----

/// Raw and deflate-compressed container sizes. The compressed figure is
/// the headline size; 1 MB = 10^6 bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeReport {
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
}

impl SizeReport {
    pub fn size_mb(&self) -> f64 {
        self.compressed_bytes as f64 / 1e6
    }

    pub fn raw_mb(&self) -> f64 {
        self.raw_bytes as f64 / 1e6
    }
}

pub fn measure_size(bytes: &[u8]) -> SizeReport {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("in-memory write");
    let compressed = enc.finish().expect("in-memory write");
    SizeReport { raw_bytes: bytes.len() as u64, compressed_bytes: compressed.len() as u64 }
}

/// Headline size of `a` relative to `b`.
pub fn size_ratio(a: &SizeReport, b: &SizeReport) -> Result<f64> {
    if b.compressed_bytes == 0 {
        return Err(Error::Core(nncomp_core::Error::Argument("size ratio against an empty report".into())));
    }
    Ok(a.compressed_bytes as f64 / b.compressed_bytes as f64)
}

/// Serializes under AUTO and measures.
pub fn model_size(model: &QuantizedModel) -> Result<SizeReport> {
    Ok(measure_size(&save(model, &Policy::Auto)?))
}

/// Bytes of a sparse f32 payload for `n` elements with `nonzeros` kept.
pub fn sparse_f32_payload_len(n: usize, nonzeros: usize) -> usize {
    n.div_ceil(8) + 4 * nonzeros
}
