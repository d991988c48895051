//! `.3dqp` packed model format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4  "3DQP"
//! version      u8 1
//! scheme       u8 0 = ternary, 1 = binary
//! layer_count  u32
//! per layer:
//!   name_len u16, name (UTF-8)
//!   ndims u8, dims u32 × ndims
//!   γ⁺ f32, γ⁻ f32
//!   channel_count u32, α f32 × channel_count
//!   ternary: pos mask, neg mask   (⌈n/8⌉ bytes each)
//!   binary:  sign mask            (⌈n/8⌉ bytes)
//! crc32        u32 IEEE, over every byte after the magic
//! ```
//!
//! Weights are enumerated in row-major kernel order. Bit `i` lives in byte
//! `i / 8`, most significant bit first; padding bits of the last byte are
//! zero. Full-precision weights are never stored.

use crate::bytes::{check_crc, split_framed, write_name, write_shape, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::quant::{dequantize, BitMask, QuantScheme, QuantState, TernaryTensor};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"3DQP";
pub const VERSION: u8 = 1;
/// Magic + version + scheme + layer count + CRC.
pub const FRAME_BYTES: usize = 4 + 1 + 1 + 4 + 4;

/// Mask layout of a packed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageScheme {
    Ternary,
    Binary,
}

impl StorageScheme {
    pub fn for_scheme(scheme: QuantScheme) -> Option<Self> {
        match scheme {
            QuantScheme::Full => None,
            QuantScheme::Btq => Some(Self::Binary),
            QuantScheme::Tdq3 | QuantScheme::Ttq => Some(Self::Ternary),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Ternary => 0,
            Self::Binary => 1,
        }
    }

    fn masks(self) -> usize {
        match self {
            Self::Ternary => 2,
            Self::Binary => 1,
        }
    }
}

/// One quantized kernel as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub name: String,
    pub gamma_pos: f32,
    pub gamma_neg: f32,
    pub alpha: Vec<f32>,
    pub pattern: TernaryTensor,
}

impl PackedLayer {
    /// Capture a layer from its refreshed quantization state and pattern.
    pub fn from_state(name: impl Into<String>, state: &QuantState<f32>, pattern: TernaryTensor) -> Self {
        Self {
            name: name.into(),
            gamma_pos: state.gamma_pos,
            gamma_neg: state.gamma_neg,
            alpha: state.effective_alpha(),
            pattern,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.pattern.shape()
    }

    pub fn weight_count(&self) -> usize {
        self.pattern.len()
    }

    /// Scaled weights `±γ·α` restored from the masks.
    pub fn restore(&self) -> Result<Tensor<f32>> {
        dequantize(&self.pattern, self.gamma_pos, self.gamma_neg, &self.alpha)
    }

    fn encoded_len(&self, scheme: StorageScheme) -> usize {
        2 + self.name.len()
            + 1
            + 4 * self.shape().len()
            + 8
            + 4
            + 4 * self.alpha.len()
            + scheme.masks() * mask_bytes(self.weight_count())
    }
}

/// In-memory form of a `.3dqp` file.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub scheme: StorageScheme,
    pub layers: Vec<PackedLayer>,
}

impl PackedModel {
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    /// Exact serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        FRAME_BYTES + self.layers.iter().map(|l| l.encoded_len(self.scheme)).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        deserialize_model(bytes)
    }
}

/// Bytes needed for one mask over `n` weights.
pub fn mask_bytes(n: usize) -> usize {
    n.div_ceil(8)
}

/// MSB-first bit packing.
pub fn pack_bits(mask: &BitMask) -> Vec<u8> {
    let mut out = vec![0u8; mask_bytes(mask.len())];
    for i in 0..mask.len() {
        if mask.get(i) {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_bits`]; non-zero padding bits are rejected.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<BitMask> {
    if bytes.len() != mask_bytes(n) {
        return Err(Error::Corrupt(format!(
            "mask of {} bytes cannot hold exactly {n} weights",
            bytes.len()
        )));
    }
    let mut mask = BitMask::zeros(n);
    for i in 0..n {
        if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
            mask.set(i, true);
        }
    }
    if n % 8 != 0 {
        let pad = bytes[n / 8] & (0xFF >> (n % 8));
        if pad != 0 {
            return Err(Error::Corrupt(format!("non-zero padding bits {pad:#04x} in mask")));
        }
    }
    Ok(mask)
}

/// Split a pattern into packed positive and negative masks.
pub fn pack_masks(ternary: &TernaryTensor) -> (Vec<u8>, Vec<u8>) {
    (pack_bits(ternary.pos_mask()), pack_bits(ternary.neg_mask()))
}

/// Rebuild a flat pattern of `element_count` weights from its two masks.
pub fn unpack_masks(pos: &[u8], neg: &[u8], element_count: usize) -> Result<TernaryTensor> {
    unpack_masks_shaped(pos, neg, &[element_count])
}

fn unpack_masks_shaped(pos: &[u8], neg: &[u8], shape: &[usize]) -> Result<TernaryTensor> {
    let n = shape.iter().product();
    let p = unpack_bits(pos, n)?;
    let q = unpack_bits(neg, n)?;
    if let Some(i) = (0..n).find(|&i| p.get(i) && q.get(i)) {
        return Err(Error::Corrupt(format!(
            "weight {i} is marked both positive and negative"
        )));
    }
    TernaryTensor::new(shape, p, q)
}

fn sign_mask_pattern(bytes: &[u8], shape: &[usize]) -> Result<TernaryTensor> {
    let n: usize = shape.iter().product();
    let pos = unpack_bits(bytes, n)?;
    let mut neg = BitMask::zeros(n);
    for i in 0..n {
        neg.set(i, !pos.get(i));
    }
    TernaryTensor::new(shape, pos, neg)
}

/// Encode a model into the `.3dqp` byte layout.
pub fn serialize_model(model: &PackedModel) -> Result<Vec<u8>> {
    let layer_count = u32::try_from(model.layers.len())
        .map_err(|_| Error::invalid("too many layers"))?;
    let mut w = ByteWriter::with_capacity(model.encoded_len());
    w.bytes(&MAGIC);
    w.u8(VERSION);
    w.u8(model.scheme.tag());
    w.u32(layer_count);
    for layer in &model.layers {
        let channels = layer.shape()[0];
        if layer.alpha.len() != channels {
            return Err(Error::shape(format!(
                "layer {}: {} alpha values for {channels} output channels",
                layer.name,
                layer.alpha.len()
            )));
        }
        write_name(&mut w, &layer.name)?;
        write_shape(&mut w, layer.shape())?;
        w.f32(layer.gamma_pos);
        w.f32(layer.gamma_neg);
        w.u32(channels as u32);
        for &a in &layer.alpha {
            w.f32(a);
        }
        match model.scheme {
            StorageScheme::Ternary => {
                let (pos, neg) = pack_masks(&layer.pattern);
                w.bytes(&pos);
                w.bytes(&neg);
            }
            StorageScheme::Binary => {
                let p = &layer.pattern;
                if (0..p.len()).any(|i| p.get(i) == 0) {
                    return Err(Error::invalid(format!(
                        "layer {}: binary storage cannot hold zero weights",
                        layer.name
                    )));
                }
                w.bytes(&pack_bits(p.pos_mask()));
            }
        }
    }
    let crc = crc32fast::hash(&w.as_slice()[4..]);
    w.u32(crc);
    debug_assert_eq!(w.len(), model.encoded_len());
    Ok(w.into_inner())
}

struct RawLayer<'a> {
    name: String,
    shape: Vec<usize>,
    gamma_pos: f32,
    gamma_neg: f32,
    alpha: Vec<f32>,
    masks: Vec<&'a [u8]>,
}

/// Decode and validate a `.3dqp` byte stream.
///
/// Checks run in order: magic, structure (truncation), CRC, version, then
/// mask semantics.
pub fn deserialize_model(bytes: &[u8]) -> Result<PackedModel> {
    let (body, stored_crc) = split_framed(bytes, &MAGIC, FRAME_BYTES)?;
    let mut r = ByteReader::new(body, 4);
    let version = r.u8()?;
    let tag = r.u8()?;
    let layer_count = r.u32()? as usize;
    let scheme = match tag {
        0 => Some(StorageScheme::Ternary),
        1 => Some(StorageScheme::Binary),
        _ => None,
    };
    let mask_count = scheme.map_or(2, |s| s.masks());
    let mut raw = Vec::with_capacity(layer_count.min(1 << 16));
    for _ in 0..layer_count {
        let name = r.string()?;
        let (shape, n) = r.shape()?;
        let gamma_pos = r.f32()?;
        let gamma_neg = r.f32()?;
        let channels = r.u32()? as usize;
        let alpha = r.f32_vec(channels)?;
        let masks = (0..mask_count)
            .map(|_| r.take(mask_bytes(n)))
            .collect::<Result<Vec<_>>>()?;
        raw.push(RawLayer { name, shape, gamma_pos, gamma_neg, alpha, masks });
    }
    if !r.is_exhausted() {
        return Err(Error::Corrupt(format!(
            "{} unexpected bytes before the checksum",
            r.remaining()
        )));
    }
    check_crc(body, stored_crc)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let scheme = scheme.ok_or_else(|| Error::Corrupt(format!("unknown scheme tag {tag}")))?;

    let mut layers = Vec::with_capacity(raw.len());
    for l in raw {
        if l.alpha.len() != l.shape[0] {
            return Err(Error::Corrupt(format!(
                "layer {}: {} alpha values for {} output channels",
                l.name,
                l.alpha.len(),
                l.shape[0]
            )));
        }
        let pattern = match scheme {
            StorageScheme::Ternary => unpack_masks_shaped(l.masks[0], l.masks[1], &l.shape),
            StorageScheme::Binary => sign_mask_pattern(l.masks[0], &l.shape),
        }
        .map_err(|e| match e {
            Error::Corrupt(msg) => Error::Corrupt(format!("layer {}: {msg}", l.name)),
            other => other,
        })?;
        layers.push(PackedLayer {
            name: l.name,
            gamma_pos: l.gamma_pos,
            gamma_neg: l.gamma_neg,
            alpha: l.alpha,
            pattern,
        });
    }
    Ok(PackedModel { scheme, layers })
}

/// Per-layer storage figures.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub weights: usize,
    pub full_bytes: usize,
    pub packed_bytes: usize,
}

/// Full-precision versus packed storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub weight_count: usize,
    /// 4 bytes per kernel weight.
    pub full_bytes: usize,
    /// Size of the serialized `.3dqp` stream, metadata included.
    pub packed_bytes: usize,
    /// `full_bytes / packed_bytes`, or 1.0 for a model without weights.
    pub ratio: f64,
    pub layers: Vec<LayerReport>,
}

impl CompressionReport {
    /// Report for a model kept at full precision.
    pub fn uncompressed(layers: impl IntoIterator<Item = (String, usize)>) -> Self {
        let layers: Vec<LayerReport> = layers
            .into_iter()
            .map(|(name, weights)| LayerReport { name, weights, full_bytes: 4 * weights, packed_bytes: 4 * weights })
            .collect();
        let weight_count = layers.iter().map(|l| l.weights).sum();
        Self {
            weight_count,
            full_bytes: 4 * weight_count,
            packed_bytes: 4 * weight_count,
            ratio: 1.0,
            layers,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,weights,full_bytes,packed_bytes,ratio\n");
        let ratio = |f: usize, p: usize| if f == 0 || p == 0 { 1.0 } else { f as f64 / p as f64 };
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                l.name,
                l.weights,
                l.full_bytes,
                l.packed_bytes,
                ratio(l.full_bytes, l.packed_bytes)
            ));
        }
        out.push_str(&format!(
            "TOTAL,{},{},{},{:.6}\n",
            self.weight_count, self.full_bytes, self.packed_bytes, self.ratio
        ));
        out
    }
}

pub fn compression_report(model: &PackedModel) -> CompressionReport {
    let weight_count = model.weight_count();
    let full_bytes = 4 * weight_count;
    let packed_bytes = model.encoded_len();
    let ratio = if weight_count == 0 { 1.0 } else { full_bytes as f64 / packed_bytes as f64 };
    let layers = model
        .layers
        .iter()
        .map(|l| LayerReport {
            name: l.name.clone(),
            weights: l.weight_count(),
            full_bytes: 4 * l.weight_count(),
            packed_bytes: l.encoded_len(model.scheme),
        })
        .collect();
    CompressionReport { weight_count, full_bytes, packed_bytes, ratio, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tern(values: &[i8]) -> TernaryTensor {
        TernaryTensor::from_values(&[values.len()], values).unwrap()
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_masks(&tern(&[1, 0, -1, 1, 0, 0, 0, 0])), (vec![0x90], vec![0x20]));
        assert_eq!(pack_masks(&tern(&[0; 8])), (vec![0x00], vec![0x00]));
        assert_eq!(pack_masks(&tern(&[1, -1, 1])), (vec![0xA0], vec![0x40]));
    }

    #[test]
    fn unpack_examples() {
        let t = unpack_masks(&[0x90], &[0x20], 8).unwrap();
        assert_eq!(t.values(), vec![1, 0, -1, 1, 0, 0, 0, 0]);
        assert!(matches!(unpack_masks(&[0x80], &[0x80], 1), Err(Error::Corrupt(_))));
        // bit 3 set beyond a 3-element mask
        assert!(matches!(unpack_masks(&[0xB0], &[0x00], 3), Err(Error::Corrupt(_))));
        assert!(matches!(unpack_masks(&[0x00, 0x00], &[0x00], 3), Err(Error::Corrupt(_))));
    }

    #[test]
    fn empty_model_is_fourteen_bytes() {
        let model = PackedModel { scheme: StorageScheme::Ternary, layers: vec![] };
        let bytes = serialize_model(&model).unwrap();
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[..10], b"3DQP\x01\x00\x00\x00\x00\x00");
        assert_eq!(deserialize_model(&bytes).unwrap(), model);
    }

    fn one_layer() -> PackedModel {
        PackedModel {
            scheme: StorageScheme::Ternary,
            layers: vec![PackedLayer {
                name: "conv".into(),
                gamma_pos: 1.25,
                gamma_neg: 0.75,
                alpha: vec![0.5],
                pattern: TernaryTensor::from_values(&[1, 8], &[1, 0, -1, 1, 0, 0, 0, 0]).unwrap(),
            }],
        }
    }

    #[test]
    fn one_layer_byte_count() {
        let bytes = serialize_model(&one_layer()).unwrap();
        // frame + name(2+4) + shape(1+2·4) + γ(8) + count(4) + α(4) + masks(2)
        let expected = 14 + 6 + 9 + 8 + 4 + 4 + 2;
        assert_eq!(bytes.len(), expected);
        assert_eq!(one_layer().encoded_len(), expected);
        assert_eq!(&bytes[bytes.len() - 6..bytes.len() - 4], &[0x90, 0x20]);
    }

    #[test]
    fn serialization_is_stable_across_round_trip() {
        let bytes = serialize_model(&one_layer()).unwrap();
        let back = deserialize_model(&bytes).unwrap();
        assert_eq!(back, one_layer());
        assert_eq!(serialize_model(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_diagnostics() {
        let bytes = serialize_model(&one_layer()).unwrap();
        assert!(matches!(
            deserialize_model(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        let mask_at = bytes.len() - 6;
        flipped[mask_at] ^= 0x01;
        assert!(matches!(deserialize_model(&flipped), Err(Error::Crc { .. })));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(deserialize_model(&bad_magic), Err(Error::BadMagic { .. })));
        assert!(matches!(deserialize_model(b"3DQ"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unsupported_version_with_valid_crc() {
        let mut bytes = serialize_model(&one_layer()).unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[4..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize_model(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn overlapping_masks_with_valid_crc_are_corrupt() {
        let mut bytes = serialize_model(&one_layer()).unwrap();
        let n = bytes.len();
        bytes[n - 5] |= 0x80;
        let crc = crc32fast::hash(&bytes[4..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize_model(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn long_names_rejected() {
        let mut m = one_layer();
        m.layers[0].name = "x".repeat(70_000);
        assert!(serialize_model(&m).is_err());
    }

    #[test]
    fn binary_layout_uses_one_mask() {
        let model = PackedModel {
            scheme: StorageScheme::Binary,
            layers: vec![PackedLayer {
                name: "b".into(),
                gamma_pos: 1.0,
                gamma_neg: 2.0,
                alpha: vec![0.25],
                pattern: TernaryTensor::from_values(&[1, 3], &[1, -1, 1]).unwrap(),
            }],
        };
        let bytes = serialize_model(&model).unwrap();
        assert_eq!(bytes.len(), model.encoded_len());
        assert_eq!(bytes[bytes.len() - 5], 0xA0);
        assert_eq!(deserialize_model(&bytes).unwrap(), model);
        let restored = model.layers[0].restore().unwrap();
        assert_eq!(restored.data(), &[0.25, -0.5, 0.25]);

        let mut with_zero = model;
        with_zero.layers[0].pattern = TernaryTensor::from_values(&[1, 3], &[1, 0, 1]).unwrap();
        assert!(serialize_model(&with_zero).is_err());
    }

    #[test]
    fn report_conventions() {
        let empty = PackedModel { scheme: StorageScheme::Ternary, layers: vec![] };
        assert_eq!(compression_report(&empty).ratio, 1.0);
        let r = compression_report(&one_layer());
        assert_eq!(r.full_bytes, 32);
        assert_eq!(r.packed_bytes, serialize_model(&one_layer()).unwrap().len());
        assert_eq!(r.layers.len(), 1);
        assert!(r.to_csv().starts_with("layer,weights"));
    }

    fn arb_ternary() -> impl Strategy<Value = Vec<i8>> {
        proptest::collection::vec(prop_oneof![Just(-1i8), Just(0i8), Just(1i8)], 1..2000)
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(values in arb_ternary()) {
            let t = tern(&values);
            let (p, n) = pack_masks(&t);
            prop_assert_eq!(p.len(), mask_bytes(values.len()));
            prop_assert_eq!(unpack_masks(&p, &n, values.len()).unwrap(), t);
        }

        #[test]
        fn single_bit_flips_are_detected(bit in 0usize..(8 * 33)) {
            let bytes = serialize_model(&one_layer()).unwrap();
            let mut c = bytes.clone();
            let at = 4 + bit / 8;
            prop_assume!(at < c.len());
            c[at] ^= 1 << (bit % 8);
            prop_assert!(deserialize_model(&c).is_err());
        }
    }
}
