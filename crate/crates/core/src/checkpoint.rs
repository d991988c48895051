//! `.3dqr` raw checkpoint: everything needed to rebuild a network.
//!
//! ```text
//! magic        4  "3DQR"
//! version      u8 1
//! config_len   u32, network config as JSON
//! entry_count  u32
//! per entry:
//!   name_len u16, name (UTF-8)
//!   kind u8
//!   ndims u8, dims u32 × ndims
//!   kind 0 dense:     f32 × n
//!   kind 1 quantized: γ⁺ f32, γ⁻ f32, channel_count u32, α f32 × channel_count,
//!                     values i8 × n (−1, 0, +1)
//!   kind 2 external:  nothing; the kernel lives in a companion `.3dqp`
//! crc32        u32 IEEE, over every byte after the magic
//! ```
//!
//! A quantized model is stored as a `.3dqp` file with its kernels plus an
//! auxiliary `.3dqr` holding the config, biases, normalization parameters and
//! `external` placeholders. [`Checkpoint::split`] and [`Checkpoint::join`]
//! convert between that pair and a single self-contained raw checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bytes::{check_crc, split_framed, write_name, write_shape, ByteReader, ByteWriter};
use crate::codec::{PackedLayer, PackedModel, StorageScheme};
use crate::error::{Error, Result};
use crate::quant::TernaryTensor;
use crate::segnet::net::{build_unet3d, NetConfig, UNet3d};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"3DQR";
pub const VERSION: u8 = 1;

const KIND_DENSE: u8 = 0;
const KIND_QUANTIZED: u8 = 1;
const KIND_EXTERNAL: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Tensor<f32>),
    Quantized(PackedLayer),
    External { shape: Vec<usize> },
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::Dense(t) => t.shape(),
            Payload::Quantized(p) => p.shape(),
            Payload::External { shape } => shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub entries: Vec<Entry>,
}

fn dense(name: String, t: &Tensor<f32>) -> Entry {
    Entry { name, payload: Payload::Dense(t.clone()) }
}

fn vector(name: String, v: &[f32]) -> Result<Entry> {
    Ok(Entry { name, payload: Payload::Dense(Tensor::new(&[v.len()], v.to_vec())?) })
}

impl Checkpoint {
    /// Snapshot a network. Quantized kernels are stored as their ternary
    /// pattern and scales; the latent weights are dropped.
    pub fn from_model(net: &UNet3d) -> Result<Self> {
        let mut entries = Vec::new();
        for conv in &net.convs {
            entries.push(match conv.packed()? {
                Some(p) => Entry { name: p.name.clone(), payload: Payload::Quantized(p) },
                None => dense(conv.kernel_name(), &conv.kernel),
            });
            if let Some(b) = &conv.bias {
                entries.push(dense(format!("{}.bias", conv.name), b));
            }
        }
        for n in &net.norms {
            entries.push(dense(format!("{}.weight", n.name), &n.weight));
            entries.push(dense(format!("{}.bias", n.name), &n.bias));
            entries.push(vector(format!("{}.running_mean", n.name), &n.running_mean)?);
            entries.push(vector(format!("{}.running_var", n.name), &n.running_var)?);
        }
        Ok(Self { config: net.config.clone(), entries })
    }

    /// Rebuild an inference-ready network. Quantized kernels become frozen
    /// `±γ·α` tensors, so outputs match the source model bit for bit.
    pub fn to_model(&self) -> Result<UNet3d> {
        let mut net = build_unet3d(&self.config, 0)?;
        let mut it = self.entries.iter();
        let mut next = |expected: String, shape: &[usize]| -> Result<&Payload> {
            let e = it
                .next()
                .ok_or_else(|| Error::Corrupt(format!("checkpoint ends before entry {expected}")))?;
            if e.name != expected {
                return Err(Error::Corrupt(format!("expected entry {expected}, found {}", e.name)));
            }
            if e.payload.shape() != shape {
                return Err(Error::Corrupt(format!(
                    "entry {expected} has shape {:?}, the config implies {shape:?}",
                    e.payload.shape()
                )));
            }
            Ok(&e.payload)
        };
        let dense_of = |name: &str, p: &Payload| -> Result<Tensor<f32>> {
            match p {
                Payload::Dense(t) => Ok(t.clone()),
                _ => Err(Error::Corrupt(format!("entry {name} must be dense"))),
            }
        };
        for conv in &mut net.convs {
            let name = conv.kernel_name();
            match next(name.clone(), conv.kernel.shape())? {
                Payload::Dense(t) => {
                    if conv.quant.is_some() {
                        return Err(Error::Corrupt(format!("kernel {name} should be quantized under {}", self.config.scheme)));
                    }
                    conv.kernel = t.clone();
                }
                Payload::Quantized(p) => {
                    if conv.quant.is_none() {
                        return Err(Error::Corrupt(format!("kernel {name} is quantized but the config keeps it dense")));
                    }
                    if self.config.scheme.is_binary() && p.pattern.values().contains(&0) {
                        return Err(Error::Corrupt(format!("binary kernel {name} contains zero weights")));
                    }
                    conv.kernel = p.restore()?;
                    conv.quant = None;
                    conv.frozen = Some(p.clone());
                }
                Payload::External { .. } => {
                    return Err(Error::Corrupt(format!(
                        "kernel {name} is stored externally; join with its .3dqp file first"
                    )))
                }
            }
            if let Some(b) = conv.bias.as_mut() {
                let bname = format!("{}.bias", conv.name);
                *b = dense_of(&bname, next(bname.clone(), b.shape())?)?;
            }
        }
        for n in &mut net.norms {
            let c = [n.weight.len()];
            for (field, slot) in [("weight", &mut n.weight), ("bias", &mut n.bias)] {
                let name = format!("{}.{field}", n.name);
                *slot = dense_of(&name, next(name.clone(), &c)?)?;
            }
            for (field, slot) in [("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)] {
                let name = format!("{}.{field}", n.name);
                *slot = dense_of(&name, next(name.clone(), &c)?)?.into_data();
            }
        }
        if let Some(extra) = it.next() {
            return Err(Error::Corrupt(format!("unexpected trailing entry {}", extra.name)));
        }
        Ok(net)
    }

    pub fn has_external(&self) -> bool {
        self.entries.iter().any(|e| matches!(e.payload, Payload::External { .. }))
    }

    /// Move quantized kernels into a packed model, leaving placeholders.
    pub fn split(&self) -> Result<(PackedModel, Checkpoint)> {
        let scheme = StorageScheme::for_scheme(self.config.scheme).ok_or_else(|| {
            Error::invalid("a FULL precision checkpoint has no quantized kernels to pack")
        })?;
        let mut layers = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            match &e.payload {
                Payload::Quantized(p) => {
                    layers.push(p.clone());
                    entries.push(Entry { name: e.name.clone(), payload: Payload::External { shape: p.shape().to_vec() } });
                }
                Payload::External { .. } => {
                    return Err(Error::invalid(format!("entry {} is already external", e.name)))
                }
                Payload::Dense(_) => entries.push(e.clone()),
            }
        }
        Ok((PackedModel { scheme, layers }, Checkpoint { config: self.config.clone(), entries }))
    }

    /// Inverse of [`split`](Self::split).
    pub fn join(&self, packed: &PackedModel) -> Result<Checkpoint> {
        let expected = StorageScheme::for_scheme(self.config.scheme);
        if expected != Some(packed.scheme) {
            return Err(Error::Corrupt(format!(
                "packed model uses {:?} storage but the config scheme is {}",
                packed.scheme, self.config.scheme
            )));
        }
        let mut layers = packed.layers.iter();
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            match &e.payload {
                Payload::External { shape } => {
                    let p = layers.next().ok_or_else(|| {
                        Error::Corrupt(format!("packed model has no layer for {}", e.name))
                    })?;
                    if p.name != e.name || p.shape() != shape.as_slice() {
                        return Err(Error::Corrupt(format!(
                            "packed layer {} {:?} does not match placeholder {} {shape:?}",
                            p.name,
                            p.shape(),
                            e.name
                        )));
                    }
                    entries.push(Entry { name: e.name.clone(), payload: Payload::Quantized(p.clone()) });
                }
                Payload::Quantized(_) => {
                    return Err(Error::invalid(format!("entry {} is already quantized inline", e.name)))
                }
                Payload::Dense(_) => entries.push(e.clone()),
            }
        }
        if let Some(extra) = layers.next() {
            return Err(Error::Corrupt(format!("packed layer {} has no placeholder", extra.name)));
        }
        Ok(Checkpoint { config: self.config.clone(), entries })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(&MAGIC);
        w.u8(VERSION);
        let config = serde_json::to_vec(&self.config)?;
        w.u32(config.len() as u32);
        w.bytes(&config);
        w.u32(u32::try_from(self.entries.len()).map_err(|_| Error::invalid("too many entries"))?);
        for e in &self.entries {
            write_name(&mut w, &e.name)?;
            match &e.payload {
                Payload::Dense(t) => {
                    w.u8(KIND_DENSE);
                    write_shape(&mut w, t.shape())?;
                    for &v in t.data() {
                        w.f32(v);
                    }
                }
                Payload::Quantized(p) => {
                    w.u8(KIND_QUANTIZED);
                    write_shape(&mut w, p.shape())?;
                    w.f32(p.gamma_pos);
                    w.f32(p.gamma_neg);
                    w.u32(p.alpha.len() as u32);
                    for &a in &p.alpha {
                        w.f32(a);
                    }
                    w.bytes(&p.pattern.values().iter().map(|&v| v as u8).collect::<Vec<_>>());
                }
                Payload::External { shape } => {
                    w.u8(KIND_EXTERNAL);
                    write_shape(&mut w, shape)?;
                }
            }
        }
        let crc = crc32fast::hash(&w.as_slice()[4..]);
        w.u32(crc);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // magic + version + config_len + entry_count + crc
        let (body, stored_crc) = split_framed(bytes, &MAGIC, 4 + 1 + 4 + 4 + 4)?;
        let mut r = ByteReader::new(body, 4);
        let version = r.u8()?;
        let config_len = r.u32()? as usize;
        let config_at = r.offset();
        let config_raw = r.take(config_len)?;
        let count = r.u32()? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let at = r.offset();
            let kind = r.u8()?;
            let (shape, n) = r.shape()?;
            let payload = match kind {
                KIND_DENSE => RawPayload::Dense(r.f32_vec(n)?),
                KIND_QUANTIZED => {
                    let gamma_pos = r.f32()?;
                    let gamma_neg = r.f32()?;
                    let channels = r.u32()? as usize;
                    let alpha = r.f32_vec(channels)?;
                    let values = r.take(n)?.iter().map(|&b| b as i8).collect();
                    RawPayload::Quantized { gamma_pos, gamma_neg, alpha, values }
                }
                KIND_EXTERNAL => RawPayload::External,
                other => return Err(Error::Corrupt(format!("unknown entry kind {other} at offset {at}"))),
            };
            raw.push((name, shape, payload));
        }
        if !r.is_exhausted() {
            return Err(Error::Corrupt(format!("{} unexpected bytes before the checksum", r.remaining())));
        }
        check_crc(body, stored_crc)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let config: NetConfig = serde_json::from_slice(config_raw)
            .map_err(|e| Error::Corrupt(format!("config at offset {config_at}: {e}")))?;
        let entries = raw
            .into_iter()
            .map(|(name, shape, payload)| {
                let payload = match payload {
                    RawPayload::Dense(data) => Payload::Dense(Tensor::new(&shape, data)?),
                    RawPayload::Quantized { gamma_pos, gamma_neg, alpha, values } => {
                        let pattern = TernaryTensor::from_values(&shape, &values)
                            .map_err(|e| Error::Corrupt(format!("entry {name}: {e}")))?;
                        if alpha.len() != shape[0] && alpha.len() != 1 {
                            return Err(Error::Corrupt(format!(
                                "entry {name}: {} α values for {} output channels",
                                alpha.len(),
                                shape[0]
                            )));
                        }
                        Payload::Quantized(PackedLayer { name: name.clone(), gamma_pos, gamma_neg, alpha, pattern })
                    }
                    RawPayload::External => Payload::External { shape },
                };
                Ok(Entry { name, payload })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, entries })
    }
}

/// Companion file holding the non-kernel part of a packed model.
pub fn aux_path(packed: &Path) -> PathBuf {
    packed.with_extension("aux")
}

/// Write a model under `dir/stem`: `stem.3dqp` + `stem.aux` when it has
/// quantized kernels, otherwise `stem.3dqr`. Returns the files written.
pub fn write_model(net: &UNet3d, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let ck = Checkpoint::from_model(net)?;
    if ck.entries.iter().any(|e| matches!(e.payload, Payload::Quantized(_))) {
        let (packed, aux) = ck.split()?;
        let packed_path = dir.join(format!("{stem}.3dqp"));
        let aux = aux.to_bytes()?;
        fs::write(&packed_path, packed.to_bytes()?)?;
        fs::write(aux_path(&packed_path), aux)?;
        Ok(vec![packed_path.clone(), aux_path(&packed_path)])
    } else {
        let raw = dir.join(format!("{stem}.3dqr"));
        fs::write(&raw, ck.to_bytes()?)?;
        Ok(vec![raw])
    }
}

/// Read a model file. A `.3dqp` file is joined with its `.aux` companion;
/// anything else is read as a raw checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&crate::codec::MAGIC) {
        let packed = PackedModel::from_bytes(&bytes)?;
        let aux_file = aux_path(path);
        let aux_bytes = fs::read(&aux_file).map_err(|e| {
            Error::Corrupt(format!("companion file {} unreadable: {e}", aux_file.display()))
        })?;
        Checkpoint::from_bytes(&aux_bytes)?.join(&packed)
    } else {
        Checkpoint::from_bytes(&bytes)
    }
}

enum RawPayload {
    Dense(Vec<f32>),
    Quantized { gamma_pos: f32, gamma_neg: f32, alpha: Vec<f32>, values: Vec<i8> },
    External,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantScheme;

    fn net(scheme: QuantScheme) -> UNet3d {
        let cfg = NetConfig { levels: 2, base_channels: 4, scheme, ..NetConfig::default() };
        build_unet3d(&cfg, 11).unwrap()
    }

    #[test]
    fn raw_round_trip() {
        for scheme in QuantScheme::ALL {
            let ck = Checkpoint::from_model(&net(scheme)).unwrap();
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn split_join_round_trip() {
        let ck = Checkpoint::from_model(&net(QuantScheme::Tdq3)).unwrap();
        let (packed, aux) = ck.split().unwrap();
        assert!(aux.has_external());
        let aux = Checkpoint::from_bytes(&aux.to_bytes().unwrap()).unwrap();
        let packed = PackedModel::from_bytes(&packed.to_bytes().unwrap()).unwrap();
        assert_eq!(aux.join(&packed).unwrap().to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert!(aux.to_model().is_err());
    }

    #[test]
    fn full_checkpoint_cannot_be_split() {
        let ck = Checkpoint::from_model(&net(QuantScheme::Full)).unwrap();
        assert!(ck.split().is_err());
    }

    #[test]
    fn restored_model_predicts_identically() {
        let x = Tensor::from_fn(&[1, 1, 8, 8, 8], |i| ((i * 37) % 11) as f32 / 11.0);
        for scheme in QuantScheme::ALL {
            let src = net(scheme);
            let bytes = Checkpoint::from_model(&src).unwrap().to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
            assert_eq!(src.predict_logits(&x).unwrap(), back.predict_logits(&x).unwrap(), "{scheme}");
            // re-export of a restored model is unchanged
            assert_eq!(Checkpoint::from_model(&back).unwrap().to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for scheme in [QuantScheme::Full, QuantScheme::Btq] {
            let src = net(scheme);
            let files = write_model(&src, dir.path(), scheme.name()).unwrap();
            assert_eq!(files.len(), if scheme == QuantScheme::Full { 1 } else { 2 });
            let back = read_checkpoint(&files[0]).unwrap();
            assert_eq!(back, Checkpoint::from_model(&src).unwrap());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = Checkpoint::from_model(&net(QuantScheme::Ttq)).unwrap().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Crc { .. }) | Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Truncated { .. }) | Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b"3DQPxxxxxxxxxxxxxxxx"), Err(Error::BadMagic { .. })));
    }
}
