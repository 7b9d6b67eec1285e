//! The `LSFT1` checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       5     magic "LSFT1"
//! 5       8     header length H, u64 little-endian
//! 13      H     header, UTF-8 JSON (see `Header`)
//! 13+H    P     payload: little-endian f32 tensors at the manifest offsets
//! ```
//!
//! Manifest entries are named `param:<name>`, `buffer:<name>`, `opt.m:<name>`
//! and `opt.v:<name>`, in that order; offsets are relative to the payload
//! start and `len` is in bytes.

use std::fs;
use std::path::Path;

use lightsaft_core::model::{Model, ModelConfig};
use lightsaft_core::numerics::Tensor;
use lightsaft_core::params::ParamId;
use lightsaft_core::train::{Optimizer, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"LSFT1";
const PREFIX: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training steps completed.
    pub step: u64,
    pub optimizer: OptimizerHeader,
    pub payload_bytes: u64,
    pub tensors: Vec<ManifestEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub train: TrainConfig,
    pub step: u64,
}

fn named_tensors<'a>(model: &'a Model<f32>, opt: &'a Optimizer<f32>) -> Vec<(String, &'a Tensor<f32>)> {
    let store = &model.store;
    let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
    out.extend(store.params().iter().map(|p| (format!("param:{}", p.name), &p.tensor)));
    out.extend(store.buffers().iter().map(|b| (format!("buffer:{}", b.name), &b.tensor)));
    for (prefix, moments) in [("opt.m", &opt.m), ("opt.v", &opt.v)] {
        out.extend(store.params().iter().zip(moments.iter()).map(|(p, t)| (format!("{prefix}:{}", p.name), t)));
    }
    out
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let tensors = named_tensors(&ck.model, &ck.optimizer);
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let len = 4 * t.numel() as u64;
        manifest.push(ManifestEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let o = &ck.optimizer;
    let header = Header {
        model: *ck.model.config(),
        train: ck.train,
        step: ck.step,
        optimizer: OptimizerHeader {
            kind: o.kind,
            lr: o.lr as f64,
            momentum: o.momentum as f64,
            beta1: o.beta1 as f64,
            beta2: o.beta2 as f64,
            eps: o.eps as f64,
            step: o.step,
        },
        payload_bytes: offset,
        tensors: manifest,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the magic and header without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX {
        return Err(Error::checkpoint("magic", format!("file is {} bytes, shorter than the fixed prefix", bytes.len())));
    }
    if &bytes[..5] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..5]);
        return Err(Error::checkpoint("magic", format!("expected \"LSFT1\", found {found:?}")));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let end = (PREFIX as u64).checked_add(hlen).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(Error::checkpoint("header", format!("declares {hlen} bytes, file has {}", bytes.len() - PREFIX)));
    };
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..end as usize]).map_err(|e| Error::checkpoint("header", e.to_string()))?;
    Ok((header, &bytes[end as usize..]))
}

/// First top-level field (in declaration order) where two configs differ.
fn first_difference(found: &ModelConfig, expected: &ModelConfig) -> Option<String> {
    let (a, b) = (serde_json::to_value(found).ok()?, serde_json::to_value(expected).ok()?);
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(*v)).map(|(k, v)| format!("model.{k} = {v} (expected {})", b[k]))
}

/// Deserialises a checkpoint. With `expected`, the stored model config must
/// match it exactly.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let (header, payload) = decode_header(bytes)?;
    if let Some(exp) = expected {
        if let Some(diff) = first_difference(&header.model, exp) {
            return Err(Error::checkpoint("model", format!("config mismatch: {diff}")));
        }
    }
    if header.payload_bytes != payload.len() as u64 {
        return Err(Error::checkpoint(
            "payload",
            format!("header declares {} bytes, file holds {}", header.payload_bytes, payload.len()),
        ));
    }
    let mut model = Model::<f32>::build(&header.model)?;
    let oh = &header.optimizer;
    let mut opt = Optimizer::new(oh.kind, oh.lr, oh.momentum, &model.store);
    opt.beta1 = oh.beta1 as f32;
    opt.beta2 = oh.beta2 as f32;
    opt.eps = oh.eps as f32;
    opt.step = oh.step;

    let expected_entries: Vec<(String, Vec<usize>)> =
        named_tensors(&model, &opt).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if header.tensors.len() != expected_entries.len() {
        let first = header
            .tensors
            .iter()
            .zip(&expected_entries)
            .find(|(e, x)| e.name != x.0)
            .map_or_else(|| "manifest".to_string(), |(e, _)| e.name.clone());
        return Err(Error::checkpoint(
            first,
            format!("manifest has {} tensors, model needs {}", header.tensors.len(), expected_entries.len()),
        ));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for (e, (name, shape)) in header.tensors.iter().zip(&expected_entries) {
        if &e.name != name {
            return Err(Error::checkpoint(&e.name, format!("expected tensor {name}")));
        }
        if e.dtype != "f32" {
            return Err(Error::checkpoint(&e.name, format!("dtype {} is not f32", e.dtype)));
        }
        if &e.shape != shape {
            return Err(Error::checkpoint(&e.name, format!("shape {:?}, model needs {shape:?}", e.shape)));
        }
        let numel: usize = shape.iter().product();
        if e.len != 4 * numel as u64 {
            return Err(Error::checkpoint(&e.name, format!("len {} bytes for {numel} f32 values", e.len)));
        }
        if e.offset.checked_add(e.len).map_or(true, |end| end > header.payload_bytes) {
            return Err(Error::checkpoint(&e.name, format!("span {}+{} exceeds payload", e.offset, e.len)));
        }
        spans.push((e.offset, e.len, &e.name));
    }
    let mut sorted = spans.clone();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(Error::checkpoint(w[1].2, format!("overlaps {}", w[0].2)));
        }
    }

    let read = |offset: u64, shape: &[usize]| -> Tensor<f32> {
        let bytes = &payload[offset as usize..];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap())).collect();
        Tensor::new(shape, data).expect("shape checked")
    };
    let np = model.store.params().len();
    let nb = model.store.buffers().len();
    for (i, e) in header.tensors.iter().enumerate() {
        let t = read(e.offset, &e.shape);
        if i < np {
            *model.store.param_mut(ParamId(i)) = t;
        } else if i < np + nb {
            *model.store.buffer_mut(i - np) = t;
        } else if i < 2 * np + nb {
            opt.m[i - np - nb] = t;
        } else {
            opt.v[i - 2 * np - nb] = t;
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: opt,
        train: header.train,
        step: header.step,
    })
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// partial checkpoint under `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightsaft_core::model::Variant;
    use lightsaft_core::spectro::StftConfig;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            num_scales: 2,
            internal_channels: 2,
            num_latent: 2,
            key_dim: 3,
            bottleneck: 4,
            tfc_layers: 1,
            kernel: [3, 3],
            num_conditions: 4,
            audio_channels: 1,
            stft: StftConfig::new(32).unwrap(),
            seed: 5,
        }
    }

    fn checkpoint(variant: Variant) -> Checkpoint {
        let model = Model::<f32>::build(&tiny(variant)).unwrap();
        let mut optimizer = Optimizer::new(OptimizerKind::Adam, 1e-3, 0.0, &model.store);
        optimizer.step = 7;
        for (i, m) in optimizer.m.iter_mut().enumerate() {
            *m = m.map(|_| i as f32 * 0.5 + 0.25);
        }
        Checkpoint { model, optimizer, train: TrainConfig::desk(), step: 7 }
    }

    fn reencode(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let (header, payload) = decode_header(bytes).unwrap();
        let mut v = serde_json::to_value(&header).unwrap();
        edit(&mut v);
        let json = serde_json::to_vec(&v).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint(Variant::Lightsaft);
        let bytes = encode_checkpoint(&ck);
        assert_eq!(&bytes[..5], b"LSFT1");
        let back = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_checkpoint(&checkpoint(Variant::Lasaft));
        bytes[4] = b'2';
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::Checkpoint { entry, .. }) if entry == "magic"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode_checkpoint(&checkpoint(Variant::Lasaft));
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_checkpoint(cut, None), Err(Error::Checkpoint { entry, .. }) if entry == "payload"));
        assert!(matches!(decode_checkpoint(&bytes[..20], None), Err(Error::Checkpoint { entry, .. }) if entry == "header"));
    }

    #[test]
    fn corrupted_offset_names_the_entry() {
        let bytes = encode_checkpoint(&checkpoint(Variant::Lightsaft));
        let (header, _) = decode_header(&bytes).unwrap();
        let victim = header.tensors[3].name.clone();
        let past_end = reencode(&bytes, |v| v["tensors"][3]["offset"] = header.payload_bytes.into());
        assert!(matches!(decode_checkpoint(&past_end, None), Err(Error::Checkpoint { entry, .. }) if entry == victim));
        let overlap = reencode(&bytes, |v| v["tensors"][3]["offset"] = (header.tensors[2].offset + 4).into());
        assert!(matches!(decode_checkpoint(&overlap, None), Err(Error::Checkpoint { entry, .. }) if entry == victim));
    }

    #[test]
    fn variant_mismatch_rejected() {
        let bytes = encode_checkpoint(&checkpoint(Variant::Lightsaft));
        let expect = tiny(Variant::LightsaftPlus);
        match decode_checkpoint(&bytes, Some(&expect)) {
            Err(Error::Checkpoint { entry, detail }) => {
                assert_eq!(entry, "model");
                assert!(detail.contains("model.variant"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        assert!(decode_checkpoint(&bytes, Some(&tiny(Variant::Lightsaft))).is_ok());
    }

    #[test]
    fn shape_mismatch_names_first_bad_entry() {
        let bytes = encode_checkpoint(&checkpoint(Variant::Lightsaft));
        let (header, _) = decode_header(&bytes).unwrap();
        let name = header.tensors[2].name.clone();
        let bad = reencode(&bytes, |v| v["tensors"][2]["shape"].as_array_mut().unwrap().push(1.into()));
        assert!(matches!(decode_checkpoint(&bad, None), Err(Error::Checkpoint { entry, .. }) if entry == name));
    }

    #[test]
    fn unknown_header_field_rejected() {
        let bytes = encode_checkpoint(&checkpoint(Variant::Lightsaft));
        let bad = reencode(&bytes, |v| v["extra"] = 1.into());
        assert!(matches!(decode_checkpoint(&bad, None), Err(Error::Checkpoint { entry, .. }) if entry == "header"));
    }

    #[test]
    fn reload_forward_is_bitwise_equal() {
        let ck = checkpoint(Variant::LightsaftPlus);
        let back = decode_checkpoint(&encode_checkpoint(&ck), None).unwrap();
        let x = Tensor::from_fn(&[2, 16, 9], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        use lightsaft_core::model::Condition;
        assert_eq!(ck.model.forward(&x, Condition::Drums).unwrap(), back.model.forward(&x, Condition::Drums).unwrap());
    }
}
