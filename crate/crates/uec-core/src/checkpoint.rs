//! Binary container formats.
//!
//! Model checkpoint ("UECK"): magic, u32 LE version (=1), u32 LE header
//! length, UTF-8 JSON header listing ordered entries
//! `{name, shape[], offset, dtype:"f32le"}`, then the concatenated
//! little-endian f32 payloads. Offsets are bytes from the payload start.
//!
//! Reference-feature sidecar ("UECF"): magic, u32 LE version, 96 LE floats.
//!
//! Training state ("UECT"): same layout as the model container except the
//! header is an object `{step, tensors:[...]}` carrying the Adam moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExposureFeature, UecModel, ARCH, FEATURE_LEN};
use crate::train::AdamState;

pub const MODEL_MAGIC: [u8; 4] = *b"UECK";
pub const FEATURE_MAGIC: [u8; 4] = *b"UECF";
pub const TRAIN_STATE_MAGIC: [u8; 4] = *b"UECT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn f32s_to_le_bytes(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn encode_container(
    magic: [u8; 4],
    header_json: &[u8],
    payload: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json);
    out.extend_from_slice(payload);
    out
}

struct Container {
    header: Vec<u8>,
    payload: Vec<u8>,
}

fn decode_container(bytes: &[u8], magic: [u8; 4]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(bad("header", "file truncated before header"));
    }
    if bytes[0..4] != magic {
        return Err(bad("magic", "bad magic"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("header", "file truncated inside header"));
    }
    Ok(Container {
        header: bytes[12..12 + header_len].to_vec(),
        payload: bytes[12 + header_len..].to_vec(),
    })
}

fn tensor_entries(names: &[String], tensors: &[&[f32]]) -> (Vec<HeaderEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, data) in names.iter().zip(tensors.iter()) {
        entries.push(HeaderEntry {
            name: name.clone(),
            shape: vec![data.len()],
            offset: payload.len() as u64,
            dtype: "f32le".into(),
        });
        f32s_to_le_bytes(data, &mut payload);
    }
    (entries, payload)
}

// ── Model checkpoints ─────────────────────────────────────────────────

pub fn save_model(model: &UecModel, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ARCH.len());
    let mut payload = Vec::new();
    for (spec, data) in ARCH.iter().zip(model.params().iter()) {
        entries.push(HeaderEntry {
            name: spec.name.to_string(),
            shape: spec.shape.to_vec(),
            offset: payload.len() as u64,
            dtype: "f32le".into(),
        });
        f32s_to_le_bytes(data, &mut payload);
    }
    let header = serde_json::to_vec(&entries)?;
    std::fs::write(path, encode_container(MODEL_MAGIC, &header, &payload))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<UecModel> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let container = decode_container(&bytes, MODEL_MAGIC)?;
    let entries: Vec<HeaderEntry> =
        serde_json::from_slice(&container.header).map_err(|e| bad("header", e.to_string()))?;
    if entries.len() != ARCH.len() {
        return Err(bad(
            "tensor count",
            format!("expected {}, got {}", ARCH.len(), entries.len()),
        ));
    }
    let mut params = Vec::with_capacity(ARCH.len());
    for (spec, entry) in ARCH.iter().zip(entries.iter()) {
        if entry.name != spec.name {
            return Err(bad(
                &format!("tensor '{}'", entry.name),
                format!("expected '{}' at this position", spec.name),
            ));
        }
        if entry.shape != spec.shape {
            return Err(bad(
                &format!("tensor '{}' shape", spec.name),
                format!("expected {:?}, got {:?}", spec.shape, entry.shape),
            ));
        }
        if entry.dtype != "f32le" {
            return Err(bad(
                &format!("tensor '{}' dtype", spec.name),
                format!("expected f32le, got {}", entry.dtype),
            ));
        }
        let numel: usize = spec.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > container.payload.len() {
            return Err(bad("payload", format!("truncated at tensor '{}'", spec.name)));
        }
        params.push(le_bytes_to_f32s(&container.payload[start..end]));
    }
    let expected_len: usize = ARCH
        .iter()
        .map(|s| s.shape.iter().product::<usize>() * 4)
        .sum();
    if container.payload.len() != expected_len {
        return Err(bad(
            "payload",
            format!(
                "length {} does not match declared tensors ({expected_len})",
                container.payload.len()
            ),
        ));
    }
    UecModel::from_params(FORMAT_VERSION, params)
}

// ── Reference-feature sidecar ─────────────────────────────────────────

pub fn save_feature(feature: &ExposureFeature, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + FEATURE_LEN * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    f32s_to_le_bytes(feature.values(), &mut out);
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_feature(path: &Path) -> Result<ExposureFeature> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 8 {
        return Err(bad("header", "file truncated"));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("magic", "bad magic"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    if bytes.len() != 8 + FEATURE_LEN * 4 {
        return Err(bad(
            "payload",
            format!("expected {} floats", FEATURE_LEN),
        ));
    }
    ExposureFeature::new(le_bytes_to_f32s(&bytes[8..]))
}

// ── Training state ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TrainStateHeader {
    step: u64,
    tensors: Vec<HeaderEntry>,
}

pub fn save_train_state(state: &AdamState, path: &Path) -> Result<()> {
    let mut names = Vec::with_capacity(ARCH.len() * 2);
    let mut tensors: Vec<&[f32]> = Vec::with_capacity(ARCH.len() * 2);
    for (spec, m) in ARCH.iter().zip(state.m.iter()) {
        names.push(format!("adam.m.{}", spec.name));
        tensors.push(m);
    }
    for (spec, v) in ARCH.iter().zip(state.v.iter()) {
        names.push(format!("adam.v.{}", spec.name));
        tensors.push(v);
    }
    let (entries, payload) = tensor_entries(&names, &tensors);
    let header = serde_json::to_vec(&TrainStateHeader {
        step: state.step,
        tensors: entries,
    })?;
    std::fs::write(path, encode_container(TRAIN_STATE_MAGIC, &header, &payload))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_train_state(path: &Path) -> Result<AdamState> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let container = decode_container(&bytes, TRAIN_STATE_MAGIC)?;
    let header: TrainStateHeader =
        serde_json::from_slice(&container.header).map_err(|e| bad("header", e.to_string()))?;
    if header.tensors.len() != ARCH.len() * 2 {
        return Err(bad(
            "tensor count",
            format!("expected {}, got {}", ARCH.len() * 2, header.tensors.len()),
        ));
    }
    let read = |entry: &HeaderEntry, expected_name: &str, numel: usize| -> Result<Vec<f32>> {
        if entry.name != expected_name {
            return Err(bad(
                &format!("tensor '{}'", entry.name),
                format!("expected '{expected_name}'"),
            ));
        }
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > container.payload.len() {
            return Err(bad("payload", format!("truncated at '{expected_name}'")));
        }
        Ok(le_bytes_to_f32s(&container.payload[start..end]))
    };
    let mut m = Vec::with_capacity(ARCH.len());
    let mut v = Vec::with_capacity(ARCH.len());
    for (i, spec) in ARCH.iter().enumerate() {
        let numel: usize = spec.shape.iter().product();
        m.push(read(&header.tensors[i], &format!("adam.m.{}", spec.name), numel)?);
        v.push(read(
            &header.tensors[ARCH.len() + i],
            &format!("adam.v.{}", spec.name),
            numel,
        )?);
    }
    Ok(AdamState {
        step: header.step,
        m,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ueck");
        let model = UecModel::init(123);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.param_count(), loaded.param_count());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ueck");
        save_model(&UecModel::init(1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn edited_shape_is_rejected_naming_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ueck");
        save_model(&UecModel::init(2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len =
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let header = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let tampered = header.replacen("[16,3,3,3]", "[16,3,3,4]", 1);
        assert_ne!(header, tampered, "expected the header to embed the shape");
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[0..8]);
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        std::fs::write(&path, out).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(
            err.to_string().contains("encoder.conv1.weight"),
            "error should name the tensor: {err}"
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ueck");
        save_model(&UecModel::init(3), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn feature_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.uecf");
        let model = UecModel::init(4);
        let feature = model.encode(&crate::synthetic::test_scene(32, 32, 5));
        save_feature(&feature, &path).unwrap();
        assert_eq!(load_feature(&path).unwrap(), feature);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'!';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_feature(&path).is_err());
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.state");
        let model = UecModel::init(5);
        let mut state = AdamState::new(&model);
        state.step = 17;
        state.m[0][0] = 0.25;
        state.v[3][1] = 1.5;
        save_train_state(&state, &path).unwrap();
        let loaded = load_train_state(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.m, state.m);
        assert_eq!(loaded.v, state.v);
    }
}
