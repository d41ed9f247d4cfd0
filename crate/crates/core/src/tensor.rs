//! Checkpoint tensors, the safetensors container, and task deltas.
//!
//! All tensors are held in `f32` working precision. `F16` and `BF16`
//! payloads are widened on load; writes default to `F32`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use nalgebra::DMatrix;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dtype::parse(&s.to_ascii_uppercase()).ok_or_else(|| Error::UnsupportedDtype {
            name: String::new(),
            dtype: s.to_string(),
        })
    }
}

/// A dense row-major tensor in `f32` working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        Tensor::with_dtype(shape, Dtype::F32, data)
    }

    pub fn with_dtype(shape: Vec<usize>, dtype: Dtype, data: Vec<f32>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, dtype, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            dtype: Dtype::F32,
            data: vec![0.0; numel],
        }
    }

    /// Builds a 2-D tensor from a matrix, rounding to `f32`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Tensor {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)] as f32);
            }
        }
        Tensor {
            shape: vec![rows, cols],
            dtype: Dtype::F32,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Widens a 2-D tensor into an `f64` matrix.
    ///
    /// Panics if the tensor is not 2-D.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        assert_eq!(
            self.shape.len(),
            2,
            "to_matrix on a {}-D tensor",
            self.shape.len()
        );
        DMatrix::from_row_iterator(
            self.shape[0],
            self.shape[1],
            self.data.iter().map(|&x| f64::from(x)),
        )
    }
}

/// Named tensors iterated in lexicographic order, plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub entries: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> TensorMap {
        TensorMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Matrix,
    Vector,
}

/// Matrix iff the shape is 2-D with both dimensions at least 2.
pub fn classify_param(shape: &[usize]) -> LayerKind {
    match shape {
        [rows, cols] if *rows >= 2 && *cols >= 2 => LayerKind::Matrix,
        _ => LayerKind::Vector,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDelta {
    Matrix(Tensor),
    /// Treated as a flat vector; the original shape is kept for reassembly.
    Vector(Tensor),
}

impl LayerDelta {
    pub fn tensor(&self) -> &Tensor {
        match self {
            LayerDelta::Matrix(t) | LayerDelta::Vector(t) => t,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerDelta::Matrix(_) => LayerKind::Matrix,
            LayerDelta::Vector(_) => LayerKind::Vector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDelta {
    pub task_id: String,
    pub layers: BTreeMap<String, LayerDelta>,
}

impl TaskDelta {
    /// Reclassifies the named matrix layers as vector layers.
    pub fn force_vector<S: AsRef<str>>(&mut self, names: &[S]) {
        for name in names {
            if let Some(layer) = self.layers.get_mut(name.as_ref()) {
                if let LayerDelta::Matrix(t) = layer {
                    *layer = LayerDelta::Vector(t.clone());
                }
            }
        }
    }

    pub fn matrix_layers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.layers.iter().filter_map(|(name, layer)| match layer {
            LayerDelta::Matrix(t) => Some((name, t)),
            LayerDelta::Vector(_) => None,
        })
    }
}

/// Per-task weight differences `ft - pre`, one [`TaskDelta`] per fine-tuned map.
///
/// Task ids default to `task{i}`.
pub fn compute_task_deltas(pre: &TensorMap, fts: &[TensorMap]) -> Result<Vec<TaskDelta>> {
    fts.iter()
        .enumerate()
        .map(|(i, ft)| compute_task_delta(format!("task{i}"), pre, ft))
        .collect()
}

pub fn compute_task_delta(task_id: String, pre: &TensorMap, ft: &TensorMap) -> Result<TaskDelta> {
    check_aligned(pre, ft)?;
    let mut layers = BTreeMap::new();
    for (name, p) in pre.iter() {
        let f = &ft.entries[name];
        let data: Vec<f32> = f.data.iter().zip(&p.data).map(|(a, b)| a - b).collect();
        let tensor = Tensor {
            shape: p.shape.clone(),
            dtype: Dtype::F32,
            data,
        };
        let layer = match classify_param(&p.shape) {
            LayerKind::Matrix => LayerDelta::Matrix(tensor),
            LayerKind::Vector => LayerDelta::Vector(tensor),
        };
        layers.insert(name.clone(), layer);
    }
    Ok(TaskDelta { task_id, layers })
}

/// All deltas share the first delta's layer names, kinds and shapes.
pub fn check_deltas_aligned(deltas: &[TaskDelta]) -> Result<()> {
    let Some(first) = deltas.first() else {
        return Ok(());
    };
    for other in &deltas[1..] {
        for name in first.layers.keys() {
            if !other.layers.contains_key(name) {
                return Err(Error::NameMismatch {
                    name: name.clone(),
                    reason: format!("missing from task {:?}", other.task_id),
                });
            }
        }
        for (name, layer) in &other.layers {
            let Some(reference) = first.layers.get(name) else {
                return Err(Error::NameMismatch {
                    name: name.clone(),
                    reason: format!("only present in task {:?}", other.task_id),
                });
            };
            if reference.tensor().shape() != layer.tensor().shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: reference.tensor().shape().to_vec(),
                    found: layer.tensor().shape().to_vec(),
                });
            }
            if reference.kind() != layer.kind() {
                return Err(Error::NameMismatch {
                    name: name.clone(),
                    reason: "layer classified differently across tasks".into(),
                });
            }
        }
    }
    Ok(())
}

/// Every delta layer exists in `pre` with the same shape.
pub fn check_deltas_match_pre(pre: &TensorMap, deltas: &[TaskDelta]) -> Result<()> {
    for delta in deltas {
        for (name, layer) in &delta.layers {
            let p = pre.get(name).ok_or_else(|| Error::NameMismatch {
                name: name.clone(),
                reason: "not present in pre-trained checkpoint".into(),
            })?;
            if p.shape() != layer.tensor().shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: layer.tensor().shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

fn check_aligned(pre: &TensorMap, ft: &TensorMap) -> Result<()> {
    if let Some(name) = pre.names().find(|n| !ft.entries.contains_key(*n)) {
        return Err(Error::NameMismatch {
            name: name.to_string(),
            reason: "missing from fine-tuned checkpoint".into(),
        });
    }
    if let Some(name) = ft.names().find(|n| !pre.entries.contains_key(*n)) {
        return Err(Error::NameMismatch {
            name: name.to_string(),
            reason: "not present in pre-trained checkpoint".into(),
        });
    }
    for (name, p) in pre.iter() {
        let f = &ft.entries[name];
        if p.shape != f.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: p.shape.clone(),
                found: f.shape.clone(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// safetensors container
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Top-level header object, keeping every key so duplicates can be reported.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct RawVisitor;

        impl<'de> Visitor<'de> for RawVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }

        deserializer.deserialize_map(RawVisitor)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TensorMap> {
    let file_len = bytes.len() as u64;
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload {
            expected: 8,
            actual: file_len,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end =
        header_len
            .checked_add(8)
            .filter(|&e| e <= file_len)
            .ok_or(Error::TruncatedPayload {
                expected: header_len.saturating_add(8),
                actual: file_len,
            })? as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(header.trim_end_matches(' '))
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut map = TensorMap::new();
    let mut seen = BTreeSet::new();
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        if name == METADATA_KEY {
            map.metadata = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("__metadata__: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
        let tensor = decode_tensor(&name, entry, payload)?;
        map.entries.insert(name, tensor);
    }
    Ok(map)
}

fn decode_tensor(name: &str, entry: HeaderEntry, payload: &[u8]) -> Result<Tensor> {
    let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| Error::UnsupportedDtype {
        name: name.to_string(),
        dtype: entry.dtype.clone(),
    })?;
    let [begin, end] = entry.data_offsets;
    let numel = entry
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader(format!("shape of {name:?} overflows")))?;
    if end < begin || (end - begin) != (numel * dtype.size()) as u64 {
        return Err(Error::MalformedHeader(format!(
            "offsets [{begin}, {end}) of {name:?} do not match shape {:?} and dtype {dtype}",
            entry.shape
        )));
    }
    if end > payload.len() as u64 {
        return Err(Error::TruncatedPayload {
            expected: end,
            actual: payload.len() as u64,
        });
    }
    let raw = &payload[begin as usize..end as usize];
    let data: Vec<f32> = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };
    let tensor = Tensor::with_dtype(entry.shape, dtype, data).map_err(|e| match e {
        Error::InvalidTensor { reason, .. } => Error::InvalidTensor {
            name: name.to_string(),
            reason,
        },
        e => e,
    })?;
    if !tensor.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(tensor)
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_as(map, path, Dtype::F32)
}

/// Writes `map` with every tensor stored as `dtype`.
pub fn save_checkpoint_as(map: &TensorMap, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(map, dtype)?;
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_checkpoint(map: &TensorMap, dtype: Dtype) -> Result<Vec<u8>> {
    if let Some((name, _)) = map.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(name.clone()));
    }

    let mut header = serde_json::Map::new();
    if !map.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&map.metadata).expect("string map serializes"),
        );
    }
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        let len = (tensor.numel() * dtype.size()) as u64;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": dtype.as_str(),
                "shape": tensor.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header = serde_json::to_string(&header).expect("header serializes");
    // pad so the payload starts 8-byte aligned
    while !header.len().is_multiple_of(8) {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for tensor in map.entries.values() {
        match dtype {
            Dtype::F32 => tensor
                .data
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Dtype::F16 => tensor
                .data
                .iter()
                .for_each(|&x| out.extend_from_slice(&f16::from_f32(x).to_le_bytes())),
            Dtype::BF16 => tensor
                .data
                .iter()
                .for_each(|&x| out.extend_from_slice(&bf16::from_f32(x).to_le_bytes())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn raw_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn single_tensor_roundtrip() {
        let mut map = TensorMap::new();
        map.insert("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let back = decode_checkpoint(&encode_checkpoint(&map, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.get("w").unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_container() {
        let bytes = raw_file("{}", &[]);
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
        let encoded = encode_checkpoint(&TensorMap::new(), Dtype::F32).unwrap();
        assert!(decode_checkpoint(&encoded).unwrap().is_empty());
    }

    #[test]
    fn header_length_beyond_file() {
        let mut bytes = raw_file("{}", &[]);
        bytes[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&[1, 2, 3]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn payload_shorter_than_offsets() {
        let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let bytes = raw_file(header, &[0, 0, 0, 0]);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::TruncatedPayload {
                expected: 8,
                actual: 4
            })
        ));
    }

    #[test]
    fn distinct_error_kinds() {
        let bad_json = raw_file("{not json", &[]);
        assert!(matches!(
            decode_checkpoint(&bad_json),
            Err(Error::MalformedHeader(_))
        ));

        let i8_header = r#"{"q":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(i8_header, &[0])),
            Err(Error::UnsupportedDtype { .. })
        ));

        let dup = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(dup, &[0; 4])),
            Err(Error::DuplicateName(n)) if n == "a"
        ));

        let wrong_len = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(wrong_len, &[0; 4])),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn half_precision_widened() {
        let mut payload = Vec::new();
        payload.extend_from_slice(&f16::from_f32(1.5).to_le_bytes());
        payload.extend_from_slice(&f16::from_f32(-2.0).to_le_bytes());
        payload.extend_from_slice(&bf16::from_f32(0.25).to_le_bytes());
        let header = r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"b":{"dtype":"BF16","shape":[1],"data_offsets":[4,6]}}"#;
        let map = decode_checkpoint(&raw_file(header, &payload)).unwrap();
        assert_eq!(map.get("a").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(map.get("a").unwrap().dtype(), Dtype::F16);
        assert_eq!(map.get("b").unwrap().data(), &[0.25]);
    }

    #[test]
    fn narrowing_on_request() {
        let mut map = TensorMap::new();
        map.insert("a", t(&[3], &[1.0, 0.5, -4.0]));
        let bytes = encode_checkpoint(&map, Dtype::BF16).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.get("a").unwrap().dtype(), Dtype::BF16);
        assert_eq!(back.get("a").unwrap().data(), &[1.0, 0.5, -4.0]);
    }

    #[test]
    fn header_lists_names_lexicographically() {
        let mut map = TensorMap::new();
        map.insert("zeta", t(&[1], &[1.0]));
        map.insert("alpha", t(&[1], &[2.0]));
        map.insert("mid", t(&[1], &[3.0]));
        map.metadata.insert("k".into(), "v".into());
        let bytes = encode_checkpoint(&map, Dtype::F32).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        let a = header.find("\"alpha\"").unwrap();
        let m = header.find("\"mid\"").unwrap();
        let z = header.find("\"zeta\"").unwrap();
        assert!(a < m && m < z);
        // payload order follows the header
        assert_eq!(&bytes[8 + n..8 + n + 4], &2.0f32.to_le_bytes());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), map);
    }

    #[test]
    fn nan_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let mut map = TensorMap::new();
        map.insert("w", t(&[2], &[1.0, f32::NAN]));
        assert!(matches!(
            save_checkpoint(&map, &path),
            Err(Error::NonFinite(_))
        ));
        assert!(!path.exists());
    }

    #[test]
    fn non_finite_payload_rejected_on_load() {
        let header = r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let bytes = raw_file(header, &f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn unwritable_path() {
        let map = TensorMap::new();
        let err = save_checkpoint(&map, "/nonexistent-dir/x/y.safetensors").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn classification() {
        assert_eq!(classify_param(&[768, 768]), LayerKind::Matrix);
        assert_eq!(classify_param(&[768]), LayerKind::Vector);
        assert_eq!(classify_param(&[1, 512]), LayerKind::Vector);
        assert_eq!(classify_param(&[512, 1]), LayerKind::Vector);
        assert_eq!(classify_param(&[2, 3, 4]), LayerKind::Vector);
        assert_eq!(classify_param(&[]), LayerKind::Vector);
    }

    #[test]
    fn deltas_identity_and_values() {
        let mut pre = TensorMap::new();
        pre.insert("w", t(&[2, 2], &[0.0; 4]));
        pre.insert("b", t(&[2], &[1.0, 1.0]));
        let deltas = compute_task_deltas(&pre, &[pre.clone()]).unwrap();
        assert_eq!(deltas.len(), 1);
        assert!(deltas[0]
            .layers
            .values()
            .all(|l| l.tensor().data().iter().all(|&x| x == 0.0)));

        let mut ft = pre.clone();
        ft.insert("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let d = compute_task_deltas(&pre, &[ft]).unwrap();
        match &d[0].layers["w"] {
            LayerDelta::Matrix(m) => assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]),
            other => panic!("expected matrix delta, got {other:?}"),
        }
        assert_eq!(d[0].layers["b"].kind(), LayerKind::Vector);
    }

    #[test]
    fn delta_alignment_errors() {
        let mut pre = TensorMap::new();
        pre.insert("w", t(&[2, 2], &[0.0; 4]));
        pre.insert("b", t(&[2], &[0.0; 2]));
        let mut missing = pre.clone();
        missing.entries.remove("b");
        match compute_task_deltas(&pre, &[missing]) {
            Err(Error::NameMismatch { name, .. }) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        let mut reshaped = pre.clone();
        reshaped.insert("w", t(&[4], &[0.0; 4]));
        match compute_task_deltas(&pre, &[reshaped]) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        let mut extra = pre.clone();
        extra.insert("x", t(&[1], &[0.0]));
        assert!(matches!(
            compute_task_deltas(&pre, &[extra]),
            Err(Error::NameMismatch { .. })
        ));
    }

    #[test]
    fn force_vector_override() {
        let mut pre = TensorMap::new();
        pre.insert("emb", t(&[3, 2], &[0.0; 6]));
        let mut d = compute_task_deltas(&pre, &[pre.clone()]).unwrap().remove(0);
        assert_eq!(d.layers["emb"].kind(), LayerKind::Matrix);
        d.force_vector(&["emb"]);
        assert_eq!(d.layers["emb"].kind(), LayerKind::Vector);
    }
}
