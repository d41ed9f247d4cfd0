//! Per-task low-rank compression of task deltas (TSV-C), the factor file
//! format, and storage accounting.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interference::layer_factors;
use crate::linalg::{Matrix, SvdFactors};
use crate::rank::RankPolicy;
use crate::tensor::{self, classify_param, LayerDelta, LayerKind, TaskDelta, Tensor, TensorMap};

const FORMAT_TAG: &str = "tsv-c/1";

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    /// Factors rounded to `f32`, so they persist exactly.
    pub factors: SvdFactors,
    pub rows: usize,
    pub cols: usize,
}

impl CompressedLayer {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTask {
    pub task_id: String,
    pub layers: BTreeMap<String, CompressedLayer>,
    pub vector_layers: BTreeMap<String, Tensor>,
    pub rank_policy: RankPolicy,
}

impl CompressedTask {
    pub fn ranks(&self) -> BTreeMap<&str, usize> {
        self.layers
            .iter()
            .map(|(name, l)| (name.as_str(), l.rank()))
            .collect()
    }

    /// Number of stored scalars: `d·k′ + k′ + k′·m` per matrix layer plus
    /// every vector-layer element.
    pub fn stored_params(&self) -> u64 {
        let matrix: u64 = self
            .layers
            .values()
            .map(|l| tsv_params(l.rows, l.cols, l.rank()))
            .sum();
        let vector: u64 = self.vector_layers.values().map(|t| t.numel() as u64).sum();
        matrix + vector
    }

    /// The low-rank task delta `Σ_j σ_j u_j v_jᵀ` per layer.
    pub fn to_delta(&self) -> TaskDelta {
        let mut layers = BTreeMap::new();
        for (name, l) in &self.layers {
            layers.insert(
                name.clone(),
                LayerDelta::Matrix(Tensor::from_matrix(&l.factors.reconstruct())),
            );
        }
        for (name, t) in &self.vector_layers {
            layers.insert(name.clone(), LayerDelta::Vector(t.clone()));
        }
        TaskDelta {
            task_id: self.task_id.clone(),
            layers,
        }
    }
}

/// Replaces each matrix layer of `delta` by its top-`k′` singular triplets.
pub fn compress(delta: &TaskDelta, rank_policy: RankPolicy) -> Result<CompressedTask> {
    rank_policy.validate()?;
    let matrices: Vec<(&String, &Tensor)> = delta.matrix_layers().collect();
    let layers = matrices
        .par_iter()
        .map(|&(name, t)| {
            let m = t.to_matrix();
            let factors = layer_factors(&m, rank_policy)
                .map_err(|e| e.in_layer(name))?
                .round_to_f32();
            Ok((
                name.clone(),
                CompressedLayer {
                    factors,
                    rows: m.nrows(),
                    cols: m.ncols(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    let vector_layers = delta
        .layers
        .iter()
        .filter_map(|(name, layer)| match layer {
            LayerDelta::Vector(t) => Some((name.clone(), t.clone())),
            LayerDelta::Matrix(_) => None,
        })
        .collect();
    Ok(CompressedTask {
        task_id: delta.task_id.clone(),
        layers,
        vector_layers,
        rank_policy,
    })
}

/// `θ_pre + α Δ̂` for every compressed layer; other tensors of `pre` are copied.
pub fn expand(ct: &CompressedTask, pre: &TensorMap, alpha: f64) -> Result<TensorMap> {
    if !alpha.is_finite() {
        return Err(Error::Precondition(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    let mut out = pre.clone();
    for (name, layer) in &ct.layers {
        let p = lookup(pre, name, &[layer.rows, layer.cols])?;
        let approx = layer.factors.reconstruct();
        let merged = p.to_matrix() + approx * alpha;
        out.insert(name.clone(), Tensor::from_matrix(&merged));
    }
    for (name, delta) in &ct.vector_layers {
        let p = lookup(pre, name, delta.shape())?;
        let data = p
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&a, &b)| (f64::from(a) + alpha * f64::from(b)) as f32)
            .collect();
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?);
    }
    Ok(out)
}

fn lookup<'a>(pre: &'a TensorMap, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let p = pre.get(name).ok_or_else(|| Error::NameMismatch {
        name: name.to_string(),
        reason: "not present in pre-trained checkpoint".into(),
    })?;
    if p.shape() != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: p.shape().to_vec(),
            found: shape.to_vec(),
        });
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// factor file
// ---------------------------------------------------------------------------

fn row_major(m: &Matrix) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)] as f32);
        }
    }
    out
}

/// Encodes `ct` as a container with `<layer>.U`, `<layer>.S`, `<layer>.Vt`
/// and `<layer>.vec` entries.
pub fn to_tensor_map(ct: &CompressedTask) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    let mut shapes = BTreeMap::new();
    for (name, l) in &ct.layers {
        let k = l.rank();
        let f = &l.factors;
        map.insert(
            format!("{name}.U"),
            Tensor::new(vec![l.rows, k], row_major(&f.u))?,
        );
        map.insert(
            format!("{name}.S"),
            Tensor::new(vec![k], f.s.iter().map(|&x| x as f32).collect())?,
        );
        map.insert(
            format!("{name}.Vt"),
            Tensor::new(vec![k, l.cols], row_major(&f.v.transpose()))?,
        );
        shapes.insert(name.clone(), vec![l.rows, l.cols]);
    }
    for (name, t) in &ct.vector_layers {
        map.insert(format!("{name}.vec"), t.clone());
        shapes.insert(name.clone(), t.shape().to_vec());
    }
    map.metadata.insert("format".into(), FORMAT_TAG.into());
    map.metadata.insert("task_id".into(), ct.task_id.clone());
    map.metadata
        .insert("rank_policy".into(), ct.rank_policy.to_string());
    map.metadata.insert(
        "original_shapes".into(),
        serde_json::to_string(&shapes).expect("shape map serializes"),
    );
    Ok(map)
}

pub fn from_tensor_map(map: &TensorMap) -> Result<CompressedTask> {
    let meta = |key: &str| {
        map.metadata.get(key).ok_or_else(|| {
            Error::MalformedHeader(format!("compressed task lacks metadata {key:?}"))
        })
    };
    if meta("format")? != FORMAT_TAG {
        return Err(Error::MalformedHeader(format!(
            "unknown compressed format {:?}",
            meta("format")?
        )));
    }
    let task_id = meta("task_id")?.clone();
    let rank_policy: RankPolicy = meta("rank_policy")?.parse()?;
    let shapes: BTreeMap<String, Vec<usize>> = serde_json::from_str(meta("original_shapes")?)
        .map_err(|e| Error::MalformedHeader(format!("original_shapes: {e}")))?;

    let mut layers = BTreeMap::new();
    let mut vector_layers = BTreeMap::new();
    let mut consumed = 0;
    for (name, shape) in shapes {
        let get = |suffix: &str| {
            map.get(&format!("{name}.{suffix}")).ok_or_else(|| {
                Error::MalformedHeader(format!("compressed task lacks {name}.{suffix}"))
            })
        };
        if let Some(vec) = map.get(&format!("{name}.vec")) {
            if vec.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: vec.shape().to_vec(),
                });
            }
            vector_layers.insert(name, vec.clone());
            consumed += 1;
            continue;
        }
        let [rows, cols] = shape[..] else {
            return Err(Error::MalformedHeader(format!(
                "matrix layer {name:?} has shape {shape:?}"
            )));
        };
        let (u, s, vt) = (get("U")?, get("S")?, get("Vt")?);
        let k = s.numel();
        if u.shape() != [rows, k] || vt.shape() != [k, cols] || k == 0 {
            return Err(Error::MalformedHeader(format!(
                "factor shapes of {name:?} inconsistent: U {:?}, S {:?}, Vt {:?}",
                u.shape(),
                s.shape(),
                vt.shape()
            )));
        }
        let factors = SvdFactors {
            u: Matrix::from_row_iterator(rows, k, u.data().iter().map(|&x| f64::from(x))),
            s: s.data().iter().map(|&x| f64::from(x)).collect(),
            v: Matrix::from_row_iterator(k, cols, vt.data().iter().map(|&x| f64::from(x)))
                .transpose(),
        };
        layers.insert(
            name,
            CompressedLayer {
                factors,
                rows,
                cols,
            },
        );
        consumed += 3;
    }
    if consumed != map.len() {
        return Err(Error::MalformedHeader(
            "compressed task contains entries not listed in original_shapes".into(),
        ));
    }
    Ok(CompressedTask {
        task_id,
        layers,
        vector_layers,
        rank_policy,
    })
}

pub fn save_compressed(ct: &CompressedTask, path: impl AsRef<Path>) -> Result<()> {
    tensor::save_checkpoint(&to_tensor_map(ct)?, path)
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<CompressedTask> {
    from_tensor_map(&tensor::load_checkpoint(path)?)
}

// ---------------------------------------------------------------------------
// storage accounting
// ---------------------------------------------------------------------------

/// Stored scalars for one rank-`k` factorization of a `d × m` layer.
pub fn tsv_params(rows: usize, cols: usize, k: usize) -> u64 {
    (rows * k + k + k * cols) as u64
}

/// Largest integer `k` with `k · (d + m + 1) < d · m`.
pub fn rank_threshold(rows: usize, cols: usize) -> usize {
    (rows * cols - 1) / (rows + cols + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStorage {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub params_nn: u64,
    pub params_tsv: u64,
    pub rank_threshold: usize,
    pub saves_storage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub rank_policy: RankPolicy,
    /// Number of matrix layers (L).
    pub matrix_layers: usize,
    /// Number of vector layers (N).
    pub vector_layers: usize,
    /// Total vector-layer elements (the N·c term).
    pub vector_params: u64,
    pub params_nn: u64,
    pub params_tsv: u64,
    pub ratio: f64,
    pub layers: Vec<LayerStorage>,
    /// Every matrix layer satisfies `k′ < d·m / (d + m + 1)`.
    pub within_threshold: bool,
}

impl StorageReport {
    pub fn violations(&self) -> impl Iterator<Item = &LayerStorage> {
        self.layers.iter().filter(|l| !l.saves_storage)
    }
}

pub fn storage_report<S: AsRef<str>>(
    shapes: &[(S, Vec<usize>)],
    rank_policy: RankPolicy,
) -> Result<StorageReport> {
    if shapes.is_empty() {
        return Err(Error::Precondition(
            "storage report needs at least one layer".into(),
        ));
    }
    rank_policy.validate()?;
    let mut layers = Vec::new();
    let mut vector_layers = 0;
    let mut vector_params = 0u64;
    for (name, shape) in shapes {
        match classify_param(shape) {
            LayerKind::Matrix => {
                let (rows, cols) = (shape[0], shape[1]);
                let rank = rank_policy
                    .rank_for(rows, cols)
                    .map_err(|e| e.in_layer(name.as_ref()))?;
                let threshold = rank_threshold(rows, cols);
                layers.push(LayerStorage {
                    name: name.as_ref().to_string(),
                    rows,
                    cols,
                    rank,
                    params_nn: (rows * cols) as u64,
                    params_tsv: tsv_params(rows, cols, rank),
                    rank_threshold: threshold,
                    saves_storage: rank <= threshold,
                });
            }
            LayerKind::Vector => {
                vector_layers += 1;
                vector_params += shape.iter().product::<usize>() as u64;
            }
        }
    }
    let params_nn = layers.iter().map(|l| l.params_nn).sum::<u64>() + vector_params;
    let params_tsv = layers.iter().map(|l| l.params_tsv).sum::<u64>() + vector_params;
    Ok(StorageReport {
        rank_policy,
        matrix_layers: layers.len(),
        vector_layers,
        vector_params,
        params_nn,
        params_tsv,
        ratio: params_tsv as f64 / params_nn as f64,
        within_threshold: layers.iter().all(|l| l.saves_storage),
        layers,
    })
}

pub fn model_shapes(map: &TensorMap) -> Vec<(String, Vec<usize>)> {
    map.iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// rank sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    /// Mean over matrix layers of `‖Δ − Δ̂_k‖_F / ‖Δ‖_F` (zero layers count as 0).
    pub mean_relative_error: f64,
}

/// Reconstruction error of the delta's matrix layers at each retained fraction.
pub fn rank_sweep(delta: &TaskDelta, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    let policies: Vec<RankPolicy> = fractions.iter().map(|&f| RankPolicy::Fraction(f)).collect();
    for p in &policies {
        p.validate()?;
    }
    let matrices: Vec<(&String, &Tensor)> = delta.matrix_layers().collect();
    if matrices.is_empty() {
        return Ok(fractions
            .iter()
            .map(|&fraction| SweepPoint {
                fraction,
                mean_relative_error: 0.0,
            })
            .collect());
    }
    // per layer: singular values and the rank each fraction maps to
    let spectra = matrices
        .par_iter()
        .map(|&(name, t)| {
            let m = t.to_matrix();
            let f = crate::linalg::svd(&m).map_err(|e| e.in_layer(name))?;
            let ranks = policies
                .iter()
                .map(|p| p.rank_for(m.nrows(), m.ncols()))
                .collect::<Result<Vec<_>>>()?;
            Ok((f.s, ranks))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| {
            let total: f64 = spectra
                .iter()
                .map(|(s, ranks)| truncation_error(s, ranks[i]))
                .sum();
            SweepPoint {
                fraction,
                mean_relative_error: total / spectra.len() as f64,
            }
        })
        .collect();
    Ok(points)
}

/// `‖A − A_k‖_F / ‖A‖_F` from the spectrum of `A`.
fn truncation_error(s: &[f64], k: usize) -> f64 {
    let energy: f64 = s.iter().map(|x| x * x).sum();
    if energy == 0.0 {
        return 0.0;
    }
    let tail: f64 = s[k.min(s.len())..].iter().map(|x| x * x).sum();
    (tail / energy).sqrt()
}
