//! TSV-Merge: per-task truncation, concatenation, orthogonalization of the
//! concatenated singular bases, and reconstruction of merged weights.
//!
//! Matrix layers aggregate by summation `θ_pre + α U_⊥ Σ V_⊥ᵀ`; vector layers
//! fall back to the task-arithmetic mean `θ_pre + α · mean(δ_i)`. With both
//! toggles off, matrix layers use that same mean, which reproduces plain task
//! arithmetic.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::interference::{concat_basis, ConcatBasis, InterferenceReport, StiNorm};
use crate::linalg::{self, Matrix, OrthoMethod, WelfordMean};
use crate::rank::RankPolicy;
use crate::tensor::{
    check_deltas_aligned, check_deltas_match_pre, LayerKind, TaskDelta, Tensor, TensorMap,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub alpha: f64,
    /// `None` means `PerTask(T)` with `T` the number of merged tasks.
    pub rank_policy: Option<RankPolicy>,
    pub low_rank: bool,
    pub interference_reduction: bool,
    pub ortho_method: OrthoMethod,
    pub norm: StiNorm,
    /// Matrix layers forced onto the task-arithmetic path.
    pub layer_overrides: BTreeSet<String>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            alpha: 1.0,
            rank_policy: None,
            low_rank: true,
            interference_reduction: true,
            ortho_method: OrthoMethod::Procrustes,
            norm: StiNorm::Entrywise,
            layer_overrides: BTreeSet::new(),
        }
    }
}

impl MergeConfig {
    pub fn with_toggles(&self, low_rank: bool, interference_reduction: bool) -> MergeConfig {
        MergeConfig {
            low_rank,
            interference_reduction,
            ..self.clone()
        }
    }

    pub fn effective_policy(&self, tasks: usize) -> RankPolicy {
        self.rank_policy
            .unwrap_or(RankPolicy::PerTask(tasks.max(1)))
    }

    /// Short label of the toggle combination.
    pub fn label(&self) -> &'static str {
        match (self.low_rank, self.interference_reduction) {
            (false, false) => "ta",
            (true, false) => "lr",
            (false, true) => "ir",
            (true, true) => "tsvm",
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Precondition(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        if let OrthoMethod::EigenWhiten(eps) = self.ortho_method {
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::Precondition(format!(
                    "whitening eps must be >= 0, got {eps}"
                )));
            }
        }
        if let Some(p) = self.rank_policy {
            p.validate()?;
        }
        Ok(())
    }
}

/// Result of merging one matrix layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMerge {
    /// The aggregated update `M̂` (before `α` and `θ_pre`).
    pub merged: Matrix,
    /// Rank kept per task.
    pub rank: usize,
    /// `(‖Û − Û_⊥‖_F, ‖V̂ − V̂_⊥‖_F)`; present only with interference reduction.
    pub ortho_error: Option<(f64, f64)>,
    pub sti_before: f64,
    pub sti_after: f64,
}

fn ta_mean(deltas: &[&[f32]], shape: &[usize]) -> Result<Vec<f64>> {
    let mut acc = WelfordMean::new();
    for d in deltas {
        let widened: Vec<f64> = d.iter().map(|&x| f64::from(x)).collect();
        acc.update_slice(shape, &widened)?;
    }
    Ok(acc.mean().to_vec())
}

/// Merges one layer's task matrices.
pub fn merge_layer(deltas: &[Matrix], cfg: &MergeConfig) -> Result<LayerMerge> {
    cfg.validate()?;
    let first = deltas
        .first()
        .ok_or(Error::TooFewTasks { need: 1, got: 0 })?;
    let (rows, cols) = first.shape();
    if let Some(bad) = deltas.iter().find(|d| d.shape() != (rows, cols)) {
        return Err(Error::DimensionMismatch(format!(
            "task matrix is {}x{}, expected {rows}x{cols}",
            bad.nrows(),
            bad.ncols()
        )));
    }
    let rank = if cfg.low_rank {
        cfg.effective_policy(deltas.len()).rank_for(rows, cols)?
    } else {
        rows.min(cols)
    };
    let factors = deltas
        .iter()
        .map(|d| linalg::svd(d)?.truncate(rank))
        .collect::<Result<Vec<_>>>()?;
    let basis = concat_basis(&factors)?;
    let sti_before = basis.sti_with(cfg.norm);

    if cfg.interference_reduction {
        let u = cfg.ortho_method.apply(&basis.u)?;
        let v = cfg.ortho_method.apply(&basis.v)?;
        let ortho_error = ((&basis.u - &u).norm(), (&basis.v - &v).norm());
        let orthogonal = ConcatBasis { u, v, ..basis };
        return Ok(LayerMerge {
            merged: orthogonal.reconstruct(),
            rank,
            ortho_error: Some(ortho_error),
            sti_before,
            sti_after: orthogonal.sti_with(cfg.norm),
        });
    }

    let merged = if cfg.low_rank {
        basis.reconstruct()
    } else {
        let mut acc = WelfordMean::new();
        for d in deltas {
            acc.update_slice(&[rows, cols], d.as_slice())?;
        }
        Matrix::from_column_slice(rows, cols, acc.mean())
    };
    Ok(LayerMerge {
        merged,
        rank,
        ortho_error: None,
        sti_before,
        sti_after: sti_before,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub rank: usize,
    pub ortho_err_u: Option<f64>,
    pub ortho_err_v: Option<f64>,
    pub sti_before: f64,
    pub sti_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub weights: TensorMap,
    pub layers: BTreeMap<String, LayerRecord>,
    pub sti_before: InterferenceReport,
    pub sti_after: InterferenceReport,
    pub config: MergeConfig,
    pub rank_policy: RankPolicy,
}

impl MergeResult {
    pub fn per_layer_ortho_error(&self) -> BTreeMap<&str, (f64, f64)> {
        self.layers
            .iter()
            .filter_map(|(n, r)| Some((n.as_str(), (r.ortho_err_u?, r.ortho_err_v?))))
            .collect()
    }

    /// Mean of `(‖Û − Û_⊥‖_F, ‖V̂ − V̂_⊥‖_F)` across matrix layers.
    pub fn mean_ortho_error(&self) -> Option<(f64, f64)> {
        let errs = self.per_layer_ortho_error();
        if errs.is_empty() {
            return None;
        }
        let n = errs.len() as f64;
        let (su, sv) = errs
            .values()
            .fold((0.0, 0.0), |(a, b), (u, v)| (a + u, b + v));
        Some((su / n, sv / n))
    }

    pub fn report_json(&self) -> serde_json::Value {
        let mean = self.mean_ortho_error();
        json!({
            "alpha": self.config.alpha,
            "rank_policy": self.rank_policy,
            "toggles": {
                "low_rank": self.config.low_rank,
                "interference_reduction": self.config.interference_reduction,
                "ortho_method": self.config.ortho_method.to_string(),
            },
            "norm": self.config.norm,
            "per_layer": self.layers,
            "totals": {
                "sti_before": self.sti_before.total,
                "sti_after": self.sti_after.total,
                "mean_ortho_err_u": mean.map(|m| m.0),
                "mean_ortho_err_v": mean.map(|m| m.1),
            },
        })
    }
}

enum LayerOutput {
    Matrix(Tensor, LayerRecord),
    Vector(Tensor),
}

/// Merges task deltas into `pre`. Tensors of `pre` absent from the deltas are
/// copied unchanged.
pub fn merge(pre: &TensorMap, deltas: &[TaskDelta], cfg: &MergeConfig) -> Result<MergeResult> {
    cfg.validate()?;
    let first = deltas
        .first()
        .ok_or(Error::TooFewTasks { need: 1, got: 0 })?;
    check_deltas_aligned(deltas)?;
    check_deltas_match_pre(pre, deltas)?;
    let policy = cfg.effective_policy(deltas.len());

    let names: Vec<&String> = first.layers.keys().collect();
    let outputs = names
        .par_iter()
        .map(|&name| {
            let kind = if cfg.layer_overrides.contains(name) {
                LayerKind::Vector
            } else {
                first.layers[name].kind()
            };
            merge_named_layer(pre, deltas, cfg, name, kind).map_err(|e| e.in_layer(name))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut weights = pre.clone();
    let mut layers = BTreeMap::new();
    for (name, out) in names.into_iter().zip(outputs) {
        match out {
            LayerOutput::Matrix(t, record) => {
                weights.insert(name.clone(), t);
                layers.insert(name.clone(), record);
            }
            LayerOutput::Vector(t) => {
                weights.insert(name.clone(), t);
            }
        }
    }
    let before = layers
        .iter()
        .map(|(n, r)| (n.clone(), r.sti_before))
        .collect();
    let after = layers
        .iter()
        .map(|(n, r)| (n.clone(), r.sti_after))
        .collect();
    Ok(MergeResult {
        weights,
        sti_before: InterferenceReport::new(before, cfg.norm, policy),
        sti_after: InterferenceReport::new(after, cfg.norm, policy),
        layers,
        config: cfg.clone(),
        rank_policy: policy,
    })
}

fn merge_named_layer(
    pre: &TensorMap,
    deltas: &[TaskDelta],
    cfg: &MergeConfig,
    name: &str,
    kind: LayerKind,
) -> Result<LayerOutput> {
    let base = &pre.entries[name];
    match kind {
        LayerKind::Matrix => {
            let matrices: Vec<Matrix> = deltas
                .iter()
                .map(|d| d.layers[name].tensor().to_matrix())
                .collect();
            let lm = merge_layer(&matrices, cfg)?;
            let weights = base.to_matrix() + &lm.merged * cfg.alpha;
            let record = LayerRecord {
                rank: lm.rank,
                ortho_err_u: lm.ortho_error.map(|e| e.0),
                ortho_err_v: lm.ortho_error.map(|e| e.1),
                sti_before: lm.sti_before,
                sti_after: lm.sti_after,
            };
            Ok(LayerOutput::Matrix(Tensor::from_matrix(&weights), record))
        }
        LayerKind::Vector => {
            let slices: Vec<&[f32]> = deltas
                .iter()
                .map(|d| d.layers[name].tensor().data())
                .collect();
            let mean = ta_mean(&slices, base.shape())?;
            let data = base
                .data()
                .iter()
                .zip(&mean)
                .map(|(&p, &m)| (f64::from(p) + cfg.alpha * m) as f32)
                .collect();
            Ok(LayerOutput::Vector(Tensor::new(
                base.shape().to_vec(),
                data,
            )?))
        }
    }
}

/// One row of the low-rank × interference-reduction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub result: MergeResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, low_rank: bool, interference_reduction: bool) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| {
                r.result.config.low_rank == low_rank
                    && r.result.config.interference_reduction == interference_reduction
            })
            .expect("ablation grid is complete")
    }

    pub fn report_json(&self) -> serde_json::Value {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                let mean = r.result.mean_ortho_error();
                json!({
                    "label": r.label,
                    "low_rank": r.result.config.low_rank,
                    "interference_reduction": r.result.config.interference_reduction,
                    "sti_before": r.result.sti_before.total,
                    "sti_after": r.result.sti_after.total,
                    "mean_ortho_err_u": mean.map(|m| m.0),
                    "mean_ortho_err_v": mean.map(|m| m.1),
                })
            })
            .collect();
        json!({ "rows": rows })
    }
}

/// Runs all four toggle combinations with the shared settings of `base`.
pub fn ablation_suite(
    pre: &TensorMap,
    deltas: &[TaskDelta],
    base: &MergeConfig,
) -> Result<AblationReport> {
    let rows = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(lr, ir)| {
            let cfg = base.with_toggles(lr, ir);
            let result = merge(pre, deltas, &cfg)?;
            Ok(AblationRow {
                label: cfg.label(),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
