//! Concatenated task singular bases and the singular task interference
//! (STI) score `‖(UᵀU − I) Σ (VᵀV − I)‖`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SvdFactors};
use crate::rank::RankPolicy;
use crate::tensor::{check_deltas_aligned, TaskDelta};

/// Norm applied to `(UᵀU − I) Σ (VᵀV − I)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum StiNorm {
    /// Sum of absolute values of all entries.
    #[default]
    #[serde(rename = "entrywise-l1")]
    Entrywise,
    /// Induced 1-norm: maximum absolute column sum.
    #[serde(rename = "induced-l1")]
    Induced,
}

impl StiNorm {
    fn apply(self, m: &Matrix) -> f64 {
        match self {
            StiNorm::Entrywise => m.iter().map(|x| x.abs()).sum(),
            StiNorm::Induced => m
                .column_iter()
                .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }
}

impl fmt::Display for StiNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StiNorm::Entrywise => "entrywise-l1",
            StiNorm::Induced => "induced-l1",
        })
    }
}

impl FromStr for StiNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entrywise" | "entrywise-l1" => Ok(StiNorm::Entrywise),
            "induced" | "induced-l1" => Ok(StiNorm::Induced),
            other => Err(Error::Precondition(format!("unknown norm {other:?}"))),
        }
    }
}

/// Column-wise concatenation `[U_1 … U_T]`, `[V_1 … V_T]` with the singular
/// values laid out along an implied block diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatBasis {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
    /// Start column of each task's block.
    pub task_offsets: Vec<usize>,
}

pub fn concat_basis(factors: &[SvdFactors]) -> Result<ConcatBasis> {
    let first = factors
        .first()
        .ok_or(Error::TooFewTasks { need: 1, got: 0 })?;
    let (d, m) = (first.rows(), first.cols());
    if let Some((i, f)) = factors
        .iter()
        .enumerate()
        .find(|(_, f)| f.rows() != d || f.cols() != m)
    {
        return Err(Error::DimensionMismatch(format!(
            "task {i} factors are {}x{}, expected {d}x{m}",
            f.rows(),
            f.cols()
        )));
    }
    let total: usize = factors.iter().map(SvdFactors::rank).sum();
    let mut u = Matrix::zeros(d, total);
    let mut v = Matrix::zeros(m, total);
    let mut s = Vec::with_capacity(total);
    let mut task_offsets = Vec::with_capacity(factors.len());
    let mut offset = 0;
    for f in factors {
        let k = f.rank();
        task_offsets.push(offset);
        u.columns_mut(offset, k).copy_from(&f.u);
        v.columns_mut(offset, k).copy_from(&f.v);
        s.extend_from_slice(&f.s);
        offset += k;
    }
    Ok(ConcatBasis {
        u,
        s,
        v,
        task_offsets,
    })
}

impl ConcatBasis {
    pub fn tasks(&self) -> usize {
        self.task_offsets.len()
    }

    pub fn width(&self) -> usize {
        self.s.len()
    }

    /// `U Σ Vᵀ`, equal to the sum of the per-task reconstructions.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &sigma) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sigma);
        }
        us * self.v.transpose()
    }

    pub fn sti(&self) -> f64 {
        self.sti_with(StiNorm::Entrywise)
    }

    pub fn sti_with(&self, norm: StiNorm) -> f64 {
        let n = self.width();
        let eye = Matrix::identity(n, n);
        let mut left = self.u.transpose() * &self.u - &eye;
        let right = self.v.transpose() * &self.v - eye;
        for (j, &sigma) in self.s.iter().enumerate() {
            left.column_mut(j).scale_mut(sigma);
        }
        norm.apply(&(left * right))
    }

    pub fn similarity_blocks(&self) -> SimilarityBlocks {
        SimilarityBlocks {
            u_gram: self.u.transpose() * &self.u,
            v_gram: self.v.transpose() * &self.v,
            task_offsets: self.task_offsets.clone(),
        }
    }
}

/// Gram matrices `UᵀU` and `VᵀV`; diagonal blocks hold intra-task
/// similarities, off-diagonal blocks inter-task ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlocks {
    pub u_gram: Matrix,
    pub v_gram: Matrix,
    pub task_offsets: Vec<usize>,
}

impl SimilarityBlocks {
    /// Column range `[start, end)` of task `i`.
    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self
            .task_offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.u_gram.ncols());
        self.task_offsets[i]..end
    }

    /// Largest absolute entry among off-diagonal (inter-task) blocks of both Grams.
    pub fn max_cross_task(&self) -> f64 {
        let t = self.task_offsets.len();
        let mut best = 0.0f64;
        for a in 0..t {
            for b in 0..t {
                if a == b {
                    continue;
                }
                for i in self.block_range(a) {
                    for j in self.block_range(b) {
                        best = best
                            .max(self.u_gram[(i, j)].abs())
                            .max(self.v_gram[(i, j)].abs());
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSti {
    pub block: String,
    pub layers: Vec<String>,
    pub sti: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceReport {
    #[serde(rename = "layers")]
    pub per_layer: BTreeMap<String, f64>,
    pub total: f64,
    pub norm: StiNorm,
    pub rank_policy: RankPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockSti>>,
}

impl InterferenceReport {
    pub fn new(per_layer: BTreeMap<String, f64>, norm: StiNorm, rank_policy: RankPolicy) -> Self {
        let total = per_layer.values().sum();
        InterferenceReport {
            per_layer,
            total,
            norm,
            rank_policy,
            blocks: None,
        }
    }

    /// Aggregates layers by transformer block: every layer whose name contains
    /// a numeric path segment (`….resblocks.3.…`) is grouped under the prefix
    /// ending at that segment. Other layers form singleton groups.
    pub fn group_blocks(&mut self) {
        let mut groups: BTreeMap<BlockKey, (String, Vec<String>, f64)> = BTreeMap::new();
        for (name, &value) in &self.per_layer {
            let (key, label) = block_key(name);
            let entry = groups
                .entry(key)
                .or_insert_with(|| (label, Vec::new(), 0.0));
            entry.1.push(name.clone());
            entry.2 += value;
        }
        self.blocks = Some(
            groups
                .into_values()
                .map(|(block, layers, sti)| BlockSti { block, layers, sti })
                .collect(),
        );
    }
}

/// Sort key of a block: the prefix before its index, then the index.
type BlockKey = (String, Option<u64>);

fn block_key(name: &str) -> (BlockKey, String) {
    let segments: Vec<&str> = name.split('.').collect();
    match segments
        .iter()
        .position(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
    {
        Some(i) => {
            let prefix = segments[..i].join(".");
            let index = segments[i].parse().ok();
            let label = segments[..=i].join(".");
            ((prefix, index), label)
        }
        None => ((name.to_string(), None), name.to_string()),
    }
}

/// Truncated SVD of one task's layer under `policy`.
pub(crate) fn layer_factors(delta: &Matrix, policy: RankPolicy) -> Result<SvdFactors> {
    let k = policy.rank_for(delta.nrows(), delta.ncols())?;
    linalg::svd(delta)?.truncate(k)
}

/// Per matrix layer STI over all tasks; vector layers are omitted.
pub fn model_sti_report(
    deltas: &[TaskDelta],
    rank_policy: RankPolicy,
    norm: StiNorm,
) -> Result<InterferenceReport> {
    if deltas.len() < 2 {
        return Err(Error::TooFewTasks {
            need: 2,
            got: deltas.len(),
        });
    }
    rank_policy.validate()?;
    check_deltas_aligned(deltas)?;
    let names: Vec<&String> = deltas[0].matrix_layers().map(|(n, _)| n).collect();
    let values: Vec<(String, f64)> = names
        .par_iter()
        .map(|&name| {
            let factors = deltas
                .iter()
                .map(|d| layer_factors(&d.layers[name].tensor().to_matrix(), rank_policy))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_layer(name))?;
            let basis = concat_basis(&factors).map_err(|e| e.in_layer(name))?;
            Ok((name.clone(), basis.sti_with(norm)))
        })
        .collect::<Result<_>>()?;
    Ok(InterferenceReport::new(
        values.into_iter().collect(),
        norm,
        rank_policy,
    ))
}
