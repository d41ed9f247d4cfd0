//! Numerical checks of the orthogonalization results the merge relies on:
//! the orthogonalization-error bound for truncated concatenations of
//! orthogonal blocks, the whitening/Procrustes equivalence, positive
//! definiteness of Gram matrices, and normalized accuracy bookkeeping.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, WHITEN_EPS};

// ---------------------------------------------------------------------------
// normalized accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub tasks: Vec<String>,
    /// Accuracy of the merged model on each task.
    pub merged: Vec<f64>,
    /// Accuracy of each task's own fine-tuned model.
    pub finetuned: Vec<f64>,
}

impl AccuracyTable {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> AccuracyTable {
        AccuracyTable {
            tasks: (0..pairs.len()).map(|i| format!("task{i}")).collect(),
            merged: pairs.iter().map(|p| p.0).collect(),
            finetuned: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

/// Mean over tasks of `merged / finetuned` accuracy.
pub fn normalized_accuracy(table: &AccuracyTable) -> Result<f64> {
    let n = table.merged.len();
    if n == 0 || table.finetuned.len() != n {
        return Err(Error::Precondition(
            "accuracy table must be non-empty with one fine-tuned value per task".into(),
        ));
    }
    if let Some(i) = table.finetuned.iter().position(|&a| a.is_nan() || a <= 0.0) {
        return Err(Error::Precondition(format!(
            "fine-tuned accuracy of task {i} must be > 0"
        )));
    }
    let sum: f64 = table
        .merged
        .iter()
        .zip(&table.finetuned)
        .map(|(m, f)| m / f)
        .sum();
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// closed forms
// ---------------------------------------------------------------------------

/// `‖U − X‖_F = √n (√T − 1)` for `T` concatenated `n × n` orthogonal blocks.
pub fn fullrank_ortho_error(n: usize, tasks: usize) -> f64 {
    (n as f64).sqrt() * ((tasks as f64).sqrt() - 1.0)
}

/// `√(n + kT − 2√(kT))`, an upper bound on `‖Û − X̂‖_F`.
pub fn truncated_ortho_bound(n: usize, k: usize, tasks: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::RankOutOfRange { k, max: n });
    }
    let kt = (k * tasks) as f64;
    Ok((n as f64 + kt - 2.0 * kt.sqrt()).sqrt())
}

/// `n (T − 2√T) / T`; only meaningful for `T > 4`.
pub fn ortho_rank_threshold(n: usize, tasks: usize) -> Result<f64> {
    if tasks <= 4 {
        return Err(Error::Precondition(format!(
            "rank threshold needs more than 4 tasks, got {tasks}"
        )));
    }
    let t = tasks as f64;
    Ok(n as f64 * (t - 2.0 * t.sqrt()) / t)
}

// ---------------------------------------------------------------------------
// sampled experiment
// ---------------------------------------------------------------------------

/// Per-trial rng: one ChaCha stream per trial index under a shared seed.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `diag(R)` folded into `Q`.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let qr = gaussian_matrix(n, n, rng).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub fullrank_error: f64,
    pub truncated_error: f64,
    /// Sum of the singular values of the truncated concatenation.
    pub sigma_sum: f64,
    /// `tr(ÛᵀÛ)`.
    pub trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub tasks: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    /// `√n (√T − 1)`.
    pub exact_fullrank_error: f64,
    /// Largest relative deviation of a measured `‖U − X‖_F` from the closed form.
    pub fullrank_max_rel_deviation: f64,
    /// Largest measured `‖Û − X̂‖_F` over trials.
    pub truncated_error: f64,
    pub truncated_error_mean: f64,
    pub upper_bound: f64,
    pub threshold_k: f64,
    pub k_within_threshold: bool,
    /// `‖U − X‖_F ≥ ‖Û − X̂‖_F` in every trial.
    pub inequality_holds: bool,
    pub closed_form_matches: bool,
    pub upper_bound_holds: bool,
    /// `Σ σ̂ ≥ √(kT)` in every trial.
    pub sigma_sum_holds: bool,
    /// `tr(ÛᵀÛ) = kT` in every trial.
    pub trace_matches: bool,
    /// `"ok"`, `"violated"` or `"no-data"`.
    pub status: &'static str,
    pub per_trial: Vec<TrialRecord>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.status != "violated"
    }
}

const CLOSED_FORM_RTOL: f64 = 1e-6;
const BOUND_ATOL: f64 = 1e-6;

fn concat_leading(blocks: &[Matrix], k: usize) -> Matrix {
    let n = blocks[0].nrows();
    let mut out = Matrix::zeros(n, k * blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        out.columns_mut(i * k, k).copy_from(&b.columns(0, k));
    }
    out
}

fn run_trial(n: usize, k: usize, tasks: usize, seed: u64, trial: u64) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, trial);
    let blocks: Vec<Matrix> = (0..tasks).map(|_| random_orthogonal(n, &mut rng)).collect();
    let full = concat_leading(&blocks, n);
    let truncated = concat_leading(&blocks, k);
    let fullrank_error = (&full - linalg::procrustes(&full)?).norm();
    let truncated_error = (&truncated - linalg::procrustes(&truncated)?).norm();
    let sigma_sum = linalg::svd(&truncated)?.s.iter().sum();
    let trace = (truncated.transpose() * &truncated).trace();
    Ok(TrialRecord {
        fullrank_error,
        truncated_error,
        sigma_sum,
        trace,
    })
}

/// Samples `trials` sets of `T` random `n × n` orthogonal matrices and
/// measures the Procrustes orthogonalization error of the full and
/// rank-`k` truncated concatenations.
///
/// `k` above the rank threshold is accepted and flagged through
/// `k_within_threshold`; the sampled checks still run.
pub fn ortho_bound_experiment(
    n: usize,
    k: usize,
    tasks: usize,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    let threshold_k = ortho_rank_threshold(n, tasks)?;
    let upper_bound = truncated_ortho_bound(n, k, tasks)?;
    let exact = fullrank_ortho_error(n, tasks);
    let kt = (k * tasks) as f64;

    let per_trial = (0..trials as u64)
        .into_par_iter()
        .map(|t| run_trial(n, k, tasks, seed, t))
        .collect::<Result<Vec<_>>>()?;

    let fullrank_max_rel_deviation = per_trial
        .iter()
        .map(|r| (r.fullrank_error - exact).abs() / exact.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let truncated_error = per_trial
        .iter()
        .map(|r| r.truncated_error)
        .fold(0.0, f64::max);
    let truncated_error_mean = if per_trial.is_empty() {
        0.0
    } else {
        per_trial.iter().map(|r| r.truncated_error).sum::<f64>() / per_trial.len() as f64
    };
    let inequality_holds = per_trial
        .iter()
        .all(|r| r.fullrank_error + BOUND_ATOL >= r.truncated_error);
    let closed_form_matches = per_trial
        .iter()
        .all(|r| (r.fullrank_error - exact).abs() <= CLOSED_FORM_RTOL * exact.max(1.0));
    let upper_bound_holds = per_trial
        .iter()
        .all(|r| r.truncated_error <= upper_bound + BOUND_ATOL);
    let sigma_sum_holds = per_trial
        .iter()
        .all(|r| r.sigma_sum + BOUND_ATOL >= kt.sqrt());
    let trace_matches = per_trial.iter().all(|r| (r.trace - kt).abs() <= 1e-9 * kt);

    let status = if per_trial.is_empty() {
        "no-data"
    } else if inequality_holds
        && closed_form_matches
        && upper_bound_holds
        && sigma_sum_holds
        && trace_matches
    {
        "ok"
    } else {
        "violated"
    };
    Ok(BoundReport {
        n,
        tasks,
        k,
        trials,
        seed,
        exact_fullrank_error: exact,
        fullrank_max_rel_deviation,
        truncated_error,
        truncated_error_mean,
        upper_bound,
        threshold_k,
        k_within_threshold: k as f64 <= threshold_k,
        inequality_holds,
        closed_form_matches,
        upper_bound_holds,
        sigma_sum_holds,
        trace_matches,
        status,
        per_trial,
    })
}

/// Same measurement with rectangular blocks (`r < n` orthonormal columns per
/// task). Nothing is asserted; the report records what was observed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RectangularReport {
    pub n: usize,
    pub columns_per_task: usize,
    pub tasks: usize,
    pub k: usize,
    pub trials: usize,
    pub mean_fullrank_error: f64,
    pub mean_truncated_error: f64,
    pub inequality_held_fraction: f64,
}

pub fn ortho_bound_rectangular(
    n: usize,
    columns_per_task: usize,
    k: usize,
    tasks: usize,
    trials: usize,
    seed: u64,
) -> Result<RectangularReport> {
    if columns_per_task == 0 || columns_per_task > n || k == 0 || k > columns_per_task {
        return Err(Error::Precondition(format!(
            "need 1 <= k ({k}) <= columns_per_task ({columns_per_task}) <= n ({n})"
        )));
    }
    let records = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let blocks: Vec<Matrix> = (0..tasks).map(|_| random_orthogonal(n, &mut rng)).collect();
            let full = concat_leading(&blocks, columns_per_task);
            let truncated = concat_leading(&blocks, k);
            let ef = (&full - linalg::procrustes(&full)?).norm();
            let et = (&truncated - linalg::procrustes(&truncated)?).norm();
            Ok((ef, et))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = records.len().max(1) as f64;
    Ok(RectangularReport {
        n,
        columns_per_task,
        tasks,
        k,
        trials,
        mean_fullrank_error: records.iter().map(|r| r.0).sum::<f64>() / count,
        mean_truncated_error: records.iter().map(|r| r.1).sum::<f64>() / count,
        inequality_held_fraction: records.iter().filter(|r| r.0 >= r.1).count() as f64 / count,
    })
}

// ---------------------------------------------------------------------------
// whitening vs Procrustes
// ---------------------------------------------------------------------------

/// `Q₁ diag(s) Q₂ᵀ` with orthonormal `Q₁ (d×c)`, `Q₂ (c×c)` and singular
/// values drawn from `[0.5, 2]`.
pub fn well_conditioned(d: usize, c: usize, rng: &mut impl Rng) -> Matrix {
    let left = random_orthogonal(d, rng).columns(0, c).into_owned();
    let right = random_orthogonal(c, rng);
    let s = Matrix::from_diagonal(&nalgebra::DVector::from_fn(c, |_, _| {
        rng.random_range(0.5..2.0)
    }));
    left * s * right.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Largest `‖procrustes(X) − whiten(X)‖_F / max(1, ‖X‖_F)`.
    pub max_scaled_difference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const WHITENING_TOL: f64 = 1e-4;

/// Compares Procrustes and eigen-whitening on `trials` random well-conditioned
/// matrices with `d` cycling through `dims` and `c ≤ d` drawn per trial.
pub fn whitening_equivalence(
    dims: &[usize],
    trials: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Precondition(
            "dims must be non-empty and positive".into(),
        ));
    }
    let diffs = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let d = dims[t as usize % dims.len()];
            let c = rng.random_range(1..=d);
            let x = well_conditioned(d, c, &mut rng);
            let p = linalg::procrustes(&x)?;
            let w = linalg::whiten_eigen(&x, WHITEN_EPS)?;
            Ok((p - w).norm() / x.norm().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_scaled_difference = diffs.into_iter().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        trials,
        max_scaled_difference,
        tolerance: WHITENING_TOL,
        passed: max_scaled_difference <= WHITENING_TOL,
    })
}

// ---------------------------------------------------------------------------
// Gram positive definiteness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GramCheck {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub positive_definite: bool,
    pub invertible: bool,
}

/// Relative cutoff below which a Gram eigenvalue is treated as zero.
pub const PD_RTOL: f64 = 1e-8;

/// Extreme eigenvalues of `XᵀX`; positive iff `λ_min > 1e−8 · λ_max`.
pub fn gram_pd_check(x: &Matrix) -> Result<GramCheck> {
    if x.ncols() > x.nrows() {
        return Err(Error::Precondition(format!(
            "gram check needs c <= d, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    let eig = SymmetricEigen::new(x.transpose() * x);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    let positive = max > 0.0 && min > PD_RTOL * max;
    Ok(GramCheck {
        min_eigenvalue: min,
        max_eigenvalue: max,
        positive_definite: positive,
        invertible: positive,
    })
}
