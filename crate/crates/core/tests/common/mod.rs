#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsv_core::linalg::Matrix;
use tsv_core::tensor::{Tensor, TensorMap};
use tsv_core::validation::{gaussian_matrix, random_orthogonal, trial_rng};

pub fn rng(seed: u64) -> ChaCha8Rng {
    trial_rng(seed, 0)
}

pub fn random_tensor(shape: Vec<usize>, scale: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-1.0f32..1.0) * scale)
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn add_matrix(pre: &Tensor, delta: &Matrix) -> Tensor {
    Tensor::from_matrix(&(pre.to_matrix() + delta))
}

/// `Σ_j σ_j u_j v_jᵀ` over the given column ranges of two orthogonal matrices.
pub fn low_rank_from(
    left: &Matrix,
    right: &Matrix,
    cols: std::ops::Range<usize>,
    sigmas: &[f64],
) -> Matrix {
    let mut out = Matrix::zeros(left.nrows(), right.nrows());
    for (j, &s) in cols.zip(sigmas) {
        out += left.column(j) * right.column(j).transpose() * s;
    }
    out
}

/// Pre-trained map plus `tasks` fine-tuned maps whose matrix deltas live in
/// mutually orthogonal rank-`min(d,m)/tasks` subspaces; vector layers are
/// unchanged by fine-tuning.
pub struct OrthogonalModel {
    pub pre: TensorMap,
    pub fts: Vec<TensorMap>,
    /// Exact per-task matrix deltas in `f64`, keyed by layer.
    pub deltas: Vec<Vec<(String, Matrix)>>,
}

pub fn orthogonal_model(shapes: &[(usize, usize)], tasks: usize, seed: u64) -> OrthogonalModel {
    let mut rng = rng(seed);
    let mut pre = TensorMap::new();
    let mut fts = vec![TensorMap::new(); tasks];
    let mut deltas = vec![Vec::new(); tasks];
    for (l, &(d, m)) in shapes.iter().enumerate() {
        let name = format!("blocks.{l}.weight");
        let base = random_tensor(vec![d, m], 0.5, &mut rng);
        let left = random_orthogonal(d, &mut rng);
        let right = random_orthogonal(m, &mut rng);
        let k = d.min(m) / tasks;
        for t in 0..tasks {
            let sigmas: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
            let delta = low_rank_from(&left, &right, t * k..(t + 1) * k, &sigmas);
            fts[t].insert(name.clone(), add_matrix(&base, &delta));
            deltas[t].push((name.clone(), delta));
        }
        pre.insert(name, base);
        let bias = random_tensor(vec![m], 0.1, &mut rng);
        for ft in &mut fts {
            ft.insert(format!("blocks.{l}.bias"), bias.clone());
        }
        pre.insert(format!("blocks.{l}.bias"), bias);
    }
    OrthogonalModel { pre, fts, deltas }
}

/// Pre-trained map and `tasks` fine-tuned maps with dense Gaussian deltas.
pub fn random_model(shapes: &[Vec<usize>], tasks: usize, seed: u64) -> (TensorMap, Vec<TensorMap>) {
    let mut rng = rng(seed);
    let mut pre = TensorMap::new();
    for (i, shape) in shapes.iter().enumerate() {
        pre.insert(
            format!("layer{i:02}"),
            random_tensor(shape.clone(), 1.0, &mut rng),
        );
    }
    let fts = (0..tasks)
        .map(|_| {
            let mut ft = TensorMap::new();
            for (name, p) in pre.iter() {
                let noise = random_tensor(p.shape().to_vec(), 0.05, &mut rng);
                let data = p
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, b)| a + b)
                    .collect();
                ft.insert(name.clone(), Tensor::new(p.shape().to_vec(), data).unwrap());
            }
            ft
        })
        .collect();
    (pre, fts)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    gaussian_matrix(rows, cols, rng)
}
