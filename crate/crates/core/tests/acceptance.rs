//! Acceptance suite. Prints one `AC<n> PASS|FAIL` line per criterion and exits
//! non-zero if any fails: `cargo test -p tsv-core --test acceptance`.

mod common;

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;
use tsv_core::compress::{self, storage_report};
use tsv_core::interference::{concat_basis, ConcatBasis};
use tsv_core::linalg::{self, Matrix, SvdFactors};
use tsv_core::merge::{ablation_suite, merge, MergeConfig};
use tsv_core::rank::RankPolicy;
use tsv_core::tensor::{self, compute_task_deltas, Dtype, Tensor, TensorMap};
use tsv_core::validation::{
    normalized_accuracy, ortho_bound_experiment, whitening_equivalence, AccuracyTable,
};

use common::*;

static FAILED: AtomicBool = AtomicBool::new(false);

fn verdict(id: u32, title: &str, pass: bool, detail: String) {
    println!(
        "AC{id} {}: {title} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        FAILED.store(true, Ordering::SeqCst);
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, fn()); 9] = [
        (1, ac1_whitening_matches_procrustes),
        (2, ac2_truncated_orthogonalization_error_bound),
        (3, ac3_eckart_young),
        (4, ac4_sti_correctness),
        (5, ac5_exact_recovery_merge),
        (6, ac6_compression_lossless_and_storage),
        (7, ac7_ablation_grid),
        (8, ac8_container_roundtrips_and_thread_determinism),
        (9, ac9_normalized_accuracy),
    ];
    for (id, run) in criteria {
        if std::panic::catch_unwind(run).is_err() {
            println!("AC{id} FAIL: panicked");
            FAILED.store(true, Ordering::SeqCst);
        }
    }
    if FAILED.load(Ordering::SeqCst) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ac1_whitening_matches_procrustes() {
    let start = Instant::now();
    let report = whitening_equivalence(&[8, 32, 128], 100, 2024).unwrap();
    let elapsed = start.elapsed();
    verdict(
        1,
        "procrustes vs eigen-whitening on 100 well-conditioned matrices",
        report.passed && report.trials == 100 && elapsed < Duration::from_secs(5),
        format!(
            "max ‖P−W‖/max(1,‖X‖) = {:.3e} ≤ 1e-4, {:.2?} < 5s",
            report.max_scaled_difference, elapsed
        ),
    );
}

fn ac2_truncated_orthogonalization_error_bound() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for (n, t, k) in [(6, 9, 2), (12, 10, 4), (16, 8, 5)] {
        let r = ortho_bound_experiment(n, k, t, 50, 61).unwrap();
        let exact = (n as f64).sqrt() * ((t as f64).sqrt() - 1.0);
        let kt = (k * t) as f64;
        let bound = (n as f64 + kt - 2.0 * kt.sqrt()).sqrt();
        // recheck every trial against independently evaluated closed forms
        let ok = r.per_trial.len() == 50
            && r.per_trial.iter().all(|tr| {
                tr.fullrank_error >= tr.truncated_error
                    && (tr.fullrank_error - exact).abs() <= 1e-6 * exact
                    && tr.truncated_error <= bound
            })
            && r.status == "ok";
        pass &= ok;
        details.push(format!(
            "(n={n},T={t},k={k}): ‖U−X‖={exact:.4} dev {:.1e}, max ‖Û−X̂‖={:.4} ≤ {bound:.4}",
            r.fullrank_max_rel_deviation, r.truncated_error
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    verdict(
        2,
        "orthogonalization error of truncated vs full concatenations",
        pass,
        format!("{}; {elapsed:.2?} < 10s", details.join("; ")),
    );
}

fn rank_k_product(a: &[f64], b: &[f64], k: usize) -> [f64; 48] {
    let mut out = [0.0; 48];
    for i in 0..8 {
        for j in 0..6 {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * 6 + j];
            }
            out[i * 6 + j] = acc;
        }
    }
    out
}

fn frob_diff(m: &Matrix, c: &[f64; 48]) -> f64 {
    let mut acc = 0.0;
    for i in 0..8 {
        for j in 0..6 {
            let d = m[(i, j)] - c[i * 6 + j];
            acc += d * d;
        }
    }
    acc.sqrt()
}

fn ac3_eckart_young() {
    let start = Instant::now();
    let mut rng = rng(3);
    let mut violations = 0usize;
    let mut smallest_margin = f64::INFINITY;
    for _ in 0..200 {
        let m = gaussian(8, 6, &mut rng);
        let f = linalg::svd(&m).unwrap();
        for k in 1..=5 {
            let best = (&m - f.truncate(k).unwrap().reconstruct()).norm();
            // optimal factors, for local perturbations
            let mut a0 = vec![0.0; 8 * k];
            let mut b0 = vec![0.0; k * 6];
            for l in 0..k {
                let root = f.s[l].sqrt();
                for i in 0..8 {
                    a0[i * k + l] = f.u[(i, l)] * root;
                }
                for j in 0..6 {
                    b0[l * 6 + j] = f.v[(j, l)] * root;
                }
            }
            for c in 0..1000 {
                let (a, b): (Vec<f64>, Vec<f64>) = if c % 2 == 0 {
                    let scale = rng.random_range(0.1..2.0);
                    (
                        (0..8 * k)
                            .map(|_| rng.random_range(-1.0..1.0) * scale)
                            .collect(),
                        (0..k * 6)
                            .map(|_| rng.random_range(-1.0..1.0) * scale)
                            .collect(),
                    )
                } else {
                    let eps = 10f64.powf(rng.random_range(-4.0..-1.0));
                    (
                        a0.iter()
                            .map(|x| x + eps * rng.random_range(-1.0..1.0))
                            .collect(),
                        b0.iter()
                            .map(|x| x + eps * rng.random_range(-1.0..1.0))
                            .collect(),
                    )
                };
                let err = frob_diff(&m, &rank_k_product(&a, &b, k));
                smallest_margin = smallest_margin.min(err - best);
                if err < best - 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "truncated SVD beats 1000 random rank-k candidates on 200 8x6 matrices, k=1..5",
        violations == 0 && elapsed < Duration::from_secs(30),
        format!(
            "violations {violations}, smallest margin {smallest_margin:.2e}, {elapsed:.2?} < 30s"
        ),
    );
}

fn rank_one(u: &[f64], sigma: f64, v: &[f64]) -> SvdFactors {
    SvdFactors {
        u: Matrix::from_column_slice(u.len(), 1, u),
        s: vec![sigma],
        v: Matrix::from_column_slice(v.len(), 1, v),
    }
}

fn ac4_sti_correctness() {
    let mut rng = rng(4);
    let single = linalg::svd(&gaussian(10, 7, &mut rng)).unwrap();
    let sti_single = concat_basis(&[single]).unwrap().sti();

    let f = rank_one(&[0.6, 0.8, 0.0], 1.0, &[0.0, 1.0]);
    let sti_identical = concat_basis(&[f.clone(), f]).unwrap().sti();

    // two tasks in complementary coordinate subspaces of R^6 × R^5
    let q6 = tsv_core::validation::random_orthogonal(6, &mut rng);
    let q5 = tsv_core::validation::random_orthogonal(5, &mut rng);
    let d1 = low_rank_from(&q6, &q5, 0..2, &[2.0, 1.0]);
    let d2 = low_rank_from(&q6, &q5, 2..4, &[1.5, 0.5]);
    let orth = concat_basis(&[
        linalg::svd(&d1).unwrap().truncate(2).unwrap(),
        linalg::svd(&d2).unwrap().truncate(2).unwrap(),
    ])
    .unwrap()
    .sti();

    // post-orthogonalization on a full-column-rank T·k = 12 ≤ d = 32 basis
    let (t, k) = (4usize, 3usize);
    let factors: Vec<SvdFactors> = (0..t)
        .map(|_| {
            linalg::svd(&gaussian(32, 24, &mut rng))
                .unwrap()
                .truncate(k)
                .unwrap()
        })
        .collect();
    let basis = concat_basis(&factors).unwrap();
    let before = basis.sti();
    let after = ConcatBasis {
        u: linalg::procrustes(&basis.u).unwrap(),
        v: linalg::procrustes(&basis.v).unwrap(),
        ..basis
    }
    .sti();
    let post_tol = 1e-6 * ((t * k) as f64).powi(2);

    let pass = sti_single.abs() <= 1e-6
        && (sti_identical - 2.0).abs() <= 1e-6
        && orth.abs() <= 1e-6
        && after <= post_tol;
    verdict(
        4,
        "STI: single task, identical rank-1 tasks, orthogonal subspaces, post-orthogonalization",
        pass,
        format!(
            "single {sti_single:.1e}, identical {sti_identical:.9}, orthogonal {orth:.1e}, \
             before {before:.3} → after {after:.1e} ≤ {post_tol:.1e}"
        ),
    );
}

fn ac5_exact_recovery_merge() {
    let shapes = [(8, 6), (6, 6), (10, 4), (7, 9)];
    let model = orthogonal_model(&shapes, 2, 5);
    let deltas = compute_task_deltas(&model.pre, &model.fts).unwrap();
    let res = merge(&model.pre, &deltas, &MergeConfig::default()).unwrap();
    let mut worst = 0.0f64;
    for (name, _) in &model.deltas[0] {
        let pre = model.pre.get(name).unwrap().to_matrix();
        let expected = &pre
            + &model.deltas[0].iter().find(|d| &d.0 == name).unwrap().1
            + &model.deltas[1].iter().find(|d| &d.0 == name).unwrap().1;
        let got = res.weights.get(name).unwrap().to_matrix();
        worst = worst.max(linalg::relative_error(&got, &expected));
    }
    let vectors_unchanged = model
        .pre
        .iter()
        .filter(|(n, _)| n.ends_with(".bias"))
        .all(|(n, t)| res.weights.get(n).unwrap() == t);
    verdict(
        5,
        "orthogonal-subspace 4-layer model merges to pre + Δ1 + Δ2",
        worst <= 1e-6 && vectors_unchanged && res.layers.len() == 4,
        format!("worst per-layer relative error {worst:.2e} ≤ 1e-6"),
    );
}

fn ac6_compression_lossless_and_storage() {
    let mut rng = rng(6);
    // rank-3 delta on a 20×12 layer, compressed at k′ = 3 and k′ = 5
    let left = tsv_core::validation::random_orthogonal(20, &mut rng);
    let right = tsv_core::validation::random_orthogonal(12, &mut rng);
    let delta = low_rank_from(&left, &right, 0..3, &[4.0, 2.0, 1.0]);
    let mut pre = TensorMap::new();
    pre.insert("w", random_tensor(vec![20, 12], 1.0, &mut rng));
    pre.insert("b", random_tensor(vec![12], 1.0, &mut rng));
    let mut ft = pre.clone();
    ft.insert("w", add_matrix(pre.get("w").unwrap(), &delta));
    ft.insert("b", random_tensor(vec![12], 1.0, &mut rng));
    let task = compute_task_deltas(&pre, std::slice::from_ref(&ft))
        .unwrap()
        .remove(0);
    let mut lossless_err = 0.0f64;
    for k in [3, 5] {
        let ct = compress::compress(&task, RankPolicy::Explicit(k)).unwrap();
        let back = compress::expand(&ct, &pre, 1.0).unwrap();
        for (name, t) in ft.iter() {
            let got = back.get(name).unwrap();
            let err = if t.shape().len() == 2 {
                linalg::relative_error(&got.to_matrix(), &t.to_matrix())
            } else {
                let diff: f64 = t
                    .data()
                    .iter()
                    .zip(got.data())
                    .map(|(a, b)| f64::from(a - b).powi(2))
                    .sum();
                let norm: f64 = t.data().iter().map(|a| f64::from(*a).powi(2)).sum();
                (diff / norm).sqrt()
            };
            lossless_err = lossless_err.max(err);
        }
    }

    // Params(TSV) < Params(NN) ⇔ k′ < d·m/(d+m+1) on 50 random triples
    let mut mismatches = 0;
    for i in 0..50 {
        let d = rng.random_range(2..=2048usize);
        let m = rng.random_range(2..=2048usize);
        let full = d.min(m);
        let k = if i % 2 == 0 {
            rng.random_range(1..=full)
        } else {
            // straddle the threshold
            let thr = (d as f64 * m as f64 / (d + m + 1) as f64).floor() as usize;
            (thr + rng.random_range(0..=1)).clamp(1, full)
        };
        let r = storage_report(&[("w", vec![d, m])], RankPolicy::Explicit(k)).unwrap();
        let saves = r.params_tsv < r.params_nn;
        let inequality = (k as u128) * ((d + m + 1) as u128) < (d as u128) * (m as u128);
        if saves != inequality || r.within_threshold != inequality {
            mismatches += 1;
        }
    }

    // PerTask(T ≥ 3) on square layers always saves storage
    let mut per_task_failures = 0;
    for _ in 0..200 {
        let n = rng.random_range(3..=4096usize);
        let t = rng.random_range(3..=64usize);
        let r = storage_report(&[("w", vec![n, n])], RankPolicy::PerTask(t)).unwrap();
        if !(r.within_threshold && r.params_tsv < r.params_nn) {
            per_task_failures += 1;
        }
    }
    verdict(
        6,
        "TSV-C lossless at k′ ≥ r; storage inequality; PerTask(T≥3) saves storage",
        lossless_err <= 1e-5 && mismatches == 0 && per_task_failures == 0,
        format!(
            "lossless rel err {lossless_err:.2e} ≤ 1e-5, inequality mismatches {mismatches}/50, \
             PerTask failures {per_task_failures}/200"
        ),
    );
}

/// Plain task arithmetic, written out independently: `pre + α · mean(ft − pre)`
/// with the mean accumulated in `f64` as a running mean.
fn ta_mean_oracle(pre: &TensorMap, fts: &[TensorMap], alpha: f64) -> TensorMap {
    let mut out = TensorMap::new();
    for (name, p) in pre.iter() {
        let mut mean = vec![0.0f64; p.numel()];
        for (count, ft) in fts.iter().enumerate() {
            let f = ft.get(name).unwrap();
            for (i, m) in mean.iter_mut().enumerate() {
                let delta = f64::from(f.data()[i] - p.data()[i]);
                *m += (delta - *m) / (count + 1) as f64;
            }
        }
        let data = p
            .data()
            .iter()
            .zip(&mean)
            .map(|(&a, &m)| (f64::from(a) + alpha * m) as f32)
            .collect();
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), data).unwrap());
    }
    out
}

fn ac7_ablation_grid() {
    let t = 8usize;
    let shapes = vec![vec![16, 16], vec![24, 24], vec![32, 32], vec![24], vec![32]];
    let (pre, fts) = random_model(&shapes, t, 7);
    let deltas = compute_task_deltas(&pre, &fts).unwrap();
    let report = ablation_suite(&pre, &deltas, &MergeConfig::default()).unwrap();

    let oracle = ta_mean_oracle(&pre, &fts, 1.0);
    let ta = &report.row(false, false).result.weights;
    let bitwise = ta.len() == oracle.len()
        && ta.iter().all(|(n, w)| {
            let o = oracle.get(n).unwrap();
            w.data()
                .iter()
                .zip(o.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        });

    // k′ = n/8 must sit below floor(n(T−2√T)/T) on every layer
    let tf = t as f64;
    let rank_ok = report
        .row(true, true)
        .result
        .layers
        .iter()
        .all(|(name, rec)| {
            let n = pre.get(name).unwrap().shape()[0] as f64;
            rec.rank as f64 <= (n * (tf - 2.0 * tf.sqrt()) / tf).floor()
        });
    let (on_u, on_v) = report.row(true, true).result.mean_ortho_error().unwrap();
    let (off_u, off_v) = report.row(false, true).result.mean_ortho_error().unwrap();
    verdict(
        7,
        "four-way ablation on an 8-task model",
        report.rows.len() == 4 && bitwise && rank_ok && on_u <= off_u && on_v <= off_v,
        format!(
            "rows {}, (off,off) bitwise TA mean {bitwise}, mean ortho err U {on_u:.3} ≤ {off_u:.3}, \
             V {on_v:.3} ≤ {off_v:.3}",
            report.rows.len()
        ),
    );
}

fn ac8_container_roundtrips_and_thread_determinism() {
    let mut rng = rng(8);
    let mut map_ok = true;
    for i in 0..50 {
        let mut map = TensorMap::new();
        for j in 0..rng.random_range(0..6) {
            let rank = rng.random_range(1..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
            let scale = 10f32.powi(rng.random_range(-6..6));
            map.insert(format!("t{i}.{j}"), random_tensor(shape, scale, &mut rng));
        }
        if i % 3 == 0 {
            map.metadata.insert("note".into(), format!("map {i}"));
        }
        let bytes = tensor::encode_checkpoint(&map, Dtype::F32).unwrap();
        let back = tensor::decode_checkpoint(&bytes).unwrap();
        map_ok &= back == map;
    }

    let dir = tempfile::tempdir().unwrap();
    let (pre, fts) = random_model(&[vec![12, 9], vec![9], vec![9, 12]], 3, 80);
    let deltas = compute_task_deltas(&pre, &fts).unwrap();
    let ct = compress::compress(&deltas[0], RankPolicy::Fraction(0.5)).unwrap();
    let path = dir.path().join("task.tsvc");
    compress::save_compressed(&ct, &path).unwrap();
    let loaded = compress::load_compressed(&path).unwrap();
    let path2 = dir.path().join("task2.tsvc");
    compress::save_compressed(&loaded, &path2).unwrap();
    let factor_ok = loaded == ct && std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap();

    let (pre, fts) = random_model(&[vec![20, 16], vec![16], vec![16, 16], vec![16, 24]], 4, 81);
    let deltas = compute_task_deltas(&pre, &fts).unwrap();
    let max = std::thread::available_parallelism().map_or(1, |n| n.get());
    let outputs: Vec<(Vec<u8>, String)> = [1, 4, max]
        .into_iter()
        .map(|threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let res = merge(&pre, &deltas, &MergeConfig::default()).unwrap();
                (
                    tensor::encode_checkpoint(&res.weights, Dtype::F32).unwrap(),
                    res.report_json().to_string(),
                )
            })
        })
        .collect();
    let threads_ok = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        8,
        "safetensors and factor-file round-trips, merge output identical for 1/4/max threads",
        map_ok && factor_ok && threads_ok,
        format!("maps {map_ok}, factor file {factor_ok}, threads 1/4/{max} {threads_ok}"),
    );
}

fn ac9_normalized_accuracy() {
    let same =
        normalized_accuracy(&AccuracyTable::from_pairs(&[(0.7, 0.7), (0.95, 0.95)])).unwrap();
    let fixture =
        normalized_accuracy(&AccuracyTable::from_pairs(&[(0.5, 1.0), (0.9, 0.9)])).unwrap();
    verdict(
        9,
        "normalized accuracy",
        same == 1.0 && (fixture - 0.75).abs() < 1e-12,
        format!("identical {same}, fixture {fixture}"),
    );
}
