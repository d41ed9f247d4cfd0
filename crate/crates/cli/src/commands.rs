use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use serde_json::{json, Value};
use tsv_core::compress::{self, storage_report, StorageReport};
use tsv_core::interference::{model_sti_report, StiNorm};
use tsv_core::linalg::OrthoMethod;
use tsv_core::merge::{ablation_suite, merge, MergeConfig};
use tsv_core::tensor::{
    self, classify_param, compute_task_delta, Dtype, LayerKind, TaskDelta, TensorMap,
};
use tsv_core::validation;
use tsv_core::RankPolicy;

use crate::{
    Check, Cli, Command, CompressArgs, ExpandArgs, InfoArgs, InterferenceArgs, MergeArgs, NormArg,
    OrthoArg, VerifyArgs,
};

/// Exit status of `verify` when a checked inequality fails.
const VIOLATION: u8 = 2;

const COMPRESS_DEFAULT_TASKS: usize = 8;

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Expand(args) => cmd_expand(args),
        Command::Interference(args) => cmd_interference(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Info(args) => cmd_info(args),
    }
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn require_input(path: &Path) -> Result<()> {
    ensure!(
        path.is_file(),
        "input {} does not exist or is not a file",
        path.display()
    );
    Ok(())
}

fn require_output(path: &Path, inputs: &[&Path]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    ensure!(
        parent.is_dir(),
        "output directory {} does not exist",
        parent.display()
    );
    ensure!(
        !inputs.contains(&path),
        "output {} would overwrite an input",
        path.display()
    );
    Ok(())
}

fn load(path: &Path) -> Result<TensorMap> {
    tensor::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn task_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_deltas(pre: &TensorMap, fts: &[PathBuf]) -> Result<Vec<TaskDelta>> {
    let mut ids = BTreeSet::new();
    fts.iter()
        .enumerate()
        .map(|(i, path)| {
            let map = load(path)?;
            let mut id = task_id(path);
            if !ids.insert(id.clone()) {
                id = format!("{id}#{i}");
            }
            compute_task_delta(id, pre, &map)
                .with_context(|| format!("task delta of {}", path.display()))
        })
        .collect()
}

fn check_force_vector(pre: &TensorMap, names: &[String]) {
    for name in names {
        match pre.get(name) {
            None => warn(format!("--force-vector {name}: no such tensor")),
            Some(t) if classify_param(t.shape()) == LayerKind::Vector => {
                warn(format!("--force-vector {name}: already a vector layer"))
            }
            Some(_) => {}
        }
    }
}

fn norm(arg: NormArg) -> StiNorm {
    match arg {
        NormArg::Entrywise => StiNorm::Entrywise,
        NormArg::Induced => StiNorm::Induced,
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{suffix}"),
    };
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

fn merge_config(args: &MergeArgs) -> Result<MergeConfig> {
    ensure!(args.alpha.is_finite(), "--alpha must be finite");
    ensure!(
        args.eps.is_finite() && args.eps >= 0.0,
        "--eps must be a finite non-negative number"
    );
    let rank_policy = args.rank.policy();
    if let Some(p) = rank_policy {
        p.validate()?;
        if args.no_low_rank {
            warn("rank selection has no effect with --no-low-rank");
        }
    }
    if args.no_ortho && args.ortho_method == OrthoArg::Eigen {
        warn("--ortho-method has no effect with --no-ortho");
    }
    Ok(MergeConfig {
        alpha: args.alpha,
        rank_policy,
        low_rank: !args.no_low_rank,
        interference_reduction: !args.no_ortho,
        ortho_method: match args.ortho_method {
            OrthoArg::Procrustes => OrthoMethod::Procrustes,
            OrthoArg::Eigen => OrthoMethod::EigenWhiten(args.eps),
        },
        norm: norm(args.norm),
        layer_overrides: args.force_vector.iter().cloned().collect(),
    })
}

fn cmd_merge(args: MergeArgs) -> Result<ExitCode> {
    let cfg = merge_config(&args)?;
    let mut inputs: Vec<&Path> = vec![&args.pre];
    inputs.extend(args.ft.iter().map(PathBuf::as_path));
    for p in &inputs {
        require_input(p)?;
    }
    let outputs: Vec<PathBuf> = if args.ablation {
        ["ta", "lr", "ir", "tsvm"]
            .iter()
            .map(|l| with_suffix(&args.out, l))
            .collect()
    } else {
        vec![args.out.clone()]
    };
    let report_path = args.report.clone().unwrap_or_else(|| {
        args.out.with_extension(if args.ablation {
            "ablation.json"
        } else {
            "report.json"
        })
    });
    for p in outputs.iter().chain([&report_path]) {
        require_output(p, &inputs)?;
    }

    let pre = load(&args.pre)?;
    check_force_vector(&pre, &args.force_vector);
    let deltas = load_deltas(&pre, &args.ft)?;
    let dtype = Dtype::from(args.out_dtype);

    if args.ablation {
        let report = ablation_suite(&pre, &deltas, &cfg)?;
        let mut rows = Vec::new();
        for row in &report.rows {
            let path = &with_suffix(&args.out, row.label);
            tensor::save_checkpoint_as(&row.result.weights, path, dtype)?;
            let mut r = row.result.report_json();
            r["label"] = json!(row.label);
            r["output"] = json!(path.display().to_string());
            rows.push(r);
            print_merge_line(
                row.label,
                row.result.sti_before.total,
                row.result.sti_after.total,
                path,
            );
        }
        write_json(
            &report_path,
            &json!({ "summary": report.report_json()["rows"], "rows": rows }),
        )?;
    } else {
        let res = merge(&pre, &deltas, &cfg)?;
        tensor::save_checkpoint_as(&res.weights, &args.out, dtype)?;
        write_json(&report_path, &res.report_json())?;
        print_merge_line(
            cfg.label(),
            res.sti_before.total,
            res.sti_after.total,
            &args.out,
        );
        if let Some((u, v)) = res.mean_ortho_error() {
            println!("mean orthogonalization error: U {u:.6e}  V {v:.6e}");
        }
    }
    println!("report: {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn print_merge_line(label: &str, before: f64, after: f64, out: &Path) {
    println!(
        "{label:>5}: STI before {before:.6e}  after {after:.6e}  -> {}",
        out.display()
    );
}

// ---------------------------------------------------------------------------
// compress / expand
// ---------------------------------------------------------------------------

fn storage_for(pre: &TensorMap, delta: &TaskDelta, policy: RankPolicy) -> Result<StorageReport> {
    let shapes: Vec<(String, Vec<usize>)> = delta
        .layers
        .iter()
        .map(|(name, layer)| {
            let shape = pre
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_default();
            match layer.kind() {
                LayerKind::Matrix => (name.clone(), shape),
                LayerKind::Vector => (name.clone(), vec![shape.iter().product()]),
            }
        })
        .collect();
    Ok(storage_report(&shapes, policy)?)
}

fn cmd_compress(args: CompressArgs) -> Result<ExitCode> {
    let policy = args
        .rank
        .policy()
        .unwrap_or(RankPolicy::PerTask(COMPRESS_DEFAULT_TASKS));
    policy.validate()?;
    require_input(&args.pre)?;
    require_input(&args.ft)?;
    require_output(&args.out, &[&args.pre, &args.ft])?;
    if let Some(r) = &args.report {
        require_output(r, &[&args.pre, &args.ft])?;
    }

    let pre = load(&args.pre)?;
    check_force_vector(&pre, &args.force_vector);
    let ft = load(&args.ft)?;
    let id = args.task_id.clone().unwrap_or_else(|| task_id(&args.ft));
    let mut delta = compute_task_delta(id, &pre, &ft)?;
    delta.force_vector(&args.force_vector);

    let ct = compress::compress(&delta, policy)?;
    let storage = storage_for(&pre, &delta, policy)?;
    for layer in storage.violations() {
        warn(format!(
            "layer {}: rank {} exceeds storage threshold {} for {}x{}",
            layer.name, layer.rank, layer.rank_threshold, layer.rows, layer.cols
        ));
    }
    compress::save_compressed(&ct, &args.out)?;

    println!(
        "{}: {} matrix layers, {} vector layers, rank policy {policy}",
        ct.task_id,
        ct.layers.len(),
        ct.vector_layers.len()
    );
    println!(
        "parameters {} -> {} (ratio {:.4})",
        storage.params_nn, storage.params_tsv, storage.ratio
    );
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({ "task_id": ct.task_id, "ranks": ct.ranks(), "storage": storage }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_expand(args: ExpandArgs) -> Result<ExitCode> {
    ensure!(args.alpha.is_finite(), "--alpha must be finite");
    require_input(&args.input)?;
    require_input(&args.pre)?;
    require_output(&args.out, &[&args.input, &args.pre])?;
    if let Some(r) = &args.report {
        require_output(r, &[&args.input, &args.pre])?;
    }

    let ct = compress::load_compressed(&args.input)
        .with_context(|| format!("loading {}", args.input.display()))?;
    let pre = load(&args.pre)?;
    let weights = compress::expand(&ct, &pre, args.alpha)?;
    tensor::save_checkpoint_as(&weights, &args.out, Dtype::from(args.out_dtype))?;
    println!(
        "{}: {} layers expanded with alpha {} -> {}",
        ct.task_id,
        ct.layers.len() + ct.vector_layers.len(),
        args.alpha,
        args.out.display()
    );
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({
                "task_id": ct.task_id,
                "rank_policy": ct.rank_policy,
                "alpha": args.alpha,
                "ranks": ct.ranks(),
                "stored_params": ct.stored_params(),
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// interference
// ---------------------------------------------------------------------------

fn cmd_interference(args: InterferenceArgs) -> Result<ExitCode> {
    if args.ft.len() < 2 {
        bail!("need ≥ 2 tasks for interference, got {}", args.ft.len());
    }
    let policy = args
        .rank
        .policy()
        .unwrap_or(RankPolicy::PerTask(args.ft.len()));
    policy.validate()?;
    let mut inputs: Vec<&Path> = vec![&args.pre];
    inputs.extend(args.ft.iter().map(PathBuf::as_path));
    for p in &inputs {
        require_input(p)?;
    }
    if let Some(r) = &args.report {
        require_output(r, &inputs)?;
    }

    let pre = load(&args.pre)?;
    check_force_vector(&pre, &args.force_vector);
    let mut deltas = load_deltas(&pre, &args.ft)?;
    for d in &mut deltas {
        d.force_vector(&args.force_vector);
    }
    let mut report = model_sti_report(&deltas, policy, norm(args.norm))?;
    if args.group_blocks {
        report.group_blocks();
    }

    let width = report
        .per_layer
        .keys()
        .map(String::len)
        .max()
        .unwrap_or(5)
        .max(5);
    println!(
        "{:<width$}  STI ({}, {})",
        "layer", report.norm, report.rank_policy
    );
    for (name, sti) in &report.per_layer {
        println!("{name:<width$}  {sti:.6e}");
    }
    if let Some(blocks) = &report.blocks {
        println!();
        let bw = blocks
            .iter()
            .map(|b| b.block.len())
            .max()
            .unwrap_or(5)
            .max(5);
        println!("{:<bw$}  STI", "block");
        for b in blocks {
            println!("{:<bw$}  {:.6e}", b.block, b.sti);
        }
    }
    println!("total  {:.6e}", report.total);
    if let Some(path) = &args.report {
        write_json(path, &serde_json::to_value(&report)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    if let Some(r) = &args.report {
        require_output(r, &[])?;
    }
    let want = |c: Check| args.check == c || args.check == Check::All;
    let mut out = serde_json::Map::new();
    let mut violated = false;

    if want(Check::Bound) {
        let report =
            validation::ortho_bound_experiment(args.n, args.k, args.tasks, args.trials, args.seed)?;
        if !report.k_within_threshold {
            warn(format!(
                "k = {} exceeds the rank threshold {:.4} for n = {}, T = {}",
                args.k, report.threshold_k, args.n, args.tasks
            ));
        }
        violated |= !report.passed();
        out.insert("bound".into(), serde_json::to_value(&report)?);
    }
    if want(Check::Rectangular) {
        let report = validation::ortho_bound_rectangular(
            args.n,
            args.columns,
            args.k.min(args.columns),
            args.tasks,
            args.trials,
            args.seed,
        )?;
        out.insert("rectangular".into(), serde_json::to_value(&report)?);
    }
    if want(Check::Whitening) {
        let report = validation::whitening_equivalence(&args.dims, args.trials, args.seed)?;
        violated |= !report.passed;
        out.insert("whitening".into(), serde_json::to_value(&report)?);
    }
    out.insert(
        "status".into(),
        json!(if violated { "violated" } else { "ok" }),
    );

    let value = Value::Object(out);
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(path) = &args.report {
        write_json(path, &value)?;
    }
    Ok(if violated {
        ExitCode::from(VIOLATION)
    } else {
        ExitCode::SUCCESS
    })
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

fn cmd_info(args: InfoArgs) -> Result<ExitCode> {
    require_input(&args.input)?;
    if let Some(r) = &args.report {
        require_output(r, &[&args.input])?;
    }
    let map = load(&args.input)?;
    let compressed = map
        .metadata
        .get("format")
        .is_some_and(|f| f.starts_with("tsv-c"))
        .then(|| compress::from_tensor_map(&map))
        .transpose()?;

    let width = map.names().map(str::len).max().unwrap_or(4).max(4);
    let mut tensors = Vec::new();
    let mut total = 0usize;
    for (name, t) in map.iter() {
        let kind = match classify_param(t.shape()) {
            LayerKind::Matrix => "matrix",
            LayerKind::Vector => "vector",
        };
        println!(
            "{name:<width$}  {:<4}  {:<16}  {kind}",
            t.dtype(),
            format!("{:?}", t.shape())
        );
        total += t.numel();
        tensors.push(
            json!({ "name": name, "dtype": t.dtype().as_str(), "shape": t.shape(), "kind": kind }),
        );
    }
    println!("{} tensors, {total} parameters", map.len());
    let mut report = json!({ "tensors": tensors, "parameters": total, "metadata": map.metadata });
    if let Some(ct) = &compressed {
        println!(
            "compressed task {} ({}), {} matrix layers, {} stored parameters",
            ct.task_id,
            ct.rank_policy,
            ct.layers.len(),
            ct.stored_params()
        );
        report["compressed"] = json!({
            "task_id": ct.task_id,
            "rank_policy": ct.rank_policy,
            "ranks": ct.ranks(),
            "stored_params": ct.stored_params(),
        });
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}
