//! Command-line surface: group inspection, equivariance audits, dataset
//! generation, training, evaluation, and micro-benchmarks.
//!
//! Every command prints a human summary on stdout and can additionally write
//! a machine-readable [`RunReport`] as JSON. Exit codes: 0 pass, 1 usage or
//! I/O error, 2 property failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gconv::{
    check_equivariance, conv3d, conv3d_backward, gconv_backward, gconv_lift, max_errors, ConvSpec,
    GconvKind,
};
use crate::network::{
    build_graph, load_network, read_manifest, save_network, train, Network, TrainConfig,
};
use crate::polycube::{
    evaluate, generate_dataset, load_dataset, save_dataset, Dataset, DatasetManifest,
};
use crate::scalar::Scalar;
use crate::symmetry::{FiniteRotationGroup, GroupKind};
use crate::voxel::{apply_group_action, FeatureMap, MapShape};

/// Machine-readable record of one harness invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub library_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub precision: String,
    pub threads: usize,
    pub timings_ms: BTreeMap<String, f64>,
    pub metrics: serde_json::Value,
    pub passed: bool,
}

impl RunReport {
    fn new(command: String, hash: String, precision: &str, threads: usize) -> Self {
        RunReport {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config_hash: hash,
            seed: None,
            precision: precision.to_string(),
            threads,
            timings_ms: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            passed: true,
        }
    }
}

/// SHA-256 of the canonical JSON serialization.
pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).unwrap_or_default();
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Parser, Debug)]
#[command(name = "cubekit", version, about = "Group-equivariant 3D convolution toolkit")]
pub struct Cli {
    /// Worker threads (falls back to CUBEKIT_THREADS, then all cores).
    /// 1 guarantees bitwise determinism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inspect a rotation group: Cayley table, axiom audit, CSV export.
    Group(GroupArgs),
    /// Numerically audit layer equivariance or whole-network invariance.
    Equivariance(EquivarianceArgs),
    /// Generate a polycube benchmark dataset directory.
    Dataset(DatasetArgs),
    /// Train a model from a JSON config onto a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset, broken down per rotation.
    Eval(EvalArgs),
    /// Time group convolution against plain convolution at matched
    /// parameter count.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GroupArgs {
    /// V, T4, or S4.
    pub kind: String,
    /// Print the Cayley table.
    #[arg(long)]
    pub table: bool,
    /// Run the group-axiom audit (exit 2 on failure).
    #[arg(long)]
    pub verify: bool,
    /// Export the Cayley table as CSV to this path.
    #[arg(long, value_name = "CSV-PATH")]
    pub export: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EquivarianceArgs {
    #[arg(long, default_value = "V")]
    pub group: String,
    /// lift, hidden, or network.
    #[arg(long, default_value = "hidden")]
    pub layer: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value = "f64")]
    pub precision: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value = "S4")]
    pub group: String,
    #[arg(long, default_value_t = 9)]
    pub grid: usize,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub translation: i64,
    #[arg(long, default_value_t = -1.0)]
    pub low: f64,
    #[arg(long, default_value_t = 5.0)]
    pub high: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also save the (possibly generated) dataset here.
    #[arg(long, value_name = "DIR")]
    pub save_dataset: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "V")]
    pub group: String,
    /// Cubic input edge length.
    #[arg(long, default_value_t = 9)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

/// Training configuration file. Unknown fields are rejected so typos
/// surface as schema errors rather than silently applied defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub group: String,
    pub layers: Vec<String>,
    pub channels: Vec<usize>,
    pub kernel: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_step: LrStep,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Either a dataset directory or an inline generation manifest; when
    /// absent, the default benchmark is generated with the model's group
    /// and this config's seed.
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
}

fn default_epochs() -> usize {
    25
}
fn default_lr() -> f64 {
    1e-3
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    7
}
fn default_precision() -> String {
    "f64".to_string()
}
fn default_batch_size() -> usize {
    16
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrStep {
    pub factor: f64,
    pub every: usize,
}

impl Default for LrStep {
    fn default() -> Self {
        LrStep { factor: 0.2, every: 5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path { path: PathBuf },
    Generate(DatasetManifest),
}

impl HarnessConfig {
    /// A paper-defaults Klein-group configuration for the default benchmark.
    pub fn default_v() -> Self {
        HarnessConfig {
            group: "V".to_string(),
            layers: [
                "lift",
                "batch_norm",
                "relu",
                "hidden",
                "batch_norm",
                "relu",
                "global_pool",
                "group_pool",
                "dense",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            channels: vec![4, 4],
            kernel: 3,
            epochs: 25,
            lr: default_lr(),
            lr_step: LrStep::default(),
            noise_std: default_noise_std(),
            seed: default_seed(),
            precision: default_precision(),
            batch_size: default_batch_size(),
            dataset: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_step_factor: self.lr_step.factor,
            lr_step_every: self.lr_step.every,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("CUBEKIT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .filter(|&n| n > 0)
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let threads = resolve_threads(cli.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| dispatch(cli.command, threads))
}

fn dispatch(command: Command, threads: usize) -> i32 {
    match command {
        Command::Group(args) => cmd_group(args, threads),
        Command::Equivariance(args) => cmd_equivariance(args, threads),
        Command::Dataset(args) => cmd_dataset(args, threads),
        Command::Train(args) => cmd_train(args, threads),
        Command::Eval(args) => cmd_eval(args, threads),
        Command::Bench(args) => cmd_bench(args, threads),
    }
}

fn usage_error(message: &str) -> i32 {
    eprintln!("error: {message}");
    1
}

fn write_report(path: &Option<PathBuf>, report: &RunReport) -> Result<(), std::io::Error> {
    if let Some(path) = path {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut json = serde_json::to_string_pretty(report)?;
        json.push('\n');
        fs::write(path, json)?;
    }
    Ok(())
}

fn parse_group(kind: &str) -> Result<GroupKind, i32> {
    GroupKind::parse(kind).ok_or_else(|| usage_error(&format!("unknown group kind {kind:?}; expected V, T4, or S4")))
}

pub fn cmd_group(args: GroupArgs, threads: usize) -> i32 {
    let kind = match parse_group(&args.kind) {
        Ok(k) => k,
        Err(code) => return code,
    };
    if !args.table && !args.verify && args.export.is_none() {
        return usage_error("group: pass at least one of --table, --verify, --export");
    }
    let start = Instant::now();
    let group = FiniteRotationGroup::generate(kind);
    let mut report = RunReport::new(
        format!("group {} ", args.kind),
        config_hash(&(kind.name(), args.table, args.verify)),
        "exact-integer",
        threads,
    );
    let mut passed = true;
    let mut metrics = serde_json::Map::new();
    metrics.insert("order".into(), group.order().into());

    if args.table {
        println!("Cayley table for {kind} (|G| = {}):", group.order());
        print!("      ");
        for j in 0..group.order() {
            print!("g{j:<3}");
        }
        println!();
        for i in 0..group.order() {
            print!("g{i:<4} ");
            for j in 0..group.order() {
                print!("{:<4}", group.compose(i, j));
            }
            println!();
        }
    }
    if args.verify {
        let axioms = group.verify_axioms();
        println!(
            "axioms for {kind}: closure={} associativity={} identity={} invertibility={}",
            axioms.closure, axioms.associativity, axioms.identity, axioms.invertibility
        );
        passed &= axioms.all_pass();
        metrics.insert("axioms".into(), serde_json::to_value(axioms).unwrap());
    }
    if let Some(path) = &args.export {
        if let Err(e) = fs::write(path, group.cayley_csv()) {
            return usage_error(&format!("cannot write {}: {e}", path.display()));
        }
        println!("wrote {}", path.display());
    }
    report
        .timings_ms
        .insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    report.metrics = serde_json::Value::Object(metrics);
    report.passed = passed;
    if let Err(e) = write_report(&args.json, &report) {
        return usage_error(&format!("cannot write report: {e}"));
    }
    if passed {
        0
    } else {
        2
    }
}

fn layer_kind(name: &str) -> Option<GconvKind> {
    match name {
        "lift" => Some(GconvKind::Lift),
        "hidden" => Some(GconvKind::Hidden),
        _ => None,
    }
}

/// Whole-network invariance: worst relative logit deviation across random
/// inputs and all group rotations for a small freshly initialized model.
fn network_invariance_error<T: Scalar>(group: &FiniteRotationGroup, trials: usize, seed: u64) -> f64 {
    let names: Vec<String> = [
        "lift",
        "relu",
        "hidden",
        "relu",
        "global_pool",
        "group_pool",
        "dense",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let graph = build_graph(group.kind(), &names, &[2, 3], 3, 4).unwrap();
    let grid = [6, 6, 6];
    let net = Network::<T>::init(graph, 1, grid, seed).unwrap();
    let mut rng = StdRng::seed_from_u64(seed ^ 0xABCD);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let input = FeatureMap::<T>::from_fn(MapShape::new(1, 1, grid[0], grid[1], grid[2]), |_, _, _, _, _| {
            T::from_f64(rng.gen_range(-1.0..1.0))
        });
        let base = net.logits(&input);
        for p in 0..group.order() {
            let rotated = apply_group_action(&input, group, p).unwrap();
            let out = net.logits(&rotated);
            let (_, rel) = max_errors(&out, &base);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn cmd_equivariance(args: EquivarianceArgs, threads: usize) -> i32 {
    let kind = match parse_group(&args.group) {
        Ok(k) => k,
        Err(code) => return code,
    };
    if args.precision != "f32" && args.precision != "f64" {
        return usage_error(&format!("unknown precision {:?}; expected f32 or f64", args.precision));
    }
    let group = FiniteRotationGroup::generate(kind);
    let start = Instant::now();
    let mut report = RunReport::new(
        format!(
            "equivariance --group {} --layer {} --trials {} --tol {} --precision {}",
            args.group, args.layer, args.trials, args.tol, args.precision
        ),
        config_hash(&(kind.name(), &args.layer, args.trials, args.tol.to_bits(), &args.precision, args.seed)),
        &args.precision,
        threads,
    );
    report.seed = Some(args.seed);

    let (max_abs, max_rel, passed) = match (args.layer.as_str(), args.precision.as_str()) {
        ("network", "f64") => {
            let rel = network_invariance_error::<f64>(&group, args.trials, args.seed);
            (rel, rel, rel <= args.tol)
        }
        ("network", "f32") => {
            let rel = network_invariance_error::<f32>(&group, args.trials, args.seed);
            (rel, rel, rel <= args.tol)
        }
        (layer, precision) => {
            let Some(kind) = layer_kind(layer) else {
                return usage_error(&format!("unknown layer {layer:?}; expected lift, hidden, or network"));
            };
            let rep = if precision == "f64" {
                check_equivariance::<f64>(kind, &group, args.trials, args.tol, args.seed)
            } else {
                check_equivariance::<f32>(kind, &group, args.trials, args.tol, args.seed)
            };
            (rep.max_abs_error, rep.max_rel_error, rep.passed)
        }
    };

    println!(
        "equivariance {} {} ({} trials, {}): max abs {max_abs:.3e}, max rel {max_rel:.3e}, tol {:.1e} -> {}",
        args.group,
        args.layer,
        args.trials,
        args.precision,
        args.tol,
        if passed { "PASS" } else { "FAIL" }
    );
    report
        .timings_ms
        .insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    report.metrics = serde_json::json!({
        "max_abs_error": max_abs,
        "max_rel_error": max_rel,
        "tolerance": args.tol,
        "trials": args.trials,
        "group_order": group.order(),
    });
    report.passed = passed;
    if let Err(e) = write_report(&args.json, &report) {
        return usage_error(&format!("cannot write report: {e}"));
    }
    if passed {
        0
    } else {
        2
    }
}

pub fn cmd_dataset(args: DatasetArgs, threads: usize) -> i32 {
    let kind = match parse_group(&args.group) {
        Ok(k) => k,
        Err(code) => return code,
    };
    let manifest = DatasetManifest {
        grid: args.grid,
        group: kind,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        max_translation: args.translation,
        value_low: args.low,
        value_high: args.high,
        seed: args.seed,
        ..DatasetManifest::default()
    };
    let start = Instant::now();
    let dataset = match generate_dataset::<f64>(&manifest) {
        Ok(d) => d,
        Err(e) => return usage_error(&format!("dataset generation failed: {e}")),
    };
    if let Err(e) = save_dataset(&args.out, &dataset) {
        return usage_error(&format!("cannot write dataset: {e}"));
    }
    println!(
        "dataset: {} train, {} test samples ({} classes x {} rotations) -> {}",
        dataset.train.len(),
        dataset.test.len(),
        manifest.classes.len(),
        FiniteRotationGroup::generate(kind).order(),
        args.out.display()
    );
    let mut report = RunReport::new(
        format!("dataset --group {} --seed {}", args.group, args.seed),
        config_hash(&manifest),
        "f64",
        threads,
    );
    report.seed = Some(args.seed);
    report
        .timings_ms
        .insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    report.metrics = serde_json::json!({
        "train_samples": dataset.train.len(),
        "test_samples": dataset.test.len(),
        "classes": manifest.classes.len(),
        "grid": manifest.grid,
    });
    if let Err(e) = write_report(&args.json, &report) {
        return usage_error(&format!("cannot write report: {e}"));
    }
    0
}

fn obtain_dataset<T: Scalar>(
    config: &HarnessConfig,
    group: GroupKind,
) -> Result<(Dataset<T>, DatasetManifest), String> {
    match &config.dataset {
        Some(DatasetSource::Path { path }) => {
            let ds = load_dataset::<T>(path).map_err(|e| format!("cannot load dataset {}: {e}", path.display()))?;
            let manifest = ds.manifest.clone();
            Ok((ds, manifest))
        }
        Some(DatasetSource::Generate(manifest)) => {
            let ds = generate_dataset::<T>(manifest).map_err(|e| format!("dataset generation failed: {e}"))?;
            Ok((ds, manifest.clone()))
        }
        None => {
            let manifest = DatasetManifest {
                group,
                seed: config.seed,
                ..DatasetManifest::default()
            };
            let ds = generate_dataset::<T>(&manifest).map_err(|e| format!("dataset generation failed: {e}"))?;
            Ok((ds, manifest))
        }
    }
}

fn run_train<T: Scalar>(config: &HarnessConfig, args: &TrainArgs, threads: usize) -> Result<(RunReport, bool), String> {
    let group = GroupKind::parse(&config.group).ok_or_else(|| format!("unknown group {:?}", config.group))?;
    let (dataset, manifest) = obtain_dataset::<T>(config, group)?;
    if let Some(dir) = &args.save_dataset {
        save_dataset(dir, &dataset).map_err(|e| format!("cannot save dataset: {e}"))?;
    }
    let n_classes = manifest.classes.len();
    let graph = build_graph(group, &config.layers, &config.channels, config.kernel, n_classes)
        .map_err(|e| format!("invalid graph: {e}"))?;
    let grid = [manifest.grid; 3];
    let mut net = Network::<T>::init(graph, 1, grid, config.seed).map_err(|e| format!("invalid graph: {e}"))?;

    let samples: Vec<(FeatureMap<T>, usize)> = dataset
        .train
        .iter()
        .map(|s| (s.map.clone(), s.label))
        .collect();
    let t_train = Instant::now();
    let train_report = train(&mut net, &samples, &config.train_config());
    let train_ms = t_train.elapsed().as_secs_f64() * 1e3;

    save_network(&args.out, &net).map_err(|e| format!("cannot save checkpoint: {e}"))?;

    let losses = &train_report.epoch_losses;
    println!(
        "trained {} epochs on {} samples ({} params); loss {:.4} -> {:.4}; checkpoint {}",
        config.epochs,
        samples.len(),
        net.parameter_count(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );

    let mut report = RunReport::new(
        format!("train --config {} --out {}", args.config.display(), args.out.display()),
        config_hash(config),
        &config.precision,
        threads,
    );
    report.seed = Some(config.seed);
    report.timings_ms.insert("train".into(), train_ms);
    report.metrics = serde_json::json!({
        "epoch_losses": train_report.epoch_losses,
        "steps": train_report.steps,
        "final_lr": train_report.final_lr,
        "parameters": net.parameter_count(),
        "train_samples": samples.len(),
    });
    Ok((report, true))
}

pub fn cmd_train(args: TrainArgs, threads: usize) -> i32 {
    let raw = match fs::read_to_string(&args.config) {
        Ok(r) => r,
        Err(e) => return usage_error(&format!("cannot read config {}: {e}", args.config.display())),
    };
    let config: HarnessConfig = match serde_json::from_str(&raw) {
        Ok(c) => c,
        Err(e) => return usage_error(&format!("config schema violation in {}: {e}", args.config.display())),
    };
    let result = match config.precision.as_str() {
        "f64" => run_train::<f64>(&config, &args, threads),
        "f32" => run_train::<f32>(&config, &args, threads),
        other => return usage_error(&format!("unknown precision {other:?}; expected f32 or f64")),
    };
    match result {
        Ok((report, passed)) => {
            if let Err(e) = write_report(&args.json, &report) {
                return usage_error(&format!("cannot write report: {e}"));
            }
            if passed {
                0
            } else {
                2
            }
        }
        Err(message) => usage_error(&message),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs, threads: usize) -> Result<RunReport, String> {
    let net = load_network::<T>(&args.checkpoint)
        .map_err(|e| format!("cannot load checkpoint {}: {e}", args.checkpoint.display()))?;
    let dataset = load_dataset::<T>(&args.dataset)
        .map_err(|e| format!("cannot load dataset {}: {e}", args.dataset.display()))?;
    let group = FiniteRotationGroup::generate(dataset.manifest.group);
    let t = Instant::now();
    let eval = evaluate(&net, &dataset.test, &group);
    let eval_ms = t.elapsed().as_secs_f64() * 1e3;

    println!("per-rotation accuracy ({} test samples):", dataset.test.len());
    for slot in &eval.per_rotation {
        println!(
            "  g{:<3} {:>6.4}  ({}/{})",
            slot.rotation, slot.accuracy, slot.correct, slot.total
        );
    }
    println!("single-view accuracy:       {:.4}", eval.single_view_accuracy);
    println!("rotation-averaged accuracy: {:.4}", eval.rotation_averaged_accuracy);

    let mut report = RunReport::new(
        format!(
            "eval --checkpoint {} --dataset {}",
            args.checkpoint.display(),
            args.dataset.display()
        ),
        config_hash(&(
            args.checkpoint.display().to_string(),
            args.dataset.display().to_string(),
        )),
        T::DTYPE.name(),
        threads,
    );
    report.seed = Some(net.seed());
    report.timings_ms.insert("eval".into(), eval_ms);
    report.metrics = serde_json::to_value(&eval).unwrap();
    Ok(report)
}

pub fn cmd_eval(args: EvalArgs, threads: usize) -> i32 {
    let manifest = match read_manifest(&args.checkpoint) {
        Ok(m) => m,
        Err(e) => return usage_error(&format!("cannot read checkpoint {}: {e}", args.checkpoint.display())),
    };
    let result = match manifest.precision.as_str() {
        "f64" => run_eval::<f64>(&args, threads),
        "f32" => run_eval::<f32>(&args, threads),
        other => return usage_error(&format!("checkpoint has unknown precision {other:?}")),
    };
    match result {
        Ok(report) => {
            if let Err(e) = write_report(&args.json, &report) {
                return usage_error(&format!("cannot write report: {e}"));
            }
            0
        }
        Err(message) => usage_error(&message),
    }
}

fn median(samples: &mut [f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Timings in milliseconds for one benchmark arm.
#[derive(Clone, Debug, Serialize)]
pub struct BenchArm {
    pub forward_ms: f64,
    pub backward_ms: f64,
}

pub fn cmd_bench(args: BenchArgs, threads: usize) -> i32 {
    let kind = match parse_group(&args.group) {
        Ok(k) => k,
        Err(code) => return code,
    };
    let group = FiniteRotationGroup::generate(kind);
    let spec = ConvSpec::same();
    let n = args.size;
    let c = args.channels;
    let mut rng = StdRng::seed_from_u64(args.seed);
    let input = FeatureMap::<f64>::from_fn(MapShape::new(c, 1, n, n, n), |_, _, _, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let filters = crate::gconv::random_bank::<f64>(c, c, 1, 3, &mut rng, 0.2);

    let mut report = RunReport::new(
        format!(
            "bench --group {} --size {} --channels {} --iters {}",
            args.group, args.size, args.channels, args.iters
        ),
        config_hash(&(kind.name(), args.size, args.channels, args.iters, args.seed)),
        "f64",
        threads,
    );
    report.seed = Some(args.seed);

    if args.iters == 0 {
        println!("bench: zero iterations requested; nothing to time");
        report.metrics = serde_json::json!({ "group_order": group.order(), "iterations": 0 });
        if let Err(e) = write_report(&args.json, &report) {
            return usage_error(&format!("cannot write report: {e}"));
        }
        return 0;
    }

    // Plain convolution arm. Same filter tensor shape as the lift arm, so
    // the learnable parameter counts match exactly.
    let plain_out = conv3d(&input, &filters, &spec).unwrap();
    let plain_upstream = FeatureMap::<f64>::from_fn(plain_out.shape(), |_, _, _, _, _| 1.0);
    let mut plain_fwd = Vec::with_capacity(args.iters);
    let mut plain_bwd = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let t = Instant::now();
        let out = conv3d(&input, &filters, &spec).unwrap();
        plain_fwd.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
        let t = Instant::now();
        let grads = conv3d_backward(&input, &filters, &plain_upstream, &spec).unwrap();
        plain_bwd.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(grads);
    }

    // Lifting group-convolution arm.
    let lift_out = gconv_lift(&input, &filters, &group, &spec).unwrap();
    let lift_upstream = FeatureMap::<f64>::from_fn(lift_out.shape(), |_, _, _, _, _| 1.0);
    let mut lift_fwd = Vec::with_capacity(args.iters);
    let mut lift_bwd = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let t = Instant::now();
        let out = gconv_lift(&input, &filters, &group, &spec).unwrap();
        lift_fwd.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
        let t = Instant::now();
        let grads =
            gconv_backward(GconvKind::Lift, &input, &filters, &lift_upstream, &group, &spec).unwrap();
        lift_bwd.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(grads);
    }

    let plain = BenchArm {
        forward_ms: median(&mut plain_fwd),
        backward_ms: median(&mut plain_bwd),
    };
    let lift = BenchArm {
        forward_ms: median(&mut lift_fwd),
        backward_ms: median(&mut lift_bwd),
    };
    let ratio_fwd = lift.forward_ms / plain.forward_ms;
    let ratio_bwd = lift.backward_ms / plain.backward_ms;
    let ratio_total = (lift.forward_ms + lift.backward_ms) / (plain.forward_ms + plain.backward_ms);

    println!(
        "bench {} ({}^3, {} ch, {} iters, params {}):",
        args.group,
        n,
        c,
        args.iters,
        filters.data().len()
    );
    println!("  plain conv   fwd {:.3} ms  bwd {:.3} ms", plain.forward_ms, plain.backward_ms);
    println!("  group conv   fwd {:.3} ms  bwd {:.3} ms", lift.forward_ms, lift.backward_ms);
    println!("  ratio        fwd {ratio_fwd:.2}x  bwd {ratio_bwd:.2}x  total {ratio_total:.2}x (|G| = {})", group.order());

    report.metrics = serde_json::json!({
        "group_order": group.order(),
        "iterations": args.iters,
        "parameters": filters.data().len(),
        "plain": plain,
        "gconv": lift,
        "ratio_forward": ratio_fwd,
        "ratio_backward": ratio_bwd,
        "ratio_total": ratio_total,
    });
    if let Err(e) = write_report(&args.json, &report) {
        return usage_error(&format!("cannot write report: {e}"));
    }
    0
}
