//! `qdebias` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Machine-readable
//! output goes to stdout or files as JSON; logs go to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use qdebias::debias::{Aggregation, DebiasConfig, GeneratedConditions};
use qdebias::distortions::DistortionKind;
use qdebias::eval::{
    join_predictions, load_manifest, read_predictions, report, run_batch, vanilla_report,
    write_predictions, write_report_json, write_summary_csv, PlccMode,
};
use qdebias::image::{load_png, save_png, EncodedImage};
use qdebias::oracle::{
    HttpBackend, MockBackend, MockBiasConfig, OracleBackend, PromptKind, ResponseCache,
};
use qdebias::simulation::{evaluate_world, ExperimentOptions, SimConfig, SimWorld};

#[derive(Debug, Parser)]
#[command(name = "qdebias", version, about = "Debiased image quality scoring with conditional prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the conditional distortions of each input image as PNGs.
    Distort(DistortArgs),
    /// Score every image of a manifest and write predictions and reports.
    Infer(InferArgs),
    /// Correlate a predictions file with manifest MOS.
    Eval(EvalArgs),
    /// Generate a biased synthetic world and evaluate it with the mock backend.
    Simulate(SimulateArgs),
    /// Inspect a response cache.
    Cache(CacheArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Zoom,
    Spatter,
    Saturate,
    Fog,
    All,
}

#[derive(Debug, Args)]
struct DistortArgs {
    /// Input PNG files.
    inputs: Vec<PathBuf>,
    /// Read input images from a manifest CSV instead of (or as well as) positional paths.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Distortion family to apply.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindArg,
    /// Seed for the seeded distortions. Outputs match the conditions `infer` draws with the same seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; files are named `<stem>.<kind>.png`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// Logit source.
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    /// Base URL of a `/v1/logits` server; required with `--backend http`.
    #[arg(long, env = "QDEBIAS_ENDPOINT", hide_env_values = true, value_name = "URL")]
    endpoint: Option<String>,
    /// Model name reported to the cache key for the http backend.
    #[arg(long, value_name = "NAME", default_value = "default")]
    model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PromptArg {
    Cond,
    T1,
    T2,
    T3,
}

impl PromptArg {
    fn kind(self) -> PromptKind {
        match self {
            PromptArg::Cond => PromptKind::ConditionalQuality,
            PromptArg::T1 => PromptKind::ConditionalQualityT1,
            PromptArg::T2 => PromptKind::ConditionalQualityT2,
            PromptArg::T3 => PromptKind::ConditionalQualityT3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Semantic,
    Average,
    Wta,
}

#[derive(Debug, Args)]
struct DebiasArgs {
    /// Comma-separated distortion kinds used as conditions.
    #[arg(long, value_name = "LIST", default_value = "zoom,spatter,saturate,fog", value_parser = parse_kinds)]
    kinds: KindList,
    /// How per-condition probabilities are combined.
    #[arg(long, value_enum, default_value = "semantic")]
    aggregation: AggregationArg,
    /// Conditional prompt template.
    #[arg(long, value_enum, default_value = "cond")]
    prompt: PromptArg,
    /// Skip semantic-consistency queries and weight conditions uniformly.
    #[arg(long)]
    no_semantic: bool,
    /// Conditional images drawn per kind.
    #[arg(long, value_name = "N", default_value_t = 1)]
    samples_per_kind: usize,
}

impl DebiasArgs {
    fn config(&self, seed: u64) -> DebiasConfig {
        DebiasConfig {
            prompt_kind: self.prompt.kind(),
            aggregation: match self.aggregation {
                AggregationArg::Semantic => Aggregation::SemanticSoftmax,
                AggregationArg::Average => Aggregation::Average,
                AggregationArg::Wta => Aggregation::WinnerTakesAll,
            },
            enabled_kinds: self.kinds.0.clone(),
            semantic_consistency: !self.no_semantic,
            samples_per_kind: self.samples_per_kind,
            compute_vanilla: true,
            seed,
            ..DebiasConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
struct KindList(Vec<DistortionKind>);

fn parse_kinds(s: &str) -> Result<KindList, String> {
    let kinds = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<DistortionKind>, String>>()?;
    if kinds.is_empty() {
        return Err("at least one kind is required".into());
    }
    Ok(KindList(kinds))
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Manifest CSV of images to score.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Output directory for predictions.jsonl, report.json, report_vanilla.json and summary.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// JSONL response cache; created if missing.
    #[arg(long, value_name = "PATH")]
    cache: Option<PathBuf>,
    #[command(flatten)]
    debias: DebiasArgs,
    /// Seed mixed into each image's distortion draws.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Report PLCC after a 4-parameter logistic fit.
    #[arg(long)]
    plcc_logistic: bool,
    /// Worker threads for scoring.
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallelism: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions JSONL written by `infer` or `simulate`.
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,
    /// Manifest CSV supplying MOS.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Directory to write report.json into; stdout only when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Label stored in the report.
    #[arg(long, default_value = "debiased")]
    label: String,
    /// Report PLCC after a 4-parameter logistic fit.
    #[arg(long)]
    plcc_logistic: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of synthetic images.
    #[arg(long, value_name = "N", default_value_t = 200)]
    n: usize,
    /// Number of semantic classes.
    #[arg(long, value_name = "N", default_value_t = 4)]
    classes: usize,
    /// Seed for image generation and the mock backend.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for images, manifest and reports.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Class biases are spread evenly over [-M, M].
    #[arg(long, value_name = "M", default_value_t = 3.0)]
    bias_magnitude: f64,
    /// Mock logit slope in latent quality.
    #[arg(long, default_value_t = 6.0)]
    alpha: f64,
    /// Side length of the synthetic images.
    #[arg(long, value_name = "PX", default_value_t = 64)]
    image_size: usize,
    /// Standard deviation of the mock's conditional logit noise.
    #[arg(long, value_name = "SIGMA", default_value_t = 0.0)]
    condition_noise: f64,
    /// Log-normal spread of per-condition noise scales.
    #[arg(long, value_name = "S", default_value_t = 0.0)]
    noise_spread: f64,
    /// JSONL response cache; created if missing.
    #[arg(long, value_name = "PATH")]
    cache: Option<PathBuf>,
    #[command(flatten)]
    debias: DebiasArgs,
    /// Report PLCC after a 4-parameter logistic fit.
    #[arg(long)]
    plcc_logistic: bool,
    /// Worker threads for scoring.
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallelism: usize,
}

#[derive(Debug, Args)]
struct CacheArgs {
    #[command(subcommand)]
    action: CacheAction,
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    /// Entry counts per backend and prompt kind.
    Stats {
        /// JSONL response cache.
        #[arg(long, value_name = "PATH")]
        cache: PathBuf,
    },
}

/// A usage problem found after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn plcc_mode(logistic: bool) -> PlccMode {
    if logistic {
        PlccMode::Logistic
    } else {
        PlccMode::Raw
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open_cache(path: Option<&Path>) -> Result<Option<ResponseCache>> {
    path.map(|p| ResponseCache::open(p).with_context(|| format!("opening cache {}", p.display())))
        .transpose()
}

fn make_backend(args: &BackendArgs) -> Result<Box<dyn OracleBackend>> {
    match args.backend {
        BackendArg::Mock => Ok(Box::new(
            MockBackend::new(MockBiasConfig::default()).map_err(anyhow::Error::msg)?,
        )),
        BackendArg::Http => {
            let Some(endpoint) = args.endpoint.as_deref().filter(|e| !e.trim().is_empty()) else {
                return Err(usage("--backend http requires --endpoint URL (or QDEBIAS_ENDPOINT)"));
            };
            let b = HttpBackend::new(endpoint, &args.model_id).map_err(|e| usage(e.to_string()))?;
            Ok(Box::new(b))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn distort(args: &DistortArgs) -> Result<()> {
    let Some(seed) = args.seed else {
        return Err(usage("distort requires --seed N"));
    };
    let mut inputs = args.inputs.clone();
    if let Some(m) = &args.manifest {
        inputs.extend(load_manifest(m)?.into_iter().map(|e| e.path));
    }
    if inputs.is_empty() {
        return Err(usage("distort needs input images or --manifest"));
    }
    let kinds: Vec<DistortionKind> = match args.kind {
        KindArg::All => DistortionKind::ALL.to_vec(),
        KindArg::Zoom => vec![DistortionKind::ZoomBlur],
        KindArg::Spatter => vec![DistortionKind::Spatter],
        KindArg::Saturate => vec![DistortionKind::Saturate],
        KindArg::Fog => vec![DistortionKind::Fog],
    };
    create_dir(&args.out)?;
    let cfg = DebiasConfig {
        seed,
        ..DebiasConfig::default()
    };
    let mut written = Vec::new();
    for path in &inputs {
        let image = load_png(path).with_context(|| format!("reading {}", path.display()))?;
        let params = cfg.params_for(EncodedImage::new(image.clone())?.hash_u64(), 0);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        for &kind in &kinds {
            let out = args.out.join(format!("{stem}.{}.png", kind.short_name()));
            let y = params.apply(kind, &image).with_context(|| format!("{kind} on {}", path.display()))?;
            save_png(&y, &out)?;
            log::info!("wrote {}", out.display());
            written.push(out);
        }
    }
    print_json(&json!({ "written": written }))
}

fn infer(args: &InferArgs) -> Result<()> {
    if args.parallelism == 0 {
        return Err(usage("--parallelism must be >= 1"));
    }
    let backend = make_backend(&args.backend)?;
    let cfg = args.debias.config(args.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let entries = load_manifest(&args.manifest)?;
    let cache = open_cache(args.cache.as_deref())?;
    create_dir(&args.out)?;
    log::info!("scoring {} images with {}", entries.len(), backend.id());
    let out = run_batch(&*backend, cache.as_ref(), &entries, &cfg, args.parallelism)?;
    write_predictions(args.out.join("predictions.jsonl"), &out.records)?;
    let mode = plcc_mode(args.plcc_logistic);
    let n_skipped = out.skipped.len();
    let debiased = report(&out.records, "debiased", n_skipped, mode)?;
    write_report_json(args.out.join("report.json"), &debiased)?;
    let mut summary = vec![debiased.clone()];
    if let Some(v) = vanilla_report(&out.records, n_skipped, mode)? {
        write_report_json(args.out.join("report_vanilla.json"), &v)?;
        summary.push(v);
    }
    write_summary_csv(args.out.join("summary.csv"), &summary)?;
    if let Some(c) = &cache {
        let s = c.stats();
        log::info!("cache: {} entries, {} hits, {} misses", s.entries, s.hits, s.misses);
    }
    print_json(&json!({ "report": debiased, "skipped": out.skipped }))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let entries = load_manifest(&args.manifest)?;
    let preds = read_predictions(&args.predictions)?;
    let (joined, missing) = join_predictions(&entries, preds)?;
    if missing > 0 {
        log::warn!("{missing} manifest entries have no prediction");
    }
    let r = report(&joined, &args.label, missing, plcc_mode(args.plcc_logistic))?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_report_json(dir.join("report.json"), &r)?;
    }
    print_json(&r)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let Some(seed) = args.seed else {
        return Err(usage("simulate requires --seed N"));
    };
    if args.parallelism == 0 {
        return Err(usage("--parallelism must be >= 1"));
    }
    let sim = SimConfig {
        n_images: args.n,
        n_classes: args.classes,
        class_bias_magnitude: args.bias_magnitude,
        image_size: args.image_size,
        seed,
        condition_noise_spread: args.noise_spread,
        ..SimConfig::default()
    };
    sim.validate().map_err(|e| usage(e.to_string()))?;
    let mock = MockBiasConfig {
        alpha: args.alpha,
        seed,
        condition_noise: args.condition_noise,
        ..MockBiasConfig::default()
    };
    mock.validate().map_err(usage)?;
    let cfg = args.debias.config(seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(&args.out)?;
    let cache = open_cache(args.cache.as_deref())?;
    let world = SimWorld::build(&sim, &mock, &cfg, &args.out)?;
    log::info!("simulating {} images in {} classes", args.n, args.classes);
    let opts = ExperimentOptions {
        parallelism: args.parallelism,
        plcc_mode: plcc_mode(args.plcc_logistic),
        ..ExperimentOptions::default()
    };
    let exp = evaluate_world(&world, &world.backend, cache.as_ref(), &cfg, &GeneratedConditions, &opts, &args.out)?;
    print_json(&exp)
}

fn cache_stats(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("cache file {} does not exist", path.display());
    }
    let cache = ResponseCache::open(path)?;
    let mut by_backend: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in cache.records()? {
        *by_backend.entry(r.backend_id).or_default().entry(r.prompt_kind).or_default() += 1;
    }
    print_json(&json!({
        "path": path,
        "entries": cache.len(),
        "backends": by_backend,
    }))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Distort(a) => distort(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Cache(CacheArgs {
            action: CacheAction::Stats { cache },
        }) => cache_stats(cache),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n");
            let name = subcommand_name(&cli.command);
            let mut cmd = Cli::command();
            cmd.build();
            let sub = cmd.find_subcommand_mut(name).expect("subcommand exists");
            eprintln!("{}", sub.render_usage());
            ExitCode::from(1)
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": causes }));
            ExitCode::from(2)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Distort(_) => "distort",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Simulate(_) => "simulate",
        Command::Cache(_) => "cache",
    }
}
