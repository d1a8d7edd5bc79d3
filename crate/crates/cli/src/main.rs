//! Command-line front end: run batches, render reports, replay traces, and
//! emit the cumulative ablation ladder.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use egoreason::backend::{
    default_generation_params, Backend, CachingBackend, HttpBackend, HttpBackendConfig,
    ScriptedBackend, ScriptedReply, VisualBudget,
};
use egoreason::calibrate::CalibrateOptions;
use egoreason::harness::report::{aggregate, emit_report, render_ladder, run_ladder, ReportFormat};
use egoreason::harness::{AblationConfig, Pipeline, SampleResult, TraceDoc};
use egoreason::reasoning::TemplateSet;
use egoreason::router::{PathMatrix, RoutingRuleTable};
use egoreason::sample::{parse_dataset, IngestMode, Label, Sample};

#[derive(Parser)]
#[command(
    name = "egoreason",
    version,
    about = "Routed reasoning pipeline for egocentric video QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write results, traces, and a report.
    Run(RunArgs),
    /// Aggregate persisted results into a report.
    Report(ReportArgs),
    /// Re-render persisted traces as readable transcripts.
    Replay(ReplayArgs),
    /// Run the cumulative five-variant ablation ladder.
    Ladder(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
    Csv,
}

impl From<OutputFormat> for ReportFormat {
    fn from(value: OutputFormat) -> Self {
        match value {
            OutputFormat::Table => ReportFormat::TableText,
            OutputFormat::Json => ReportFormat::Json,
            OutputFormat::Csv => ReportFormat::CsvPredictions,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Line-delimited JSON dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for results, traces, and reports.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = BackendKind::Http)]
    backend: BackendKind,
    /// Chat-completions endpoint URL (http backend).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model identifier sent with every request.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    token_env: Option<String>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Maximum concurrent in-flight requests per endpoint.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Scripted replies file (scripted backend).
    #[arg(long)]
    script: Option<PathBuf>,

    /// Concurrent samples in flight.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Abort on the first malformed dataset record.
    #[arg(long)]
    strict: bool,

    #[arg(long)]
    no_ten: bool,
    #[arg(long)]
    no_cor: bool,
    #[arg(long)]
    no_rdr: bool,
    #[arg(long)]
    no_bov: bool,
    #[arg(long)]
    no_dac_recovery: bool,
    #[arg(long)]
    no_high_res_industry: bool,

    /// Label emitted when calibration cannot recover anything.
    #[arg(long)]
    fallback_label: Option<Label>,
    #[arg(long)]
    max_per_segment: Option<usize>,
    /// Alternate routing-rule table (JSON).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Alternate capability-by-domain path matrix (JSON).
    #[arg(long)]
    path_matrix: Option<PathBuf>,
    /// Directory of stage templates (perception.txt, dynamics.txt, ...).
    #[arg(long)]
    templates: Option<PathBuf>,

    #[arg(long)]
    max_new_tokens: Option<u32>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    /// Accept generation parameters outside the admissible interval.
    #[arg(long)]
    force_params: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_pixels: Option<u64>,
    #[arg(long)]
    high_res_pixels: Option<u64>,

    /// Response cache directory (digest-keyed).
    #[arg(long)]
    cache_dir: Option<PathBuf>,

    /// Report format printed to stdout after the run.
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory previously passed to `run --out`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Directory previously passed to `run --out`.
    #[arg(long)]
    results: PathBuf,
    /// Only replay this sample id.
    #[arg(long)]
    sample: Option<String>,
    /// Include full rendered prompts, not just outputs.
    #[arg(long)]
    full: bool,
}

/// Optional JSON config file; every field can be overridden by a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    endpoint: Option<String>,
    model: Option<String>,
    token_env: Option<String>,
    timeout_secs: Option<u64>,
    max_in_flight: Option<usize>,
    max_new_tokens: Option<u32>,
    repetition_penalty: Option<f64>,
    temperature: Option<f64>,
    max_pixels: Option<u64>,
    high_res_pixels: Option<u64>,
    max_per_segment: Option<usize>,
    fallback_label: Option<Label>,
    rules: Option<PathBuf>,
    path_matrix: Option<PathBuf>,
    templates: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    per_domain_penalty: Option<BTreeMap<String, f64>>,
}

/// Scripted-backend replies file.
#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum ScriptFile {
    Ordered {
        replies: Vec<ScriptedReply>,
    },
    Keyed {
        replies: BTreeMap<String, ScriptedReply>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args, false),
        Command::Ladder(args) => run(args, true),
        Command::Report(args) => report(args),
        Command::Replay(args) => replay(args),
    }
}

fn load_samples(path: &Path, strict: bool) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).with_context(|| format!("open dataset {}", path.display()))?;
    let mode = if strict {
        IngestMode::Strict
    } else {
        IngestMode::Lenient
    };
    let parsed = parse_dataset(BufReader::new(file), mode)
        .with_context(|| format!("parse dataset {}", path.display()))?;
    if !parsed.rejected.is_empty() {
        eprintln!("skipped {} malformed record(s):", parsed.rejected.len());
        for bad in &parsed.rejected {
            eprintln!("  {bad}");
        }
    }
    if parsed.samples.is_empty() {
        bail!("dataset {} contains no valid samples", path.display());
    }
    Ok(parsed.samples)
}

fn build_pipeline(args: &RunArgs, config: &FileConfig) -> Result<Pipeline> {
    let mut pipeline = Pipeline {
        ablation: AblationConfig {
            enable_ten: !args.no_ten,
            enable_cor: !args.no_cor,
            enable_rdr: !args.no_rdr,
            enable_bov: !args.no_bov,
            enable_dac_recovery: !args.no_dac_recovery,
            high_res_industry: !args.no_high_res_industry,
        },
        ..Pipeline::default()
    };

    let params = default_generation_params();
    let ceiling = params.max_new_tokens;
    if let Some(tokens) = args.max_new_tokens.or(config.max_new_tokens) {
        pipeline.policy.max_new_tokens = params.override_max_new_tokens(tokens, ceiling)?;
    }
    if let Some(penalty) = args.repetition_penalty.or(config.repetition_penalty) {
        pipeline.policy.repetition_penalty =
            params.override_repetition_penalty(penalty, args.force_params)?;
    }
    if let Some(temperature) = args.temperature.or(config.temperature) {
        if temperature < 0.0 {
            bail!("temperature must be non-negative");
        }
        pipeline.policy.temperature = temperature;
    }
    let max_pixels = args
        .max_pixels
        .or(config.max_pixels)
        .unwrap_or(pipeline.policy.budget.max_pixels);
    let high_res = args
        .high_res_pixels
        .or(config.high_res_pixels)
        .unwrap_or_else(|| max_pixels.max(pipeline.policy.budget.high_res_pixels));
    pipeline.policy.budget = VisualBudget::new(max_pixels, high_res)?;
    if let Some(model) = args.model.clone().or_else(|| config.model.clone()) {
        pipeline.policy.model_id = model;
    }
    if let Some(map) = &config.per_domain_penalty {
        pipeline.policy.per_domain_penalty = map.clone();
    }

    if let Some(path) = args.rules.clone().or_else(|| config.rules.clone()) {
        let text =
            fs::read_to_string(&path).with_context(|| format!("read rules {}", path.display()))?;
        pipeline.rules = RoutingRuleTable::from_json(&text)?;
    }
    if let Some(path) = args
        .path_matrix
        .clone()
        .or_else(|| config.path_matrix.clone())
    {
        let text = fs::read_to_string(&path)
            .with_context(|| format!("read path matrix {}", path.display()))?;
        pipeline.matrix = PathMatrix::from_json(&text)?;
    }
    if let Some(dir) = args.templates.clone().or_else(|| config.templates.clone()) {
        pipeline.templates = TemplateSet::load_dir(&dir)
            .with_context(|| format!("load templates from {}", dir.display()))?;
    }
    if let Some(size) = args.max_per_segment.or(config.max_per_segment) {
        if size < 1 {
            bail!("max-per-segment must be at least 1");
        }
        pipeline.max_per_segment = size;
    }
    pipeline.calibrate = CalibrateOptions {
        fallback_label: args
            .fallback_label
            .or(config.fallback_label)
            .unwrap_or(Label::A),
        mention_recovery: true,
    };
    Ok(pipeline)
}

fn build_backend(args: &RunArgs, config: &FileConfig) -> Result<Box<dyn Backend>> {
    match args.backend {
        BackendKind::Scripted => {
            let path = args
                .script
                .as_ref()
                .context("scripted backend requires --script FILE")?;
            let text = fs::read_to_string(path)
                .with_context(|| format!("read script {}", path.display()))?;
            let script: ScriptFile = serde_json::from_str(&text)
                .with_context(|| format!("parse script {}", path.display()))?;
            Ok(match script {
                ScriptFile::Ordered { replies } => Box::new(ScriptedBackend::ordered(replies)),
                ScriptFile::Keyed { replies } => Box::new(ScriptedBackend::keyed(replies)),
            })
        }
        BackendKind::Http => {
            let defaults = HttpBackendConfig::default();
            let backend = HttpBackend::new(HttpBackendConfig {
                url: args
                    .endpoint
                    .clone()
                    .or_else(|| config.endpoint.clone())
                    .context("http backend requires --endpoint URL (or a config file entry)")?,
                token_env: args
                    .token_env
                    .clone()
                    .or_else(|| config.token_env.clone())
                    .unwrap_or(defaults.token_env),
                timeout_secs: args
                    .timeout_secs
                    .or(config.timeout_secs)
                    .unwrap_or(defaults.timeout_secs),
                max_in_flight: args
                    .max_in_flight
                    .or(config.max_in_flight)
                    .unwrap_or(defaults.max_in_flight),
                length_is_error: false,
            });
            Ok(Box::new(backend))
        }
    }
}

fn run(args: RunArgs, ladder: bool) -> Result<()> {
    let config: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("read config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parse config {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let samples = load_samples(&args.dataset, args.strict)?;
    let pipeline = build_pipeline(&args, &config)?;
    let inner = build_backend(&args, &config)?;
    let cache_dir = args.cache_dir.clone().or_else(|| config.cache_dir.clone());
    let cache = cache_dir.map(|dir| CachingBackend::new(inner.as_ref(), dir));
    let backend: &dyn Backend = match &cache {
        Some(cache) => cache,
        None => inner.as_ref(),
    };

    fs::create_dir_all(&args.out)?;
    if ladder {
        let rows = run_ladder(
            &pipeline,
            &samples,
            backend,
            args.parallelism,
            Some(&args.out),
        )?;
        let table = render_ladder(&rows);
        fs::write(
            args.out.join("ladder.json"),
            serde_json::to_vec_pretty(&rows)?,
        )?;
        fs::write(args.out.join("ladder.txt"), table.as_bytes())?;
        print!("{table}");
        return Ok(());
    }

    let results = pipeline.run_batch(&samples, backend, args.parallelism, Some(&args.out))?;
    let report = aggregate(&results, pipeline.config_json());
    fs::write(
        args.out.join("report.json"),
        emit_report(&report, ReportFormat::Json),
    )?;
    fs::write(
        args.out.join("predictions.csv"),
        emit_report(&report, ReportFormat::CsvPredictions),
    )?;
    let table = emit_report(&report, ReportFormat::TableText);
    fs::write(args.out.join("report.txt"), &table)?;

    let stdout_bytes = emit_report(&report, args.format.into());
    print!("{}", String::from_utf8_lossy(&stdout_bytes));
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} sample(s) failed; see the trace documents for details");
    }
    Ok(())
}

fn load_results(dir: &Path) -> Result<Vec<SampleResult>> {
    let results_dir = dir.join("results");
    let mut entries: Vec<PathBuf> = fs::read_dir(&results_dir)
        .with_context(|| format!("read results dir {}", results_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    entries.sort();
    let mut results = Vec::with_capacity(entries.len());
    for path in entries {
        let bytes = fs::read(&path)?;
        let result: SampleResult = serde_json::from_slice(&bytes)
            .with_context(|| format!("parse result {}", path.display()))?;
        results.push(result);
    }
    if results.is_empty() {
        bail!("no persisted results under {}", results_dir.display());
    }
    Ok(results)
}

fn report(args: ReportArgs) -> Result<()> {
    let results = load_results(&args.results)?;
    let report = aggregate(&results, serde_json::json!({"source": "persisted results"}));
    let bytes = emit_report(&report, args.format.into());
    match args.out {
        Some(path) => fs::write(path, bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let traces_dir = args.results.join("traces");
    let mut entries: Vec<PathBuf> = fs::read_dir(&traces_dir)
        .with_context(|| format!("read traces dir {}", traces_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    entries.sort();

    let mut shown = 0usize;
    for path in entries {
        let bytes = fs::read(&path)?;
        let doc: TraceDoc = serde_json::from_slice(&bytes)
            .with_context(|| format!("parse trace {}", path.display()))?;
        if let Some(wanted) = &args.sample {
            if &doc.sample_id != wanted {
                continue;
            }
        }
        shown += 1;
        println!(
            "=== sample {} (config {}) ===",
            doc.sample_id, doc.config_digest
        );
        if let Some(routing) = &doc.routing {
            println!(
                "routing: {} via rule {} (domain {})",
                routing.capability,
                routing.matched_rule,
                routing.basis.domain.wire_name()
            );
        }
        if let Some(path_taken) = &doc.path_taken {
            println!("path: {path_taken:?}");
        }
        for transcript in &doc.transcripts {
            println!(
                "--- stage {} ({} retries, {} ms) ---",
                transcript.stage_id,
                transcript.backend_meta.retries,
                transcript.backend_meta.latency_ms
            );
            if args.full {
                println!("PROMPT:\n{}", transcript.rendered_prompt);
            }
            println!("OUTPUT:\n{}", transcript.raw_output);
        }
        if let Some(verification) = &doc.verification {
            println!(
                "verification: chose {} ({:?})",
                verification.chosen, verification.reason
            );
        }
        match &doc.prediction {
            Some(p) => println!("prediction: {} ({:?})", p.label, p.tier),
            None => println!("prediction: none"),
        }
        if let Some(error) = &doc.error {
            println!("error: {error}");
        }
        println!();
    }
    if shown == 0 {
        bail!("no matching traces under {}", traces_dir.display());
    }
    Ok(())
}
