//! Command-line front end: index building, decomposition validation, single
//! question and dataset runs, prediction scoring, and trace reports.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use beamaggr::engine::{
    self, build_backend, build_prompts, build_retrieval, load_run_config, run_dataset,
    AggregationMode, BackendMode, LlmDecomposer, MultiSourceAnswerer, ReasoningTrace, RunConfig,
};
use beamaggr::evalkit::{
    self, load_dataset, max_alias_f1, DatasetFormat, EvalReport, EvalRow, SkipRow,
};
use beamaggr::qtree;
use beamaggr::retrieval::{build_index, read_corpus, DEFAULT_B, DEFAULT_K1};

#[derive(Parser)]
#[command(
    name = "beamaggr",
    version,
    about = "Multi-hop QA with beam-aggregated reasoning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a JSONL corpus.
    Index(IndexArgs),
    /// Validate a decomposition mapping and emit the parsed tree.
    Decompose(DecomposeArgs),
    /// Answer a single question or run a whole dataset.
    Run(Box<RunArgs>),
    /// Score a predictions file against a dataset.
    Eval(EvalArgs),
    /// Render analytics from recorded trace files.
    Report(ReportArgs),
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus JSONL with one {"doc_id","title","body"} object per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output index path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K1)]
    k1: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    b: f64,
}

#[derive(Args)]
struct DecomposeArgs {
    /// The original question the mapping must decompose.
    #[arg(long)]
    question: String,
    /// Path to the decomposition mapping JSON.
    #[arg(long)]
    mapping: PathBuf,
    /// Write the parsed tree JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the flat Q1..Qn rendering.
    #[arg(long)]
    flat: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single question to answer.
    #[arg(long, conflicts_with = "dataset")]
    question: Option<String>,
    /// Decomposition mapping JSON for the single question.
    #[arg(long, requires = "question")]
    mapping: Option<PathBuf>,
    /// Dataset file to run.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset format: hotpotqa, 2wikimqa, musique, bamboogle, generic.
    #[arg(long, default_value = "generic")]
    format: String,
    #[arg(long)]
    beam_size: Option<usize>,
    /// Greedy aggregation (single candidate per node).
    #[arg(long)]
    greedy: bool,
    /// Backend mode: live, record, replay.
    #[arg(long)]
    backend: Option<String>,
    /// LLM fixture directory for record/replay.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// SERP fixture directory for record/replay.
    #[arg(long)]
    serp_fixtures: Option<PathBuf>,
    /// BM25 index file for the wiki strategy.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Corpus JSONL to index on the fly (alternative to --index).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trace output: a file for --question, a directory for --dataset.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory for eval and cost reports on dataset runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "generic")]
    format: String,
    /// Predictions JSONL with one {"id","prediction"} object per line.
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace files to analyze.
    #[arg(long, num_args = 1..)]
    trace: Vec<PathBuf>,
    /// Analyze every *.jsonl file in a directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn main() {
    if let Err(error) = dispatch() {
        eprintln!("error: {error}");
        let mut source = error.source();
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(1);
    }
}

fn dispatch() -> Result<(), Box<dyn Error>> {
    match Cli::parse().command {
        Command::Index(args) => cmd_index(args),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Run(args) => cmd_run(*args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_index(args: IndexArgs) -> Result<(), Box<dyn Error>> {
    let docs = read_corpus(&args.corpus)?;
    let count = docs.len();
    let index = build_index(docs, args.k1, args.b)?;
    index.save(&args.out)?;
    println!("indexed {count} documents into {}", args.out.display());
    Ok(())
}

fn cmd_decompose(args: DecomposeArgs) -> Result<(), Box<dyn Error>> {
    let raw = fs::read_to_string(&args.mapping)?;
    let tree = qtree::parse_decomposition(&args.question, &raw)?;
    let json = qtree::tree_to_json(&tree);
    match &args.out {
        Some(path) => fs::write(path, &json)?,
        None => println!("{json}"),
    }
    if args.flat {
        println!("{}", tree.render_flat());
    }
    eprintln!("valid decomposition with {} nodes", tree.len());
    Ok(())
}

fn parse_format(name: &str) -> Result<DatasetFormat, Box<dyn Error>> {
    DatasetFormat::parse(name).ok_or_else(|| format!("unknown dataset format {name:?}").into())
}

fn effective_run_config(args: &RunArgs) -> Result<RunConfig, Box<dyn Error>> {
    let mut config = match &args.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default().with_defaults(),
    };
    if let Some(beam_size) = args.beam_size {
        config.engine.beam_size = beam_size;
    }
    if args.greedy {
        config.engine.mode = AggregationMode::Greedy;
    }
    if let Some(backend) = &args.backend {
        config.engine.backend = match backend.as_str() {
            "live" => BackendMode::Live,
            "record" => BackendMode::Record,
            "replay" => BackendMode::Replay,
            other => return Err(format!("unknown backend mode {other:?}").into()),
        };
    }
    if let Some(dir) = &args.fixtures {
        config.fixtures_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.serp_fixtures {
        config.serp_fixtures_dir = Some(dir.clone());
    }
    if let Some(path) = &args.index {
        config.index_path = Some(path.clone());
    }
    if let Some(path) = &args.corpus {
        config.corpus_path = Some(path.clone());
    }
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<(), Box<dyn Error>> {
    let config = effective_run_config(&args)?;
    match (&args.question, &args.dataset) {
        (Some(question), None) => {
            let mapping = match &args.mapping {
                Some(path) => Some(fs::read_to_string(path)?),
                None => None,
            };
            let output = engine::run_single(question, mapping.as_deref(), &config)?;
            println!("{}", output.answer);
            if let Some(path) = &args.trace {
                fs::write(path, output.trace.to_jsonl())?;
                eprintln!("trace written to {}", path.display());
            }
            Ok(())
        }
        (None, Some(dataset_path)) => {
            let format = parse_format(&args.format)?;
            let instances = load_dataset(dataset_path, format)?;
            let label = dataset_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset")
                .to_string();

            let backend = build_backend(&config)?;
            let retrieval = build_retrieval(&config)?;
            let prompts = Arc::new(build_prompts(&config)?);
            let answerer = MultiSourceAnswerer {
                backend: backend.clone(),
                retrieval,
                prompts: prompts.clone(),
                configs: config.engine.strategy_configs(),
                vote_temperature: config.engine.vote_temperature,
                k: config.engine.effective_beam_size(),
            };
            let decomposer = LlmDecomposer::new(
                backend,
                prompts,
                config.decomposition_cache_dir.clone(),
                config.engine.sample_temperature,
            );
            let outcome = run_dataset(
                &instances,
                &label,
                &config.engine,
                &answerer,
                Some(&decomposer),
                config.decomposition_retries,
            );

            print!("{}", outcome.eval.render_text());
            print!("{}", outcome.cost.render_text());
            if let Some(dir) = &args.out_dir {
                fs::create_dir_all(dir)?;
                fs::write(
                    dir.join("eval_report.json"),
                    serde_json::to_string_pretty(&outcome.eval)?,
                )?;
                fs::write(dir.join("eval_report.txt"), outcome.eval.render_text())?;
                fs::write(
                    dir.join("cost_report.json"),
                    serde_json::to_string_pretty(&outcome.cost)?,
                )?;
                fs::write(dir.join("cost_report.txt"), outcome.cost.render_text())?;
                eprintln!("reports written to {}", dir.display());
            }
            if let Some(dir) = &args.trace {
                fs::create_dir_all(dir)?;
                for (id, trace) in &outcome.traces {
                    fs::write(dir.join(format!("{id}.trace.jsonl")), trace.to_jsonl())?;
                }
                eprintln!(
                    "{} traces written to {}",
                    outcome.traces.len(),
                    dir.display()
                );
            }
            Ok(())
        }
        _ => Err("exactly one of --question or --dataset is required".into()),
    }
}

#[derive(serde::Deserialize)]
struct PredictionLine {
    id: String,
    prediction: String,
}

fn cmd_eval(args: EvalArgs) -> Result<(), Box<dyn Error>> {
    let format = parse_format(&args.format)?;
    let instances = load_dataset(&args.dataset, format)?;
    let raw = fs::read_to_string(&args.predictions)?;
    let mut predictions: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(line)
            .map_err(|e| format!("{} line {}: {e}", args.predictions.display(), i + 1))?;
        predictions.insert(parsed.id, parsed.prediction);
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for instance in &instances {
        match predictions.get(&instance.id) {
            Some(prediction) => rows.push(EvalRow {
                id: instance.id.clone(),
                prediction: prediction.clone(),
                f1: max_alias_f1(prediction, &instance.gold_answers),
                qtype: instance.qtype.clone(),
                hops: instance.qtype.as_deref().and_then(evalkit::hops_from_qtype),
            }),
            None => skipped.push(SkipRow {
                id: instance.id.clone(),
                reason: "no prediction".to_string(),
            }),
        }
    }
    let report = EvalReport::build(rows, skipped);
    print!("{}", report.render_text());
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct TraceAnalysis {
    file: String,
    question: String,
    final_answer: String,
    source_contribution: BTreeMap<String, f64>,
    node_stats: Vec<evalkit::NodeStats>,
    prompt_tokens: u64,
    completion_tokens: u64,
}

fn analyze_trace(path: &PathBuf) -> Result<TraceAnalysis, Box<dyn Error>> {
    let trace = ReasoningTrace::from_jsonl(&fs::read_to_string(path)?)?;
    engine::verify_trace(&trace)?;
    let contribution = evalkit::source_contribution(&trace)?
        .into_iter()
        .map(|(kind, fraction)| (kind.label().to_string(), fraction))
        .collect();
    let node_stats = trace
        .nodes
        .iter()
        .map(|node| {
            let set = beamaggr::CandidateSet::new(
                node.candidates
                    .iter()
                    .map(|c| beamaggr::Candidate {
                        answer: c.answer.clone(),
                        surface: c.surface.clone(),
                        prob: c.prob,
                    })
                    .collect(),
                node.candidates.len().max(1),
            )
            .map_err(|e| format!("node {}: {e}", node.node_id))?;
            Ok(evalkit::node_stats(
                node.node_id.clone(),
                &node.pre_truncation,
                &set,
            ))
        })
        .collect::<Result<Vec<_>, Box<dyn Error>>>()?;
    Ok(TraceAnalysis {
        file: path.display().to_string(),
        question: trace.question.clone(),
        final_answer: trace.final_answer.clone(),
        source_contribution: contribution,
        node_stats,
        prompt_tokens: trace.usage.total.prompt_tokens,
        completion_tokens: trace.usage.total.completion_tokens,
    })
}

fn cmd_report(args: ReportArgs) -> Result<(), Box<dyn Error>> {
    let mut paths = args.trace.clone();
    if let Some(dir) = &args.trace_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
            .collect();
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err("no trace files given; use --trace or --trace-dir".into());
    }
    let analyses = paths
        .iter()
        .map(analyze_trace)
        .collect::<Result<Vec<_>, _>>()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&analyses)?);
        return Ok(());
    }
    for analysis in &analyses {
        println!("{}", analysis.file);
        println!("  question: {}", analysis.question);
        println!("  final answer: {}", analysis.final_answer);
        println!(
            "  tokens: prompt {} completion {}",
            analysis.prompt_tokens, analysis.completion_tokens
        );
        println!("  source contribution:");
        for (source, fraction) in &analysis.source_contribution {
            println!("    {source:<12} {fraction:.3}");
        }
        println!("  node stats (diversity / consistency / uncertainty):");
        for stats in &analysis.node_stats {
            println!(
                "    {:<6} {:>3} / {:.4} / {:.4}",
                stats.node, stats.diversity, stats.consistency, stats.uncertainty
            );
        }
    }
    Ok(())
}
