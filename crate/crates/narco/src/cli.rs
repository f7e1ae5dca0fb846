//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{self, CommandError};
use crate::config::RunConfig;
use crate::gateway::{Gateway, Mode};
use crate::io::write_atomic;

#[derive(Debug, Parser)]
#[command(
    name = "narco",
    version,
    about = "Build and use narrative coherence graphs over long texts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Chat provider mode.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Directory of recorded provider responses.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a document and build its graph.
    BuildGraph(BuildArgs),
    /// Print degree, filter-rate and question-type statistics of a graph.
    Stats(GraphArg),
    /// Rank recap candidates for a target passage.
    Recap(RecapArgs),
    /// Zero-shot retrieval over graph nodes.
    Retrieve(RetrieveArgs),
    /// Train the attention rerank head.
    TrainRerank(TrainArgs),
    /// Rerank first-stage retrieval with a trained head.
    Rerank(RerankArgs),
    /// Assemble budgeted contexts for multiple-choice questions.
    QaContext(QaArgs),
    /// Answer multiple-choice questions over assembled contexts and score them.
    QaEval(QaEvalArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Plain-text document.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Pre-chunked passages as JSON lines `{id, text}`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
    /// JSON list of `[source, target]` pairs to realize instead of the window.
    #[arg(long)]
    pub pairs_file: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GraphArg {
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecapArgs {
    #[arg(long)]
    pub instance: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Queries per gradient step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// First-stage candidates per query.
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QaArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Context budget in words.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Append the option texts to the retrieval query.
    #[arg(long)]
    pub include_options: bool,
}

#[derive(Debug, Args)]
pub struct QaEvalArgs {
    #[command(flatten)]
    pub qa: QaArgs,
    /// Score stored replies `{index, reply}` instead of querying the model.
    #[arg(long)]
    pub replies: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

impl Cli {
    /// The configuration file (if any) with every flag applied.
    pub fn resolve(&self) -> Result<RunConfig, CommandError> {
        let mut cfg = match &self.global.config {
            Some(path) => RunConfig::load(path).map_err(|e| CommandError::Validation(e.to_string()))?,
            None => RunConfig::default(),
        };
        let g = &self.global;
        set(&mut cfg.chat.mode, g.mode);
        set_path(&mut cfg.chat.fixture_dir, &g.fixtures);
        set_path(&mut cfg.paths.output, &g.output);
        if let Some(seed) = g.seed {
            cfg.seed = seed;
            cfg.embedding.seed = seed;
        }
        match &self.command {
            Command::BuildGraph(a) => {
                set_path(&mut cfg.paths.input, &a.input);
                set_path(&mut cfg.paths.corpus, &a.corpus);
                if a.input.is_some() && a.corpus.is_none() {
                    cfg.paths.corpus = None;
                }
                if a.corpus.is_some() && a.input.is_none() {
                    cfg.paths.input = None;
                }
                set(&mut cfg.build.window, a.window);
                set(&mut cfg.build.cap, a.cap);
                set(&mut cfg.build.max_words, a.max_words);
                set_path(&mut cfg.paths.pairs, &a.pairs_file);
                set(&mut cfg.build.parallelism, a.parallelism);
                set_path(&mut cfg.paths.checkpoints, &a.checkpoint_dir);
            }
            Command::Stats(a) => set_path(&mut cfg.paths.graph, &a.graph),
            Command::Recap(a) => {
                set_path(&mut cfg.paths.recap_instance, &a.instance);
                set(&mut cfg.recap.alpha, a.alpha);
                set(&mut cfg.recap.beta, a.beta);
                set(&mut cfg.recap.lambda, a.lambda);
                set(&mut cfg.recap.k, a.k);
            }
            Command::Retrieve(a) => {
                set_path(&mut cfg.paths.graph, &a.graph);
                set_path(&mut cfg.paths.queries, &a.queries);
                set(&mut cfg.retrieval.lambda, a.lambda);
                set(&mut cfg.retrieval.k, a.k);
            }
            Command::TrainRerank(a) => {
                set_path(&mut cfg.paths.graph, &a.graph);
                set_path(&mut cfg.paths.queries, &a.queries);
                set(&mut cfg.train.epochs, a.epochs);
                set(&mut cfg.train.learning_rate, a.lr);
                set(&mut cfg.train.queries_per_batch, a.batch);
                set(&mut cfg.train.candidates, a.candidates);
            }
            Command::Rerank(a) => {
                set_path(&mut cfg.paths.graph, &a.graph);
                set_path(&mut cfg.paths.queries, &a.queries);
                set_path(&mut cfg.paths.params, &a.params);
                set(&mut cfg.rerank.top_n, a.top_n);
                set(&mut cfg.rerank.k, a.k);
            }
            Command::QaContext(a) => apply_qa(&mut cfg, a),
            Command::QaEval(a) => {
                apply_qa(&mut cfg, &a.qa);
                set_path(&mut cfg.paths.replies, &a.replies);
            }
        }
        Ok(cfg)
    }
}

fn apply_qa(cfg: &mut RunConfig, a: &QaArgs) {
    set_path(&mut cfg.paths.graph, &a.graph);
    set_path(&mut cfg.paths.questions, &a.questions);
    set(&mut cfg.qa.budget, a.budget);
    set(&mut cfg.qa.lambda, a.lambda);
    if a.include_options {
        cfg.qa.include_options = true;
    }
}

fn gateway(cfg: &RunConfig) -> Result<Gateway, CommandError> {
    Gateway::http(cfg.chat.clone()).map_err(|e| CommandError::Validation(format!("chat: {e}")))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize");
    s.push('\n');
    s
}

fn emit(cfg: &RunConfig, body: &str, out: &mut dyn Write) -> Result<(), CommandError> {
    match &cfg.paths.output {
        Some(path) => {
            write_atomic(path, body.as_bytes()).map_err(|e| CommandError::Runtime(format!("{}: {e}", path.display())))
        }
        None => out
            .write_all(body.as_bytes())
            .map_err(|e| CommandError::Runtime(format!("stdout: {e}"))),
    }
}

/// Run a parsed command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CommandError> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::BuildGraph(_) => {
            if cfg.paths.input.is_none() && cfg.paths.corpus.is_none() {
                return Err(CommandError::missing("paths.corpus", "--corpus or --input"));
            }
            let report = commands::build_graph(&cfg, gateway(&cfg)?)?;
            if !report.failures.is_empty() {
                return Err(commands::failures_error(&report.failures));
            }
            emit(&cfg, &report.graph.to_jsonl(), out)
        }
        Command::Stats(_) => emit(&cfg, &to_json(&commands::stats(&cfg)?), out),
        Command::Recap(_) => {
            if cfg.paths.recap_instance.is_none() {
                return Err(CommandError::missing("paths.recap_instance", "--instance"));
            }
            emit(&cfg, &to_json(&commands::recap(&cfg, gateway(&cfg)?)?), out)
        }
        Command::Retrieve(_) => emit(&cfg, &to_json(&commands::retrieve(&cfg)?), out),
        Command::TrainRerank(_) => {
            let path = cfg
                .paths
                .output
                .clone()
                .ok_or_else(|| CommandError::missing("paths.output", "--output"))?;
            let result = commands::train_rerank(&cfg)?;
            write_atomic(&path, to_json(&result.params).as_bytes())
                .map_err(|e| CommandError::Runtime(format!("{}: {e}", path.display())))?;
            let summary = serde_json::json!({
                "params": path,
                "queries_used": result.queries_used,
                "queries_skipped": result.queries_skipped,
                "steps": result.steps,
                "first_loss": result.first_loss,
                "final_loss": result.final_loss,
            });
            out.write_all(to_json(&summary).as_bytes())
                .map_err(|e| CommandError::Runtime(e.to_string()))
        }
        Command::Rerank(_) => emit(&cfg, &to_json(&commands::rerank(&cfg)?), out),
        Command::QaContext(_) => {
            let body: String = commands::qa_context(&cfg)?
                .iter()
                .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
                .collect();
            emit(&cfg, &body, out)
        }
        Command::QaEval(_) => {
            let backend = if cfg.paths.replies.is_some() {
                None
            } else {
                Some(gateway(&cfg)?)
            };
            let result = match backend {
                Some(g) => commands::qa_eval(&cfg, g)?,
                None => commands::qa_eval(&cfg, NoBackend)?,
            };
            emit(&cfg, &to_json(&result), out)
        }
    }
}

/// Used when stored replies make model calls unnecessary.
struct NoBackend;

impl narco_core::chat::ChatBackend for NoBackend {
    fn complete(
        &self,
        _: &narco_core::chat::ChatRequest,
    ) -> Result<narco_core::chat::ChatResponse, narco_core::chat::GatewayError> {
        Err(narco_core::chat::GatewayError::Provider(
            "no chat backend configured".into(),
        ))
    }
}

/// Parse `argv`, run, and return the process exit code. Diagnostics go to
/// `err` as one JSON object.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = out.write_all(rendered.as_bytes());
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        1
                    } else {
                        0
                    }
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    1
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let diag = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            let _ = writeln!(err, "{diag}");
            e.exit_code()
        }
    }
}
