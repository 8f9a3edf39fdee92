//! `rtp`: build, inspect and use thematic question trees from the command line.

mod config;
mod manifest;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rtp_core::classify::{evaluate_classifier, route_document, ClassifyError, Variant};
use rtp_core::corpus::{load_corpus, sample_corpus, Corpus, CorpusError, CorpusFormat};
use rtp_core::generation::{
    eval_centroid_similarity, eval_node_accuracy, generate_fewshot, generate_thematic,
    generate_uncontrolled, GenerationBatch, GenerationError, Strategy,
};
use rtp_core::metrics::{alignment_csv, tree_alignment_report};
use rtp_core::partition::BuildError;
use rtp_core::provider::{parse_rules_jsonl, HttpBackend, HttpConfig, ProviderError};
use rtp_core::taxonomy::{
    assign_leaf_labels, deserialize_tree, export_dot, labels_from_documents, serialize_tree, TreeError,
};
use rtp_core::{build_tree, BuildConfig, Gateway, ThematicTree, TokenLedger};

use config::{BackendKind, FileConfig};
use manifest::{now_ms, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "rtp", version, about = "Recursive thematic partitioning of text corpora")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Settings file; defaults to ./rtp.toml when present.
    #[arg(long, global = true, env = "RTP_CONFIG")]
    config: Option<PathBuf>,
    /// Model backend.
    #[arg(long, global = true, env = "RTP_BACKEND", value_enum)]
    backend: Option<BackendKind>,
    /// Rule table for the scripted backend (jsonl).
    #[arg(long, global = true, env = "RTP_RULES")]
    rules: Option<PathBuf>,
    /// Maximum concurrent provider requests.
    #[arg(long, global = true, env = "RTP_MAX_INFLIGHT")]
    max_inflight: Option<usize>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, env = "RTP_SEED")]
    seed: Option<u64>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Default)]
struct BuildArgs {
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    votes: Option<u32>,
    #[arg(long)]
    max_words: Option<u32>,
    /// Summarize sampled documents before building.
    #[arg(long)]
    summarize_train: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a tree over a sample of a corpus.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Per-node label entropy and purity as CSV.
    Report {
        #[arg(long)]
        tree: PathBuf,
        /// Labeled corpus whose labels are attached to the tree's documents.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Route documents through a tree; one JSON line per document.
    Classify {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Labeled corpus used to name leaves by majority label.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        summarize_eval: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated build/label/classify runs with mean ± two sigma accuracy.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        repetitions: u32,
        #[arg(long, default_value = "plain", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        test_size: Option<usize>,
        #[command(flatten)]
        build: BuildArgs,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate texts for a leaf, optionally evaluating them.
    Generate {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        leaf: Option<String>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Ctg)]
        strategy: StrategyArg,
        #[arg(long)]
        context: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_enum)]
        eval: Option<EvalKind>,
        /// Reference corpus for `--eval centroid`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or write a tree as DOT or JSON.
    Export {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportFormat::Dot)]
        format: ExportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Ctg,
    Fewshot,
    Uncontrolled,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Ctg => Strategy::Ctg,
            StrategyArg::Fewshot => Strategy::Fewshot,
            StrategyArg::Uncontrolled => Strategy::Uncontrolled,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalKind {
    Node,
    Centroid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Dot,
    Json,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

/// A failed run and its exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PROVIDER: u8 = 3;

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn provider(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PROVIDER,
            message: message.into(),
        }
    }

    fn other(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_OTHER,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn build_code(err: &BuildError) -> u8 {
    match err {
        BuildError::Provider(_) => EXIT_PROVIDER,
        BuildError::Partial { source, .. } => build_code(source),
        BuildError::InvalidConfig(_) | BuildError::InvalidSize => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

impl From<ProviderError> for Failure {
    fn from(e: ProviderError) -> Self {
        Failure::provider(e.to_string())
    }
}

impl From<BuildError> for Failure {
    fn from(e: BuildError) -> Self {
        Self {
            code: build_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ClassifyError> for Failure {
    fn from(e: ClassifyError) -> Self {
        let code = match &e {
            ClassifyError::Build(b) => build_code(b),
            ClassifyError::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<GenerationError> for Failure {
    fn from(e: GenerationError) -> Self {
        let code = match &e {
            GenerationError::Provider(_) => EXIT_PROVIDER,
            GenerationError::Classify(ClassifyError::Build(b)) => build_code(b),
            GenerationError::MissingTargetLeaf => EXIT_USAGE,
            GenerationError::Tree(TreeError::UnknownNode(_) | TreeError::NotALeaf(_)) => EXIT_USAGE,
            _ => EXIT_OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::other(e.to_string())
    }
}

impl From<TreeError> for Failure {
    fn from(e: TreeError) -> Self {
        Failure::other(e.to_string())
    }
}

/// Everything a command needs after layering flags, environment, file and defaults.
struct Context {
    cfg: BuildConfig,
    gateway: Option<Gateway>,
    backend: BackendKind,
    rules: Option<PathBuf>,
    max_inflight: usize,
    argv: Vec<String>,
    started: u128,
}

impl Context {
    fn new(global: &GlobalArgs, base: BuildConfig, build: Option<&BuildArgs>) -> Result<Self, Failure> {
        let file = FileConfig::load(global.config.as_deref()).map_err(Failure::usage)?;
        let mut cfg = file.overlay(base).map_err(Failure::usage)?;
        if let Some(b) = build {
            apply_build_args(&mut cfg, b);
        }
        if let Some(seed) = global.seed.or(file.seed) {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            gateway: None,
            backend: global.backend.or(file.backend).unwrap_or(BackendKind::Live),
            rules: global.rules.clone().or(file.rules),
            max_inflight: global.max_inflight.or(file.max_inflight).unwrap_or(rtp_core::provider::DEFAULT_MAX_INFLIGHT),
            argv: std::env::args().collect(),
            started: now_ms(),
        })
    }

    /// Create the gateway on first use, so commands that never call a model need no credentials.
    fn connect(&mut self) -> Result<(), Failure> {
        if self.gateway.is_none() {
            if self.max_inflight == 0 {
                return Err(Failure::usage("--max-inflight must be at least 1"));
            }
            let gw = match self.backend {
                BackendKind::Live => {
                    let backend = HttpBackend::new(HttpConfig::from_env()?)?;
                    Gateway::new(std::sync::Arc::new(backend))
                }
                BackendKind::Scripted => {
                    let path = self
                        .rules
                        .as_ref()
                        .ok_or_else(|| Failure::usage("--backend scripted needs --rules FILE"))?;
                    let raw = std::fs::read_to_string(path)
                        .map_err(|e| Failure::provider(format!("{}: {e}", path.display())))?;
                    Gateway::scripted(parse_rules_jsonl(&raw).map_err(Failure::provider)?)
                }
            };
            self.gateway = Some(gw.with_max_inflight(self.max_inflight));
        }
        Ok(())
    }

    fn gw(&self) -> &Gateway {
        self.gateway.as_ref().expect("connect() runs first")
    }

    fn ledger(&self) -> TokenLedger {
        self.gateway.as_ref().map(Gateway::ledger_snapshot).unwrap_or_default()
    }

    /// Token usage goes to stderr so stdout stays machine-readable.
    fn print_ledger(&self) {
        if let Some(gw) = &self.gateway {
            let ledger = gw.ledger_snapshot();
            if ledger.total > 0 {
                eprint!("token usage ({})\n{}", gw.backend_name(), ledger.table());
            }
        }
    }

    fn manifest(&self, command: &str, inputs: &[&Path], output: &Path) -> Result<(), Failure> {
        let m = RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            backend: format!("{:?}", self.backend).to_lowercase(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: vec![output.to_path_buf()],
            ledger: self.ledger(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        m.write_beside(output)
            .map(|_| ())
            .map_err(|e| Failure::other(format!("writing manifest for {}: {e}", output.display())))
    }
}

fn apply_build_args(cfg: &mut BuildConfig, b: &BuildArgs) {
    if let Some(v) = b.sample_size {
        cfg.sample_size = v;
    }
    if let Some(v) = b.max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = b.min_leaf {
        cfg.min_leaf = v;
    }
    if let Some(v) = b.votes {
        cfg.votes = v;
    }
    if let Some(v) = b.max_words {
        cfg.max_words = v;
    }
    if b.summarize_train {
        cfg.summarize_train = true;
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, Failure> {
    Ok(load_corpus(path, CorpusFormat::from_path(path))?)
}

fn read_tree(path: &Path) -> Result<ThematicTree, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    deserialize_tree(&bytes).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::other(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_file(path, body.as_bytes()),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Failure::other(e.to_string())),
    }
}

fn cmd_build(global: &GlobalArgs, input: &Path, out: &Path, build: &BuildArgs) -> Result<(), Failure> {
    let mut ctx = Context::new(global, BuildConfig::default(), Some(build))?;
    let corpus = read_corpus(input)?;
    let sample = sample_corpus(&corpus, ctx.cfg.sample_size, ctx.cfg.seed)?;
    if sample.clamped {
        log::warn!(
            "sample size {} exceeds corpus size {}; using the whole corpus",
            ctx.cfg.sample_size,
            corpus.len()
        );
    }
    ctx.connect()?;
    let result = build_tree(&sample, &ctx.cfg, ctx.gw());
    let (tree, failure) = match result {
        Ok(tree) => (tree, None),
        Err(BuildError::Partial { tree, source }) => {
            let err = BuildError::Partial {
                tree: tree.clone(),
                source,
            };
            (*tree, Some(Failure::from(err)))
        }
        Err(e) => {
            ctx.print_ledger();
            return Err(e.into());
        }
    };
    write_file(out, &serialize_tree(&tree))?;
    ctx.manifest("build", &[input], out)?;
    ctx.print_ledger();
    eprintln!(
        "{} nodes, {} leaves, depth {}, {} discarded -> {}",
        tree.nodes.len(),
        tree.leaves().len(),
        tree.max_depth(),
        tree.discarded.len(),
        out.display()
    );
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn cmd_report(global: &GlobalArgs, tree_path: &Path, labels: &Path, out: &Path) -> Result<(), Failure> {
    let ctx = Context::new(global, BuildConfig::default(), None)?;
    let tree = read_tree(tree_path)?;
    let corpus = read_corpus(labels)?;
    let labeled = assign_leaf_labels(&tree, &labels_from_documents(&corpus.documents))?;
    let rows = tree_alignment_report(&labeled).map_err(|e| Failure::other(e.to_string()))?;
    write_file(out, alignment_csv(&rows).as_bytes())?;
    ctx.manifest("report", &[tree_path, labels], out)?;
    eprintln!("{} nodes -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_classify(
    global: &GlobalArgs,
    tree_path: &Path,
    input: &Path,
    labels: Option<&Path>,
    summarize_eval: bool,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut tree = read_tree(tree_path)?;
    let mut ctx = Context::new(global, tree.config.clone(), None)?;
    if summarize_eval {
        ctx.cfg.summarize_eval = true;
    }
    if let Some(path) = labels {
        let corpus = read_corpus(path)?;
        tree = assign_leaf_labels(&tree, &labels_from_documents(&corpus.documents))?;
    }
    let corpus = read_corpus(input)?;
    ctx.connect()?;
    let gw = ctx.gw();
    let mut body = String::new();
    let (mut scored, mut correct) = (0u64, 0u64);
    for doc in &corpus.documents {
        let line = match route_document(&tree, doc, &ctx.cfg, gw) {
            Ok(route) => {
                let predicted = tree.node(&route.leaf_id)?.majority_label.clone();
                if let (Some(truth), Some(pred)) = (&doc.label, &predicted) {
                    scored += 1;
                    correct += u64::from(truth == pred);
                }
                serde_json::json!({"id": doc.id, "leaf": route.leaf_id, "predicted": predicted, "label": doc.label})
            }
            Err(ClassifyError::Unclassifiable { reason, .. }) => {
                serde_json::json!({"id": doc.id, "leaf": null, "error": reason, "label": doc.label})
            }
            Err(e) => {
                ctx.print_ledger();
                return Err(e.into());
            }
        };
        body.push_str(&line.to_string());
        body.push('\n');
    }
    emit(out, &body)?;
    if let Some(path) = out {
        let mut inputs = vec![tree_path, input];
        inputs.extend(labels);
        ctx.manifest("classify", &inputs, path)?;
    }
    ctx.print_ledger();
    if scored > 0 {
        eprintln!("accuracy {:.4} over {scored} labeled documents", correct as f64 / scored as f64);
    }
    Ok(())
}

fn cmd_evaluate(
    global: &GlobalArgs,
    input: &Path,
    repetitions: u32,
    variant: Variant,
    test_size: Option<usize>,
    build: &BuildArgs,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut ctx = Context::new(global, BuildConfig::default(), Some(build))?;
    if let Some(t) = test_size {
        ctx.cfg.test_size = t;
    }
    let corpus = read_corpus(input)?;
    ctx.connect()?;
    let gw = ctx.gw();
    let report = evaluate_classifier(&corpus, &ctx.cfg, gw, repetitions, variant);
    ctx.print_ledger();
    let report = report?;
    print!("{}", report.table());
    if let Some(path) = out {
        let mut body = serde_json::to_string_pretty(&report).map_err(|e| Failure::other(e.to_string()))?;
        body.push('\n');
        write_file(path, body.as_bytes())?;
        ctx.manifest("evaluate", &[input], path)?;
    }
    if report.accuracies.is_empty() {
        return Err(Failure::other("every repetition failed"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    global: &GlobalArgs,
    tree_path: &Path,
    leaf: Option<&str>,
    strategy: Strategy,
    context: &str,
    count: usize,
    eval: Option<EvalKind>,
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let tree = read_tree(tree_path)?;
    let mut ctx = Context::new(global, tree.config.clone(), None)?;
    let need_leaf = || leaf.ok_or_else(|| Failure::usage(format!("--strategy {strategy} needs --leaf ID")));
    let reference_corpus = match (eval, reference) {
        (Some(EvalKind::Centroid), None) => return Err(Failure::usage("--eval centroid needs --reference FILE")),
        (Some(EvalKind::Centroid), Some(path)) => Some(read_corpus(path)?),
        _ => None,
    };
    let cfg = ctx.cfg.clone();
    ctx.connect()?;
    let gw = ctx.gw();
    let batch: GenerationBatch = match strategy {
        Strategy::Ctg => generate_thematic(&tree, need_leaf()?, context, count, &cfg, gw)?,
        Strategy::Fewshot => generate_fewshot(&tree, need_leaf()?, context, count, &cfg, gw)?,
        Strategy::Uncontrolled => generate_uncontrolled(context, count, &cfg, gw)?,
    };
    for f in &batch.failures {
        log::warn!("item {} failed: {}", f.index, f.reason);
    }
    if batch.subsampled {
        log::warn!("leaf examples exceeded the prompt budget and were subsampled");
    }
    emit(out, &batch.to_jsonl())?;
    match eval {
        Some(EvalKind::Node) => {
            let acc = eval_node_accuracy(&batch, &tree, &cfg, gw, leaf)?;
            eprintln!("node accuracy {acc:.4} over {} texts", batch.texts.len());
        }
        Some(EvalKind::Centroid) => {
            let reference: Vec<String> = reference_corpus
                .expect("loaded above")
                .documents
                .into_iter()
                .map(|d| d.text)
                .collect();
            let sim = eval_centroid_similarity(&batch.texts, &reference, &cfg, gw)?;
            eprintln!("centroid cosine similarity {sim:.4}");
        }
        None => {}
    }
    if let Some(path) = out {
        let mut inputs = vec![tree_path];
        inputs.extend(reference);
        ctx.manifest("generate", &inputs, path)?;
    }
    ctx.print_ledger();
    if batch.is_partial() {
        eprintln!("{} of {} items failed", batch.failures.len(), batch.requested);
    }
    Ok(())
}

fn cmd_export(global: &GlobalArgs, tree_path: &Path, format: ExportFormat, out: Option<&Path>) -> Result<(), Failure> {
    let tree = read_tree(tree_path)?;
    let ctx = Context::new(global, tree.config.clone(), None)?;
    let body = match format {
        ExportFormat::Dot => export_dot(&tree),
        ExportFormat::Json => String::from_utf8(serialize_tree(&tree)).expect("serializer emits UTF-8"),
    };
    emit(out, &body)?;
    if let Some(path) = out {
        ctx.manifest("export", &[tree_path], path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Build { input, out, build } => cmd_build(g, input, out, build),
        Command::Report { tree, labels, out } => cmd_report(g, tree, labels, out),
        Command::Classify {
            tree,
            input,
            labels,
            summarize_eval,
            out,
        } => cmd_classify(g, tree, input, labels.as_deref(), *summarize_eval, out.as_deref()),
        Command::Evaluate {
            input,
            repetitions,
            variant,
            test_size,
            build,
            out,
        } => cmd_evaluate(g, input, *repetitions, *variant, *test_size, build, out.as_deref()),
        Command::Generate {
            tree,
            leaf,
            strategy,
            context,
            count,
            eval,
            reference,
            out,
        } => cmd_generate(
            g,
            tree,
            leaf.as_deref(),
            (*strategy).into(),
            context,
            *count,
            *eval,
            reference.as_deref(),
            out.as_deref(),
        ),
        Command::Export { tree, format, out } => cmd_export(g, tree, *format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RTP_LOG", level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
