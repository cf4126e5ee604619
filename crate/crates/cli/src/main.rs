use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use redcb_core::analysis::{read_records, write_records, AblationMode, AnalysisConfig};
use redcb_core::baselines::{compare_strategies, write_reports, CompareConfig, Strategy};
use redcb_core::codebook::{calibrate_threshold, codebook_from_records, PruneMode};
use redcb_core::corpus::{load_corpus, write_corpus, Manifest};
use redcb_core::export::export_store;
use redcb_core::oracle::replay::lint_store;
use redcb_core::synthcorpus::{self, SynthParams};
use redcb_core::{
    load_codebook, probing_flops, prune_budget, prune_threshold, save_codebook, AnalyticOracle,
    Corpus, EmbeddingVector, Error, ModelOracle, Profile, ReplayOracle, Thresholds, TokenMatrix,
    ToyConfig, ToyTransformer,
};

#[derive(Parser)]
#[command(
    name = "redcb",
    version,
    about = "Redundancy-codebook visual token pruning"
)]
struct Cli {
    /// Print only machine-readable output.
    #[arg(long, short, global = true)]
    quiet: bool,

    /// Worker threads for image-level parallelism (default: all cores).
    #[arg(long, short, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus.
    SynthGen(SynthGenArgs),
    /// Probe every token and write analysis records (JSONL).
    Analyze(AnalyzeArgs),
    /// Build a redundancy codebook (.rcb).
    BuildCodebook(BuildArgs),
    /// Prune each image of a corpus against a codebook.
    Prune(PruneArgs),
    /// Find the similarity threshold that reaches a retention target.
    Calibrate(CalibrateArgs),
    /// Compare pruning strategies and write report.json / report.csv.
    Compare(CompareArgs),
    /// Cost of scoring L tokens against N prototypes of dimension d.
    Flops(FlopsArgs),
    /// Analyze a corpus with a live oracle and write a replay store.
    Export(ExportArgs),
    /// Lint a replay store.
    ValidateStore(ValidateArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    sigma_obj: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma_bg: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct OracleArgs {
    /// analytic, toy, or replay:<dir>.
    #[arg(long, default_value = "analytic")]
    oracle: String,
    /// Sharpness of the analytic oracle.
    #[arg(long, default_value_t = AnalyticOracle::DEFAULT_BETA)]
    beta: f64,
    /// Class count for the analytic oracle; read from synthetic corpora.
    #[arg(long)]
    classes: Option<usize>,
    /// Weight seed of the toy transformer.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    toy_vocab: usize,
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long, default_value_t = 50)]
    m_top1: usize,
    #[arg(long, default_value_t = 20)]
    m_jsd: usize,
    #[arg(long, default_value_t = 1.0)]
    k_region: f64,
    #[arg(long, default_value_t = 16.0)]
    k_global: f64,
    /// Neighbours used by per-image clustering.
    #[arg(long, default_value_t = 16)]
    k_dpc: usize,
    #[arg(long, value_enum, default_value_t = Ablation::Pad)]
    ablation: Ablation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Pad,
    Identity,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Corpus directory (defaults to the replay store).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, default_value = "synthetic")]
    profile: Profile,
    #[arg(long)]
    tau_prob: Option<f64>,
    #[arg(long)]
    tau_out: Option<usize>,
    #[arg(long)]
    tau_jsd: Option<f64>,
    #[arg(long)]
    tau_in: Option<usize>,
    #[arg(long)]
    k_pool: Option<usize>,
}

impl ThresholdArgs {
    fn resolve(&self) -> (Thresholds, usize) {
        let base = self.profile.thresholds();
        let th = Thresholds {
            tau_prob: self.tau_prob.unwrap_or(base.tau_prob),
            tau_out: self.tau_out.unwrap_or(base.tau_out),
            tau_jsd: self.tau_jsd.unwrap_or(base.tau_jsd),
            tau_in: self.tau_in.unwrap_or(base.tau_in),
        };
        (th, self.k_pool.unwrap_or(self.profile.k_pool()))
    }
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Analysis records to build from; analyzes the corpus when absent.
    #[arg(long)]
    records: Option<PathBuf>,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Keep tokens whose score is at most this value.
    #[arg(long, conflicts_with = "budget", required_unless_present = "budget")]
    r_threshold: Option<f64>,
    /// Keep this many lowest-scoring tokens.
    #[arg(long)]
    budget: Option<usize>,
    /// Only this image.
    #[arg(long)]
    image: Option<String>,
    /// Include every token's score in the output.
    #[arg(long)]
    scores: bool,
    /// Write JSON lines here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Fraction of tokens to remove [default: 0.8].
    #[arg(long, conflicts_with = "target_mean")]
    removal: Option<f64>,
    /// Mean retained tokens per image.
    #[arg(long)]
    target_mean: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    codebook: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long, default_value_t = 13)]
    budget: usize,
    /// Comma-separated; defaults to every strategy the oracle supports.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Seeds of the random baseline.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    m_jsd: usize,
    /// Layers summed by attn-rank (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    l: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    d: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Logits kept per response.
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    /// Lint the store after writing it.
    #[arg(long)]
    validate: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    store: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
    Lint(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lint(_) => 2,
            Failure::Core(e) => match e.root() {
                Error::Io { .. }
                | Error::Json { .. }
                | Error::CorruptStore(_)
                | Error::UnsupportedVersion(_) => 2,
                Error::MissingRecord(_) => 3,
                Error::EmptyCandidateSet => 4,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Lint(issues) => format!("store failed validation:\n  {}", issues.join("\n  ")),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn emit<T: Serialize>(value: &T) -> CmdResult {
    let line = serde_json::to_string(value).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{line}");
    Ok(())
}

struct Resolved {
    oracle: Box<dyn ModelOracle>,
    cls: Option<EmbeddingVector>,
    corpus: Corpus,
}

fn replay_dir(spec: &str) -> Option<&str> {
    spec.strip_prefix("replay:")
}

fn resolve(args: &OracleArgs, corpus: Option<&Path>) -> std::result::Result<Resolved, Failure> {
    let corpus_dir = match (corpus, replay_dir(&args.oracle)) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(store)) => PathBuf::from(store),
        (None, None) => return Err(Failure::Usage("--corpus is required".into())),
    };
    let (_, corpus) = load_corpus(&corpus_dir)?;
    let dim = corpus.dim();
    let (oracle, cls): (Box<dyn ModelOracle>, _) = match args.oracle.as_str() {
        "analytic" => {
            let classes = args
                .classes
                .or(corpus.synthetic.as_ref().map(|m| m.n_classes))
                .ok_or_else(|| {
                    Failure::Usage("--classes is required for a non-synthetic corpus".into())
                })?;
            if classes + 1 > dim {
                return Err(Failure::Usage(format!(
                    "{classes} classes do not fit in dimension {dim}"
                )));
            }
            let o = AnalyticOracle::for_synthetic(classes, dim, args.beta)?;
            let cls = Some(o.cls_embedding());
            (Box::new(o), cls)
        }
        "toy" => {
            let cfg = ToyConfig {
                dim,
                heads: if dim % 4 == 0 { 4 } else { 1 },
                vocab: args.toy_vocab,
                seed: args.seed,
                ..ToyConfig::default()
            };
            (Box::new(ToyTransformer::new(cfg)?), None)
        }
        other => match replay_dir(other) {
            Some(store) => (Box::new(ReplayOracle::open(Path::new(store))?), None),
            None => {
                return Err(Failure::Usage(format!(
                    "unknown oracle {other:?}; expected analytic, toy or replay:<dir>"
                )))
            }
        },
    };
    Ok(Resolved {
        oracle,
        cls,
        corpus,
    })
}

fn analysis_config(a: &AnalysisArgs, cls: Option<EmbeddingVector>) -> AnalysisConfig {
    AnalysisConfig {
        m_top1: a.m_top1,
        m_jsd: a.m_jsd,
        k_region: a.k_region,
        k_global: a.k_global,
        k_dpc_image: a.k_dpc,
        ablation: match a.ablation {
            Ablation::Pad => AblationMode::Pad,
            Ablation::Identity => AblationMode::Identity,
        },
        cls_embedding: cls,
        ..AnalysisConfig::default()
    }
}

fn synth_gen(ctx: &Ctx, a: SynthGenArgs) -> CmdResult {
    let params = SynthParams {
        n_images: a.images,
        grid: a.grid,
        n_classes: a.classes,
        dim: a.dim,
        seed: a.seed,
        sigma_obj: a.sigma_obj,
        sigma_bg: a.sigma_bg,
    };
    params
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus = synthcorpus::generate(&params)?;
    let oracle = AnalyticOracle::for_synthetic(a.classes, a.dim, AnalyticOracle::DEFAULT_BETA)?;
    let header = Manifest::for_model(oracle.model_id(), oracle.capabilities());
    write_corpus(&a.out, &corpus, &header, oracle.pad_embedding())?;
    ctx.note(format!(
        "wrote {} images (L={}, d={}) to {}",
        a.images,
        a.grid * a.grid,
        a.dim,
        a.out.display()
    ));
    emit(&serde_json::json!({"images": a.images, "L": a.grid * a.grid, "d": a.dim}))
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> CmdResult {
    let r = resolve(&a.oracle, a.corpus.as_deref())?;
    let cfg = analysis_config(&a.analysis, r.cls);
    ctx.note(format!(
        "analyzing {} images with {}",
        r.corpus.images.len(),
        r.oracle.model_id()
    ));
    let records = redcb_core::analysis::analyze_corpus(&r.oracle, &r.corpus, &cfg)?;
    write_records(&a.out, &records)?;
    ctx.note(format!(
        "wrote {} records to {}",
        records.len(),
        a.out.display()
    ));
    Ok(())
}

fn build(ctx: &Ctx, a: BuildArgs) -> CmdResult {
    let (th, k_pool) = a.thresholds.resolve();
    th.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (records, corpus, model_id) = match &a.records {
        Some(path) => {
            let dir = a
                .corpus
                .as_deref()
                .ok_or_else(|| Failure::Usage("--records needs --corpus".into()))?;
            let (manifest, corpus) = load_corpus(dir)?;
            (read_records(path)?, corpus, manifest.model_id)
        }
        None => {
            let r = resolve(&a.oracle, a.corpus.as_deref())?;
            let cfg = analysis_config(&a.analysis, r.cls);
            ctx.note(format!("analyzing {} images", r.corpus.images.len()));
            let records = redcb_core::analysis::analyze_corpus(&r.oracle, &r.corpus, &cfg)?;
            let model_id = r.oracle.model_id().to_owned();
            (records, r.corpus, model_id)
        }
    };
    let built = codebook_from_records(&records, &corpus, &model_id, &th, k_pool)?;
    save_codebook(&built.codebook, &a.out)?;
    ctx.note(format!(
        "{} prototypes from {} candidates written to {}",
        built.codebook.len(),
        built.n_candidates,
        a.out.display()
    ));
    emit(&serde_json::json!({
        "n": built.codebook.len(),
        "d": built.codebook.dim(),
        "candidates": built.n_candidates,
        "model_id": model_id,
        "thresholds": th,
        "k_pool": k_pool,
    }))
}

#[derive(Serialize)]
struct PruneLine<'a> {
    image_id: &'a str,
    n_tokens: usize,
    #[serde(flatten)]
    mode: PruneMode,
    kept: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<&'a [f64]>,
}

fn prune(ctx: &Ctx, a: PruneArgs) -> CmdResult {
    let (_, corpus) = load_corpus(&a.corpus)?;
    let cb = load_codebook(&a.codebook)?;
    let images: Vec<_> = match &a.image {
        Some(id) => vec![corpus
            .get(id)
            .ok_or_else(|| Failure::Usage(format!("no image {id:?} in the corpus")))?],
        None => corpus.images.iter().collect(),
    };
    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            fs::File::create(path).map_err(|e| io_failure(path, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut kept_total = 0;
    for img in &images {
        let res = match (a.r_threshold, a.budget) {
            (Some(r), None) => prune_threshold(&img.tokens, &cb, r)?,
            (None, Some(b)) => prune_budget(&img.tokens, &cb, b)?,
            _ => unreachable!("clap enforces exactly one mode"),
        };
        kept_total += res.kept.len();
        let line = PruneLine {
            image_id: &img.image_id,
            n_tokens: img.len(),
            mode: res.mode,
            kept: &res.kept,
            scores: a.scores.then_some(res.scores.as_slice()),
        };
        let text = serde_json::to_string(&line).map_err(|e| Failure::Usage(e.to_string()))?;
        match writeln!(out, "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            other => other.map_err(|e| io_failure(Path::new("<output>"), e))?,
        }
    }
    match out.flush() {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            return Err(io_failure(Path::new("<output>"), e))
        }
        _ => {}
    }
    ctx.note(format!(
        "kept {:.2} tokens per image on average",
        kept_total as f64 / images.len() as f64
    ));
    Ok(())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn calibrate(ctx: &Ctx, a: CalibrateArgs) -> CmdResult {
    let (_, corpus) = load_corpus(&a.corpus)?;
    let cb = load_codebook(&a.codebook)?;
    let target = match (a.removal, a.target_mean) {
        (_, Some(t)) => t,
        (removal, None) => {
            let removal = removal.unwrap_or(0.8);
            if !(0.0..1.0).contains(&removal) {
                return Err(Failure::Usage(format!(
                    "--removal must lie in [0, 1), got {removal}"
                )));
            }
            (1.0 - removal) * corpus.mean_len()
        }
    };
    let tokens: Vec<&TokenMatrix> = corpus.images.iter().map(|i| &i.tokens).collect();
    let cal = calibrate_threshold(&tokens, &cb, target)?;
    ctx.note(format!(
        "mean retained {:.3} for target {target:.3}",
        cal.achieved_mean
    ));
    println!("{:.4}", cal.r_threshold);
    Ok(())
}

fn compare(ctx: &Ctx, a: CompareArgs) -> CmdResult {
    let r = resolve(&a.oracle, a.corpus.as_deref())?;
    let cb = load_codebook(&a.codebook)?;
    let strategies = match a.strategies {
        Some(s) if s.contains(&Strategy::ClsSim) && r.cls.is_none() => {
            return Err(Failure::Usage(
                "clssim-rank needs a reference embedding; only the analytic oracle provides one"
                    .into(),
            ))
        }
        Some(s) => s,
        None => Strategy::ALL
            .into_iter()
            .filter(|s| *s != Strategy::ClsSim || r.cls.is_some())
            .collect(),
    };
    let cfg = CompareConfig {
        budget: a.budget,
        strategies,
        seeds: a.seeds,
        m_jsd: a.m_jsd,
        cls_embedding: r.cls,
        layer_set: a.layers,
    };
    let cmp = compare_strategies(&r.corpus, &r.oracle, &cb, &cfg)?;
    write_reports(&a.out, &cmp)?;
    for row in cmp.rows.iter().filter(|r| r.row == "aggregate") {
        ctx.note(format!(
            "{:<12} accuracy {:.3}  faithfulness {:.4}",
            row.strategy, row.toy_accuracy, row.faithfulness_jsd
        ));
    }
    ctx.note(format!("reports written to {}", a.out.display()));
    Ok(())
}

fn flops(a: FlopsArgs) -> CmdResult {
    println!("{}", probing_flops(a.l, a.n, a.d)?);
    Ok(())
}

fn export(ctx: &Ctx, a: ExportArgs) -> CmdResult {
    if replay_dir(&a.oracle.oracle).is_some() {
        return Err(Failure::Usage("export needs a live oracle".into()));
    }
    let r = resolve(&a.oracle, Some(&a.corpus))?;
    let cfg = analysis_config(&a.analysis, r.cls);
    let summary = export_store(&r.oracle, &r.corpus, &cfg, a.top_k, &a.out)?;
    ctx.note(format!(
        "exported {} responses for {} images to {}",
        summary.requests,
        summary.manifest.images.len(),
        a.out.display()
    ));
    if a.validate {
        lint(ctx, &a.out)?;
    }
    Ok(())
}

fn lint(ctx: &Ctx, store: &Path) -> CmdResult {
    let report = lint_store(store)?;
    if !report.is_clean() {
        return Err(Failure::Lint(report.issues));
    }
    ctx.note(format!(
        "{}: {} images, {} records, clean",
        store.display(),
        report.images,
        report.records
    ));
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let ctx = Ctx { quiet: cli.quiet };
    match cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::BuildCodebook(a) => build(&ctx, a),
        Command::Prune(a) => prune(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Flops(a) => flops(a),
        Command::Export(a) => export(&ctx, a),
        Command::ValidateStore(a) => lint(&ctx, &a.store),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default_level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REDCB_LOG", default_level))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
