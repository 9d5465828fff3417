//! `visfocus`: the pipeline as subcommands over JSONL/CSV/JSON files.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use visfocus_core::facematch::GalleryMode;
use visfocus_core::visibility::BonferroniFamily;
use visfocus_core::{Roster, Task};

use config::{Dataset, FileConfig, Globals, UnsurePolicy};
use error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "visfocus", version, about = "Measure concentrated visibility of front-runners in campaign images")]
struct Cli {
    /// JSON config; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving outputs and manifests [default: .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dataset tag stamped into outputs.
    #[arg(long, global = true, value_enum)]
    dataset: Option<Dataset>,
    /// JSON list of {"name","party"} front-runners [default: 2021 German roster]
    #[arg(long, global = true)]
    roster: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GalleryModeArg {
    PerParty,
    Full,
}

impl From<GalleryModeArg> for GalleryMode {
    fn from(m: GalleryModeArg) -> Self {
        match m {
            GalleryModeArg::PerParty => GalleryMode::PerParty,
            GalleryModeArg::Full => GalleryMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BonferroniArg {
    Executed,
    Planned,
}

impl From<BonferroniArg> for BonferroniFamily {
    fn from(m: BonferroniArg) -> Self {
        match m {
            BonferroniArg::Executed => BonferroniFamily::Executed,
            BonferroniArg::Planned => BonferroniFamily::Planned,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CountSourceArg {
    Faces,
    Objects,
    Model,
    Human,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LlmTaskArg {
    CandidatePresence,
    PersonCount,
}

impl From<LlmTaskArg> for Task {
    fn from(t: LlmTaskArg) -> Self {
        match t {
            LlmTaskArg::CandidatePresence => Task::CandidatePresence,
            LlmTaskArg::PersonCount => Task::PersonCount,
        }
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate input files and summarize the corpus.
    Ingest(IngestArgs),
    /// Match faces against the gallery and aggregate presence per image.
    Match(MatchArgs),
    /// Choose the distance threshold maximizing macro F1 against human face labels.
    Calibrate(CalibrateArgs),
    /// Derive per-image person-count classes from one source.
    Count(CountArgs),
    /// Krippendorff's alpha for human annotations, optionally with models added.
    Alpha(AlphaArgs),
    /// Majority-vote gold labels with review resolutions applied.
    Gold(GoldArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Annotate images through a chat-completions endpoint.
    LlmAnnotate(LlmAnnotateArgs),
    /// Build per-image visibility rows and cross-tabulations.
    Report(ReportArgs),
    /// Run the chi-squared test battery over visibility rows.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub faces: Option<PathBuf>,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub faces: Option<PathBuf>,
    /// Corpus metadata; needed for per-party galleries and for images without faces.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, conflicts_with = "calibration")]
    pub threshold: Option<f64>,
    /// calibration.json whose threshold is used.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub gallery_mode: Option<GalleryModeArg>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub faces: Option<PathBuf>,
    /// Human face_identity annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub resolutions: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub gallery_mode: Option<GalleryModeArg>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long, value_enum)]
    pub source: CountSourceArg,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub faces: Option<PathBuf>,
    /// Object-detector boxes, one {"image_id","label",...} per line.
    #[arg(long)]
    pub objects: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub resolutions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AlphaArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    /// Predictions whose models are added as extra coders (repeatable).
    #[arg(long)]
    pub with_model: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub unsure_policy: Option<UnsurePolicy>,
}

#[derive(Args, Debug)]
pub struct GoldArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub resolutions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// gold.jsonl from the gold subcommand.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, group = "pred")]
    pub predictions: Option<PathBuf>,
    /// presence.jsonl from the match subcommand.
    #[arg(long, group = "pred")]
    pub presence: Option<PathBuf>,
    /// matches.jsonl from the match subcommand.
    #[arg(long, group = "pred")]
    pub matches: Option<PathBuf>,
    /// Needed to pick the front-runner row when presence has several per image.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Selects one model when predictions hold several.
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long, value_enum)]
    pub unsure_policy: Option<UnsurePolicy>,
}

#[derive(Args, Debug)]
pub struct LlmAnnotateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory holding `<image_id>.<ext>` files.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: LlmTaskArg,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// [default: <out-dir>/llm_cache]
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Count prompt without the crowd question.
    #[arg(long)]
    pub no_crowd: bool,
    /// Only annotate images whose gold or presence label is present.
    #[arg(long)]
    pub only_present: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// candidate_presence gold.jsonl (human presence, the default source).
    #[arg(long, group = "presence_source")]
    pub gold: Option<PathBuf>,
    /// presence.jsonl from the match subcommand.
    #[arg(long, group = "presence_source")]
    pub presence: Option<PathBuf>,
    /// candidate_presence model predictions.
    #[arg(long, group = "presence_source")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub unsure_policy: Option<UnsurePolicy>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub visibility: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub bonferroni: Option<BonferroniArg>,
    #[arg(long)]
    pub min_group_size: Option<u64>,
    #[arg(long)]
    pub yates: bool,
}

fn globals(cli: &Cli) -> CliResult<Globals> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let roster = match (&cli.roster, &file.roster) {
        (Some(p), _) => Roster::new(config::load_roster(p)?),
        (None, Some(list)) => Roster::new(list.clone()),
        (None, None) => Roster::german_2021(),
    };
    Ok(Globals {
        out_dir: cli.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from(".")),
        dataset: cli.dataset.or(file.dataset),
        roster,
        file,
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest(_) => "ingest",
        Command::Match(_) => "match",
        Command::Calibrate(_) => "calibrate",
        Command::Count(_) => "count",
        Command::Alpha(_) => "alpha",
        Command::Gold(_) => "gold",
        Command::Eval(_) => "eval",
        Command::LlmAnnotate(_) => "llm-annotate",
        Command::Report(_) => "report",
        Command::Analyze(_) => "analyze",
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = globals(cli)?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&g, a),
        Command::Match(a) => commands::match_faces(&g, a),
        Command::Calibrate(a) => commands::calibrate(&g, a),
        Command::Count(a) => commands::count(&g, a),
        Command::Alpha(a) => commands::alpha(&g, a),
        Command::Gold(a) => commands::gold(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::LlmAnnotate(a) => commands::llm_annotate(&g, a),
        Command::Report(a) => commands::report(&g, a),
        Command::Analyze(a) => commands::analyze(&g, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record(command_name(&cli.command)));
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
