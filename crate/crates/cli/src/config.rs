//! JSON run configuration. Flags override config values, which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visfocus_core::facematch::GalleryMode;
use visfocus_core::visibility::BonferroniFamily;
use visfocus_core::{FrontRunner, Roster};

use crate::error::{CliError, CliResult, Classify};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Stories,
    Posts,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Stories => "stories",
            Dataset::Posts => "posts",
        }
    }
}

/// How a model's `Unsure` answer is scored against binary human labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UnsurePolicy {
    /// Count as "False": a refusal is a failure to verify.
    #[default]
    AsAbsent,
    /// Leave the unit out.
    Exclude,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub corpus: Option<PathBuf>,
    pub faces: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub resolutions: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub presence: Option<PathBuf>,
    pub matches: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub visibility: Option<PathBuf>,
    pub images_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub concurrency: Option<usize>,
    pub max_retries: Option<u32>,
    pub cache_dir: Option<PathBuf>,
    pub image_detail: Option<String>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub min_group_size: Option<u64>,
    pub yates: Option<bool>,
    pub bonferroni: Option<BonferroniFamily>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<Dataset>,
    pub roster: Option<Vec<FrontRunner>>,
    pub threshold: Option<f64>,
    pub calibration: Option<PathBuf>,
    pub gallery_mode: Option<GalleryMode>,
    pub unsure_policy: Option<UnsurePolicy>,
    pub inputs: Inputs,
    pub llm: LlmConfig,
    pub battery: BatteryConfig,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl FileConfig {
    /// Loads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).input_err(&format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig = serde_json::from_str(&text).input_err(&format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let i = &mut cfg.inputs;
        for p in [
            &mut i.corpus,
            &mut i.faces,
            &mut i.gallery,
            &mut i.annotations,
            &mut i.predictions,
            &mut i.resolutions,
            &mut i.objects,
            &mut i.gold,
            &mut i.presence,
            &mut i.matches,
            &mut i.counts,
            &mut i.visibility,
            &mut i.images_dir,
        ] {
            rebase(&base, p);
        }
        rebase(&base, &mut cfg.out_dir);
        rebase(&base, &mut cfg.calibration);
        rebase(&base, &mut cfg.llm.cache_dir);
        Ok(cfg)
    }
}

/// Resolved global settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct Globals {
    pub out_dir: PathBuf,
    pub dataset: Option<Dataset>,
    pub roster: Roster,
    pub file: FileConfig,
}

impl Globals {
    pub fn dataset_str(&self) -> Option<&'static str> {
        self.dataset.map(Dataset::as_str)
    }
}

pub fn load_roster(path: &Path) -> CliResult<Vec<FrontRunner>> {
    let text = std::fs::read_to_string(path).input_err(&format!("reading roster {}", path.display()))?;
    let list: Vec<FrontRunner> = serde_json::from_str(&text).input_err(&format!("parsing roster {}", path.display()))?;
    if list.is_empty() {
        return Err(CliError::input("roster is empty"));
    }
    Ok(list)
}

/// First of flag and config value, or an input error naming the flag.
pub fn required<T: Clone>(flag: &Option<T>, config: &Option<T>, name: &str) -> CliResult<T> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::input(format!("missing required --{name} (flag or config)")))
}

pub fn optional<T: Clone>(flag: &Option<T>, config: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| config.clone())
}
