use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vgt_core::evo::{EvolutionConfig, Genome};
use vgt_core::objectives::ObjectiveSpec;
use vgt_core::rl::PpoConfig;
use vgt_core::sim::PhysicsConfig;
use vgt_core::truss::{check_assignment, TrussFile, TrussGraph};

pub const WORKERS_ENV: &str = "VGT_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid genome {path}: {message}")]
    InvalidGenome { path: PathBuf, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Config(_) => 2,
            Self::InvalidGenome { .. } | Self::Validation(_) | Self::Run(_) => 1,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// A truss given either as a path (relative to the config file) or inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrussSource {
    Path(PathBuf),
    Inline(TrussFile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditSpec {
    pub contexts: usize,
    pub channels: usize,
}

/// Experiment file as written by hand.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truss: TrussSource,
    #[serde(default)]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub ga: EvolutionConfig,
    #[serde(default)]
    pub physics: Option<PhysicsConfig>,
    /// TOML physics overrides, relative to the config file.
    #[serde(default)]
    pub physics_file: Option<PathBuf>,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub bandit: Option<BanditSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
}

/// Fully explicit copy written next to every run's outputs. It parses back as
/// an [`ExperimentConfig`].
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub truss: TrussFile,
    pub objectives: Vec<ObjectiveSpec>,
    pub ga: EvolutionConfig,
    pub physics: PhysicsConfig,
    pub ppo: PpoConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandit: Option<BanditSpec>,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_truss(path: &Path) -> Result<TrussFile, CliError> {
    parse_json(path, &read_text(path)?)
}

pub fn build_truss(file: &TrussFile) -> Result<TrussGraph, CliError> {
    file.build().map_err(|e| CliError::Config(format!("truss: {e}")))
}

fn resolve_workers(cli: Option<usize>, file: Option<usize>) -> Result<usize, CliError> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("{WORKERS_ENV}={v} is not a count")))?,
        ),
        Err(_) => None,
    };
    let n = cli
        .or(env)
        .or(file)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Config("worker count must be positive".into()));
    }
    Ok(n)
}

impl ResolvedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let raw: ExperimentConfig = parse_json(path, &read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let truss = match raw.truss {
            TrussSource::Path(p) => load_truss(&base.join(p))?,
            TrussSource::Inline(t) => t,
        };
        let physics = match (raw.physics, raw.physics_file) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("give either physics or physics_file, not both".into()))
            }
            (Some(p), None) => p,
            (None, Some(f)) => {
                let f = base.join(f);
                PhysicsConfig::from_toml_str(&read_text(&f)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?
            }
            (None, None) => PhysicsConfig::default(),
        };
        physics
            .validate()
            .map_err(|e| CliError::Config(format!("physics: {e}")))?;
        raw.ga
            .validate()
            .map_err(|e| CliError::Config(format!("ga: {e}")))?;
        raw.ppo
            .validate()
            .map_err(|e| CliError::Config(format!("ppo: {e}")))?;
        let mut names = HashSet::new();
        for o in &raw.objectives {
            o.validate()
                .map_err(|e| CliError::Config(format!("objective {}: {e}", o.name())))?;
            if !names.insert(o.name()) {
                return Err(CliError::Config(format!("duplicate objective name {}", o.name())));
            }
        }
        Ok(Self {
            truss,
            objectives: raw.objectives,
            ga: raw.ga,
            physics,
            ppo: raw.ppo,
            bandit: raw.bandit,
            seed: overrides.seed.unwrap_or(raw.seed),
            out: overrides
                .out
                .clone()
                .or(raw.out)
                .unwrap_or_else(|| PathBuf::from("out")),
            workers: resolve_workers(overrides.workers, raw.workers)?,
        })
    }

    pub fn graph(&self) -> Result<TrussGraph, CliError> {
        build_truss(&self.truss)
    }

    pub fn objective(&self, name: &str) -> Result<&ObjectiveSpec, CliError> {
        self.objectives.iter().find(|o| o.name() == name).ok_or_else(|| {
            let known: Vec<String> = self.objectives.iter().map(ObjectiveSpec::name).collect();
            CliError::Config(format!("unknown objective {name} (have {})", known.join(", ")))
        })
    }

    pub fn write(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        write_text(&self.out.join("resolved_config.json"), &(text + "\n"))
    }
}

/// Reads a genome; a file that does not parse is an invalid genome, a file
/// that cannot be read is an IO error.
pub fn read_genome(path: &Path) -> Result<Genome, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::InvalidGenome {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a genome and checks it against the truss.
pub fn load_genome(path: &Path, graph: &TrussGraph) -> Result<Genome, CliError> {
    let genome = read_genome(path)?;
    let failed: Vec<String> = genome_checks(graph, &genome)
        .into_iter()
        .filter(|c| !c.passed)
        .map(|c| c.to_string())
        .collect();
    if failed.is_empty() {
        Ok(genome)
    } else {
        Err(CliError::InvalidGenome {
            path: path.to_path_buf(),
            message: failed.join("; "),
        })
    }
}

/// The assignment invariant suite plus a shape check on the control schedule.
pub fn genome_checks(graph: &TrussGraph, genome: &Genome) -> Vec<vgt_core::truss::CheckResult> {
    let mut out = check_assignment(graph, genome.channels.channels());
    let c = &genome.control;
    let ok = c.n_steps() > 0 && c.is_rectangular() && c.n_channels() == graph.n_channels();
    out.push(vgt_core::truss::CheckResult {
        name: "control",
        passed: ok,
        detail: if ok {
            String::new()
        } else {
            format!(
                "expected a non-empty schedule over {} channels",
                graph.n_channels()
            )
        },
    });
    out
}
