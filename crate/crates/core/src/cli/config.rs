//! Experiment configuration files.
//!
//! ```toml
//! [gridworld]
//! width = 5
//! height = 5
//!
//! [decomposition]
//! n_factors = 4
//! alpha = { kind = "softened_min", scale = 10.0, temperature = 2.0 }
//!
//! [trainer]
//! mode = "exact"
//! total_steps = 300
//!
//! [run]
//! seeds = [0, 1, 2, 3]
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomp::{AlphaScheme, TrainerConfig};
use crate::induced::ControlConfig;
use crate::mdp::GridworldSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.origin, line, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionSection {
    pub n_factors: Option<usize>,
    pub alpha: Option<AlphaScheme>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub saturation: bool,
    pub theorem1: bool,
    pub lemma1: bool,
    pub state_dependence: bool,
    /// Trajectory length for the state-dependence sample, drawn under the
    /// measured policy itself.
    pub state_dependence_steps: usize,
    pub reachability: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            saturation: true,
            theorem1: true,
            lemma1: true,
            state_dependence: true,
            state_dependence_steps: 10_000,
            reachability: true,
        }
    }
}

/// Cells that keep their reward in a restricted task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    All,
    Empty,
    LeftHalf,
    RightHalf,
    TopHalf,
    BottomHalf,
    Cells(Vec<[usize; 2]>),
}

impl Region {
    pub fn contains(&self, spec: &GridworldSpec, state: usize) -> bool {
        let (x, y) = spec.cell_of(state);
        match self {
            Region::All => true,
            Region::Empty => false,
            Region::LeftHalf => x < spec.width / 2,
            Region::RightHalf => x >= spec.width.div_ceil(2),
            Region::TopHalf => y < spec.height / 2,
            Region::BottomHalf => y >= spec.height.div_ceil(2),
            Region::Cells(cells) => cells.iter().any(|&[cx, cy]| (cx, cy) == (x, y)),
        }
    }

    fn check(&self, spec: &GridworldSpec) -> Result<(), String> {
        if let Region::Cells(cells) = self {
            if let Some([x, y]) = cells.iter().find(|&&[x, y]| x >= spec.width || y >= spec.height) {
                return Err(format!(
                    "region cell ({x}, {y}) lies outside the {}x{} grid",
                    spec.width, spec.height
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InducedSection {
    pub enabled: bool,
    pub region: Region,
    pub control: ControlConfig,
}

impl Default for InducedSection {
    fn default() -> Self {
        Self {
            enabled: false,
            region: Region::LeftHalf,
            control: ControlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Root under which the run directory is created.
    pub output_dir: String,
    /// Run directory name; defaults to the config file stem.
    pub name: Option<String>,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            output_dir: "runs".into(),
            name: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    gridworld: GridworldSpec,
    decomposition: DecompositionSection,
    trainer: TrainerConfig,
    metrics: MetricsSection,
    induced: InducedSection,
    run: RunSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub gridworld: GridworldSpec,
    /// Carries the decomposition section's factor count and weighting.
    pub trainer: TrainerConfig,
    pub metrics: MetricsSection,
    pub induced: InducedSection,
    pub run: RunSection,
    /// Text the config was parsed from, copied into the run directory.
    pub source: String,
}

impl ExperimentConfig {
    pub fn n_factors(&self) -> usize {
        self.trainer.n_factors
    }

    pub fn alpha(&self) -> &AlphaScheme {
        &self.trainer.alpha
    }
}

/// Line of `key = ...` inside `[section]`, or of the section header when
/// `key` is `None`.
fn locate(source: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let header = format!("[{section}]");
    let mut inside = false;
    for (idx, line) in source.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            inside = trimmed == header;
            if inside && key.is_none() {
                return Some(idx + 1);
            }
            continue;
        }
        if let (true, Some(key)) = (inside, key) {
            let name = trimmed.split('=').next().unwrap_or("").trim();
            if name == key {
                return Some(idx + 1);
            }
        }
    }
    None
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

pub fn parse_config(source: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let fail = |line: Option<usize>, message: String| ConfigError {
        origin: origin.to_string(),
        line,
        message,
    };
    let raw: RawConfig = toml::from_str(source).map_err(|e| {
        let line = e.span().map(|span| line_of_offset(source, span.start));
        fail(line, e.message().trim().to_string())
    })?;
    let table: toml::Table = toml::from_str(source).map_err(|e| fail(None, e.message().to_string()))?;
    if let Some(trainer) = table.get("trainer").and_then(|t| t.as_table()) {
        for key in ["n_factors", "alpha"] {
            if trainer.contains_key(key) {
                return Err(fail(
                    locate(source, "trainer", Some(key)),
                    format!("`{key}` belongs in [decomposition]"),
                ));
            }
        }
    }

    let RawConfig {
        gridworld,
        decomposition,
        mut trainer,
        metrics,
        induced,
        run,
    } = raw;
    if let Some(n) = decomposition.n_factors {
        trainer.n_factors = n;
    }
    if let Some(alpha) = decomposition.alpha {
        trainer.alpha = alpha;
    }

    gridworld
        .validate()
        .map_err(|e| fail(locate(source, "gridworld", None), e.to_string()))?;
    if let Err(e) = trainer.alpha.validate() {
        return Err(fail(locate(source, "decomposition", Some("alpha")), e.to_string()));
    }
    if let Err(e) = trainer.validate() {
        let line = locate(source, "decomposition", Some("n_factors")).filter(|_| trainer.n_factors == 0);
        return Err(fail(line.or_else(|| locate(source, "trainer", None)), e.to_string()));
    }
    if trainer.discount != gridworld.discount {
        return Err(fail(
            locate(source, "trainer", Some("discount")).or_else(|| locate(source, "gridworld", Some("discount"))),
            format!(
                "trainer discount {} differs from gridworld discount {}",
                trainer.discount, gridworld.discount
            ),
        ));
    }
    if induced.enabled {
        induced
            .control
            .validate()
            .map_err(|e| fail(locate(source, "induced.control", None), e.to_string()))?;
    }
    induced
        .region
        .check(&gridworld)
        .map_err(|msg| fail(locate(source, "induced", Some("region")), msg))?;
    if run.seeds.is_empty() {
        return Err(fail(
            locate(source, "run", Some("seeds")),
            "seed list must not be empty".into(),
        ));
    }
    if run.workers == 0 {
        return Err(fail(
            locate(source, "run", Some("workers")),
            "workers must be positive".into(),
        ));
    }
    if metrics.state_dependence && metrics.state_dependence_steps == 0 {
        return Err(fail(
            locate(source, "metrics", Some("state_dependence_steps")),
            "state_dependence_steps must be positive".into(),
        ));
    }
    Ok(ExperimentConfig {
        gridworld,
        trainer,
        metrics,
        induced,
        run,
        source: source.to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let origin = path.display().to_string();
    let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
        origin: origin.clone(),
        line: None,
        message: e.to_string(),
    })?;
    parse_config(&source, &origin)
}
