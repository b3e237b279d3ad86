//! Experiment configuration: a single TOML document with `task`, `algo`,
//! `run`, and `train` sections plus optional `bench`, `arm`, and `ablate`
//! grids. Unknown keys are rejected so typos fail before any work starts.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use b2opt::baselines::{DeConfig, EsConfig, GaConfig};
use b2opt::model::Ablation;
use b2opt::objectives::{ArmMode, ArmTask, FunctionId};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Option<TaskSection>,
    pub algo: Option<AlgoSection>,
    #[serde(default)]
    pub run: RunSection,
    pub train: Option<TrainSection>,
    pub bench: Option<BenchSection>,
    pub arm: Option<ArmSection>,
    pub ablate: Option<AblateSection>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<u8>)> {
        let raw = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let text = std::str::from_utf8(&raw).context("config is not UTF-8")?;
        let config: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        Ok((config, raw))
    }

    pub fn task(&self) -> Result<&TaskSection> {
        self.task.as_ref().context("config needs a [task] section")
    }

    pub fn algo(&self) -> Result<&AlgoSection> {
        self.algo.as_ref().context("config needs an [algo] section")
    }

    pub fn train(&self) -> Result<&TrainSection> {
        self.train.as_ref().context("config needs a [train] section")
    }
}

// ── task ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Function tasks: which benchmark function.
    pub function: Option<String>,
    /// Function tasks: decision dimension.
    pub d: Option<usize>,
    /// Optional box override applied to every coordinate.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Arm tasks.
    pub mode: Option<String>,
    pub segments: Option<usize>,
    pub r_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Function,
    Arm,
}

impl TaskSection {
    pub fn function_id(&self) -> Result<FunctionId> {
        let name = self.function.as_deref().context("[task] function tasks need `function`")?;
        FunctionId::from_str(name).map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn dim(&self) -> Result<usize> {
        match self.kind {
            TaskKind::Function => self.d.context("[task] function tasks need `d`"),
            TaskKind::Arm => Ok(self.arm_task()?.dim()),
        }
    }

    pub fn arm_mode(&self) -> Result<ArmMode> {
        match self.mode.as_deref().unwrap_or("simple") {
            "simple" => Ok(ArmMode::Simple),
            "complex" => Ok(ArmMode::Complex),
            other => bail!("unknown arm mode `{other}` (use simple|complex)"),
        }
    }

    pub fn arm_task(&self) -> Result<ArmTask> {
        let mut task = ArmTask::new(self.arm_mode()?);
        if let Some(segments) = self.segments {
            task.segments = segments;
        }
        Ok(task)
    }
}

// ── algorithm ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    pub kind: AlgoKind,
    /// b2opt: path to the trained checkpoint (relative paths resolve
    /// against the config file's directory).
    pub checkpoint: Option<PathBuf>,
    /// DE parameters.
    pub scale: Option<f64>,
    pub crossover: Option<f64>,
    /// ES parameters.
    pub parents: Option<usize>,
    pub offspring: Option<usize>,
    pub sigma_factor: Option<f64>,
    /// GA parameters.
    pub mutation: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    B2opt,
    De,
    Es,
    Ga,
    Random,
}

impl AlgoKind {
    pub fn label(self) -> &'static str {
        match self {
            AlgoKind::B2opt => "b2opt",
            AlgoKind::De => "de",
            AlgoKind::Es => "es",
            AlgoKind::Ga => "ga",
            AlgoKind::Random => "random",
        }
    }
}

impl AlgoSection {
    pub fn de_config(&self) -> DeConfig {
        let mut c = DeConfig::default();
        if let Some(scale) = self.scale {
            c.scale = scale;
        }
        if let Some(cr) = self.crossover {
            c.crossover = cr;
        }
        c
    }

    pub fn es_config(&self, n: usize) -> EsConfig {
        let mut c = EsConfig { parents: n / 2, offspring: n, sigma_factor: 0.1 };
        if let Some(parents) = self.parents {
            c.parents = parents;
        }
        if let Some(offspring) = self.offspring {
            c.offspring = offspring;
        }
        if let Some(s) = self.sigma_factor {
            c.sigma_factor = s;
        }
        c
    }

    pub fn ga_config(&self) -> GaConfig {
        let mut c = GaConfig::default();
        if let Some(cr) = self.crossover {
            c.crossover = cr;
        }
        if let Some(mr) = self.mutation {
            c.mutation = mr;
        }
        if let Some(eta) = self.eta {
            c.eta = eta;
        }
        c
    }
}

// ── run ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Population size.
    pub n: usize,
    /// Generations for iterative baselines (the model's depth fixes its own).
    pub steps: usize,
    /// Independent repetitions.
    pub seeds: usize,
    /// Output directory; the --out flag overrides.
    pub out_dir: PathBuf,
    /// Optional evaluation cap for budget-matched comparisons (0 = off).
    pub max_evals: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { n: 100, steps: 100, seeds: 10, out_dir: PathBuf::from("out"), max_evals: 0 }
    }
}

// ── training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_true")]
    pub weight_sharing: bool,
    #[serde(default = "default_dk")]
    pub d_k: usize,
    /// 0 picks the default hidden width (2d).
    #[serde(default)]
    pub hidden: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_batch_k")]
    pub batch_k: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Function-task training set.
    #[serde(default)]
    pub functions: Vec<String>,
    /// 0 = fresh shifts every epoch; otherwise the dataset-size knob.
    #[serde(default)]
    pub shift_pool: usize,
    /// Arm-task training knobs.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_tpe")]
    pub targets_per_epoch: usize,
    #[serde(default = "default_resample")]
    pub resample_every: usize,
    #[serde(default = "default_rtrain")]
    pub r_train: f64,
    /// Checkpoint file name inside the output directory.
    #[serde(default = "default_ckpt")]
    pub checkpoint_out: PathBuf,
}

fn default_t() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_dk() -> usize {
    16
}
fn default_epochs() -> usize {
    1000
}
fn default_lr0() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.9
}
fn default_decay_every() -> usize {
    100
}
fn default_batch_k() -> usize {
    16
}
fn default_clip() -> f64 {
    10.0
}
fn default_pool() -> usize {
    600
}
fn default_tpe() -> usize {
    4
}
fn default_resample() -> usize {
    10
}
fn default_rtrain() -> f64 {
    1000.0
}
fn default_ckpt() -> PathBuf {
    PathBuf::from("model.ckpt")
}

impl TrainSection {
    pub fn function_ids(&self) -> Result<Vec<FunctionId>> {
        self.functions
            .iter()
            .map(|s| FunctionId::from_str(s).map_err(|e| anyhow::anyhow!("{e}")))
            .collect()
    }
}

// ── grids ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub functions: Vec<String>,
    pub dims: Vec<usize>,
    pub algos: Vec<AlgoSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    #[serde(default = "default_r_values")]
    pub r_values: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default = "default_targets")]
    pub targets: usize,
}

fn default_r_values() -> Vec<f64> {
    vec![100.0, 300.0, 1000.0]
}
fn default_modes() -> Vec<String> {
    vec!["simple".into(), "complex".into()]
}
fn default_targets() -> usize {
    128
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    pub functions: Vec<String>,
    #[serde(default)]
    pub dims: Vec<usize>,
}

fn default_variants() -> Vec<String> {
    ["full", "no-crossover", "no-mutation", "no-residual", "no-selection"].map(String::from).to_vec()
}

/// Maps an ablation variant name to its switch set.
pub fn parse_variant(name: &str) -> Result<Ablation> {
    let mut a = Ablation::none();
    match name {
        "full" => {}
        "no-crossover" => a.disable_crossover = true,
        "no-mutation" => a.disable_mutation = true,
        "no-residual" => a.disable_residual = true,
        "no-selection" => a.disable_selection = true,
        other => bail!("unknown ablation variant `{other}`"),
    }
    Ok(a)
}
