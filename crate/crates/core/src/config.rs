//! Run configuration: one TOML document, one table per concern, unknown keys
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{CfgSchedule, FlowConfig};
use crate::kinematics::ChainModel;
use crate::motion_data::DatasetSpec;
use crate::physics_cost::{CostWeights, GuidanceSchedule};
use crate::tracker::TrackerConfig;
use crate::vae::VaeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Euler steps for the base flow and the guided teacher.
    pub teacher_nfe: usize,
    /// Euler steps for the reflow student.
    pub student_nfe: usize,
    pub cfg: CfgSchedule,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            teacher_nfe: 10,
            student_nfe: 1,
            cfg: CfgSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowSection {
    pub iterations: usize,
    pub lr: f64,
    /// Number of (noise, guided sample) pairs; 0 means one per training
    /// window, larger values cycle through the windows with fresh noise.
    pub pairs: usize,
    /// Share of student training rows drawn at `u = 0`.
    pub u_zero_fraction: f64,
}

impl Default for ReflowSection {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            lr: 5e-4,
            pairs: 0,
            u_zero_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub percentile: f64,
    pub eps_reg: f64,
    pub probes: usize,
    pub delta: f64,
    pub tau_stab_percentile: f64,
    /// Validation windows used to calibrate `τ_stab`; 0 means all.
    pub calibration_windows: usize,
    pub t_fb: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            percentile: 90.0,
            eps_reg: 1e-3,
            probes: 16,
            delta: 1e-6,
            tau_stab_percentile: 99.0,
            calibration_windows: 0,
            t_fb: 1.0,
        }
    }
}

/// Scalar gains applied to every joint; torque caps follow the chain's
/// acceleration limits unless given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub kp: f64,
    pub kd: f64,
    pub inertia: f64,
    pub tau_max: Option<f64>,
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self {
            kp: 400.0,
            kd: 40.0,
            inertia: 1.0,
            tau_max: None,
        }
    }
}

impl TrackerSection {
    pub fn build(&self, chain: &ChainModel) -> TrackerConfig {
        let n = chain.n_joints();
        let mut cfg = TrackerConfig::uniform(n, self.kp, self.kd, 1.0, self.inertia);
        cfg.tau_max = match self.tau_max {
            Some(t) => vec![t; n],
            None => chain.acc_limits.iter().map(|a| a * self.inertia).collect(),
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Validation windows for the window-level JV/SC comparison.
    pub rate_windows: usize,
    /// Episodes per variant for the tracking table.
    pub episodes: usize,
    /// Generator periods per episode.
    pub episode_windows: u64,
    /// Repeated generations per prompt for multimodality.
    pub mmodality_runs: usize,
    /// Validation windows (one prompt each) in the diversity study.
    pub diversity_windows: usize,
    /// Monitor-mode episodes whose windows feed the R-quintile study.
    pub quintile_episodes: usize,
    pub id_prompts: usize,
    pub latency_runs: usize,
    pub latency_warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rate_windows: 200,
            episodes: 50,
            episode_windows: 40,
            mmodality_runs: 10,
            diversity_windows: 40,
            quintile_episodes: 50,
            id_prompts: 500,
            latency_runs: 100,
            latency_warmup: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub chain: ChainModel,
    pub data: DatasetSpec,
    pub vae: VaeConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerSection,
    pub reflow: ReflowSection,
    pub cost: CostWeights,
    pub guidance: GuidanceSchedule,
    pub gates: GateSection,
    pub tracker: TrackerSection,
    pub eval: EvalSection,
}

/// Keys whose default is taken from the published method description.
pub const PAPER_DEFAULT_KEYS: &[&str] = &[
    "cost.lambda_lim",
    "cost.lambda_col",
    "cost.lambda_sm",
    "cost.lambda_stab",
    "cost.beta_q",
    "cost.beta_c",
    "guidance.alpha_start",
    "guidance.alpha_end",
    "guidance.clamp",
    "sampler.cfg.w_start",
    "sampler.cfg.w_end",
    "sampler.teacher_nfe",
    "sampler.student_nfe",
    "gates.percentile",
    "gates.probes",
    "gates.delta",
    "data.t_hist",
    "data.t_fut",
    "tracker.control_dt",
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.chain.validate().map_err(|e| invalid(e.to_string()))?;
        self.vae.validate().map_err(|e| invalid(e.to_string()))?;
        self.flow.validate().map_err(|e| invalid(e.to_string()))?;
        self.cost.validate().map_err(invalid)?;
        self.guidance.validate().map_err(invalid)?;
        let d = &self.data;
        if !(d.frame_dt > 0.0) || d.t_hist == 0 || d.t_fut < 2 {
            return Err(invalid("data: frame_dt > 0, t_hist >= 1 and t_fut >= 2 required".into()));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(invalid("data.val_fraction must be in [0, 1)".into()));
        }
        for (name, nfe) in [("teacher_nfe", self.sampler.teacher_nfe), ("student_nfe", self.sampler.student_nfe)] {
            if !(1..=512).contains(&nfe) {
                return Err(invalid(format!("sampler.{name} must be in 1..=512")));
            }
        }
        if !(self.reflow.lr > 0.0) {
            return Err(invalid("reflow.lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reflow.u_zero_fraction) {
            return Err(invalid("reflow.u_zero_fraction must be in [0, 1]".into()));
        }
        let g = &self.gates;
        if !(0.0..=100.0).contains(&g.percentile) || !(0.0..=100.0).contains(&g.tau_stab_percentile) {
            return Err(invalid("gate percentiles must be in [0, 100]".into()));
        }
        if !(g.eps_reg >= 0.0) || g.probes < 2 || !(g.delta > 0.0) || !(g.t_fb > 0.0) {
            return Err(invalid("gates: eps_reg >= 0, probes >= 2, delta > 0, t_fb > 0 required".into()));
        }
        let t = &self.tracker;
        if !(t.kp > 0.0 && t.kd > 0.0 && t.inertia > 0.0) || t.tau_max.is_some_and(|v| !(v > 0.0)) {
            return Err(invalid("tracker gains, inertia and tau_max must be positive".into()));
        }
        let e = &self.eval;
        if e.mmodality_runs < 2 || e.latency_runs == 0 {
            return Err(invalid("eval: mmodality_runs >= 2 and latency_runs >= 1 required".into()));
        }
        // the generator period must fit inside the decoded horizon
        let stride = (crate::pipeline::GENERATOR_PERIOD / d.frame_dt).round() as usize;
        if stride == 0 || stride > d.t_fut {
            return Err(invalid(format!("a 0.16 s generator period is {stride} frames, horizon is {}", d.t_fut)));
        }
        Ok(())
    }

    /// The TOML form with `# [paper-default]` on every key that still holds
    /// its published value.
    pub fn annotated(&self) -> String {
        let defaults = Self::default();
        let default_value = toml::Value::try_from(&defaults).expect("config serializes");
        let mut out = String::new();
        let mut table = String::new();
        for line in self.to_toml().lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                table = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            }
            out.push_str(line);
            if let Some((key, _)) = trimmed.split_once(" = ") {
                let full = if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
                if PAPER_DEFAULT_KEYS.contains(&full.as_str()) && lookup(&toml::Value::try_from(self).expect("serializes"), &full) == lookup(&default_value, &full) {
                    out.push_str("  # [paper-default]");
                }
            }
            out.push('\n');
        }
        if !out.contains("control_dt") {
            out.push_str("# tracker.control_dt = 0.02  # [paper-default] (fixed, 50 Hz)\n");
        }
        out
    }
}

fn lookup<'a>(v: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.json")
    }

    pub fn vae(&self) -> PathBuf {
        self.dir.join("vae.json")
    }

    pub fn flow(&self, role: crate::flow::FieldRole) -> PathBuf {
        self.dir.join(format!("flow_{}.json", role.as_str()))
    }

    pub fn gates(&self) -> PathBuf {
        self.dir.join("gates.json")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}
