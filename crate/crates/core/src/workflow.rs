//! Run steps shared by the CLI, the service and the acceptance suite: data,
//! training, distillation, calibration and loading of a run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Artifacts, ConfigError, RunConfig};
use crate::flow::{initial_noise, make_reflow_pairs, reflow_distill, train_flow, FieldRole, FlowError, FlowReport, Guidance, SamplerConfig, VelocityField};
use crate::motion_data::{default_primitives, generate_dataset, DataError, Dataset, MotionWindow, PromptEmbedder};
use crate::pipeline::{calibrate_gates, conditioning, embedding_rows, flow_training_set, window_seed, GateBundle, GateMode, Generator, GuidanceSetup, Pipeline, PipelineError};
use crate::rng::derive;
use crate::safety_gate::ProbeConfig;
use crate::tensor::{Checkpoint, CheckpointError};
use crate::tensor::TensorError;
use crate::vae::{history_rows, train_vae, Vae, VaeError, VaeReport};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {0}: run the producing command first")]
    Missing(PathBuf),
    #[error("{path}: format version {found}, expected {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Data(DataError),
    #[error(transparent)]
    Vae(VaeError),
    #[error(transparent)]
    Flow(FlowError),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<DataError> for WorkflowError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Version { found, expected } => Self::Version {
                path: PathBuf::from("dataset.json"),
                found,
                expected,
            },
            e => Self::Data(e),
        }
    }
}

impl From<VaeError> for WorkflowError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Diverged { .. } => Self::Diverged(e.to_string()),
            e => Self::Vae(e),
        }
    }
}

impl From<FlowError> for WorkflowError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Diverged { .. } => Self::Diverged(e.to_string()),
            e => Self::Flow(e),
        }
    }
}

impl From<PipelineError> for WorkflowError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Flow(f) => f.into(),
            e => Self::Pipeline(e),
        }
    }
}

/// Seed for one run step: the run seed mixed with the step's own seed field.
pub fn step_seed(cfg: &RunConfig, local: u64, tag: u64) -> u64 {
    derive(cfg.run.seed, &[local, tag])
}

pub fn embedder(cfg: &RunConfig) -> PromptEmbedder {
    PromptEmbedder::new(step_seed(cfg, 0, 0x656d))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Dataset, WorkflowError> {
    let mut spec = cfg.data.clone();
    spec.seed = step_seed(cfg, spec.seed, 0x6461);
    Ok(generate_dataset(&spec, &default_primitives(&cfg.chain), cfg.chain.n_joints())?)
}

pub fn train_vae_step(cfg: &RunConfig, data: &Dataset) -> Result<(Vae, VaeReport), WorkflowError> {
    let mut vc = cfg.vae.clone();
    vc.seed = step_seed(cfg, vc.seed, 0x7661);
    Ok(train_vae(&data.train, &data.val, &vc)?)
}

pub fn train_flow_step(cfg: &RunConfig, data: &Dataset, vae: &Vae) -> Result<(VelocityField, FlowReport), WorkflowError> {
    let emb = embedder(cfg);
    let train = flow_training_set(vae, &emb, &data.train)?;
    let val = if data.val.is_empty() {
        None
    } else {
        Some(flow_training_set(vae, &emb, &data.val)?)
    };
    let mut fc = cfg.flow.clone();
    fc.seed = step_seed(cfg, fc.seed, 0x666c);
    Ok(train_flow(&train, val.as_ref(), &fc)?)
}

/// Evenly strided subset of at most `n` windows (`n = 0` keeps all).
pub fn strided<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n == 0 || n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|k| items[k * items.len() / n].clone()).collect()
}

/// Like [`strided`], but cycles through `items` when `n` exceeds its length,
/// so each window can contribute several noise draws.
pub fn cycled<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n <= items.len() {
        return strided(items, n);
    }
    (0..n).map(|k| items[k % items.len()].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unguided flow, CFG, teacher step count.
    Base,
    /// Same field with physics guidance.
    Teacher,
    /// Reflow student, one step, conditional branch only.
    Student,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Teacher, Variant::Student];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "SafeFlow (Flow)",
            Variant::Teacher => "+ Guid.",
            Variant::Student => "+ Guid. & Reflow",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Teacher => "teacher",
            Variant::Student => "student",
        }
    }
}

pub fn guidance_setup(cfg: &RunConfig) -> GuidanceSetup {
    GuidanceSetup::new(&cfg.chain, cfg.data.t_fut, cfg.data.frame_dt, cfg.cost, cfg.guidance)
}

pub fn make_generator(cfg: &RunConfig, vae: &Vae, field: &VelocityField, variant: Variant) -> Generator {
    let (sampler, guidance) = match variant {
        Variant::Base => (
            SamplerConfig {
                nfe: cfg.sampler.teacher_nfe,
                cfg: Some(cfg.sampler.cfg),
            },
            None,
        ),
        Variant::Teacher => (
            SamplerConfig {
                nfe: cfg.sampler.teacher_nfe,
                cfg: Some(cfg.sampler.cfg),
            },
            Some(guidance_setup(cfg)),
        ),
        Variant::Student => (
            SamplerConfig {
                nfe: cfg.sampler.student_nfe,
                cfg: None,
            },
            None,
        ),
    };
    Generator {
        chain: cfg.chain.clone(),
        vae: vae.clone(),
        field: field.clone(),
        embedder: embedder(cfg),
        sampler,
        guidance,
        frame_dt: cfg.data.frame_dt,
    }
}

/// Runs the guided teacher from fixed noise on training windows and trains
/// the student on the resulting straight pairs.
pub fn distill_step(cfg: &RunConfig, data: &Dataset, vae: &Vae, base: &VelocityField) -> Result<(VelocityField, Vec<f64>), WorkflowError> {
    let windows = cycled(&data.train, cfg.reflow.pairs);
    let teacher = make_generator(cfg, vae, base, Variant::Teacher);
    let g = teacher.guidance.as_ref().expect("teacher is guided");
    let emb = embedder(cfg);
    let seed = step_seed(cfg, 0, 0x7266);
    let mut z0_rows = Vec::new();
    let mut z1_rows = Vec::new();
    let mut ctx_all: Option<crate::flow::Conditioning> = None;
    for (c, chunk) in windows.chunks(256).enumerate() {
        let refs: Vec<&MotionWindow> = chunk.iter().collect();
        let hist = history_rows(&refs);
        let prompts: Vec<&str> = chunk.iter().map(|w| w.prompt.as_str()).collect();
        let ctx = conditioning(vae, &hist, &embedding_rows(&emb, &prompts));
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| window_seed(seed, (c * 256 + i) as u64)).collect();
        let z0 = initial_noise(&seeds, vae.d_z());
        let pairs = make_reflow_pairs(
            base,
            &ctx,
            &z0,
            &teacher.sampler,
            &Guidance {
                vae,
                history: &hist,
                program: &g.program,
                schedule: g.schedule,
            },
        )?;
        z0_rows.extend_from_slice(pairs.z0.data());
        z1_rows.extend_from_slice(pairs.z1_guided.data());
        ctx_all = Some(match ctx_all {
            None => pairs.ctx,
            Some(prev) => prev.stack(&pairs.ctx),
        });
    }
    let ctx = ctx_all.ok_or(FlowError::Empty)?;
    let rows = ctx.rows();
    let d = vae.d_z();
    let pairs = crate::flow::ReflowPairSet {
        z0: crate::tensor::Tensor::matrix(rows, d, z0_rows)?,
        z1_guided: crate::tensor::Tensor::matrix(rows, d, z1_rows)?,
        ctx,
        history: crate::tensor::Tensor::zeros(&[rows, 0]),
    };
    Ok(reflow_distill(
        base,
        &pairs,
        cfg.reflow.iterations,
        cfg.reflow.lr,
        cfg.reflow.u_zero_fraction,
        step_seed(cfg, 0, 0x7374),
    )?)
}

pub fn calibrate_step(cfg: &RunConfig, data: &Dataset, generator: &Generator) -> Result<(GateBundle, Vec<f64>), WorkflowError> {
    let prompts: Vec<&str> = data.train.iter().map(|w| w.prompt.as_str()).collect();
    let windows = strided(&data.val, cfg.gates.calibration_windows);
    if windows.is_empty() {
        return Err(WorkflowError::Artifact {
            path: PathBuf::from("dataset.json"),
            message: "no validation windows to calibrate on".into(),
        });
    }
    let probe = ProbeConfig {
        m: cfg.gates.probes,
        delta: cfg.gates.delta,
        seed: 0,
    };
    Ok(calibrate_gates(
        generator,
        &prompts,
        &windows,
        cfg.gates.percentile,
        cfg.gates.eps_reg,
        probe,
        cfg.gates.tau_stab_percentile,
        cfg.gates.t_fb,
        step_seed(cfg, 0, 0x6361),
    )?)
}

fn require(path: &Path) -> Result<(), WorkflowError> {
    if path.exists() {
        Ok(())
    } else {
        Err(WorkflowError::Missing(path.to_path_buf()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, WorkflowError> {
    require(path)?;
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Tensor(TensorError::Version { found, expected }) => WorkflowError::Version {
            path: path.to_path_buf(),
            found,
            expected,
        },
        e => WorkflowError::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })
}

pub fn load_dataset(art: &Artifacts) -> Result<Dataset, WorkflowError> {
    let path = art.dataset();
    require(&path)?;
    Dataset::load(&path).map_err(|e| match e {
        DataError::Version { found, expected } => WorkflowError::Version {
            path,
            found,
            expected,
        },
        e => WorkflowError::Data(e),
    })
}

pub fn load_vae(art: &Artifacts) -> Result<Vae, WorkflowError> {
    let path = art.vae();
    let ck = load_checkpoint(&path)?;
    Vae::from_checkpoint(&ck).map_err(|e| WorkflowError::Artifact {
        path,
        message: e.to_string(),
    })
}

pub fn load_field(art: &Artifacts, role: FieldRole) -> Result<VelocityField, WorkflowError> {
    let path = art.flow(role);
    let ck = load_checkpoint(&path)?;
    VelocityField::from_checkpoint(&ck).map_err(|e| WorkflowError::Artifact {
        path,
        message: e.to_string(),
    })
}

fn saved(path: &Path, r: Result<(), CheckpointError>) -> Result<(), WorkflowError> {
    r.map_err(|e| WorkflowError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_dataset(art: &Artifacts, data: &Dataset) -> Result<(), WorkflowError> {
    std::fs::create_dir_all(&art.dir)?;
    data.save(&art.dataset()).map_err(WorkflowError::Data)
}

pub fn save_vae(art: &Artifacts, vae: &Vae) -> Result<(), WorkflowError> {
    std::fs::create_dir_all(&art.dir)?;
    saved(&art.vae(), vae.to_checkpoint().save(&art.vae()))
}

pub fn save_field(art: &Artifacts, field: &VelocityField) -> Result<(), WorkflowError> {
    std::fs::create_dir_all(&art.dir)?;
    let path = art.flow(field.role);
    saved(&path, field.to_checkpoint(serde_json::Value::Null).save(&path))
}

pub const GATES_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub format_version: u32,
    pub gates: GateBundle,
    /// Stage-2 scores of the calibration windows.
    pub calibration_scores: Vec<f64>,
}

pub fn save_gates(art: &Artifacts, gates: &GateBundle, scores: &[f64]) -> Result<(), WorkflowError> {
    let file = GateFile {
        format_version: GATES_FORMAT_VERSION,
        gates: gates.clone(),
        calibration_scores: scores.to_vec(),
    };
    write_json(&art.gates(), &file)
}

pub fn load_gates(art: &Artifacts) -> Result<GateBundle, WorkflowError> {
    let path = art.gates();
    require(&path)?;
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != GATES_FORMAT_VERSION {
        return Err(WorkflowError::Version {
            path,
            found,
            expected: GATES_FORMAT_VERSION,
        });
    }
    let file: GateFile = serde_json::from_value(value)?;
    Ok(file.gates)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkflowError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Overrides applied to the deployed generator of a live session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeployOptions {
    pub nfe: Option<usize>,
    /// Run the unguided base flow instead of the distilled student.
    pub no_guidance: bool,
    pub no_gates: bool,
}

/// Everything a run directory holds once training has finished.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub vae: Vae,
    pub base: VelocityField,
    pub student: Option<VelocityField>,
    pub gates: Option<GateBundle>,
}

impl Bundle {
    /// Loads the dataset, VAE and base flow; student and gates when present.
    pub fn load(cfg: &RunConfig, art: &Artifacts) -> Result<Self, WorkflowError> {
        let student = match load_field(art, FieldRole::Student) {
            Err(WorkflowError::Missing(_)) => None,
            other => Some(other?),
        };
        let gates = match load_gates(art) {
            Err(WorkflowError::Missing(_)) => None,
            other => Some(other?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            dataset: load_dataset(art)?,
            vae: load_vae(art)?,
            base: load_field(art, FieldRole::Base)?,
            student,
            gates,
        })
    }

    /// Runs every training step in memory, as the batch commands would in
    /// sequence.
    pub fn train(cfg: &RunConfig) -> Result<Self, WorkflowError> {
        let dataset = gen_data(cfg)?;
        let (vae, _) = train_vae_step(cfg, &dataset)?;
        let (base, _) = train_flow_step(cfg, &dataset, &vae)?;
        let (student, _) = distill_step(cfg, &dataset, &vae, &base)?;
        let (gates, _) = calibrate_step(cfg, &dataset, &make_generator(cfg, &vae, &student, Variant::Student))?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            vae,
            base,
            student: Some(student),
            gates: Some(gates),
        })
    }

    pub fn field(&self, variant: Variant) -> Result<&VelocityField, WorkflowError> {
        match variant {
            Variant::Base | Variant::Teacher => Ok(&self.base),
            Variant::Student => self
                .student
                .as_ref()
                .ok_or_else(|| WorkflowError::Missing(PathBuf::from(format!("flow_{}.json", FieldRole::Student.as_str())))),
        }
    }

    pub fn generator(&self, variant: Variant) -> Result<Generator, WorkflowError> {
        Ok(make_generator(&self.cfg, &self.vae, self.field(variant)?, variant))
    }

    pub fn pipeline(&self, variant: Variant, mode: GateMode) -> Result<Pipeline, WorkflowError> {
        let gates = match mode {
            GateMode::Off => None,
            _ => Some(self.gates.clone().ok_or_else(|| WorkflowError::Missing(PathBuf::from("gates.json")))?),
        };
        Ok(Pipeline {
            generator: self.generator(variant)?,
            gates,
            mode,
        })
    }

    /// The pipeline a live session runs: the student behind enforcing gates,
    /// unless the options say otherwise.
    pub fn deployed(&self, opts: DeployOptions) -> Result<Pipeline, WorkflowError> {
        let variant = if opts.no_guidance { Variant::Base } else { Variant::Student };
        let mode = if opts.no_gates { GateMode::Off } else { GateMode::Enforce };
        let mut pipeline = self.pipeline(variant, mode)?;
        if let Some(nfe) = opts.nfe {
            if nfe == 0 {
                return Err(ConfigError::Invalid("--nfe must be at least 1".into()).into());
            }
            pipeline.generator.sampler.nfe = nfe;
        }
        Ok(pipeline)
    }
}
