//! Rectified flow in the VAE latent space: the velocity field, its training
//! objective, Euler sampling with classifier-free guidance, physics-guided
//! sampling and reflow distillation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, Linear, LinearVars, Mlp};
use crate::physics_cost::{grad_wrt_latent, CostError, CostProgram, GuidanceSchedule};
use crate::rng::{derive, normal_vec, seeded, Rng};
use crate::tensor::{Adam, AdamConfig, Checkpoint, CheckpointError, Tape, Tensor, TensorError, Var};
use crate::vae::Vae;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("non-finite latent at Euler step {step}")]
    NonFiniteState { step: usize },
    #[error("non-finite guidance gradient at Euler step {step} ({term} term)")]
    NonFiniteGradient { step: usize, term: &'static str },
    #[error("guidance cost failed at Euler step {step}: {source}")]
    Cost { step: usize, source: CostError },
    #[error("empty training set")]
    Empty,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("checkpoint role is {found:?}, expected one of base|teacher|student")]
    Role { found: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgSchedule {
    pub w_start: f64,
    pub w_end: f64,
}

impl Default for CfgSchedule {
    fn default() -> Self {
        Self {
            w_start: 5.0,
            w_end: 3.0,
        }
    }
}

impl CfgSchedule {
    pub fn weight(&self, u: f64) -> f64 {
        self.w_start + (self.w_end - self.w_start) * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    /// Width of the linear history encoder.
    pub history_code: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cosine learning-rate decay to zero over the run.
    pub cosine_decay: bool,
    /// Share of training rows pinned to `u = 0`, the only time a one-step
    /// sampler queries.
    pub u_zero_fraction: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            history_code: 16,
            p_drop: 0.1,
            lr: 1e-3,
            iterations: 20_000,
            batch_size: 64,
            seed: 0,
            cosine_decay: false,
            u_zero_fraction: 0.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(FlowError::Config("p_drop must be in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(FlowError::Config("lr, batch_size and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    Base,
    Teacher,
    Student,
}

impl FieldRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldRole::Base => "base",
            FieldRole::Teacher => "teacher",
            FieldRole::Student => "student",
        }
    }

    fn parse(s: Option<&str>) -> Option<Self> {
        match s? {
            "base" => Some(FieldRole::Base),
            "teacher" => Some(FieldRole::Teacher),
            "student" => Some(FieldRole::Student),
            _ => None,
        }
    }
}

/// Per-row conditioning: standardized flattened history and prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// `[rows, hist_dim]`
    pub history: Tensor,
    /// `[rows, embed_dim]`
    pub embedding: Tensor,
}

impl Conditioning {
    pub fn rows(&self) -> usize {
        self.history.rows()
    }

    pub fn empty(rows: usize) -> Self {
        Self {
            history: Tensor::zeros(&[rows, 0]),
            embedding: Tensor::zeros(&[rows, 0]),
        }
    }

    /// The rows in `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            history: select_rows(&self.history, idx),
            embedding: select_rows(&self.embedding, idx),
        }
    }

    /// Same history with the null (zero) prompt.
    pub fn unconditional(&self) -> Self {
        Self {
            history: self.history.clone(),
            embedding: Tensor::zeros(self.embedding.shape()),
        }
    }

    /// `self` rows followed by `other` rows.
    pub fn stack(&self, other: &Self) -> Self {
        Self {
            history: vstack(&self.history, &other.history),
            embedding: vstack(&self.embedding, &other.embedding),
        }
    }
}

pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::matrix(idx.len(), cols, data).expect("shape")
}

pub fn vstack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data).expect("shape")
}

/// `v_θ(z_u, u | history, e)`: an MLP over `[z ∥ u ∥ W_h·history ∥ e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub role: FieldRole,
    pub config: FlowConfig,
    pub z_dim: usize,
    pub hist_dim: usize,
    pub embed_dim: usize,
    pub history_encoder: Option<Linear>,
    pub net: Mlp,
}

struct FieldVars {
    history: Option<LinearVars>,
    net: crate::nn::MlpVars,
}

impl VelocityField {
    pub fn new(config: FlowConfig, z_dim: usize, hist_dim: usize, embed_dim: usize) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = seeded(derive(config.seed, &[0x666c_6f77]));
        let history_encoder = (hist_dim > 0).then(|| Linear::new(hist_dim, config.history_code, 1.0, &mut rng));
        let code = if hist_dim > 0 { config.history_code } else { 0 };
        let mut sizes = vec![z_dim + 1 + code + embed_dim];
        sizes.extend(&config.hidden);
        sizes.push(z_dim);
        let mut net = Mlp::new(&sizes, Activation::Tanh, &mut rng);
        // prompt inputs start disconnected: an untrained field, or one trained
        // with p_drop = 1, ignores the prompt entirely
        let width = net.layers[0].outputs();
        let first = net.layers[0].weight.data_mut();
        for r in z_dim + 1 + code..sizes[0] {
            first[r * width..(r + 1) * width].iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(Self {
            role: FieldRole::Base,
            net,
            history_encoder,
            config,
            z_dim,
            hist_dim,
            embed_dim,
        })
    }

    fn check(&self, z: &Tensor, ctx: &Conditioning) -> Result<(), TensorError> {
        let rows = z.rows();
        let ok = z.rank() == 2
            && z.cols() == self.z_dim
            && ctx.history.rows() == rows
            && ctx.embedding.rows() == rows
            && ctx.history.cols() == self.hist_dim
            && ctx.embedding.cols() == self.embed_dim;
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op: "velocity field",
                lhs: z.shape().to_vec(),
                rhs: vec![self.z_dim, self.hist_dim, self.embed_dim],
            })
        }
    }

    /// Plain evaluation with one `u` per row.
    pub fn velocity(&self, z: &Tensor, u: &[f64], ctx: &Conditioning) -> Result<Tensor, TensorError> {
        self.check(z, ctx)?;
        let code = match &self.history_encoder {
            Some(enc) => Some(enc.forward(&ctx.history)?),
            None => None,
        };
        let rows: Vec<Vec<f64>> = (0..z.rows())
            .map(|r| {
                let mut row = z.row_slice(r).to_vec();
                row.push(u[r]);
                if let Some(c) = &code {
                    row.extend_from_slice(c.row_slice(r));
                }
                row.extend_from_slice(ctx.embedding.row_slice(r));
                row
            })
            .collect();
        let x = Tensor::matrix(z.rows(), self.net.input_dim(), rows.concat())?;
        self.net.forward(&x)
    }

    fn bind(&self, tape: &mut Tape) -> Result<FieldVars, TensorError> {
        let history = match &self.history_encoder {
            Some(l) => Some(LinearVars {
                weight: tape.leaf(l.weight.clone())?,
                bias: tape.leaf(l.bias.clone())?,
            }),
            None => None,
        };
        Ok(FieldVars {
            history,
            net: self.net.bind(tape)?,
        })
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &FieldVars, z: Var, u: Var, ctx: &Conditioning) -> Result<Var, TensorError> {
        let mut parts = vec![z, u];
        if let (Some(enc), Some(hv)) = (&self.history_encoder, vars.history) {
            let h = tape.constant(ctx.history.clone())?;
            parts.push(enc.forward_tape(tape, hv, h)?);
        }
        if self.embed_dim > 0 {
            parts.push(tape.constant(ctx.embedding.clone())?);
        }
        let x = tape.concat(&parts, 1)?;
        self.net.forward_tape(tape, &vars.net, x)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::new();
        if let Some(l) = &mut self.history_encoder {
            p.push(&mut l.weight);
            p.push(&mut l.bias);
        }
        p.extend(self.net.params_mut());
        p
    }

    fn vars_list(vars: &FieldVars) -> Vec<Var> {
        let mut v = Vec::new();
        if let Some(h) = vars.history {
            v.push(h.weight);
            v.push(h.bias);
        }
        v.extend(vars.net.vars());
        v
    }

    /// Classifier-free-guidance composite `v_u + w (v_c − v_u)`, both branches
    /// evaluated in one stacked batch. `w = None` evaluates the conditional
    /// branch alone.
    pub fn guided_velocity(&self, z: &Tensor, u: f64, ctx: &Conditioning, w: Option<f64>) -> Result<Tensor, TensorError> {
        let rows = z.rows();
        match w {
            None => self.velocity(z, &vec![u; rows], ctx),
            Some(w) => {
                let both = self.velocity(&vstack(z, z), &vec![u; 2 * rows], &ctx.stack(&ctx.unconditional()))?;
                let (vc, vu) = both.data().split_at(rows * self.z_dim);
                let data = vc.iter().zip(vu).map(|(c, un)| un + w * (c - un)).collect();
                Tensor::matrix(rows, self.z_dim, data)
            }
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint {
            role: Some(self.role.as_str().into()),
            meta: serde_json::json!({
                "config": self.config,
                "z_dim": self.z_dim,
                "hist_dim": self.hist_dim,
                "embed_dim": self.embed_dim,
                "extra": extra,
            }),
            ..Checkpoint::default()
        };
        if let Some(l) = &self.history_encoder {
            ck.insert("history.weight", &l.weight);
            ck.insert("history.bias", &l.bias);
        }
        self.net.save(&mut ck, "net");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        let role = FieldRole::parse(ck.role.as_deref()).ok_or_else(|| FlowError::Role {
            found: ck.role.clone(),
        })?;
        let get = |k: &str| -> Result<serde_json::Value, FlowError> {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| FlowError::Config(format!("missing meta.{k}")))
        };
        let config: FlowConfig = serde_json::from_value(get("config")?).map_err(|e| FlowError::Config(e.to_string()))?;
        let dim = |k: &str| -> Result<usize, FlowError> {
            get(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| FlowError::Config(format!("meta.{k} is not an integer")))
        };
        let (z_dim, hist_dim, embed_dim) = (dim("z_dim")?, dim("hist_dim")?, dim("embed_dim")?);
        let history_encoder = if hist_dim > 0 {
            Some(Linear {
                weight: ck.get("history.weight")?,
                bias: ck.get("history.bias")?,
            })
        } else {
            None
        };
        let net = Mlp::load(ck, "net", Activation::Tanh)?;
        let code = history_encoder.as_ref().map_or(0, Linear::outputs);
        if net.input_dim() != z_dim + 1 + code + embed_dim || net.output_dim() != z_dim {
            return Err(FlowError::Config("checkpoint tensors do not match meta".into()));
        }
        Ok(Self {
            role,
            config,
            z_dim,
            hist_dim,
            embed_dim,
            history_encoder,
            net,
        })
    }

    pub fn extra_meta(ck: &Checkpoint) -> serde_json::Value {
        ck.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)
    }
}

/// Path point `z_u = u z_1 + (1 − u) z_0`.
pub fn interpolate(z0: &[f64], z1: &[f64], u: f64) -> Vec<f64> {
    z0.iter().zip(z1).map(|(a, b)| u * b + (1.0 - u) * a).collect()
}

/// Regression targets for rectified flow. `z0 = None` draws fresh noise for
/// every batch; reflow pairs fix it.
#[derive(Debug, Clone)]
pub struct FlowTrainingSet {
    pub z1: Tensor,
    pub z0: Option<Tensor>,
    pub ctx: Conditioning,
}

impl FlowTrainingSet {
    pub fn len(&self) -> usize {
        self.z1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared error between `v_θ(z_u, u)` and `z_1 − z_0`.
pub fn rfm_loss(field: &VelocityField, z0: &Tensor, z1: &Tensor, u: &[f64], ctx: &Conditioning) -> Result<f64, TensorError> {
    let zu: Vec<f64> = (0..z0.rows())
        .flat_map(|r| interpolate(z0.row_slice(r), z1.row_slice(r), u[r]))
        .collect();
    let zu = Tensor::matrix(z0.rows(), z0.cols(), zu)?;
    let v = field.velocity(&zu, u, ctx)?;
    let sq: f64 = v
        .data()
        .iter()
        .zip(z1.data().iter().zip(z0.data()))
        .map(|(v, (b, a))| (v - (b - a)).powi(2))
        .sum();
    Ok(sq / v.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub loss_curve: Vec<f64>,
    pub val_loss: Option<f64>,
    /// True when the 100-step moving average ever rose by more than 10%.
    pub non_monotone_warning: bool,
}

fn smoothed_rises(curve: &[f64], window: usize) -> bool {
    if curve.len() < 2 * window {
        return false;
    }
    let avg: Vec<f64> = curve
        .windows(window)
        .step_by(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    avg.windows(2).any(|p| p[1] > 1.1 * p[0])
}

/// Trains `field` on `data` with prompt dropout `p_drop`.
pub fn fit_field(field: &mut VelocityField, data: &FlowTrainingSet, iterations: usize, rng: &mut Rng) -> Result<Vec<f64>, FlowError> {
    if data.is_empty() {
        return Err(FlowError::Empty);
    }
    let cfg = field.config.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let d = field.z_dim;
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        if cfg.cosine_decay {
            let frac = it as f64 / iterations as f64;
            adam.set_lr(0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let b = idx.len();
        let z1 = select_rows(&data.z1, &idx);
        let z0 = match &data.z0 {
            Some(z0) => select_rows(z0, &idx),
            None => Tensor::matrix(b, d, normal_vec(rng, b * d))?,
        };
        let u: Vec<f64> = (0..b)
            .map(|_| {
                let u = rng.random::<f64>();
                if cfg.u_zero_fraction > 0.0 && rng.random::<f64>() < cfg.u_zero_fraction {
                    0.0
                } else {
                    u
                }
            })
            .collect();
        let mut ctx = data.ctx.select(&idx);
        if cfg.p_drop > 0.0 {
            let e = ctx.embedding.cols();
            for r in 0..b {
                if rng.random::<f64>() < cfg.p_drop {
                    ctx.embedding.data_mut()[r * e..(r + 1) * e].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut zu = Vec::with_capacity(b * d);
        let mut target = Vec::with_capacity(b * d);
        for r in 0..b {
            zu.extend(interpolate(z0.row_slice(r), z1.row_slice(r), u[r]));
            target.extend(z1.row_slice(r).iter().zip(z0.row_slice(r)).map(|(a, c)| a - c));
        }
        let mut tape = Tape::new();
        let vars = field.bind(&mut tape)?;
        let zv = tape.constant(Tensor::matrix(b, d, zu)?)?;
        let uv = tape.constant(Tensor::matrix(b, 1, u)?)?;
        let v = field.forward_tape(&mut tape, &vars, zv, uv, &ctx)?;
        let t = tape.constant(Tensor::matrix(b, d, target)?)?;
        let diff = tape.sub(v, t)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(FlowError::Diverged { iteration: it, loss: value });
        }
        curve.push(value);
        let mut grads = tape.backward(loss).map_err(|e| match e {
            TensorError::NonFinite { .. } => FlowError::Diverged {
                iteration: it,
                loss: f64::NAN,
            },
            e => e.into(),
        })?;
        let g: Vec<Tensor> = VelocityField::vars_list(&vars).into_iter().map(|v| grads.take(v)).collect();
        adam.step(&mut field.params_mut(), &g)?;
    }
    Ok(curve)
}

/// Base rectified-flow training with fresh noise and prompt dropout. The
/// validation loss uses fixed noise and `u` drawn from a dedicated stream.
pub fn train_flow(
    train: &FlowTrainingSet,
    val: Option<&FlowTrainingSet>,
    config: &FlowConfig,
) -> Result<(VelocityField, FlowReport), FlowError> {
    let mut field = VelocityField::new(config.clone(), train.z1.cols(), train.ctx.history.cols(), train.ctx.embedding.cols())?;
    let mut rng = seeded(derive(config.seed, &[0x666c_6f78]));
    let curve = fit_field(&mut field, train, config.iterations, &mut rng)?;
    let val_loss = match val {
        Some(v) if !v.is_empty() => {
            let mut vr = seeded(derive(config.seed, &[0x7661_6c]));
            let z0 = Tensor::matrix(v.len(), field.z_dim, normal_vec(&mut vr, v.len() * field.z_dim))?;
            let u: Vec<f64> = (0..v.len()).map(|_| vr.random::<f64>()).collect();
            Some(rfm_loss(&field, &z0, &v.z1, &u, &v.ctx)?)
        }
        _ => None,
    };
    Ok((
        field,
        FlowReport {
            non_monotone_warning: smoothed_rises(&curve, 100),
            loss_curve: curve,
            val_loss,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub nfe: usize,
    /// `None` integrates the conditional branch alone.
    pub cfg: Option<CfgSchedule>,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if (1..=512).contains(&self.nfe) {
            Ok(())
        } else {
            Err(FlowError::Config(format!("nfe {} outside 1..=512", self.nfe)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub z: Tensor,
    /// Velocity-field evaluations per CFG branch.
    pub field_evals: usize,
    /// Decoder + cost backward passes.
    pub cost_backwards: usize,
    /// Latent at the start of each Euler step (`u = k / nfe`).
    pub states: Vec<Tensor>,
}

impl SampleOutput {
    /// Latent at the last step start with `u ≤ target`.
    pub fn state_at(&self, target: f64) -> (f64, &Tensor) {
        let n = self.states.len();
        let k = ((target * n as f64).floor() as usize).min(n - 1);
        (k as f64 / n as f64, &self.states[k])
    }
}

/// Initial noise with one seeded stream per row, so batched and per-window
/// sampling agree.
pub fn initial_noise(seeds: &[u64], z_dim: usize) -> Tensor {
    let data = seeds
        .iter()
        .flat_map(|&s| normal_vec(&mut seeded(derive(s, &[0x7a30])), z_dim))
        .collect();
    Tensor::matrix(seeds.len(), z_dim, data).expect("shape")
}

/// Euler integration of the (CFG) velocity from `u = 0` to `u = 1`.
pub fn sample(field: &VelocityField, ctx: &Conditioning, z0: &Tensor, cfg: &SamplerConfig) -> Result<SampleOutput, FlowError> {
    cfg.validate()?;
    let mut z = z0.clone();
    let mut states = Vec::with_capacity(cfg.nfe);
    let du = 1.0 / cfg.nfe as f64;
    for step in 0..cfg.nfe {
        let u = step as f64 * du;
        states.push(z.clone());
        let v = field.guided_velocity(&z, u, ctx, cfg.cfg.map(|c| c.weight(u)))?;
        euler(&mut z, &v, du, step)?;
    }
    Ok(SampleOutput {
        z,
        field_evals: cfg.nfe,
        cost_backwards: 0,
        states,
    })
}

fn euler(z: &mut Tensor, v: &Tensor, du: f64, step: usize) -> Result<(), FlowError> {
    for (a, b) in z.data_mut().iter_mut().zip(v.data()) {
        *a += du * b;
    }
    if z.all_finite() {
        Ok(())
    } else {
        Err(FlowError::NonFiniteState { step })
    }
}

/// What physics guidance needs besides the field: the frozen decoder, the
/// raw (radian) history rows and the cost program.
pub struct Guidance<'a> {
    pub vae: &'a Vae,
    pub history: &'a Tensor,
    pub program: &'a CostProgram,
    pub schedule: GuidanceSchedule,
}

/// Guided velocity `ṽ = v − α(u) clamp(∇_z C(Dec(history, z)), ±c)`, with `v`
/// the CFG composite.
pub fn guided_sample(
    field: &VelocityField,
    ctx: &Conditioning,
    z0: &Tensor,
    cfg: &SamplerConfig,
    guidance: &Guidance<'_>,
) -> Result<SampleOutput, FlowError> {
    cfg.validate()?;
    let mut z = z0.clone();
    let mut states = Vec::with_capacity(cfg.nfe);
    let du = 1.0 / cfg.nfe as f64;
    let clamp = guidance.schedule.clamp;
    for step in 0..cfg.nfe {
        let u = step as f64 * du;
        states.push(z.clone());
        let mut v = field.guided_velocity(&z, u, ctx, cfg.cfg.map(|c| c.weight(u)))?;
        let g = grad_wrt_latent(&z, guidance.history, guidance.vae, guidance.program).map_err(|e| match e {
            CostError::NonFiniteGradient { term } => FlowError::NonFiniteGradient { step, term },
            e => FlowError::Cost { step, source: e },
        })?;
        let alpha = guidance.schedule.alpha(u);
        for (vi, gi) in v.data_mut().iter_mut().zip(g.grad.data()) {
            *vi -= alpha * gi.clamp(-clamp, clamp);
        }
        euler(&mut z, &v, du, step)?;
    }
    Ok(SampleOutput {
        z,
        field_evals: cfg.nfe,
        cost_backwards: cfg.nfe,
        states,
    })
}

#[derive(Debug, Clone)]
pub struct ReflowPairSet {
    pub z0: Tensor,
    pub z1_guided: Tensor,
    pub ctx: Conditioning,
    /// Raw history rows the teacher was guided with.
    pub history: Tensor,
}

/// Runs the guided teacher on every row of `ctx` from the given noise.
pub fn make_reflow_pairs(
    teacher: &VelocityField,
    ctx: &Conditioning,
    z0: &Tensor,
    cfg: &SamplerConfig,
    guidance: &Guidance<'_>,
) -> Result<ReflowPairSet, FlowError> {
    let out = guided_sample(teacher, ctx, z0, cfg, guidance)?;
    Ok(ReflowPairSet {
        z0: z0.clone(),
        z1_guided: out.z,
        ctx: ctx.clone(),
        history: guidance.history.clone(),
    })
}

/// Retrains a copy of the teacher on straight paths `z_0 → z_1^guided`. The
/// student integrates the conditional branch only, since its targets already
/// carry the teacher's CFG.
pub fn reflow_distill(
    teacher: &VelocityField,
    pairs: &ReflowPairSet,
    iterations: usize,
    lr: f64,
    u_zero_fraction: f64,
    seed: u64,
) -> Result<(VelocityField, Vec<f64>), FlowError> {
    if pairs.z0.rows() == 0 {
        return Err(FlowError::Empty);
    }
    let mut student = teacher.clone();
    student.role = FieldRole::Student;
    student.config.p_drop = 0.0;
    student.config.lr = lr;
    student.config.seed = seed;
    student.config.cosine_decay = true;
    student.config.u_zero_fraction = u_zero_fraction;
    let data = FlowTrainingSet {
        z1: pairs.z1_guided.clone(),
        z0: Some(pairs.z0.clone()),
        ctx: pairs.ctx.clone(),
    };
    let mut rng = seeded(derive(seed, &[0x7265_666c]));
    let curve = fit_field(&mut student, &data, iterations, &mut rng)?;
    Ok((student, curve))
}
