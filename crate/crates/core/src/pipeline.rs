//! The generation pipeline and the streaming loop: embed → Stage 1 →
//! sample → Stage 2 → decode → Stage 3, then either commit frames to the
//! tracker or engage the fallback.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{guided_sample, initial_noise, sample, Conditioning, FlowError, FlowTrainingSet, Guidance, SampleOutput, SamplerConfig, VelocityField};
use crate::kinematics::ChainModel;
use crate::motion_data::{MotionWindow, PromptEmbedder};
use crate::physics_cost::{CostProgram, CostWeights, GuidanceSchedule};
use crate::rng::derive;
use crate::safety_gate::{percentile, stage2, stage3, FallbackState, GateDecision, GateError, ProbeConfig, SemanticGate, STAND_PROMPT};
use crate::tensor::{Tensor, TensorError};
use crate::tracker::{EpisodeReport, EpisodeTrace, Tracker, TrackerConfig, TrackerError, WindowLog};
use crate::vae::{history_rows, Vae};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("pipeline config: {0}")]
    Config(String),
}

/// Standardized history rows plus prompt embeddings.
pub fn conditioning(vae: &Vae, history: &Tensor, embeddings: &Tensor) -> Conditioning {
    Conditioning {
        history: vae.norm.apply(history),
        embedding: embeddings.clone(),
    }
}

pub fn embedding_rows(embedder: &PromptEmbedder, prompts: &[&str]) -> Tensor {
    let rows: Vec<Vec<f64>> = prompts.iter().map(|p| embedder.embed(p)).collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, crate::motion_data::EMBED_DIM]);
    }
    Tensor::from_rows(&rows)
}

/// Flow targets are the encoder means of the data windows.
pub fn flow_training_set(vae: &Vae, embedder: &PromptEmbedder, windows: &[MotionWindow]) -> Result<FlowTrainingSet, TensorError> {
    let refs: Vec<&MotionWindow> = windows.iter().collect();
    let hist = history_rows(&refs);
    let (mu, _) = vae.encode(&hist, &crate::vae::future_rows(&refs))?;
    let prompts: Vec<&str> = windows.iter().map(|w| w.prompt.as_str()).collect();
    Ok(FlowTrainingSet {
        z1: mu,
        z0: None,
        ctx: conditioning(vae, &hist, &embedding_rows(embedder, &prompts)),
    })
}

/// Splits a `[T·n]` row into frames.
pub fn row_frames(row: &[f64], n: usize) -> Vec<Vec<f64>> {
    row.chunks(n).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct GuidanceSetup {
    pub program: CostProgram,
    pub schedule: GuidanceSchedule,
}

impl GuidanceSetup {
    pub fn new(chain: &ChainModel, t_fut: usize, frame_dt: f64, weights: CostWeights, schedule: GuidanceSchedule) -> Self {
        Self {
            program: CostProgram::new(chain, t_fut + 1, frame_dt, weights),
            schedule,
        }
    }
}

/// One flow variant ready to generate windows: base, guided teacher or student.
#[derive(Debug, Clone)]
pub struct Generator {
    pub chain: ChainModel,
    pub vae: Vae,
    pub field: VelocityField,
    pub embedder: PromptEmbedder,
    pub sampler: SamplerConfig,
    pub guidance: Option<GuidanceSetup>,
    pub frame_dt: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub ctx: Conditioning,
    pub sample: SampleOutput,
    /// `[rows, T_fut·n]` radians.
    pub future: Tensor,
}

/// Noise seed for a window, shared by every variant so comparisons are paired.
pub fn window_seed(seed: u64, window: u64) -> u64 {
    derive(seed, &[0x776e_6477, window])
}

impl Generator {
    pub fn n_joints(&self) -> usize {
        self.chain.n_joints()
    }

    pub fn generate(&self, history: &Tensor, embeddings: &Tensor, seeds: &[u64]) -> Result<Generated, PipelineError> {
        let ctx = conditioning(&self.vae, history, embeddings);
        let z0 = initial_noise(seeds, self.vae.d_z());
        let out = match &self.guidance {
            Some(g) => guided_sample(
                &self.field,
                &ctx,
                &z0,
                &self.sampler,
                &Guidance {
                    vae: &self.vae,
                    history,
                    program: &g.program,
                    schedule: g.schedule,
                },
            )?,
            None => sample(&self.field, &ctx, &z0, &self.sampler)?,
        };
        let future = self.vae.decode(history, &out.z)?;
        Ok(Generated {
            ctx,
            sample: out,
            future,
        })
    }

    /// Points along the sampling path where Stage 2 looks: the start for a
    /// one-step sampler, the start and the midpoint otherwise.
    pub fn stage2_points(&self) -> &'static [f64] {
        if self.sampler.nfe == 1 {
            &[0.0]
        } else {
            &[0.0, 0.5]
        }
    }

    /// Mean instability score over the Stage-2 points for row `row` of a
    /// generation, with the velocity the sampler integrates (CFG composite).
    pub fn instability(&self, gen: &Generated, row: usize, probe: &ProbeConfig, window: u64) -> Result<f64, PipelineError> {
        let probes = probe.probes(window, self.vae.d_z());
        let ctx = gen.ctx.select(&vec![row; probes.len() + 1]);
        let mut total = 0.0;
        let points = self.stage2_points();
        for &target in points {
            let (u, state) = gen.sample.state_at(target);
            let w = self.sampler.cfg.map(|c| c.weight(u));
            let field = |z: &Tensor| self.field.guided_velocity(z, u, &ctx, w);
            let s = crate::safety_gate::instability_score(field, state.row_slice(row), &probes, probe.delta)?;
            total += s.r;
        }
        Ok(total / points.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// No gate is evaluated.
    Off,
    /// Every stage is scored and logged, nothing is rejected.
    Monitor,
    Enforce,
}

/// Calibrated gate artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateBundle {
    pub semantic: SemanticGate,
    pub probe: ProbeConfig,
    pub tau_stab: f64,
    pub tau_stab_percentile: f64,
    pub t_fb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed: f64,
    pub stage1: f64,
    pub generate: f64,
    pub stage2: f64,
    pub stage3: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.embed + self.stage1 + self.generate + self.stage2 + self.stage3
    }
}

/// Corrupts the decoded future of chosen windows by a constant offset on one
/// joint, to force a downstream rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub windows: Vec<u64>,
    pub joint: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub stage1: usize,
    pub generator: usize,
    pub stage2: usize,
    pub stage3: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub prompt: String,
    pub accepted: bool,
    pub decisions: Vec<GateDecision>,
    pub d2: Option<f64>,
    pub r: Option<f64>,
    /// Generated future frames, present whenever the generator ran.
    pub future: Option<Vec<Vec<f64>>>,
    pub calls: CallCounts,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub generator: Generator,
    pub gates: Option<GateBundle>,
    pub mode: GateMode,
}

impl Pipeline {
    pub fn t_hist(&self) -> usize {
        self.generator.vae.t_hist
    }

    /// One guarded generator call from `history` (`t_hist` frames).
    pub fn window(
        &self,
        history: &[Vec<f64>],
        prompt: &str,
        window: u64,
        seed: u64,
        injection: Option<&Injection>,
    ) -> Result<WindowOutcome, PipelineError> {
        let g = &self.generator;
        let mut timings = StageTimings::default();
        let mut calls = CallCounts::default();
        let mut decisions = Vec::new();
        let gates = match self.mode {
            GateMode::Off => None,
            _ => self.gates.as_ref(),
        };
        let enforce = self.mode == GateMode::Enforce;
        let rejected = |decisions: &[GateDecision]| enforce && decisions.iter().any(|d| !d.accept);

        let clock = Instant::now();
        let e = g.embedder.embed(prompt);
        timings.embed = clock.elapsed().as_secs_f64();

        let mut d2 = None;
        if let Some(gb) = gates {
            let clock = Instant::now();
            let d = gb.semantic.stage1(&e);
            timings.stage1 = clock.elapsed().as_secs_f64();
            calls.stage1 += 1;
            d2 = Some(d.score);
            decisions.push(d);
        }
        let outcome = |accepted, decisions, future, r, calls, timings| WindowOutcome {
            prompt: prompt.to_string(),
            accepted,
            decisions,
            d2,
            r,
            future,
            calls,
            timings,
        };
        if rejected(&decisions) {
            return Ok(outcome(false, decisions, None, None, calls, timings));
        }

        let clock = Instant::now();
        let hist = Tensor::row(&history.concat());
        let gen = g.generate(&hist, &Tensor::row(&e), &[window_seed(seed, window)])?;
        timings.generate = clock.elapsed().as_secs_f64();
        calls.generator += 1;
        let mut future = row_frames(gen.future.row_slice(0), g.n_joints());
        if let Some(inj) = injection.filter(|i| i.windows.contains(&window)) {
            for f in &mut future {
                f[inj.joint] += inj.magnitude;
            }
        }

        let mut r = None;
        if let Some(gb) = gates {
            let clock = Instant::now();
            let probe = ProbeConfig { seed, ..gb.probe };
            let score = g.instability(&gen, 0, &probe, window)?;
            timings.stage2 = clock.elapsed().as_secs_f64();
            calls.stage2 += 1;
            r = Some(score);
            decisions.push(stage2(score, gb.tau_stab));
            if rejected(&decisions) {
                return Ok(outcome(false, decisions, Some(future), r, calls, timings));
            }
            let clock = Instant::now();
            let frames: Vec<&[f64]> = history.iter().chain(&future).map(Vec::as_slice).collect();
            let d = stage3(&frames, &g.chain, g.frame_dt);
            timings.stage3 = clock.elapsed().as_secs_f64();
            calls.stage3 += 1;
            decisions.push(d);
        }
        let accepted = !rejected(&decisions);
        Ok(outcome(accepted, decisions, Some(future), r, calls, timings))
    }
}

/// Calibrates Stage 1 on the training prompts and `τ_stab` on the instability
/// scores of the given ID windows under the deployed sampler.
pub fn calibrate_gates(
    generator: &Generator,
    train_prompts: &[&str],
    id_windows: &[MotionWindow],
    percentile_sem: f64,
    eps_reg: f64,
    probe: ProbeConfig,
    tau_stab_percentile: f64,
    t_fb: f64,
    seed: u64,
) -> Result<(GateBundle, Vec<f64>), PipelineError> {
    probe.validate()?;
    let embeddings: Vec<Vec<f64>> = train_prompts.iter().map(|p| generator.embedder.embed(p)).collect();
    let semantic = SemanticGate::calibrate(&embeddings, percentile_sem, eps_reg)?;
    let scores = instability_scores(generator, id_windows, &probe, seed)?;
    let tau_stab = if scores.is_empty() {
        f64::INFINITY
    } else {
        percentile(&scores, tau_stab_percentile)
    };
    Ok((
        GateBundle {
            semantic,
            probe,
            tau_stab,
            tau_stab_percentile,
            t_fb,
        },
        scores,
    ))
}

/// Stage-2 scores of data windows, window `i` probed with stream `i`.
pub fn instability_scores(generator: &Generator, windows: &[MotionWindow], probe: &ProbeConfig, seed: u64) -> Result<Vec<f64>, PipelineError> {
    let probe = ProbeConfig { seed, ..*probe };
    let mut out = Vec::with_capacity(windows.len());
    for chunk_start in (0..windows.len()).step_by(64) {
        let chunk = &windows[chunk_start..(chunk_start + 64).min(windows.len())];
        let refs: Vec<&MotionWindow> = chunk.iter().collect();
        let prompts: Vec<&str> = chunk.iter().map(|w| w.prompt.as_str()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| window_seed(seed, (chunk_start + i) as u64)).collect();
        let gen = generator.generate(&history_rows(&refs), &embedding_rows(&generator.embedder, &prompts), &seeds)?;
        for i in 0..chunk.len() {
            out.push(generator.instability(&gen, i, &probe, (chunk_start + i) as u64)?);
        }
    }
    Ok(out)
}

/// Generator period in 25 fps frames (0.16 s).
pub const GENERATOR_PERIOD: f64 = 0.16;

/// What one generator period produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub log: WindowLog,
    pub outcome: Option<WindowOutcome>,
    /// Frames committed this period at 25 fps.
    pub frames: Vec<Vec<f64>>,
    /// Executed joint angles for the control steps of this period.
    pub executed: Vec<Vec<f64>>,
    pub fallback_engaged: bool,
}

/// Window-by-window episode state: the tracker always consumes the frames of
/// the latest accepted window, or fallback frames after a rejection.
pub struct Session<'a> {
    pipeline: &'a Pipeline,
    pub tracker: Tracker,
    seed: u64,
    window: u64,
    user_prompt: String,
    fallback: FallbackState,
    /// Set on rejection: stand until a new prompt arrives.
    holding: bool,
    stride: usize,
    t_fb: f64,
    injection: Option<Injection>,
    logs: Vec<WindowLog>,
    pub calls: CallCounts,
}

impl<'a> Session<'a> {
    pub fn new(pipeline: &'a Pipeline, tracker_cfg: TrackerConfig, seed: u64, prompt: &str) -> Result<Self, PipelineError> {
        let g = &pipeline.generator;
        let stride = (GENERATOR_PERIOD / g.frame_dt).round() as usize;
        if stride == 0 || stride > g.vae.t_fut {
            return Err(PipelineError::Config(format!(
                "generator period of {stride} frames does not fit the {}-frame horizon",
                g.vae.t_fut
            )));
        }
        let t_fb = pipeline.gates.as_ref().map_or(1.0, |gb| gb.t_fb);
        Ok(Self {
            tracker: Tracker::new(tracker_cfg, &g.chain, &g.chain.nominal_pose, g.frame_dt)?,
            pipeline,
            seed,
            window: 0,
            user_prompt: prompt.to_string(),
            fallback: FallbackState::idle(&g.chain),
            holding: false,
            stride,
            t_fb,
            injection: None,
            logs: Vec::new(),
            calls: CallCounts::default(),
        })
    }

    pub fn with_injection(mut self, injection: Injection) -> Self {
        self.injection = Some(injection);
        self
    }

    pub fn set_prompt(&mut self, prompt: &str) {
        self.user_prompt = prompt.to_string();
        self.holding = false;
    }

    pub fn prompt(&self) -> &str {
        &self.user_prompt
    }

    pub fn window_index(&self) -> u64 {
        self.window
    }

    pub fn fallback_active(&self) -> bool {
        self.fallback.active
    }

    /// Interpolation length of the current or last fallback, in frames.
    pub fn fallback_len(&self) -> usize {
        self.fallback.frames
    }

    pub fn pipeline(&self) -> &Pipeline {
        self.pipeline
    }

    pub fn time(&self) -> f64 {
        self.window as f64 * self.stride as f64 * self.pipeline.generator.frame_dt
    }

    fn history(&self) -> Vec<Vec<f64>> {
        let t_hist = self.pipeline.t_hist();
        let chain = &self.pipeline.generator.chain;
        let refs = &self.tracker.trace.reference25;
        (0..t_hist)
            .map(|k| {
                let back = t_hist - k;
                if refs.len() >= back {
                    refs[refs.len() - back].clone()
                } else {
                    chain.nominal_pose.clone()
                }
            })
            .collect()
    }

    fn commit(&mut self, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let start = self.tracker.steps();
        for f in frames {
            self.tracker.push_frame(f);
        }
        self.tracker.trace.executed50[start..].to_vec()
    }

    fn fallback_frames(&mut self) -> Vec<Vec<f64>> {
        let frames: Vec<Vec<f64>> = (0..self.stride).map(|_| self.fallback.step().0).collect();
        if self.fallback.complete() {
            self.fallback.active = false;
        }
        frames
    }

    /// Runs one generator period.
    pub fn tick(&mut self) -> Result<Tick, PipelineError> {
        let t = self.time();
        let window = self.window;
        let steps_before = self.tracker.steps();
        let g = &self.pipeline.generator;
        let mut fallback_engaged = false;
        let (frames, outcome, prompt) = if self.fallback.active {
            (self.fallback_frames(), None, STAND_PROMPT.to_string())
        } else {
            let prompt = if self.holding {
                STAND_PROMPT.to_string()
            } else {
                self.user_prompt.clone()
            };
            let history = self.history();
            let out = self.pipeline.window(&history, &prompt, window, self.seed, self.injection.as_ref())?;
            self.calls.stage1 += out.calls.stage1;
            self.calls.generator += out.calls.generator;
            self.calls.stage2 += out.calls.stage2;
            self.calls.stage3 += out.calls.stage3;
            let frames = if out.accepted {
                out.future.as_ref().expect("accepted window has frames")[..self.stride].to_vec()
            } else {
                let last = history.last().expect("history").clone();
                self.fallback = FallbackState::engage(&last, &g.chain, self.t_fb, g.frame_dt);
                self.holding = true;
                fallback_engaged = true;
                self.fallback_frames()
            };
            (frames, Some(out), prompt)
        };
        let executed = self.commit(&frames);
        let log = WindowLog {
            window,
            t,
            prompt,
            accepted: outcome.as_ref().is_some_and(|o| o.accepted),
            fallback: outcome.as_ref().is_none_or(|o| !o.accepted),
            d2: outcome.as_ref().and_then(|o| o.d2),
            r: outcome.as_ref().and_then(|o| o.r),
            decisions: outcome
                .as_ref()
                .map(|o| o.decisions.iter().map(|d| d.at(t)).collect())
                .unwrap_or_default(),
            steps: [steps_before, self.tracker.steps()],
            mpjpe_mm: None,
        };
        self.logs.push(log.clone());
        self.window += 1;
        Ok(Tick {
            log,
            outcome,
            frames,
            executed,
            fallback_engaged,
        })
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.tracker.trace
    }

    pub fn report(&self) -> Result<EpisodeReport, PipelineError> {
        Ok(self.tracker.trace.report(&self.pipeline.generator.chain, self.tracker.cfg.control_dt, self.logs.clone())?)
    }
}

/// A scripted episode: the prompt in force from each window index on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub prompts: Vec<(u64, String)>,
    pub windows: u64,
    pub seed: u64,
    #[serde(default)]
    pub injection: Option<Injection>,
}

pub fn run_episode(pipeline: &Pipeline, tracker_cfg: &TrackerConfig, spec: &EpisodeSpec) -> Result<(EpisodeReport, EpisodeTrace, CallCounts), PipelineError> {
    let first = spec.prompts.first().map_or(STAND_PROMPT, |p| p.1.as_str());
    let mut session = Session::new(pipeline, tracker_cfg.clone(), spec.seed, first)?;
    if let Some(inj) = &spec.injection {
        session = session.with_injection(inj.clone());
    }
    for w in 0..spec.windows {
        if let Some((_, p)) = spec.prompts.iter().find(|(at, _)| *at == w && w > 0) {
            session.set_prompt(p);
        }
        session.tick()?;
    }
    Ok((session.report()?, session.trace().clone(), session.calls))
}
