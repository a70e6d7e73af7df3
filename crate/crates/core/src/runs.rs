//! The evaluation commands over a loaded run directory: the tracking table,
//! the gate studies and the latency benchmark.

use serde::{Deserialize, Serialize};

use crate::eval::{
    bench_generation, bench_pipeline, diversity_study, episode_specs, r_quintiles, run_episodes, stage1_prompt_sets, stage1_study,
    window_rates, DiversityRow, LatencyReport, QuintileRow, Stage1Study, TableRow,
};
use crate::motion_data::id_prompts;
use crate::pipeline::{EpisodeSpec, GateMode};
use crate::rng::derive;
use crate::tracker::WindowLog;
use crate::workflow::{step_seed, strided, Bundle, DeployOptions, Variant, WorkflowError};

/// Generator windows per short episode in the diversity study.
pub const DIVERSITY_EPISODE_WINDOWS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub variant: String,
    pub windows: usize,
    pub jv: f64,
    pub sc: f64,
}

pub const RATE_HEADER: &str = "variant,windows,JV,SC";

impl RateRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.4},{:.4}", self.variant, self.windows, self.jv, self.sc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub table: Vec<TableRow>,
    pub rates: Vec<RateRow>,
    pub diversity: Vec<DiversityRow>,
}

/// Prompts for scripted episodes: fresh draws from the training grammar.
pub fn default_prompts(bundle: &Bundle, n: usize) -> Vec<String> {
    let seed = step_seed(&bundle.cfg, 0, 0x6570);
    id_prompts(&bundle.dataset.primitives, seed, n).into_iter().map(|p| p.0).collect()
}

/// Window-level rates on paired validation windows for every variant.
pub fn rate_rows(bundle: &Bundle) -> Result<Vec<RateRow>, WorkflowError> {
    let windows = strided(&bundle.dataset.val, bundle.cfg.eval.rate_windows);
    let seed = step_seed(&bundle.cfg, 0, 0x7261);
    Variant::ALL
        .iter()
        .map(|&v| {
            let r = window_rates(&bundle.generator(v)?, &windows, seed)?;
            Ok(RateRow {
                variant: v.label().into(),
                windows: r.windows,
                jv: r.jv,
                sc: r.sc,
            })
        })
        .collect()
}

pub fn eval_run(bundle: &Bundle, prompts: &[String], mode: GateMode) -> Result<EvalOutput, WorkflowError> {
    let cfg = &bundle.cfg;
    let specs = episode_specs(prompts, cfg.eval.episodes, cfg.eval.episode_windows, step_seed(cfg, 0, 0x7462));
    let tracker = cfg.tracker.build(&cfg.chain);
    let mut table = Vec::new();
    for v in Variant::ALL {
        let reports = run_episodes(&bundle.pipeline(v, mode)?, &tracker, &specs)?;
        table.push(TableRow::aggregate(v.label(), &reports));
    }
    let diversity = diversity_study(
        &bundle.generator(Variant::Teacher)?,
        &bundle.generator(Variant::Base)?,
        &tracker,
        &strided(&bundle.dataset.val, cfg.eval.diversity_windows),
        cfg.eval.mmodality_runs,
        DIVERSITY_EPISODE_WINDOWS,
        step_seed(cfg, 0, 0x6476),
    )?;
    Ok(EvalOutput {
        table,
        rates: rate_rows(bundle)?,
        diversity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEvalOutput {
    pub stage1: Stage1Study,
    pub quintiles: Vec<QuintileRow>,
    /// Every executed window of the Monitor-mode episodes.
    pub logs: Vec<WindowLog>,
}

/// Monitor-mode episodes over ID prompts interleaved with both OOD families,
/// so the logged windows span the full instability range.
pub fn quintile_specs(bundle: &Bundle, id: &[String], ood_a: &[String], ood_b: &[String]) -> Vec<EpisodeSpec> {
    let mut mix = Vec::new();
    for (k, p) in id.iter().enumerate() {
        mix.push(p.clone());
        match k % 3 {
            0 if !ood_a.is_empty() => mix.push(ood_a[k % ood_a.len()].clone()),
            1 if !ood_b.is_empty() => mix.push(ood_b[k % ood_b.len()].clone()),
            _ => {}
        }
    }
    let cfg = &bundle.cfg;
    episode_specs(&mix, cfg.eval.quintile_episodes, cfg.eval.episode_windows, step_seed(cfg, 0, 0x7175))
}

pub fn gate_eval_run(bundle: &Bundle, variant: Variant) -> Result<GateEvalOutput, WorkflowError> {
    let cfg = &bundle.cfg;
    let (id, ood_a, ood_b) = stage1_prompt_sets(&bundle.dataset.primitives, step_seed(cfg, 0, 0x7331), cfg.eval.id_prompts);
    let pipeline = bundle.pipeline(variant, GateMode::Monitor)?;
    let gates = pipeline.gates.as_ref().expect("monitor mode has gates");
    let stage1 = stage1_study(&gates.semantic, &pipeline.generator, &id, &ood_a, &ood_b)?;
    let specs = quintile_specs(bundle, &id, &ood_a, &ood_b);
    let reports = run_episodes(&pipeline, &cfg.tracker.build(&cfg.chain), &specs)?;
    let logs: Vec<WindowLog> = reports.into_iter().flat_map(|r| r.windows).collect();
    Ok(GateEvalOutput {
        stage1,
        quintiles: r_quintiles(&logs),
        logs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    /// Guarded deployed pipeline, per stage.
    pub pipeline: LatencyReport,
    /// Median plain generation time per window, milliseconds.
    pub teacher_ms: f64,
    pub student_ms: f64,
}

pub fn bench_run(bundle: &Bundle, opts: DeployOptions) -> Result<BenchOutput, WorkflowError> {
    let cfg = &bundle.cfg;
    let window = bundle
        .dataset
        .val
        .iter()
        .find(|w| !w.prompt.contains("stand"))
        .or(bundle.dataset.val.first())
        .ok_or_else(|| WorkflowError::Artifact {
            path: "dataset.json".into(),
            message: "no validation windows".into(),
        })?;
    let (runs, warmup) = (cfg.eval.latency_runs, cfg.eval.latency_warmup);
    let seed = derive(step_seed(cfg, 0, 0x6c61), &[0]);
    let pipeline = bundle.deployed(opts)?;
    Ok(BenchOutput {
        pipeline: bench_pipeline(&pipeline, &window.history, &window.prompt, runs, warmup, seed)?,
        teacher_ms: bench_generation(&bundle.generator(Variant::Teacher)?, window, runs, warmup, seed)?,
        student_ms: bench_generation(&bundle.generator(Variant::Student)?, window, runs, warmup, seed)?,
    })
}
