//! Evaluation protocols: window-level JV/SC, the tracking table, the Stage-1
//! OOD study, R-quintile grouping, multimodality and latency.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::motion_data::{make_ood_prompts, id_prompts, MotionWindow, OodType};
use crate::pipeline::{embedding_rows, row_frames, run_episode, window_seed, EpisodeSpec, GateMode, Generator, Pipeline, PipelineError, StageTimings};
use crate::rng::derive;
use crate::safety_gate::{auroc, SemanticGate};
use crate::tracker::{jv_sc_rates, multimodality, EpisodeReport, TrackerConfig, WindowLog};
use crate::vae::history_rows;

/// Generated futures for data windows, window `i` seeded with stream `i`, so
/// every variant sees the same noise.
pub fn generate_windows(generator: &Generator, windows: &[MotionWindow], seed: u64) -> Result<Vec<Vec<Vec<f64>>>, PipelineError> {
    let n = generator.n_joints();
    let mut out = Vec::with_capacity(windows.len());
    for (c, chunk) in windows.chunks(64).enumerate() {
        let refs: Vec<&MotionWindow> = chunk.iter().collect();
        let prompts: Vec<&str> = chunk.iter().map(|w| w.prompt.as_str()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| window_seed(seed, (c * 64 + i) as u64)).collect();
        let gen = generator.generate(&history_rows(&refs), &embedding_rows(&generator.embedder, &prompts), &seeds)?;
        for r in 0..chunk.len() {
            out.push(row_frames(gen.future.row_slice(r), n));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRates {
    pub windows: usize,
    pub jv: f64,
    pub sc: f64,
}

/// JV/SC over every generated future frame of the given windows.
pub fn window_rates(generator: &Generator, windows: &[MotionWindow], seed: u64) -> Result<WindowRates, PipelineError> {
    let futures = generate_windows(generator, windows, seed)?;
    let frames: Vec<Vec<f64>> = futures.into_iter().flatten().collect();
    let (jv, sc) = jv_sc_rates(&frames, &generator.chain)?;
    Ok(WindowRates {
        windows: windows.len(),
        jv,
        sc,
    })
}

/// One row of the tracking table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub jv: f64,
    pub sc: f64,
    pub succ: f64,
    pub mpjpe: f64,
    pub e_vel: f64,
    pub e_acc: f64,
}

pub const TABLE_HEADER: &str = "variant,JV,SC,Succ,E_mpjpe,E_vel,E_acc";

impl TableRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.2},{:.4},{:.6},{:.6}",
            self.variant, self.jv, self.sc, self.succ, self.mpjpe, self.e_vel, self.e_acc
        )
    }

    pub fn aggregate(variant: &str, reports: &[EpisodeReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            variant: variant.to_string(),
            jv: mean(&|r| r.jv_rate),
            sc: mean(&|r| r.sc_rate),
            succ: 100.0 * reports.iter().filter(|r| r.success).count() as f64 / n,
            mpjpe: mean(&|r| r.mpjpe_mm),
            e_vel: mean(&|r| r.e_vel),
            e_acc: mean(&|r| r.e_acc),
        }
    }
}

/// Scripted episodes: each switches between two prompts halfway through.
pub fn episode_specs(prompts: &[String], episodes: usize, windows: u64, seed: u64) -> Vec<EpisodeSpec> {
    (0..episodes)
        .map(|k| {
            let a = prompts[(2 * k) % prompts.len()].clone();
            let b = prompts[(2 * k + 1) % prompts.len()].clone();
            EpisodeSpec {
                prompts: vec![(0, a), (windows / 2, b)],
                windows,
                seed: derive(seed, &[0x6570, k as u64]),
                injection: None,
            }
        })
        .collect()
}

pub fn run_episodes(pipeline: &Pipeline, tracker: &TrackerConfig, specs: &[EpisodeSpec]) -> Result<Vec<EpisodeReport>, PipelineError> {
    specs.iter().map(|s| run_episode(pipeline, tracker, s).map(|r| r.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Study {
    pub id_accept: f64,
    pub ood_a_accept: f64,
    pub ood_b_accept: f64,
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub id_count: usize,
    pub ood_a_count: usize,
    pub ood_b_count: usize,
}

pub const STAGE1_HEADER: &str = "set,count,accept_rate,auroc";

impl Stage1Study {
    pub fn csv_rows(&self) -> Vec<String> {
        vec![
            format!("id,{},{:.4},", self.id_count, self.id_accept),
            format!("ood_a,{},{:.4},{:.6}", self.ood_a_count, self.ood_a_accept, self.auroc_a),
            format!("ood_b,{},{:.4},{:.6}", self.ood_b_count, self.ood_b_accept, self.auroc_b),
        ]
    }
}

pub fn stage1_study(gate: &SemanticGate, generator: &Generator, id: &[String], ood_a: &[String], ood_b: &[String]) -> Result<Stage1Study, PipelineError> {
    let scores = |set: &[String]| -> Vec<f64> { set.iter().map(|p| gate.d2(&generator.embedder.embed(p))).collect() };
    let rate = |s: &[f64]| 100.0 * s.iter().filter(|d| **d <= gate.tau).count() as f64 / s.len().max(1) as f64;
    let (si, sa, sb) = (scores(id), scores(ood_a), scores(ood_b));
    Ok(Stage1Study {
        id_accept: rate(&si),
        ood_a_accept: rate(&sa),
        ood_b_accept: rate(&sb),
        auroc_a: auroc(&si, &sa)?,
        auroc_b: auroc(&si, &sb)?,
        id_count: si.len(),
        ood_a_count: sa.len(),
        ood_b_count: sb.len(),
    })
}

/// The three prompt sets of the Stage-1 study.
pub fn stage1_prompt_sets(primitives: &[crate::motion_data::MotionPrimitive], seed: u64, n_id: usize) -> (Vec<String>, Vec<String>, Vec<String>) {
    let id = id_prompts(primitives, derive(seed, &[0x6964]), n_id).into_iter().map(|p| p.0).collect();
    (id, make_ood_prompts(seed, OodType::A), make_ood_prompts(seed, OodType::B))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileRow {
    pub quintile: usize,
    pub count: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub mean_mpjpe: f64,
}

pub const QUINTILE_HEADER: &str = "quintile,count,r_min,r_max,mean_mpjpe";

impl QuintileRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.4}", self.quintile, self.count, self.r_min, self.r_max, self.mean_mpjpe)
    }
}

/// Windows with both an R score and a downstream MPJPE, sorted by R and cut
/// into five equal-count groups shared by all windows.
pub fn r_quintiles(logs: &[WindowLog]) -> Vec<QuintileRow> {
    let mut pts: Vec<(f64, f64)> = logs.iter().filter_map(|w| Some((w.r?, w.mpjpe_mm?))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = pts.len();
    (0..5)
        .filter_map(|q| {
            let group = &pts[q * n / 5..(q + 1) * n / 5];
            if group.is_empty() {
                return None;
            }
            Some(QuintileRow {
                quintile: q + 1,
                count: group.len(),
                r_min: group[0].0,
                r_max: group[group.len() - 1].0,
                mean_mpjpe: group.iter().map(|p| p.1).sum::<f64>() / group.len() as f64,
            })
        })
        .collect()
}

/// Multimodality for one prompt: `runs` generations from the same history
/// with different noise.
pub fn prompt_multimodality(generator: &Generator, window: &MotionWindow, prompt: &str, runs: usize, seed: u64) -> Result<f64, PipelineError> {
    let windows: Vec<MotionWindow> = (0..runs)
        .map(|_| MotionWindow {
            prompt: prompt.to_string(),
            ..window.clone()
        })
        .collect();
    let gens = generate_windows(generator, &windows, seed)?;
    Ok(multimodality(&gens)?)
}

/// Multimodality of guided and unguided generation for one prompt, and
/// whether a short tracked episode on that prompt succeeded under both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub prompt: String,
    pub guided: f64,
    pub unguided: f64,
    pub both_succeed: bool,
}

pub const DIVERSITY_HEADER: &str = "prompt,guided_mm,unguided_mm,both_succeed";

impl DiversityRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.prompt, self.guided, self.unguided, self.both_succeed)
    }
}

/// For each window's prompt: multimodality over `runs` generations from the
/// window's history, plus an ungated episode of `windows` generator windows
/// per variant to decide success.
pub fn diversity_study(
    guided: &Generator,
    unguided: &Generator,
    tracker: &TrackerConfig,
    windows: &[MotionWindow],
    runs: usize,
    episode_windows: u64,
    seed: u64,
) -> Result<Vec<DiversityRow>, PipelineError> {
    let succeeds = |g: &Generator, prompt: &str, k: u64| -> Result<bool, PipelineError> {
        let pipeline = Pipeline {
            generator: g.clone(),
            gates: None,
            mode: GateMode::Off,
        };
        let spec = EpisodeSpec {
            prompts: vec![(0, prompt.to_string())],
            windows: episode_windows,
            seed: derive(seed, &[0x6476, k]),
            injection: None,
        };
        Ok(run_episode(&pipeline, tracker, &spec)?.0.success)
    };
    windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let s = derive(seed, &[0x6d6d, k as u64]);
            Ok(DiversityRow {
                prompt: w.prompt.clone(),
                guided: prompt_multimodality(guided, w, &w.prompt, runs, s)?,
                unguided: prompt_multimodality(unguided, w, &w.prompt, runs, s)?,
                both_succeed: succeeds(guided, &w.prompt, k as u64)? && succeeds(unguided, &w.prompt, k as u64)?,
            })
        })
        .collect()
}

/// Mean guided over mean unguided multimodality, on rows where both succeed.
pub fn diversity_ratio(rows: &[DiversityRow]) -> Option<f64> {
    let kept: Vec<&DiversityRow> = rows.iter().filter(|r| r.both_succeed).collect();
    let unguided: f64 = kept.iter().map(|r| r.unguided).sum();
    if kept.is_empty() || unguided <= 0.0 {
        return None;
    }
    Some(kept.iter().map(|r| r.guided).sum::<f64>() / unguided)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub stage: String,
    pub median_ms: f64,
    pub std_ms: f64,
}

pub const LATENCY_HEADER: &str = "stage,median_ms,std_ms";

impl LatencyRow {
    pub fn csv(&self) -> String {
        format!("{},{:.4},{:.4}", self.stage, self.median_ms, self.std_ms)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Per-run wall clock of the whole guarded window, seconds.
    pub totals: Vec<f64>,
}

impl LatencyReport {
    pub fn median_ms(&self, stage: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.median_ms)
    }
}

/// Steady-state per-stage latency of guarded windows on the given history
/// and prompt, after `warmup` discarded runs.
pub fn bench_pipeline(pipeline: &Pipeline, history: &[Vec<f64>], prompt: &str, runs: usize, warmup: usize, seed: u64) -> Result<LatencyReport, PipelineError> {
    let mut samples: Vec<StageTimings> = Vec::with_capacity(runs);
    let mut totals = Vec::with_capacity(runs);
    for k in 0..warmup + runs {
        let clock = Instant::now();
        let out = pipeline.window(history, prompt, k as u64, seed, None)?;
        let total = clock.elapsed().as_secs_f64();
        if k >= warmup {
            samples.push(out.timings);
            totals.push(total);
        }
    }
    let stage = |name: &str, f: &dyn Fn(&StageTimings) -> f64| {
        let v: Vec<f64> = samples.iter().map(|t| 1000.0 * f(t)).collect();
        LatencyRow {
            stage: name.to_string(),
            median_ms: median(&v),
            std_ms: std_dev(&v),
        }
    };
    let mut rows = vec![
        stage("embed", &|t| t.embed),
        stage("stage1", &|t| t.stage1),
        stage("generate", &|t| t.generate),
        stage("stage2", &|t| t.stage2),
        stage("stage3", &|t| t.stage3),
    ];
    let tv: Vec<f64> = totals.iter().map(|t| 1000.0 * t).collect();
    rows.push(LatencyRow {
        stage: "total".into(),
        median_ms: median(&tv),
        std_ms: std_dev(&tv),
    });
    Ok(LatencyReport { rows, totals })
}

/// Median wall clock of plain generation for one window (no gates).
pub fn bench_generation(generator: &Generator, window: &MotionWindow, runs: usize, warmup: usize, seed: u64) -> Result<f64, PipelineError> {
    let pipeline = Pipeline {
        generator: generator.clone(),
        gates: None,
        mode: GateMode::Off,
    };
    let history = window.history.clone();
    Ok(bench_pipeline(&pipeline, &history, &window.prompt, runs, warmup, seed)?
        .median_ms("total")
        .expect("total row"))
}
