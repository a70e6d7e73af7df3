//! PD-controlled joint tracker at 50 Hz and the episode metrics: JV/SC rates
//! on the reference, success, MPJPE and FK-space velocity/acceleration error,
//! and multimodality across repeated generations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{finite_diff_derivatives, ChainModel, KinematicsError};
use crate::safety_gate::GateDecision;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("tracker config: {0}")]
    Config(String),
    #[error("non-finite tracker state")]
    NonFinite,
    #[error("sequence lengths differ: {reference} reference vs {executed} executed frames")]
    LengthMismatch { reference: usize, executed: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Tracking error bound (rad) above which an episode counts as failed.
pub const FAILURE_ERROR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub tau_max: Vec<f64>,
    pub inertia: Vec<f64>,
    pub control_dt: f64,
}

impl TrackerConfig {
    pub fn uniform(n: usize, kp: f64, kd: f64, tau_max: f64, inertia: f64) -> Self {
        Self {
            kp: vec![kp; n],
            kd: vec![kd; n],
            tau_max: vec![tau_max; n],
            inertia: vec![inertia; n],
            control_dt: 0.02,
        }
    }

    /// Critically damped gains with torque capped at the chain's
    /// acceleration limit.
    pub fn for_chain(chain: &ChainModel) -> Self {
        let n = chain.n_joints();
        let mut cfg = Self::uniform(n, 400.0, 40.0, 0.0, 1.0);
        cfg.tau_max = chain.acc_limits.iter().zip(&cfg.inertia).map(|(a, i)| a * i).collect();
        cfg
    }

    pub fn validate(&self, n_joints: usize) -> Result<(), TrackerError> {
        for (name, v) in [("kp", &self.kp), ("kd", &self.kd), ("tau_max", &self.tau_max), ("inertia", &self.inertia)] {
            if v.len() != n_joints {
                return Err(TrackerError::Config(format!("{name} has {} entries, chain has {n_joints} joints", v.len())));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(TrackerError::Config(format!("{name} must be positive")));
            }
        }
        if (self.control_dt - 0.02).abs() > 1e-12 {
            return Err(TrackerError::Config("control_dt must be 0.02 s (50 Hz)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl TrackerState {
    pub fn at_rest(q: &[f64]) -> Self {
        Self {
            q: q.to_vec(),
            qd: vec![0.0; q.len()],
        }
    }
}

/// One semi-implicit Euler step of `I q̈ = clamp(kp e + kd ė, ±τ_max)` with the
/// velocity saturated at `vel_limits`.
pub fn tracker_step(
    cfg: &TrackerConfig,
    vel_limits: &[f64],
    state: &TrackerState,
    q_ref: &[f64],
    qd_ref: &[f64],
) -> Result<TrackerState, TrackerError> {
    let dt = cfg.control_dt;
    let mut next = state.clone();
    for j in 0..state.q.len() {
        let tau = cfg.kp[j] * (q_ref[j] - state.q[j]) + cfg.kd[j] * (qd_ref[j] - state.qd[j]);
        let tau = tau.clamp(-cfg.tau_max[j], cfg.tau_max[j]);
        let qd = (state.qd[j] + dt * tau / cfg.inertia[j]).clamp(-vel_limits[j], vel_limits[j]);
        next.qd[j] = qd;
        next.q[j] = state.q[j] + dt * qd;
    }
    if next.q.iter().chain(&next.qd).all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(TrackerError::NonFinite)
    }
}

pub fn tracking_ok(q: &[f64], q_ref: &[f64]) -> bool {
    q.iter().zip(q_ref).all(|(a, b)| a.is_finite() && (a - b).abs() < FAILURE_ERROR)
}

/// Linear 25 fps → 50 Hz upsampling: for each new frame the midpoint from
/// the previous frame and then the frame itself.
pub fn upsample(prev: &[f64], next: &[f64], substeps: usize) -> Vec<Vec<f64>> {
    (1..=substeps)
        .map(|k| {
            let s = k as f64 / substeps as f64;
            prev.iter().zip(next).map(|(a, b)| a + (b - a) * s).collect()
        })
        .collect()
}

/// Percent of frames with any joint outside its limits, and percent with any
/// touching sphere pair (no margin).
pub fn jv_sc_rates(reference: &[Vec<f64>], chain: &ChainModel) -> Result<(f64, f64), TrackerError> {
    if reference.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut jv = 0usize;
    let mut sc = 0usize;
    for q in reference {
        if q.iter().enumerate().any(|(j, &v)| !chain.within_limits(j, v)) {
            jv += 1;
        }
        let mut hit = false;
        for &pair in &chain.collision_pairs {
            if chain.pair_distance(q, pair)? < chain.contact_distance(pair) {
                hit = true;
                break;
            }
        }
        sc += usize::from(hit);
    }
    let n = reference.len() as f64;
    Ok((100.0 * jv as f64 / n, 100.0 * sc as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub mpjpe_mm: f64,
    pub e_vel: f64,
    pub e_acc: f64,
}

fn link_positions(chain: &ChainModel, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrackerError> {
    frames
        .iter()
        .map(|q| Ok(chain.forward_kinematics(q)?.endpoints.iter().flat_map(|p| [p[0], p[1]]).collect()))
        .collect()
}

/// MPJPE (mm) over link endpoints, and mean per-link L2 of finite-difference
/// FK velocity / acceleration discrepancies (m/s, m/s²).
pub fn compute_metrics(
    reference: &[Vec<f64>],
    executed: &[Vec<f64>],
    chain: &ChainModel,
    dt: f64,
) -> Result<TrackingMetrics, TrackerError> {
    if reference.len() != executed.len() {
        return Err(TrackerError::LengthMismatch {
            reference: reference.len(),
            executed: executed.len(),
        });
    }
    if reference.is_empty() {
        return Ok(TrackingMetrics::default());
    }
    let pr = link_positions(chain, reference)?;
    let pe = link_positions(chain, executed)?;
    let mean_link_l2 = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let links = a[0].len() / 2;
        let total: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                (0..links)
                    .map(|k| ((x[2 * k] - y[2 * k]).powi(2) + (x[2 * k + 1] - y[2 * k + 1]).powi(2)).sqrt())
                    .sum::<f64>()
            })
            .sum();
        total / (a.len() * links) as f64
    };
    let mpjpe_mm = 1000.0 * mean_link_l2(&pr, &pe);
    let (e_vel, e_acc) = if reference.len() >= 3 {
        let (vr, ar) = finite_diff_derivatives(&pr, dt)?;
        let (ve, ae) = finite_diff_derivatives(&pe, dt)?;
        (mean_link_l2(&vr, &ve), mean_link_l2(&ar, &ae))
    } else {
        (0.0, 0.0)
    };
    Ok(TrackingMetrics { mpjpe_mm, e_vel, e_acc })
}

/// Mean over unordered pairs of generations of the per-frame joint-angle L2
/// distance, averaged over frames.
pub fn multimodality(generations: &[Vec<Vec<f64>>]) -> Result<f64, TrackerError> {
    if generations.len() < 2 {
        return Err(TrackerError::TooFew {
            needed: 2,
            got: generations.len(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..generations.len() {
        for b in a + 1..generations.len() {
            let (ga, gb) = (&generations[a], &generations[b]);
            if ga.len() != gb.len() {
                return Err(TrackerError::LengthMismatch {
                    reference: ga.len(),
                    executed: gb.len(),
                });
            }
            let per_frame: f64 = ga
                .iter()
                .zip(gb)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
                .sum();
            total += per_frame / ga.len().max(1) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One generator call as seen by the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLog {
    pub window: u64,
    pub t: f64,
    pub prompt: String,
    pub accepted: bool,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    pub decisions: Vec<GateDecision>,
    /// Control steps `[start, end)` that tracked frames committed by this window.
    pub steps: [usize; 2],
    /// MPJPE over those steps; `None` when the episode failed before them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpjpe_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_step: Option<usize>,
    pub jv_rate: f64,
    pub sc_rate: f64,
    pub mpjpe_mm: f64,
    pub e_vel: f64,
    pub e_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmodality: Option<f64>,
    pub control_steps: usize,
    pub windows: Vec<WindowLog>,
}

/// Aligned 50 Hz streams of one episode plus the 25 fps committed reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub reference25: Vec<Vec<f64>>,
    pub reference50: Vec<Vec<f64>>,
    pub executed50: Vec<Vec<f64>>,
    pub failure_step: Option<usize>,
}

impl EpisodeTrace {
    /// Number of control steps that count toward metrics.
    pub fn valid_steps(&self) -> usize {
        self.failure_step.unwrap_or(self.executed50.len())
    }

    /// Prefix metrics, all computed on frames before the first failure.
    pub fn report(&self, chain: &ChainModel, control_dt: f64, windows: Vec<WindowLog>) -> Result<EpisodeReport, TrackerError> {
        let steps = self.valid_steps();
        let m = compute_metrics(&self.reference50[..steps], &self.executed50[..steps], chain, control_dt)?;
        // two control steps per 25 fps frame
        let frames25 = (steps / 2).min(self.reference25.len());
        let (jv, sc) = jv_sc_rates(&self.reference25[..frames25], chain)?;
        let windows = windows
            .into_iter()
            .map(|mut w| {
                let [a, b] = w.steps;
                w.mpjpe_mm = if b <= steps && b > a {
                    compute_metrics(&self.reference50[a..b], &self.executed50[a..b], chain, control_dt)
                        .ok()
                        .map(|m| m.mpjpe_mm)
                } else {
                    None
                };
                w
            })
            .collect();
        Ok(EpisodeReport {
            success: self.failure_step.is_none(),
            failure_step: self.failure_step,
            jv_rate: jv,
            sc_rate: sc,
            mpjpe_mm: m.mpjpe_mm,
            e_vel: m.e_vel,
            e_acc: m.e_acc,
            mmodality: None,
            control_steps: self.executed50.len(),
            windows,
        })
    }
}

/// Incremental 50 Hz tracking of a 25 fps reference stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub vel_limits: Vec<f64>,
    pub state: TrackerState,
    pub trace: EpisodeTrace,
    substeps: usize,
    last_ref: Vec<f64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, chain: &ChainModel, start: &[f64], frame_dt: f64) -> Result<Self, TrackerError> {
        cfg.validate(chain.n_joints())?;
        let substeps = (frame_dt / cfg.control_dt).round() as usize;
        if substeps == 0 || ((substeps as f64) * cfg.control_dt - frame_dt).abs() > 1e-9 {
            return Err(TrackerError::Config(format!(
                "frame_dt {frame_dt} is not a multiple of the control period"
            )));
        }
        Ok(Self {
            cfg,
            vel_limits: chain.vel_limits.clone(),
            state: TrackerState::at_rest(start),
            trace: EpisodeTrace::default(),
            substeps,
            last_ref: start.to_vec(),
        })
    }

    pub fn failed(&self) -> bool {
        self.trace.failure_step.is_some()
    }

    pub fn steps(&self) -> usize {
        self.trace.executed50.len()
    }

    /// Commits one 25 fps reference frame and runs its control substeps.
    /// A failed episode keeps recording (frozen) but never recovers.
    pub fn push_frame(&mut self, frame: &[f64]) {
        self.trace.reference25.push(frame.to_vec());
        let dt = self.cfg.control_dt;
        let mut prev = self.last_ref.clone();
        for target in upsample(&self.last_ref, frame, self.substeps) {
            let qd_ref: Vec<f64> = target.iter().zip(&prev).map(|(a, b)| (a - b) / dt).collect();
            if !self.failed() {
                match tracker_step(&self.cfg, &self.vel_limits, &self.state, &target, &qd_ref) {
                    Ok(s) if tracking_ok(&s.q, &target) => self.state = s,
                    Ok(s) => {
                        self.state = s;
                        self.trace.failure_step = Some(self.steps());
                    }
                    Err(_) => self.trace.failure_step = Some(self.steps()),
                }
            }
            self.trace.reference50.push(target.clone());
            self.trace.executed50.push(self.state.q.clone());
            prev = target;
        }
        self.last_ref = frame.to_vec();
    }
}
