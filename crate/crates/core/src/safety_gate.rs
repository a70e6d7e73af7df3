//! The three-stage gate: Mahalanobis prompt filter, directional-sensitivity
//! instability score, hard kinematic screen. Plus the stand-and-interpolate
//! fallback and the AUROC helper used to evaluate Stage 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::ChainModel;
use crate::rng::{derive, normal_vec, seeded};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("need at least {needed} embeddings to calibrate, got {got}")]
    TooFewEmbeddings { needed: usize, got: usize },
    #[error("covariance is singular even after regularization")]
    Singular,
    #[error("probe response is not finite")]
    NonFiniteProbe,
    #[error("probe config: {0}")]
    Probe(String),
    #[error("auroc needs non-empty score sets")]
    EmptyScores,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    SemanticOod,
    Unstable,
    Position,
    Velocity,
    Acceleration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reason {
    pub code: ReasonCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

impl Reason {
    fn code(code: ReasonCode) -> Self {
        Self {
            code,
            joint: None,
            frame: None,
        }
    }
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.code {
            ReasonCode::SemanticOod => "semantic_ood",
            ReasonCode::Unstable => "unstable",
            ReasonCode::Position => "position",
            ReasonCode::Velocity => "velocity",
            ReasonCode::Acceleration => "acceleration",
        };
        write!(f, "{name}")?;
        if let (Some(j), Some(t)) = (self.joint, self.frame) {
            write!(f, " joint {j} frame {t}")?;
        }
        Ok(())
    }
}

/// One gate verdict, also the JSON line written to the gate log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub stage: u8,
    pub accept: bool,
    pub score: f64,
    pub reason: Option<Reason>,
    /// Simulated episode time in seconds.
    pub t: f64,
}

impl GateDecision {
    pub fn at(mut self, t: f64) -> Self {
        self.t = t;
        self
    }
}

/// Nearest-rank percentile: the smallest sample such that at least
/// `ceil(p/100 · n)` samples are ≤ it.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[k.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGate {
    pub mean: Vec<f64>,
    /// Inverse of `Σ + ε_reg I`, row-major.
    pub precision: Vec<f64>,
    pub tau: f64,
    pub percentile: f64,
    pub eps_reg: f64,
}

impl SemanticGate {
    pub fn calibrate(embeddings: &[Vec<f64>], percentile_p: f64, eps_reg: f64) -> Result<Self, GateError> {
        let d = embeddings.first().map_or(0, Vec::len);
        if embeddings.len() < d + 1 || d == 0 {
            return Err(GateError::TooFewEmbeddings {
                needed: d + 1,
                got: embeddings.len(),
            });
        }
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; d];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for e in embeddings {
            let c = DVector::from_iterator(d, e.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        for i in 0..d {
            cov[(i, i)] += eps_reg;
        }
        let chol = cov.cholesky().ok_or(GateError::Singular)?;
        let inv = chol.inverse();
        // store symmetric row-major
        let precision = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
        let mut gate = Self {
            mean,
            precision,
            tau: 0.0,
            percentile: percentile_p,
            eps_reg,
        };
        let d2: Vec<f64> = embeddings.iter().map(|e| gate.d2(e)).collect();
        gate.tau = percentile(&d2, percentile_p);
        Ok(gate)
    }

    pub fn d2(&self, e: &[f64]) -> f64 {
        let d = self.mean.len();
        let c: Vec<f64> = e.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut total = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(&c).map(|(p, x)| p * x).sum();
            total += c[i] * s;
        }
        total
    }

    pub fn stage1(&self, e: &[f64]) -> GateDecision {
        let d2 = self.d2(e);
        let accept = d2 <= self.tau;
        GateDecision {
            stage: 1,
            accept,
            score: d2,
            reason: (!accept).then(|| Reason::code(ReasonCode::SemanticOod)),
            t: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub m: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            m: 16,
            delta: 1e-6,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if self.m < 2 {
            return Err(GateError::Probe("at least two probes are required".into()));
        }
        if !(self.delta > 0.0) {
            return Err(GateError::Probe("delta must be positive".into()));
        }
        Ok(())
    }

    /// `m` unit probes drawn from the stream for `(seed, window)`.
    pub fn probes(&self, window: u64, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded(derive(self.seed, &[0x7072_6f62, window]));
        (0..self.m)
            .map(|_| {
                let mut v = normal_vec(&mut rng, dim);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                v
            })
            .collect()
    }
}

/// Directional sensitivities `g_m = ε_mᵀ (v(z + δ ε_m) − v(z)) / δ` and their
/// population standard deviation `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instability {
    pub g: Vec<f64>,
    pub r: f64,
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn sensitivities(base: &[f64], probes: &[Vec<f64>], responses: &[&[f64]], delta: f64) -> Result<Instability, GateError> {
    let g: Vec<f64> = probes
        .iter()
        .zip(responses)
        .map(|(eps, vp)| {
            eps.iter()
                .zip(vp.iter().zip(base))
                .map(|(e, (a, b))| e * (a - b))
                .sum::<f64>()
                / delta
        })
        .collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(GateError::NonFiniteProbe);
    }
    Ok(Instability {
        r: population_std(&g),
        g,
    })
}

/// Evaluates all probes in one batch: `field` receives `[m + 1, d]` rows
/// (`z` first) and returns velocities of the same shape.
pub fn instability_score(
    field: impl Fn(&Tensor) -> Result<Tensor, TensorError>,
    z: &[f64],
    probes: &[Vec<f64>],
    delta: f64,
) -> Result<Instability, GateError> {
    let d = z.len();
    let mut rows = z.to_vec();
    for eps in probes {
        rows.extend(z.iter().zip(eps).map(|(a, e)| a + delta * e));
    }
    let v = field(&Tensor::matrix(probes.len() + 1, d, rows)?)?;
    if !v.all_finite() {
        return Err(GateError::NonFiniteProbe);
    }
    let responses: Vec<&[f64]> = (1..=probes.len()).map(|r| v.row_slice(r)).collect();
    sensitivities(v.row_slice(0), probes, &responses, delta)
}

/// The same score with one field call per probe.
pub fn instability_score_serial(
    field: impl Fn(&Tensor) -> Result<Tensor, TensorError>,
    z: &[f64],
    probes: &[Vec<f64>],
    delta: f64,
) -> Result<Instability, GateError> {
    let base = field(&Tensor::row(z))?;
    let responses: Vec<Tensor> = probes
        .iter()
        .map(|eps| field(&Tensor::row(&z.iter().zip(eps).map(|(a, e)| a + delta * e).collect::<Vec<_>>())))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&[f64]> = responses.iter().map(Tensor::data).collect();
    sensitivities(base.data(), probes, &refs, delta)
}

pub fn stage2(r: f64, tau_stab: f64) -> GateDecision {
    let accept = r <= tau_stab;
    GateDecision {
        stage: 2,
        accept,
        score: r,
        reason: (!accept).then(|| Reason::code(ReasonCode::Unstable)),
        t: 0.0,
    }
}

/// A single limit breach found by the kinematic screen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub code: ReasonCode,
    pub joint: usize,
    pub frame: usize,
    /// Excess relative to the limit: position uses half the joint range as
    /// the unit, velocity and acceleration use the limit itself.
    pub normalized: f64,
}

/// Normalized excess per family for one value; positive means violated.
pub fn position_excess(model: &ChainModel, j: usize, q: f64) -> f64 {
    let [lo, hi] = model.joint_limits[j];
    (q - hi).max(lo - q) / (0.5 * (hi - lo))
}

pub fn rate_excess(value: f64, limit: f64) -> f64 {
    value.abs() / limit - 1.0
}

/// Stage 3: positions, finite-difference velocities and accelerations of
/// every frame against the chain limits. The decision score is the largest
/// normalized excess (≤ 0 when accepted) and the reason names the worst breach.
pub fn stage3<F: AsRef<[f64]>>(frames: &[F], model: &ChainModel, frame_dt: f64) -> GateDecision {
    let mut worst: Option<Violation> = None;
    let mut score = f64::NEG_INFINITY;
    let mut consider = |code, joint, frame, e: f64| {
        if e > score {
            score = e;
        }
        if e > 0.0 && worst.is_none_or(|w| e > w.normalized) {
            worst = Some(Violation {
                code,
                joint,
                frame,
                normalized: e,
            });
        }
    };
    // same stencils as finite_diff_derivatives, without the allocations
    let t_len = frames.len();
    let q = |t: usize, j: usize| frames[t].as_ref()[j];
    for t in 0..t_len {
        for j in 0..model.n_joints() {
            consider(ReasonCode::Position, j, t, position_excess(model, j, q(t, j)));
            if t_len < 3 {
                continue;
            }
            let vel = match t {
                0 => (q(1, j) - q(0, j)) / frame_dt,
                x if x == t_len - 1 => (q(t_len - 1, j) - q(t_len - 2, j)) / frame_dt,
                x => (q(x + 1, j) - q(x - 1, j)) / (2.0 * frame_dt),
            };
            let (p, c, n) = match t {
                0 => (0, 1, 2),
                x if x == t_len - 1 => (t_len - 3, t_len - 2, t_len - 1),
                x => (x - 1, x, x + 1),
            };
            let acc = (q(n, j) - 2.0 * q(c, j) + q(p, j)) / (frame_dt * frame_dt);
            consider(ReasonCode::Velocity, j, t, rate_excess(vel, model.vel_limits[j]));
            consider(ReasonCode::Acceleration, j, t, rate_excess(acc, model.acc_limits[j]));
        }
    }
    let score = if score.is_finite() { score } else { 0.0 };
    GateDecision {
        stage: 3,
        accept: worst.is_none(),
        score,
        reason: worst.map(|w| Reason {
            code: w.code,
            joint: Some(w.joint),
            frame: Some(w.frame),
        }),
        t: 0.0,
    }
}

/// Interpolation from a captured pose to the nominal pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackState {
    pub active: bool,
    pub start: Vec<f64>,
    pub nominal: Vec<f64>,
    pub frames: usize,
    pub elapsed: usize,
}

pub const STAND_PROMPT: &str = "stand";

impl FallbackState {
    /// Uses `T_fb / frame_dt` interpolation frames, stretched if the distance
    /// to cover would otherwise break a velocity or acceleration limit.
    pub fn engage(start: &[f64], model: &ChainModel, t_fb: f64, frame_dt: f64) -> Self {
        let base = (t_fb / frame_dt).round().max(1.0) as usize;
        let mut needed = base;
        for j in 0..model.n_joints() {
            let dist = (model.nominal_pose[j] - start[j]).abs();
            let for_vel = (dist / (model.vel_limits[j] * frame_dt)).ceil() as usize;
            let for_acc = (dist / (model.acc_limits[j] * frame_dt * frame_dt)).ceil() as usize;
            needed = needed.max(for_vel).max(for_acc);
        }
        Self {
            active: true,
            start: start.to_vec(),
            nominal: model.nominal_pose.clone(),
            frames: needed,
            elapsed: 0,
        }
    }

    pub fn idle(model: &ChainModel) -> Self {
        Self {
            active: false,
            start: model.nominal_pose.clone(),
            nominal: model.nominal_pose.clone(),
            frames: 0,
            elapsed: 0,
        }
    }

    pub fn complete(&self) -> bool {
        self.elapsed >= self.frames
    }

    /// Next reference frame and the prompt that replaces the user's while the
    /// fallback runs. Holds the nominal pose after the last frame.
    pub fn step(&mut self) -> (Vec<f64>, &'static str) {
        self.elapsed = (self.elapsed + 1).min(self.frames);
        let s = if self.frames == 0 {
            1.0
        } else {
            self.elapsed as f64 / self.frames as f64
        };
        let frame = self
            .start
            .iter()
            .zip(&self.nominal)
            .map(|(a, b)| a + (b - a) * s)
            .collect();
        (frame, STAND_PROMPT)
    }
}

/// Probability that a random OOD score exceeds a random ID score, ties ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, GateError> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(GateError::EmptyScores);
    }
    let mut id = id_scores.to_vec();
    id.sort_by(f64::total_cmp);
    let mut twice_wins: u128 = 0;
    for &x in ood_scores {
        let below = id.partition_point(|&v| v < x);
        let not_above = id.partition_point(|&v| v <= x);
        twice_wins += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice_wins as f64 / (2.0 * id.len() as f64 * ood_scores.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn percentile_is_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 91.0), 10.0);
    }

    fn random_embeddings(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n).map(|_| normal_vec(&mut rng, d)).collect()
    }

    #[test]
    fn semantic_calibration_properties() {
        let data = random_embeddings(200, 4, 1);
        let gate = SemanticGate::calibrate(&data, 90.0, 1e-3).unwrap();
        let accepted = data.iter().filter(|e| gate.stage1(e).accept).count();
        assert_eq!(accepted, 180);
        let at_mean = gate.stage1(&gate.mean);
        assert!(at_mean.accept);
        assert_eq!(at_mean.score, 0.0);
        assert_eq!(SemanticGate::calibrate(&data, 90.0, 1e-3).unwrap(), gate);
        assert!(SemanticGate::calibrate(&data[..4], 90.0, 1e-3).is_err());
        let far = vec![50.0; 4];
        let d = gate.stage1(&far);
        assert!(!d.accept);
        assert_eq!(d.reason.unwrap().code, ReasonCode::SemanticOod);
    }

    #[test]
    fn identity_precision_gives_squared_euclidean_distance() {
        let mut rng = seeded(2);
        let gate = SemanticGate {
            mean: normal_vec(&mut rng, 5),
            precision: (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect(),
            tau: 1.0,
            percentile: 90.0,
            eps_reg: 0.0,
        };
        for _ in 0..10 {
            let e = normal_vec(&mut rng, 5);
            let direct: f64 = e.iter().zip(&gate.mean).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((gate.d2(&e) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mahalanobis_is_affine_invariant() {
        let data = random_embeddings(60, 3, 3);
        let t = [[2.0, 0.5, 0.0], [0.1, 1.0, -0.3], [0.0, 0.7, 3.0]];
        let shift = [1.0, -2.0, 0.5];
        let map = |e: &Vec<f64>| -> Vec<f64> {
            (0..3).map(|i| (0..3).map(|j| t[i][j] * e[j]).sum::<f64>() + shift[i]).collect()
        };
        let mapped: Vec<Vec<f64>> = data.iter().map(map).collect();
        let a = SemanticGate::calibrate(&data, 90.0, 0.0).unwrap();
        let b = SemanticGate::calibrate(&mapped, 90.0, 0.0).unwrap();
        for (x, y) in data.iter().zip(&mapped) {
            assert!((a.d2(x) - b.d2(y)).abs() < 1e-8);
        }
    }

    fn linear_field(diag: Vec<f64>) -> impl Fn(&Tensor) -> Result<Tensor, TensorError> {
        move |z: &Tensor| {
            let d = diag.len();
            let data = z.data().iter().enumerate().map(|(i, v)| v * diag[i % d]).collect();
            Tensor::new(z.shape().to_vec(), data)
        }
    }

    #[test]
    fn isotropic_linear_field_has_zero_instability() {
        let probes = ProbeConfig::default().probes(0, 16);
        let z = normal_vec(&mut seeded(4), 16);
        let s = instability_score(linear_field(vec![2.5; 16]), &z, &probes, 1e-6).unwrap();
        for g in &s.g {
            assert!((g - 2.5).abs() < 1e-6);
        }
        assert!(s.r <= 1e-9 || s.r < 1e-6, "{}", s.r);
        assert!(stage2(s.r, 1e-3).accept);
    }

    #[test]
    fn diagonal_linear_field_matches_quadratic_form() {
        let diag: Vec<f64> = (1..=16).map(f64::from).collect();
        let cfg = ProbeConfig::default();
        let probes = cfg.probes(7, 16);
        let z = normal_vec(&mut seeded(5), 16);
        let s = instability_score(linear_field(diag.clone()), &z, &probes, cfg.delta).unwrap();
        let exact: Vec<f64> = probes
            .iter()
            .map(|e| e.iter().zip(&diag).map(|(x, a)| a * x * x).sum())
            .collect();
        for (g, q) in s.g.iter().zip(&exact) {
            assert!((g - q).abs() <= 1e-6, "{g} vs {q}");
        }
        assert!((s.r - population_std(&exact)).abs() <= 1e-6);
        let doubled = instability_score(linear_field(diag), &z, &probes, 2.0 * cfg.delta).unwrap();
        for (a, b) in s.g.iter().zip(&doubled.g) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(!stage2(s.r, 0.0).accept);
    }

    #[test]
    fn batched_probes_equal_serial_bitwise() {
        let diag: Vec<f64> = (1..=8).map(|i| (i as f64).sin()).collect();
        let probes = ProbeConfig::default().probes(3, 8);
        let z = normal_vec(&mut seeded(6), 8);
        let a = instability_score(linear_field(diag.clone()), &z, &probes, 1e-6).unwrap();
        let b = instability_score_serial(linear_field(diag), &z, &probes, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probes_are_unit_and_seeded_per_window() {
        let cfg = ProbeConfig::default();
        let p = cfg.probes(1, 16);
        assert_eq!(p.len(), 16);
        for v in &p {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, cfg.probes(1, 16));
        assert_ne!(p, cfg.probes(2, 16));
        assert!(ProbeConfig { m: 1, ..cfg }.validate().is_err());
    }

    #[test]
    fn stage3_unit_cases() {
        let m = ChainModel::default();
        let dt = 0.04;
        let still = vec![m.nominal_pose.clone(); 5];
        let d = stage3(&still, &m, dt);
        assert!(d.accept && d.reason.is_none());

        // one frame just past the upper limit, neighbours just inside it
        let hi = m.joint_limits[3][1];
        let mut pos = still.clone();
        for f in pos.iter_mut() {
            f[3] = hi - 0.005;
        }
        pos[2][3] = hi + 0.01;
        let d = stage3(&pos, &m, dt);
        let r = d.reason.unwrap();
        assert_eq!((r.code, r.joint, r.frame), (ReasonCode::Position, Some(3), Some(2)));
        pos[2][3] = hi;
        assert!(stage3(&pos, &m, dt).accept);

        // velocity: a ramp whose slope exceeds the limit
        let ramp = |slope: f64| -> Vec<Vec<f64>> {
            (0..5)
                .map(|t| {
                    let mut q = m.nominal_pose.clone();
                    q[1] = -0.5 + slope * dt * t as f64;
                    q
                })
                .collect()
        };
        let fast = stage3(&ramp(m.vel_limits[1] * 1.01), &m, dt);
        assert_eq!(fast.reason.unwrap().code, ReasonCode::Velocity);
        assert_eq!(fast.reason.unwrap().joint, Some(1));
        assert!(stage3(&ramp(m.vel_limits[1] * 0.99), &m, dt).accept);

        // acceleration: a parabola whose curvature exceeds the limit
        let parab = |acc: f64| -> Vec<Vec<f64>> {
            (0..3)
                .map(|t| {
                    let mut q = m.nominal_pose.clone();
                    let time = dt * (t as f64 - 1.0);
                    q[2] = 0.5 * acc * time * time;
                    q
                })
                .collect()
        };
        let jerk = stage3(&parab(m.acc_limits[2] * 1.01), &m, dt);
        assert_eq!(jerk.reason.unwrap().code, ReasonCode::Acceleration);
        assert!(stage3(&parab(m.acc_limits[2] * 0.99), &m, dt).accept);
    }

    #[test]
    fn fallback_interpolates_and_holds() {
        let m = ChainModel::default();
        let mut fb = FallbackState::engage(&m.nominal_pose, &m, 1.0, 0.04);
        assert_eq!(fb.frames, 25);
        for _ in 0..30 {
            let (f, prompt) = fb.step();
            assert_eq!(f, m.nominal_pose);
            assert_eq!(prompt, "stand");
        }
        assert!(fb.complete());
    }

    #[test]
    fn fallback_output_passes_stage3() {
        let m = ChainModel::default();
        let mut rng = seeded(9);
        use rand::Rng as _;
        for _ in 0..100 {
            let start: Vec<f64> = m.joint_limits.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect();
            let mut fb = FallbackState::engage(&start, &m, 1.0, 0.04);
            let mut frames = vec![start.clone(), start.clone()];
            for _ in 0..fb.frames + 3 {
                frames.push(fb.step().0);
            }
            let d = stage3(&frames, &m, 0.04);
            assert!(d.accept, "{:?}", d.reason);
        }
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        assert!((auroc(&[1.0, 2.0, 3.0], &[2.5, 4.0]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force(id in prop::collection::vec(-5i32..5, 1..30), ood in prop::collection::vec(-5i32..5, 1..30)) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let mut wins = 0.0;
            for o in &ood {
                for i in &id {
                    wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
                }
            }
            let brute = wins / (id.len() * ood.len()) as f64;
            prop_assert!((auroc(&id, &ood).unwrap() - brute).abs() < 1e-12);
        }

        #[test]
        fn instability_is_probe_order_invariant(seed in 0u64..1000) {
            let diag: Vec<f64> = (0..6).map(|i| 1.0 + i as f64 * 0.3).collect();
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            let mut probes = cfg.probes(0, 6);
            let z = normal_vec(&mut seeded(seed), 6);
            let a = instability_score(linear_field(diag.clone()), &z, &probes, 1e-6).unwrap();
            probes.reverse();
            let b = instability_score(linear_field(diag), &z, &probes, 1e-6).unwrap();
            prop_assert!((a.r - b.r).abs() <= 1e-12 * a.r.max(1.0));
        }

        #[test]
        fn stage3_agrees_with_derivative_scan(seed in 0u64..5000, len in 1usize..12, spread in 0.0f64..0.3) {
            let m = ChainModel::default();
            let dt = 0.04;
            let mut rng = seeded(seed);
            let frames: Vec<Vec<f64>> = (0..len)
                .map(|_| m.nominal_pose.iter().zip(normal_vec(&mut rng, m.n_joints())).map(|(q, e)| q + spread * e).collect())
                .collect();
            let mut bad = frames.iter().any(|q| (0..m.n_joints()).any(|j| position_excess(&m, j, q[j]) > 0.0));
            if let Ok((vel, acc)) = crate::kinematics::finite_diff_derivatives(&frames, dt) {
                for t in 0..len {
                    for j in 0..m.n_joints() {
                        bad |= rate_excess(vel[t][j], m.vel_limits[j]) > 0.0;
                        bad |= rate_excess(acc[t][j], m.acc_limits[j]) > 0.0;
                    }
                }
            }
            prop_assert_eq!(stage3(&frames, &m, dt).accept, !bad);
        }
    }
}
