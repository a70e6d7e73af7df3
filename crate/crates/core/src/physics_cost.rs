//! Differentiable executability costs: joint-limit and self-collision
//! barriers, joint smoothness and CoM stability, their weighted sum, and the
//! gradient of that sum with respect to a motion latent.
//!
//! Costs are summed (not averaged) over frames. Derivatives use the same
//! finite-difference stencils as [`crate::kinematics::finite_diff_derivatives`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    finite_diff_derivatives, link_directions, pair_distances_tape, project, ChainModel,
    KinematicMatrices, KinematicsError,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vae::Vae;

/// Keeps the pair-distance square root differentiable at coincident centers.
const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient from the {term} cost term")]
    NonFiniteGradient { term: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub lambda_lim: f64,
    pub lambda_col: f64,
    pub lambda_sm: f64,
    pub lambda_stab: f64,
    pub beta_q: f64,
    pub beta_c: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_lim: 1.0,
            lambda_col: 0.01,
            lambda_sm: 0.1,
            lambda_stab: 1.0,
            beta_q: 50.0,
            beta_c: 10.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.lambda_lim,
            self.lambda_col,
            self.lambda_sm,
            self.lambda_stab,
            self.beta_q,
            self.beta_c,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err("cost weights must be finite and non-negative".into())
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_lim: self.lambda_lim * k,
            lambda_col: self.lambda_col * k,
            lambda_sm: self.lambda_sm * k,
            lambda_stab: self.lambda_stab * k,
            ..*self
        }
    }
}

/// Guidance scale `α(u)` rising linearly over the integration, and the
/// per-element clamp applied to the raw cost gradient before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub clamp: f64,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self {
            alpha_start: 500.0,
            alpha_end: 10_000.0,
            clamp: 0.2,
        }
    }
}

impl GuidanceSchedule {
    pub fn off() -> Self {
        Self {
            alpha_start: 0.0,
            alpha_end: 0.0,
            clamp: 0.2,
        }
    }

    pub fn alpha(&self, u: f64) -> f64 {
        self.alpha_start + (self.alpha_end - self.alpha_start) * u
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha_start >= 0.0 && self.alpha_start <= self.alpha_end) {
            return Err("guidance requires 0 <= alpha_start <= alpha_end".into());
        }
        if !(self.clamp > 0.0) {
            return Err("guidance clamp must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub lim: f64,
    pub col: f64,
    pub sm: f64,
    pub stab: f64,
    /// `Σ λ_i C_i`
    pub total: f64,
}

impl CostBreakdown {
    pub const CSV_HEADER: &'static str = "c_lim,c_col,c_sm,c_stab,c_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.lim, self.col, self.sm, self.stab, self.total
        )
    }
}

fn relu_sq(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

pub fn c_lim(frames: &[Vec<f64>], model: &ChainModel) -> f64 {
    frames
        .iter()
        .map(|q| {
            q.iter()
                .zip(&model.joint_limits)
                .map(|(&qj, &[lo, hi])| relu_sq(qj - hi) + relu_sq(lo - qj))
                .sum::<f64>()
        })
        .sum()
}

pub fn c_col(frames: &[Vec<f64>], model: &ChainModel) -> Result<f64, CostError> {
    let mut total = 0.0;
    for q in frames {
        let fk = model.forward_kinematics(q)?;
        for &[a, b] in &model.collision_pairs {
            let [ax, ay] = fk.sphere_centers[a];
            let [bx, by] = fk.sphere_centers[b];
            let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            total += relu_sq(model.contact_distance([a, b]) + model.margin - d);
        }
    }
    Ok(total)
}

fn sum_sq(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().map(|v| v * v).sum()
}

pub fn c_sm(frames: &[Vec<f64>], dt: f64, beta_q: f64) -> Result<f64, CostError> {
    let (vel, acc) = finite_diff_derivatives(frames, dt)?;
    Ok(sum_sq(&vel) + beta_q * sum_sq(&acc))
}

pub fn c_stab(frames: &[Vec<f64>], model: &ChainModel, dt: f64, beta_c: f64) -> Result<f64, CostError> {
    let com: Vec<Vec<f64>> = frames
        .iter()
        .map(|q| model.com(q).map(|c| c.to_vec()))
        .collect::<Result<_, _>>()?;
    let (vel, acc) = finite_diff_derivatives(&com, dt)?;
    Ok(sum_sq(&vel) + beta_c * sum_sq(&acc))
}

pub fn total_cost(
    frames: &[Vec<f64>],
    model: &ChainModel,
    dt: f64,
    weights: &CostWeights,
) -> Result<CostBreakdown, CostError> {
    let lim = c_lim(frames, model);
    let col = c_col(frames, model)?;
    let sm = c_sm(frames, dt, weights.beta_q)?;
    let stab = c_stab(frames, model, dt, weights.beta_c)?;
    let total = weights.lambda_lim * lim
        + weights.lambda_col * col
        + weights.lambda_sm * sm
        + weights.lambda_stab * stab;
    Ok(CostBreakdown {
        lim,
        col,
        sm,
        stab,
        total,
    })
}

/// `[T, T]` first- and second-derivative stencils, transposed so that a
/// `[rows, T]` block times the matrix yields per-frame derivatives.
fn stencils(t: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut d1 = vec![0.0; t * t];
    let mut d2 = vec![0.0; t * t];
    // entry (s, tau): coefficient of frame s in the derivative at frame tau
    let idx = |s: usize, tau: usize| s * t + tau;
    for tau in 0..t {
        match tau {
            0 => {
                d1[idx(1, 0)] += 1.0 / dt;
                d1[idx(0, 0)] -= 1.0 / dt;
            }
            x if x == t - 1 => {
                d1[idx(t - 1, x)] += 1.0 / dt;
                d1[idx(t - 2, x)] -= 1.0 / dt;
            }
            x => {
                d1[idx(x + 1, x)] += 1.0 / (2.0 * dt);
                d1[idx(x - 1, x)] -= 1.0 / (2.0 * dt);
            }
        }
        let (p, c, n) = match tau {
            0 => (0, 1, 2),
            x if x == t - 1 => (t - 3, t - 2, t - 1),
            x => (x - 1, x, x + 1),
        };
        let inv = 1.0 / (dt * dt);
        d2[idx(p, tau)] += inv;
        d2[idx(c, tau)] -= 2.0 * inv;
        d2[idx(n, tau)] += inv;
    }
    (d1, d2)
}

/// Kronecker expansion of a `[T, T]` stencil to `[T·n, T·n]`, acting on
/// frame-major packed rows.
fn kron_joints(stencil: &[f64], t: usize, n: usize) -> Tensor {
    let m = t * n;
    let mut data = vec![0.0; m * m];
    for s in 0..t {
        for tau in 0..t {
            let c = stencil[s * t + tau];
            if c == 0.0 {
                continue;
            }
            for j in 0..n {
                data[(s * n + j) * m + tau * n + j] = c;
            }
        }
    }
    Tensor::matrix(m, m, data).expect("shape")
}

/// Precomputed constants for evaluating the total cost on a tape over a
/// `[batch, T·n]` block of frame-major trajectories.
#[derive(Debug, Clone)]
pub struct CostProgram {
    pub frames: usize,
    pub n_joints: usize,
    pub dt: f64,
    pub weights: CostWeights,
    kin: KinematicMatrices,
    joint_d1: Tensor,
    joint_d2: Tensor,
    com_d1: Tensor,
    com_d2: Tensor,
    q_max: Vec<f64>,
    q_min: Vec<f64>,
    onset: Vec<f64>,
}

/// The four weighted terms as separate tape nodes, plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct CostNodes {
    pub lim: Var,
    pub col: Var,
    pub sm: Var,
    pub stab: Var,
    pub total: Var,
}

impl CostProgram {
    pub fn new(model: &ChainModel, frames: usize, dt: f64, weights: CostWeights) -> Self {
        assert!(frames >= 3, "cost needs at least three frames");
        let n = model.n_joints();
        let (d1, d2) = stencils(frames, dt);
        Self {
            frames,
            n_joints: n,
            dt,
            weights,
            kin: model.matrices(),
            joint_d1: kron_joints(&d1, frames, n),
            joint_d2: kron_joints(&d2, frames, n),
            com_d1: Tensor::matrix(frames, frames, d1).expect("shape"),
            com_d2: Tensor::matrix(frames, frames, d2).expect("shape"),
            q_max: model.joint_limits.iter().map(|l| l[1]).collect(),
            q_min: model.joint_limits.iter().map(|l| l[0]).collect(),
            onset: model
                .collision_pairs
                .iter()
                .map(|&p| model.contact_distance(p) + model.margin)
                .collect(),
        }
    }

    fn tiled(&self, per_joint: &[f64], rows: usize) -> Tensor {
        let cols = self.frames * per_joint.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * self.frames {
            data.extend_from_slice(per_joint);
        }
        Tensor::matrix(rows, cols, data).expect("shape")
    }

    /// Builds every weighted cost term for `traj` (`[batch, T·n]`). The
    /// totals are summed over the batch, so row gradients stay independent.
    pub fn build(&self, tape: &mut Tape, traj: Var) -> Result<CostNodes, TensorError> {
        let rows = tape.value(traj).rows();
        let (t, n) = (self.frames, self.n_joints);
        let w = self.weights;

        // joint limits
        let qmax = tape.constant(self.tiled(&self.q_max, rows))?;
        let qmin = tape.constant(self.tiled(&self.q_min, rows))?;
        let over = tape.sub(traj, qmax)?;
        let over = tape.relu(over)?;
        let under = tape.sub(qmin, traj)?;
        let under = tape.relu(under)?;
        let over = tape.square(over)?;
        let under = tape.square(under)?;
        let lim = tape.add(over, under)?;
        let lim = tape.sum(lim)?;
        let lim = tape.scalar_mul(lim, w.lambda_lim)?;

        // self-collision, all frames as one batch of poses
        let kv = self.kin.bind(tape)?;
        let poses = tape.reshape(traj, &[rows * t, n])?;
        let dirs = link_directions(tape, &kv, poses)?;
        let col = if self.onset.is_empty() {
            let z = tape.constant(Tensor::scalar(0.0))?;
            tape.scalar_mul(z, w.lambda_col)?
        } else {
            let d = pair_distances_tape(tape, &kv, dirs, DISTANCE_EPS)?;
            let mut onset = Vec::with_capacity(rows * t * self.onset.len());
            for _ in 0..rows * t {
                onset.extend_from_slice(&self.onset);
            }
            let onset = tape.constant(Tensor::matrix(rows * t, self.onset.len(), onset)?)?;
            let pen = tape.sub(onset, d)?;
            let pen = tape.relu(pen)?;
            let pen = tape.square(pen)?;
            let col = tape.sum(pen)?;
            tape.scalar_mul(col, w.lambda_col)?
        };

        // joint smoothness
        let jd1 = tape.constant(self.joint_d1.clone())?;
        let jd2 = tape.constant(self.joint_d2.clone())?;
        let qd = tape.matmul(traj, jd1)?;
        let qdd = tape.matmul(traj, jd2)?;
        let qd = tape.square(qd)?;
        let qdd = tape.square(qdd)?;
        let qd = tape.sum(qd)?;
        let qdd = tape.sum(qdd)?;
        let qdd = tape.scalar_mul(qdd, w.beta_q)?;
        let sm = tape.add(qd, qdd)?;
        let sm = tape.scalar_mul(sm, w.lambda_sm)?;

        // CoM stability
        let (cx, cy) = project(tape, dirs, kv.com)?;
        let cd1 = tape.constant(self.com_d1.clone())?;
        let cd2 = tape.constant(self.com_d2.clone())?;
        let mut stab_terms = Vec::with_capacity(4);
        for c in [cx, cy] {
            let c = tape.reshape(c, &[rows, t])?;
            let v = tape.matmul(c, cd1)?;
            let a = tape.matmul(c, cd2)?;
            let v = tape.square(v)?;
            let a = tape.square(a)?;
            let v = tape.sum(v)?;
            let a = tape.sum(a)?;
            stab_terms.push(v);
            stab_terms.push(tape.scalar_mul(a, w.beta_c)?);
        }
        let s01 = tape.add(stab_terms[0], stab_terms[1])?;
        let s23 = tape.add(stab_terms[2], stab_terms[3])?;
        let stab = tape.add(s01, s23)?;
        let stab = tape.scalar_mul(stab, w.lambda_stab)?;

        let a = tape.add(lim, col)?;
        let b = tape.add(sm, stab)?;
        let total = tape.add(a, b)?;
        Ok(CostNodes {
            lim,
            col,
            sm,
            stab,
            total,
        })
    }
}

/// Rows of `(last history frame ∥ decoded future)`, the trajectory the costs
/// are evaluated on.
pub fn seam_trajectory(last_history: &[f64], future: &[Vec<f64>]) -> Vec<Vec<f64>> {
    std::iter::once(last_history.to_vec())
        .chain(future.iter().cloned())
        .collect()
}

/// Gradient of the total cost of `Dec(history, z)` with respect to `z`, for a
/// batch of latents. Rows are independent windows.
#[derive(Debug, Clone)]
pub struct LatentGradient {
    /// `[batch, d_z]`
    pub grad: Tensor,
    /// Weighted total cost per batch (summed over rows).
    pub cost: f64,
}

/// Evaluates `∇_z C(Dec(history, z))` through the frozen decoder. `history`
/// is `[batch, T_hist·n]` in radians and `z` is `[batch, d_z]`.
pub fn grad_wrt_latent(
    z: &Tensor,
    history: &Tensor,
    vae: &Vae,
    program: &CostProgram,
) -> Result<LatentGradient, CostError> {
    let run = |only: Option<&'static str>| -> Result<LatentGradient, TensorError> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone())?;
        let traj = vae.decode_with_seam_tape(&mut tape, history, zv)?;
        let nodes = program.build(&mut tape, traj)?;
        let root = match only {
            None => nodes.total,
            Some("lim") => nodes.lim,
            Some("col") => nodes.col,
            Some("sm") => nodes.sm,
            Some(_) => nodes.stab,
        };
        let cost = tape.value(nodes.total).item();
        let grads = tape.backward(root)?;
        Ok(LatentGradient {
            grad: grads.get(zv),
            cost,
        })
    };
    match run(None) {
        Ok(g) => Ok(g),
        Err(TensorError::NonFinite { .. }) => {
            for term in ["lim", "col", "sm", "stab"] {
                if run(Some(term)).is_err() {
                    return Err(CostError::NonFiniteGradient { term });
                }
            }
            Err(CostError::NonFiniteGradient { term: "total" })
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};
    use std::f64::consts::PI;

    const DT: f64 = 0.04;

    fn resting(model: &ChainModel, frames: usize) -> Vec<Vec<f64>> {
        vec![model.nominal_pose.clone(); frames]
    }

    #[test]
    fn paper_weights_are_defaults() {
        let w = CostWeights::default();
        assert_eq!(
            (w.lambda_lim, w.lambda_col, w.lambda_sm, w.lambda_stab, w.beta_q, w.beta_c),
            (1.0, 0.01, 0.1, 1.0, 50.0, 10.0)
        );
        let g = GuidanceSchedule::default();
        assert_eq!((g.alpha_start, g.alpha_end, g.clamp), (500.0, 10_000.0, 0.2));
        assert_eq!(g.alpha(0.0), 500.0);
        assert_eq!(g.alpha(1.0), 10_000.0);
    }

    #[test]
    fn c_lim_cases() {
        let m = ChainModel::default();
        assert_eq!(c_lim(&resting(&m, 4), &m), 0.0);
        let mut frames = resting(&m, 4);
        frames[2][3] = m.joint_limits[3][1] + 0.1;
        assert!((c_lim(&frames, &m) - 0.01).abs() < 1e-12);
        frames[2][3] = m.joint_limits[3][0] - 0.1;
        assert!((c_lim(&frames, &m) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn c_lim_grows_strictly_with_violation() {
        let m = ChainModel::default();
        let mut prev = 0.0;
        for k in 1..20 {
            let mut frames = resting(&m, 3);
            frames[1][2] = m.joint_limits[2][1] + 0.01 * k as f64;
            let c = c_lim(&frames, &m);
            assert!(c > prev);
            prev = c;
        }
    }

    /// Two-link chain with a sphere on each end of a bent pose, used to place
    /// a pair at an exact distance.
    fn pair_chain() -> ChainModel {
        ChainModel {
            link_lengths: vec![1.0, 1.0, 1.0],
            link_masses: vec![1.0; 3],
            joint_limits: vec![[-3.2, 3.2]; 3],
            vel_limits: vec![10.0; 3],
            acc_limits: vec![100.0; 3],
            spheres: vec![
                crate::kinematics::Sphere {
                    link: 0,
                    offset: 0.0,
                    radius: 0.05,
                },
                crate::kinematics::Sphere {
                    link: 2,
                    offset: 1.0,
                    radius: 0.05,
                },
            ],
            collision_pairs: vec![[0, 1]],
            margin: 0.03,
            nominal_pose: vec![0.0; 3],
        }
    }

    /// Bends joints 2 and 3 equally until the tip sphere sits at distance `d`
    /// from the base sphere. The distance falls monotonically from 3 to 0 as
    /// the bend goes from 0 to 2π/3, so bisection finds it.
    fn pose_at_distance(d: f64) -> Vec<f64> {
        let m = pair_chain();
        let (mut lo, mut hi) = (0.0, 2.0 * PI / 3.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m.pair_distance(&[0.0, mid, mid], [0, 1]).unwrap() > d {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        vec![0.0, b, b]
    }

    #[test]
    fn c_col_cases() {
        let m = pair_chain();
        let onset = 0.05 + 0.05 + 0.03;
        let far = vec![vec![0.0; 3]; 3];
        assert_eq!(c_col(&far, &m).unwrap(), 0.0);
        let boundary = vec![pose_at_distance(onset)];
        let d = m.pair_distance(&boundary[0], [0, 1]).unwrap();
        assert!((d - onset).abs() < 1e-12);
        assert!(c_col(&boundary, &m).unwrap() < 1e-24);
        // penetration depth 0.02 m → 0.02² = 4e-4
        let deep = vec![pose_at_distance(onset - 0.02)];
        assert!((c_col(&deep, &m).unwrap() - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn smoothness_and_stability_cases() {
        let m = ChainModel::default();
        let still = resting(&m, 5);
        assert_eq!(c_sm(&still, DT, 50.0).unwrap(), 0.0);
        assert_eq!(c_stab(&still, &m, DT, 10.0).unwrap(), 0.0);
        assert!(c_sm(&still[..2], DT, 50.0).is_err());

        // link 2 is three times link 1 and folded back, so the midpoints sit
        // at +0.5 and -0.5 along the base direction: CoM on the base axis
        let sym = ChainModel {
            link_lengths: vec![1.0, 3.0],
            link_masses: vec![1.0, 1.0],
            joint_limits: vec![[-10.0, 10.0], [-4.0, 4.0]],
            vel_limits: vec![10.0; 2],
            acc_limits: vec![100.0; 2],
            spheres: vec![],
            collision_pairs: vec![],
            margin: 0.03,
            nominal_pose: vec![0.0; 2],
        };
        let frames: Vec<Vec<f64>> = (0..6).map(|i| vec![0.3 * i as f64, PI]).collect();
        for q in &frames {
            let c = sym.com(q).unwrap();
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        }
        assert!(c_stab(&frames, &sym, DT, 10.0).unwrap() < 1e-18);
        assert!(c_sm(&frames, DT, 50.0).unwrap() > 0.0);
    }

    #[test]
    fn beta_q_scales_acceleration_term_linearly() {
        let mut rng = seeded(2);
        let frames: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut rng, 3)).collect();
        let vel_only = c_sm(&frames, DT, 0.0).unwrap();
        let a1 = c_sm(&frames, DT, 50.0).unwrap() - vel_only;
        let a2 = c_sm(&frames, DT, 100.0).unwrap() - vel_only;
        assert!((a2 - 2.0 * a1).abs() <= 1e-9 * a2.abs());
    }

    #[test]
    fn total_is_weighted_sum_and_zeroing_removes_term() {
        let m = ChainModel::default();
        let mut rng = seeded(4);
        let frames: Vec<Vec<f64>> = (0..9)
            .map(|_| {
                m.nominal_pose
                    .iter()
                    .zip(normal_vec(&mut rng, 8))
                    .map(|(q, e)| q + 1.5 * e)
                    .collect()
            })
            .collect();
        let w = CostWeights::default();
        let b = total_cost(&frames, &m, DT, &w).unwrap();
        let hand = w.lambda_lim * b.lim + w.lambda_col * b.col + w.lambda_sm * b.sm + w.lambda_stab * b.stab;
        assert_eq!(b.total, hand);
        let no_sm = total_cost(&frames, &m, DT, &CostWeights { lambda_sm: 0.0, ..w }).unwrap();
        assert!((b.total - no_sm.total - w.lambda_sm * b.sm).abs() <= 1e-9 * b.total);
        let rest = total_cost(&resting(&m, 9), &m, DT, &w).unwrap();
        assert_eq!(rest.total, 0.0);
    }

    #[test]
    fn taped_program_matches_plain_costs() {
        let m = ChainModel::default();
        let w = CostWeights::default();
        let prog = CostProgram::new(&m, 9, DT, w);
        let mut rng = seeded(9);
        let batch: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                (0..9)
                    .map(|_| {
                        m.nominal_pose
                            .iter()
                            .zip(normal_vec(&mut rng, 8))
                            .map(|(q, e)| q + 1.8 * e)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<f64> = batch.iter().flatten().flatten().copied().collect();
        let mut tape = Tape::new();
        let traj = tape.constant(Tensor::matrix(3, 72, flat).unwrap()).unwrap();
        let nodes = prog.build(&mut tape, traj).unwrap();
        let mut sums = CostBreakdown::default();
        for frames in &batch {
            let b = total_cost(frames, &m, DT, &w).unwrap();
            sums.lim += w.lambda_lim * b.lim;
            sums.col += w.lambda_col * b.col;
            sums.sm += w.lambda_sm * b.sm;
            sums.stab += w.lambda_stab * b.stab;
            sums.total += b.total;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        assert!(sums.col > 0.0, "test poses should collide somewhere");
        assert!(close(tape.value(nodes.lim).item(), sums.lim));
        assert!(close(tape.value(nodes.col).item(), sums.col));
        assert!(close(tape.value(nodes.sm).item(), sums.sm));
        assert!(close(tape.value(nodes.stab).item(), sums.stab));
        assert!(close(tape.value(nodes.total).item(), sums.total));
    }

    mod latent {
        use super::*;
        use crate::motion_data::{default_primitives, generate_dataset, DatasetSpec, MotionWindow};
        use crate::vae::{history_rows, future_rows, train_vae, VaeConfig};
        use std::sync::OnceLock;

        fn fixture() -> &'static (Vae, Vec<MotionWindow>) {
            static F: OnceLock<(Vae, Vec<MotionWindow>)> = OnceLock::new();
            F.get_or_init(|| {
                let chain = ChainModel::default();
                let spec = DatasetSpec {
                    trajectories_per_primitive: 3,
                    ..DatasetSpec::default()
                };
                let ds = generate_dataset(&spec, &default_primitives(&chain), 8).unwrap();
                let cfg = VaeConfig {
                    d_z: 6,
                    hidden: vec![32],
                    iterations: 150,
                    ..VaeConfig::default()
                };
                let (vae, _) = train_vae(&ds.train, &[], &cfg).unwrap();
                let mut picked: Vec<MotionWindow> = Vec::new();
                for name in ["stand", "high step", "curl up", "wave hands"] {
                    let w = ds.train.iter().find(|w| ds.primitive_of(w) == name).unwrap();
                    picked.push(w.clone());
                }
                (vae, picked)
            })
        }

        fn program(w: CostWeights) -> CostProgram {
            CostProgram::new(&ChainModel::default(), 9, DT, w)
        }

        fn plain_total(vae: &Vae, h: &Tensor, z: &[f64], prog: &CostProgram) -> f64 {
            let fut = vae.decode(h, &Tensor::row(z)).unwrap();
            let n = 8;
            let hist = h.row_slice(0);
            let last = hist[hist.len() - n..].to_vec();
            let frames: Vec<Vec<f64>> = std::iter::once(last)
                .chain(fut.data().chunks(n).map(<[f64]>::to_vec))
                .collect();
            total_cost(&frames, &ChainModel::default(), DT, &prog.weights)
                .unwrap()
                .total
        }

        fn check_fd(vae: &Vae, w: &MotionWindow, z: &[f64], prog: &CostProgram) {
            let h = history_rows(&[w]);
            let g = grad_wrt_latent(&Tensor::row(z), &h, vae, prog).unwrap().grad;
            let step = 1e-5;
            for i in 0..z.len() {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[i] += step;
                zm[i] -= step;
                let fd = (plain_total(vae, &h, &zp, prog) - plain_total(vae, &h, &zm, prog)) / (2.0 * step);
                let a = g.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                assert!(rel <= 1e-5, "coordinate {i}: {a} vs {fd} ({rel})");
            }
        }

        #[test]
        fn gradient_matches_finite_differences() {
            let (vae, windows) = fixture();
            let prog = program(CostWeights::default());
            let mut rng = seeded(11);
            for w in windows {
                let z = normal_vec(&mut rng, vae.d_z());
                check_fd(vae, w, &z, &prog);
            }
        }

        #[test]
        fn stand_latent_has_only_smoothness_gradient() {
            let (vae, windows) = fixture();
            let stand = &windows[0];
            let (mu, _) = vae.encode(&history_rows(&[stand]), &future_rows(&[stand])).unwrap();
            let h = history_rows(&[stand]);
            let w = CostWeights::default();
            let barriers = program(CostWeights {
                lambda_sm: 0.0,
                lambda_stab: 0.0,
                ..w
            });
            let g = grad_wrt_latent(&mu, &h, vae, &barriers).unwrap();
            assert_eq!(g.cost, 0.0);
            assert!(g.grad.data().iter().all(|v| *v == 0.0));
            let smooth_only = program(CostWeights {
                lambda_lim: 0.0,
                lambda_col: 0.0,
                ..w
            });
            let full = grad_wrt_latent(&mu, &h, vae, &program(w)).unwrap();
            let smooth = grad_wrt_latent(&mu, &h, vae, &smooth_only).unwrap();
            for (a, b) in full.grad.data().iter().zip(smooth.grad.data()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            check_fd(vae, stand, mu.data(), &smooth_only);
        }

        #[test]
        fn gradient_is_linear_in_lambda() {
            let (vae, windows) = fixture();
            let w = CostWeights::default();
            let z = Tensor::row(&normal_vec(&mut seeded(5), vae.d_z()));
            let h = history_rows(&[&windows[1]]);
            let g1 = grad_wrt_latent(&z, &h, vae, &program(w)).unwrap().grad;
            let g2 = grad_wrt_latent(&z, &h, vae, &program(w.scaled(2.0))).unwrap().grad;
            for (a, b) in g1.data().iter().zip(g2.data()) {
                assert_eq!(2.0 * a, *b);
            }
        }

        #[test]
        fn batched_rows_match_single_rows() {
            let (vae, windows) = fixture();
            let prog = program(CostWeights::default());
            let refs: Vec<&MotionWindow> = windows.iter().collect();
            let h = history_rows(&refs);
            let z = Tensor::matrix(refs.len(), vae.d_z(), normal_vec(&mut seeded(6), refs.len() * vae.d_z())).unwrap();
            let batched = grad_wrt_latent(&z, &h, vae, &prog).unwrap().grad;
            for r in 0..refs.len() {
                let one = grad_wrt_latent(&Tensor::row(z.row_slice(r)), &history_rows(&refs[r..r + 1]), vae, &prog)
                    .unwrap()
                    .grad;
                for (a, b) in one.data().iter().zip(batched.row_slice(r)) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn clamped_descent_step_does_not_increase_cost() {
            let (vae, windows) = fixture();
            let prog = program(CostWeights::default());
            let mut rng = seeded(8);
            for w in &windows[1..] {
                let h = history_rows(&[w]);
                let z: Vec<f64> = normal_vec(&mut rng, vae.d_z()).iter().map(|v| 2.0 * v).collect();
                let g = grad_wrt_latent(&Tensor::row(&z), &h, vae, &prog).unwrap().grad;
                let before = plain_total(vae, &h, &z, &prog);
                for step in [1e-4, 1e-5] {
                    let moved: Vec<f64> = z
                        .iter()
                        .zip(g.data())
                        .map(|(zi, gi)| zi - step * gi.clamp(-0.2, 0.2))
                        .collect();
                    let after = plain_total(vae, &h, &moved, &prog);
                    assert!(after <= before + 1e-9, "{before} -> {after}");
                }
            }
        }
    }
}
