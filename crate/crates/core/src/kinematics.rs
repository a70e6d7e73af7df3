//! Planar serial chain: forward kinematics, center of mass, collision-sphere
//! geometry and finite-difference time derivatives.
//!
//! The base is fixed at the origin, the zero pose lies along +x and joint
//! angles accumulate along the chain. Each quantity has a plain version and a
//! taped version; the taped versions express FK as products with constant
//! matrices so a whole batch of frames is one matmul.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Result as TensorResult, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("total link mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("invalid sphere index {index} (chain has {count} spheres)")]
    SphereIndex { index: usize, count: usize },
    #[error("collision pair ({0}, {1}) must reference two distinct spheres")]
    SelfPair(usize, usize),
    #[error("trajectory needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("invalid chain: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, KinematicsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub link: usize,
    /// Position along the link, 0 at its proximal joint and 1 at its tip.
    pub offset: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainModel {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    /// Per-joint `[q_min, q_max]` in radians.
    pub joint_limits: Vec<[f64; 2]>,
    pub vel_limits: Vec<f64>,
    pub acc_limits: Vec<f64>,
    pub spheres: Vec<Sphere>,
    pub collision_pairs: Vec<[usize; 2]>,
    pub margin: f64,
    /// Standing pose used by the "stand" primitive and the safe fallback.
    pub nominal_pose: Vec<f64>,
}

impl Default for ChainModel {
    fn default() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let sphere = |link, offset, radius| Sphere {
            link,
            offset,
            radius,
        };
        Self {
            link_lengths: vec![0.30, 0.28, 0.26, 0.24, 0.22, 0.20, 0.18, 0.16],
            link_masses: vec![3.0, 2.6, 2.2, 1.8, 1.5, 1.2, 1.0, 0.8],
            joint_limits: vec![
                [half_pi - 1.4, half_pi + 1.4],
                [-2.0, 2.0],
                [-2.0, 2.0],
                [-2.0, 2.0],
                [-1.8, 1.8],
                [-1.8, 1.8],
                [-1.6, 1.6],
                [-1.6, 1.6],
            ],
            vel_limits: vec![8.0; 8],
            acc_limits: vec![150.0; 8],
            spheres: vec![
                sphere(1, 0.5, 0.08),
                sphere(2, 0.5, 0.07),
                sphere(4, 0.5, 0.06),
                sphere(5, 0.5, 0.05),
                sphere(6, 0.5, 0.04),
                sphere(7, 1.0, 0.03),
            ],
            collision_pairs: vec![[0, 2], [0, 3], [0, 4], [0, 5], [1, 4], [1, 5]],
            margin: 0.03,
            nominal_pose: vec![half_pi, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub endpoints: Vec<[f64; 2]>,
    pub sphere_centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub frames: Vec<Vec<f64>>,
    pub frame_dt: f64,
}

impl ChainModel {
    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        let bad = |msg: String| Err(KinematicsError::Invalid(msg));
        if n == 0 {
            return bad("chain has no links".into());
        }
        for (name, len) in [
            ("link_masses", self.link_masses.len()),
            ("joint_limits", self.joint_limits.len()),
            ("vel_limits", self.vel_limits.len()),
            ("acc_limits", self.acc_limits.len()),
            ("nominal_pose", self.nominal_pose.len()),
        ] {
            if len != n {
                return bad(format!("{name} has {len} entries, chain has {n} joints"));
            }
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return bad("link lengths must be positive".into());
        }
        if self.link_masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return bad("link masses must be non-negative".into());
        }
        for (j, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return bad(format!("joint {j}: q_min {lo} must be below q_max {hi}"));
            }
            let q = self.nominal_pose[j];
            if q < *lo || q > *hi {
                return bad(format!("joint {j}: nominal pose {q} outside limits"));
            }
        }
        if self
            .vel_limits
            .iter()
            .chain(&self.acc_limits)
            .any(|&v| !(v > 0.0))
        {
            return bad("velocity and acceleration limits must be positive".into());
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if s.link >= n {
                return bad(format!("sphere {i} on missing link {}", s.link));
            }
            if !(0.0..=1.0).contains(&s.offset) {
                return bad(format!("sphere {i}: offset {} outside [0, 1]", s.offset));
            }
            if !(0.03..=0.10).contains(&s.radius) {
                return bad(format!("sphere {i}: radius {} outside [0.03, 0.10]", s.radius));
            }
        }
        for &[a, b] in &self.collision_pairs {
            self.check_pair(a, b)?;
            let (la, lb) = (self.spheres[a].link, self.spheres[b].link);
            if la.abs_diff(lb) < 2 {
                return bad(format!(
                    "pair ({a}, {b}) joins links {la} and {lb}, which are not separated by a link"
                ));
            }
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be non-negative".into());
        }
        if !(self.link_masses.iter().sum::<f64>() > 0.0) {
            return Err(KinematicsError::NonPositiveMass(self.link_masses.iter().sum()));
        }
        Ok(())
    }

    fn check_dims(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.n_joints() {
            return Err(KinematicsError::Dimension {
                expected: self.n_joints(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn check_pair(&self, a: usize, b: usize) -> Result<()> {
        let count = self.spheres.len();
        for index in [a, b] {
            if index >= count {
                return Err(KinematicsError::SphereIndex { index, count });
            }
        }
        if a == b {
            return Err(KinematicsError::SelfPair(a, b));
        }
        Ok(())
    }

    pub fn within_limits(&self, j: usize, q: f64) -> bool {
        let [lo, hi] = self.joint_limits[j];
        q >= lo && q <= hi
    }

    /// Link endpoint and sphere-center positions in meters.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<FkResult> {
        self.check_dims(q)?;
        let mut endpoints = Vec::with_capacity(q.len());
        let mut starts = Vec::with_capacity(q.len());
        let mut dirs = Vec::with_capacity(q.len());
        let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
        for (qi, len) in q.iter().zip(&self.link_lengths) {
            theta += qi;
            let (s, c) = theta.sin_cos();
            starts.push([x, y]);
            dirs.push([c, s]);
            x += len * c;
            y += len * s;
            endpoints.push([x, y]);
        }
        let sphere_centers = self
            .spheres
            .iter()
            .map(|s| {
                let [sx, sy] = starts[s.link];
                let [dx, dy] = dirs[s.link];
                let l = s.offset * self.link_lengths[s.link];
                [sx + l * dx, sy + l * dy]
            })
            .collect();
        Ok(FkResult {
            endpoints,
            sphere_centers,
        })
    }

    /// Mass-weighted mean of link midpoints.
    pub fn com(&self, q: &[f64]) -> Result<[f64; 2]> {
        self.check_dims(q)?;
        let total: f64 = self.link_masses.iter().sum();
        if !(total > 0.0) {
            return Err(KinematicsError::NonPositiveMass(total));
        }
        let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
        let (mut cx, mut cy) = (0.0, 0.0);
        for ((qi, len), m) in q.iter().zip(&self.link_lengths).zip(&self.link_masses) {
            theta += qi;
            let (s, c) = theta.sin_cos();
            cx += m * (x + 0.5 * len * c);
            cy += m * (y + 0.5 * len * s);
            x += len * c;
            y += len * s;
        }
        Ok([cx / total, cy / total])
    }

    pub fn pair_distance(&self, q: &[f64], pair: [usize; 2]) -> Result<f64> {
        self.check_pair(pair[0], pair[1])?;
        let fk = self.forward_kinematics(q)?;
        let [ax, ay] = fk.sphere_centers[pair[0]];
        let [bx, by] = fk.sphere_centers[pair[1]];
        Ok(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
    }

    /// Contact threshold `r_a + r_b` for a configured pair.
    pub fn contact_distance(&self, pair: [usize; 2]) -> f64 {
        self.spheres[pair[0]].radius + self.spheres[pair[1]].radius
    }

    /// Constant matrices that turn joint angles into Cartesian quantities.
    pub fn matrices(&self) -> KinematicMatrices {
        let n = self.n_joints();
        let lens = &self.link_lengths;
        let mut cumulative = vec![0.0; n * n];
        for j in 0..n {
            for i in j..n {
                cumulative[j * n + i] = 1.0;
            }
        }
        // column k: coefficient of (cos θ_i, sin θ_i) in the position of a point
        // at fraction `frac` along link k
        let along = |k: usize, frac: f64| -> Vec<f64> {
            (0..n)
                .map(|i| match i.cmp(&k) {
                    std::cmp::Ordering::Less => lens[i],
                    std::cmp::Ordering::Equal => frac * lens[i],
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        };
        let columns_to_matrix = |cols: Vec<Vec<f64>>| {
            let m = cols.len();
            let mut data = vec![0.0; n * m];
            for (c, col) in cols.iter().enumerate() {
                for i in 0..n {
                    data[i * m + c] = col[i];
                }
            }
            Tensor::matrix(n, m, data).expect("shape")
        };
        let endpoints = columns_to_matrix((0..n).map(|k| along(k, 1.0)).collect());
        let spheres = columns_to_matrix(
            self.spheres
                .iter()
                .map(|s| along(s.link, s.offset))
                .collect(),
        );
        let total: f64 = self.link_masses.iter().sum();
        let mut com = vec![0.0; n];
        for k in 0..n {
            let w = self.link_masses[k] / total;
            for (c, a) in com.iter_mut().zip(along(k, 0.5)) {
                *c += w * a;
            }
        }
        let p = self.collision_pairs.len();
        let ns = self.spheres.len();
        let mut diff = vec![0.0; ns * p];
        for (c, &[a, b]) in self.collision_pairs.iter().enumerate() {
            diff[a * p + c] += 1.0;
            diff[b * p + c] -= 1.0;
        }
        KinematicMatrices {
            cumulative: Tensor::matrix(n, n, cumulative).expect("shape"),
            endpoints,
            spheres,
            com: Tensor::matrix(n, 1, com).expect("shape"),
            pair_diff: Tensor::matrix(ns, p.max(1), if p == 0 { vec![0.0; ns] } else { diff })
                .expect("shape"),
            contact: self
                .collision_pairs
                .iter()
                .map(|&pr| self.contact_distance(pr))
                .collect(),
        }
    }
}

/// Constant tensors for batched, taped kinematics.
#[derive(Debug, Clone)]
pub struct KinematicMatrices {
    /// `[n, n]`, maps joint angles to absolute link angles.
    pub cumulative: Tensor,
    /// `[n, n]`, link endpoints from `(cos Θ, sin Θ)`.
    pub endpoints: Tensor,
    /// `[n, n_spheres]`
    pub spheres: Tensor,
    /// `[n, 1]`
    pub com: Tensor,
    /// `[n_spheres, n_pairs]`, +1/-1 per pair column.
    pub pair_diff: Tensor,
    /// `r_a + r_b` per pair.
    pub contact: Vec<f64>,
}

/// Constant handles of [`KinematicMatrices`] registered on one tape.
#[derive(Debug, Clone, Copy)]
pub struct KinematicVars {
    pub cumulative: Var,
    pub endpoints: Var,
    pub spheres: Var,
    pub com: Var,
    pub pair_diff: Var,
}

impl KinematicMatrices {
    pub fn bind(&self, tape: &mut Tape) -> TensorResult<KinematicVars> {
        Ok(KinematicVars {
            cumulative: tape.constant(self.cumulative.clone())?,
            endpoints: tape.constant(self.endpoints.clone())?,
            spheres: tape.constant(self.spheres.clone())?,
            com: tape.constant(self.com.clone())?,
            pair_diff: tape.constant(self.pair_diff.clone())?,
        })
    }
}

/// `(cos Θ, sin Θ)` for a `[rows, n]` block of joint angles.
pub fn link_directions(tape: &mut Tape, kv: &KinematicVars, q: Var) -> TensorResult<(Var, Var)> {
    let theta = tape.matmul(q, kv.cumulative)?;
    Ok((tape.cos(theta)?, tape.sin(theta)?))
}

/// Taped positions `(x, y)` as `[rows, columns(basis)]` for a basis matrix
/// such as `endpoints`, `spheres` or `com`.
pub fn project(tape: &mut Tape, dirs: (Var, Var), basis: Var) -> TensorResult<(Var, Var)> {
    Ok((tape.matmul(dirs.0, basis)?, tape.matmul(dirs.1, basis)?))
}

/// Taped pair distances `[rows, n_pairs]`. `eps` keeps the square root
/// differentiable when two centers coincide.
pub fn pair_distances_tape(
    tape: &mut Tape,
    kv: &KinematicVars,
    dirs: (Var, Var),
    eps: f64,
) -> TensorResult<Var> {
    let (sx, sy) = project(tape, dirs, kv.spheres)?;
    let dx = tape.matmul(sx, kv.pair_diff)?;
    let dy = tape.matmul(sy, kv.pair_diff)?;
    let dx2 = tape.square(dx)?;
    let dy2 = tape.square(dy)?;
    let d2 = tape.add(dx2, dy2)?;
    let d2 = tape.add_scalar(d2, eps)?;
    tape.sqrt(d2)
}

impl JointTrajectory {
    pub fn new(frames: Vec<Vec<f64>>, frame_dt: f64) -> Result<Self> {
        if !(frame_dt > 0.0) {
            return Err(KinematicsError::Invalid(format!("frame_dt {frame_dt} must be positive")));
        }
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().find(|f| f.len() != first.len()) {
                return Err(KinematicsError::Dimension {
                    expected: first.len(),
                    got: bad.len(),
                });
            }
        }
        Ok(Self { frames, frame_dt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-frame `(q̇, q̈)`: central differences inside, one-sided three-point
/// stencils at both ends. Works for any per-frame vector (joint angles or CoM).
pub fn finite_diff_derivatives(frames: &[Vec<f64>], dt: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let t = frames.len();
    if t < 3 {
        return Err(KinematicsError::TooFewFrames { needed: 3, got: t });
    }
    let d = frames[0].len();
    let mut vel = vec![vec![0.0; d]; t];
    let mut acc = vec![vec![0.0; d]; t];
    for (tau, (v, a)) in vel.iter_mut().zip(acc.iter_mut()).enumerate() {
        let (p, c, n) = match tau {
            0 => (0, 1, 2),
            x if x == t - 1 => (t - 3, t - 2, t - 1),
            x => (x - 1, x, x + 1),
        };
        for j in 0..d {
            v[j] = match tau {
                0 => (frames[1][j] - frames[0][j]) / dt,
                x if x == t - 1 => (frames[t - 1][j] - frames[t - 2][j]) / dt,
                x => (frames[x + 1][j] - frames[x - 1][j]) / (2.0 * dt),
            };
            a[j] = (frames[n][j] - 2.0 * frames[c][j] + frames[p][j]) / (dt * dt);
        }
    }
    Ok((vel, acc))
}

pub fn trajectory_derivatives(traj: &JointTrajectory) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    finite_diff_derivatives(&traj.frames, traj.frame_dt)
}
