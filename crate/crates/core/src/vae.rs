//! Motion VAE: the encoder reads `(history ∥ future)`, the decoder rebuilds the
//! future from `(history, z)`. Inputs are standardized per joint with
//! training-set statistics that travel with the checkpoint.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion_data::MotionWindow;
use crate::nn::{Activation, Mlp, MlpVars};
use crate::rng::{derive, normal_vec, seeded};
use crate::tensor::{Adam, AdamConfig, Checkpoint, CheckpointError, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid vae config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("checkpoint role is {0:?}, expected \"vae\"")]
    Role(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub beta_kl: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            d_z: 16,
            hidden: vec![128, 128],
            beta_kl: 1e-3,
            lr: 1e-3,
            iterations: 3000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.d_z < 2 {
            return Err(VaeError::Config("d_z must be at least 2".into()));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(VaeError::Config("beta_kl must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(VaeError::Config("lr and batch_size must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(VaeError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-joint standardization shared by every frame of a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-3;

impl Normalizer {
    pub fn fit(frames: impl Iterator<Item = Vec<f64>>, n: usize) -> Self {
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        for f in frames {
            for j in 0..n {
                sum[j] += f[j];
                sq[j] += f[j] * f[j];
            }
            count += 1;
        }
        let c = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / c - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    fn tiled(values: &[f64], frames: usize, rows: usize) -> Tensor {
        let cols = frames * values.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * frames {
            data.extend_from_slice(values);
        }
        Tensor::matrix(rows, cols, data).expect("shape")
    }

    /// Standardizes a `[rows, frames·n]` block.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let n = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % n;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub n_joints: usize,
    pub t_hist: usize,
    pub t_fut: usize,
    pub norm: Normalizer,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeReport {
    pub loss_curve: Vec<f64>,
    /// Validation reconstruction MSE in radians², decoding at `μ_z`.
    pub val_mse: f64,
    /// Variance of validation future frames in radians².
    pub future_variance: f64,
    /// Median over validation windows and joints of the mean absolute
    /// per-joint reconstruction error (radians).
    pub median_joint_error: f64,
}

fn flat_rows(windows: &[&MotionWindow], pick: impl Fn(&MotionWindow) -> &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| pick(w).iter().flatten().copied().collect())
        .collect();
    Tensor::from_rows(&rows)
}

pub fn history_rows(windows: &[&MotionWindow]) -> Tensor {
    flat_rows(windows, |w| &w.history)
}

pub fn future_rows(windows: &[&MotionWindow]) -> Tensor {
    flat_rows(windows, |w| &w.future)
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .map(|r| a.row_slice(r).iter().chain(b.row_slice(r)).copied().collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// `0.5 Σ (μ² + σ² − 1 − 2 log σ)` averaged over rows.
pub fn kl_standard_normal(mu: &Tensor, log_sigma: &Tensor) -> f64 {
    let total: f64 = mu
        .data()
        .iter()
        .zip(log_sigma.data())
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum();
    total / mu.rows().max(1) as f64
}

impl Vae {
    pub fn new(config: VaeConfig, n_joints: usize, t_hist: usize, t_fut: usize, norm: Normalizer) -> Result<Self, VaeError> {
        config.validate()?;
        let mut rng = seeded(derive(config.seed, &[0x7661_6500]));
        let window = (t_hist + t_fut) * n_joints;
        let mut enc_sizes = vec![window];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(2 * config.d_z);
        let mut dec_sizes = vec![t_hist * n_joints + config.d_z];
        dec_sizes.extend(&config.hidden);
        dec_sizes.push(t_fut * n_joints);
        Ok(Self {
            encoder: Mlp::new(&enc_sizes, Activation::Tanh, &mut rng),
            decoder: Mlp::new(&dec_sizes, Activation::Tanh, &mut rng),
            config,
            n_joints,
            t_hist,
            t_fut,
            norm,
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    fn check_cols(&self, x: &Tensor, frames: usize, what: &'static str) -> Result<(), TensorError> {
        if x.rank() != 2 || x.cols() != frames * self.n_joints {
            return Err(TensorError::ShapeMismatch {
                op: what,
                lhs: x.shape().to_vec(),
                rhs: vec![frames * self.n_joints],
            });
        }
        Ok(())
    }

    /// `(μ_z, log σ_z)`, each `[rows, d_z]`.
    pub fn encode(&self, history: &Tensor, future: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        self.check_cols(history, self.t_hist, "vae encode history")?;
        self.check_cols(future, self.t_fut, "vae encode future")?;
        let x = hcat(&self.norm.apply(history), &self.norm.apply(future));
        let out = self.encoder.forward(&x)?;
        let d = self.d_z();
        let mu: Vec<Vec<f64>> = (0..out.rows()).map(|r| out.row_slice(r)[..d].to_vec()).collect();
        let ls: Vec<Vec<f64>> = (0..out.rows()).map(|r| out.row_slice(r)[d..].to_vec()).collect();
        Ok((Tensor::from_rows(&mu), Tensor::from_rows(&ls)))
    }

    /// Reparameterized sample `μ + σ ⊙ ε`.
    pub fn reparameterize(mu: &Tensor, log_sigma: &Tensor, eps: &Tensor) -> Tensor {
        let data = mu
            .data()
            .iter()
            .zip(log_sigma.data())
            .zip(eps.data())
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect();
        Tensor::new(mu.shape().to_vec(), data).expect("shape")
    }

    fn residual_base(&self, history_norm: &Tensor) -> Tensor {
        let n = self.n_joints;
        let start = (self.t_hist - 1) * n;
        let rows: Vec<Vec<f64>> = (0..history_norm.rows())
            .map(|r| {
                let last = &history_norm.row_slice(r)[start..start + n];
                last.iter().cycle().take(self.t_fut * n).copied().collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Future frames `[rows, T_fut·n]` in radians.
    pub fn decode(&self, history: &Tensor, z: &Tensor) -> Result<Tensor, TensorError> {
        self.check_cols(history, self.t_hist, "vae decode history")?;
        if z.rank() != 2 || z.cols() != self.d_z() || z.rows() != history.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "vae decode latent",
                lhs: z.shape().to_vec(),
                rhs: vec![history.rows(), self.d_z()],
            });
        }
        let hn = self.norm.apply(history);
        let mut out = self.decoder.forward(&hcat(&hn, z))?;
        let base = self.residual_base(&hn);
        let n = self.n_joints;
        for (i, (v, b)) in out.data_mut().iter_mut().zip(base.data()).enumerate() {
            let j = i % n;
            *v = (*v + b) * self.norm.std[j] + self.norm.mean[j];
        }
        Ok(out)
    }

    /// Taped decode through `vars` (either trainable or frozen decoder
    /// parameters). Matches [`Vae::decode`] bit-for-bit.
    pub fn decode_tape(&self, tape: &mut Tape, vars: &MlpVars, history: &Tensor, z: Var) -> Result<Var, TensorError> {
        self.check_cols(history, self.t_hist, "vae decode history")?;
        let rows = history.rows();
        let hn = self.norm.apply(history);
        let base = self.residual_base(&hn);
        let h = tape.constant(hn)?;
        let x = tape.concat(&[h, z], 1)?;
        let out = self.decoder.forward_tape(tape, vars, x)?;
        let base = tape.constant(base)?;
        let std = tape.constant(Normalizer::tiled(&self.norm.std, self.t_fut, rows))?;
        let mean = tape.constant(Normalizer::tiled(&self.norm.mean, self.t_fut, rows))?;
        let out = tape.add(out, base)?;
        let out = tape.elem_mul(out, std)?;
        tape.add(out, mean)
    }

    /// `(last history frame ∥ Dec(history, z))` as `[rows, (1+T_fut)·n]`,
    /// through a frozen decoder.
    pub fn decode_with_seam_tape(&self, tape: &mut Tape, history: &Tensor, z: Var) -> Result<Var, TensorError> {
        let vars = self.decoder.bind_frozen(tape)?;
        let fut = self.decode_tape(tape, &vars, history, z)?;
        let n = self.n_joints;
        let start = (self.t_hist - 1) * n;
        let last: Vec<Vec<f64>> = (0..history.rows())
            .map(|r| history.row_slice(r)[start..start + n].to_vec())
            .collect();
        let last = tape.constant(Tensor::from_rows(&last))?;
        tape.concat(&[last, fut], 1)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            role: Some("vae".into()),
            meta: serde_json::json!({
                "config": self.config,
                "n_joints": self.n_joints,
                "t_hist": self.t_hist,
                "t_fut": self.t_fut,
            }),
            ..Checkpoint::default()
        };
        self.encoder.save(&mut ck, "encoder");
        self.decoder.save(&mut ck, "decoder");
        ck.insert("norm.mean", &Tensor::row(&self.norm.mean));
        ck.insert("norm.std", &Tensor::row(&self.norm.std));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VaeError> {
        if ck.role.as_deref() != Some("vae") {
            return Err(VaeError::Role(ck.role.clone()));
        }
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| TensorError::Missing(format!("meta.{k}")))
        };
        let config: VaeConfig = serde_json::from_value(meta("config")?)
            .map_err(|e| VaeError::Config(e.to_string()))?;
        let dim = |k: &str| -> Result<usize, VaeError> {
            meta(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| VaeError::Config(format!("meta.{k} is not an integer")))
        };
        let vae = Self {
            n_joints: dim("n_joints")?,
            t_hist: dim("t_hist")?,
            t_fut: dim("t_fut")?,
            norm: Normalizer {
                mean: ck.get("norm.mean")?.into_data(),
                std: ck.get("norm.std")?.into_data(),
            },
            encoder: Mlp::load(ck, "encoder", Activation::Tanh)?,
            decoder: Mlp::load(ck, "decoder", Activation::Tanh)?,
            config,
        };
        if vae.encoder.output_dim() != 2 * vae.d_z()
            || vae.decoder.input_dim() != vae.t_hist * vae.n_joints + vae.d_z()
            || vae.norm.mean.len() != vae.n_joints
        {
            return Err(VaeError::Config("checkpoint tensors do not match meta".into()));
        }
        Ok(vae)
    }

    /// Reconstruction statistics on `windows`, decoding at the posterior mean.
    pub fn evaluate(&self, windows: &[&MotionWindow]) -> Result<(f64, f64, f64), TensorError> {
        if windows.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }
        let h = history_rows(windows);
        let f = future_rows(windows);
        let (mu, _) = self.encode(&h, &f)?;
        let rec = self.decode(&h, &mu)?;
        let n = self.n_joints;
        let sq: f64 = rec.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let mse = sq / f.len() as f64;
        let mean = f.sum() / f.len() as f64;
        let var = f.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64;
        let mut per_joint = Vec::with_capacity(windows.len() * n);
        for r in 0..f.rows() {
            let (a, b) = (rec.row_slice(r), f.row_slice(r));
            for j in 0..n {
                let e: f64 = (0..self.t_fut).map(|t| (a[t * n + j] - b[t * n + j]).abs()).sum();
                per_joint.push(e / self.t_fut as f64);
            }
        }
        per_joint.sort_by(f64::total_cmp);
        let mid = per_joint.len() / 2;
        let median = if per_joint.len() % 2 == 1 {
            per_joint[mid]
        } else {
            0.5 * (per_joint[mid - 1] + per_joint[mid])
        };
        Ok((mse, var, median))
    }
}

/// ELBO training: reconstruction MSE in standardized units plus
/// `β_kl · KL(q ‖ N(0, I))`.
pub fn train_vae(train: &[MotionWindow], val: &[MotionWindow], config: &VaeConfig) -> Result<(Vae, VaeReport), VaeError> {
    config.validate()?;
    let first = train.first().ok_or(VaeError::EmptyDataset)?;
    let n = first.history[0].len();
    let (t_hist, t_fut) = (first.history.len(), first.future.len());
    let norm = Normalizer::fit(
        train
            .iter()
            .flat_map(|w| w.history.iter().chain(&w.future).cloned()),
        n,
    );
    let mut vae = Vae::new(config.clone(), n, t_hist, t_fut, norm)?;
    let mut rng = seeded(derive(config.seed, &[0x7661_6501]));
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let d = config.d_z;
    let all: Vec<&MotionWindow> = train.iter().collect();
    let mut curve = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch: Vec<&MotionWindow> = (0..config.batch_size)
            .map(|_| *all.choose(&mut rng).expect("non-empty"))
            .collect();
        let rows = batch.len();
        let h = history_rows(&batch);
        let f = future_rows(&batch);
        let hn = vae.norm.apply(&h);
        let fnorm = vae.norm.apply(&f);
        let base = vae.residual_base(&hn);
        let eps = Tensor::matrix(rows, d, normal_vec(&mut rng, rows * d))?;

        let mut tape = Tape::new();
        let ev = vae.encoder.bind(&mut tape)?;
        let dv = vae.decoder.bind(&mut tape)?;
        let hn_v = tape.constant(hn)?;
        let fn_v = tape.constant(fnorm.clone())?;
        let x = tape.concat(&[hn_v, fn_v], 1)?;
        let enc = vae.encoder.forward_tape(&mut tape, &ev, x)?;
        let mu = tape.slice(enc, 1, 0, d)?;
        let ls = tape.slice(enc, 1, d, 2 * d)?;
        let sigma = tape.exp(ls)?;
        let eps_v = tape.constant(eps)?;
        let noise = tape.elem_mul(sigma, eps_v)?;
        let z = tape.add(mu, noise)?;
        let xd = tape.concat(&[hn_v, z], 1)?;
        let out = vae.decoder.forward_tape(&mut tape, &dv, xd)?;
        let base_v = tape.constant(base)?;
        let pred = tape.add(out, base_v)?;
        let diff = tape.sub(pred, fn_v)?;
        let sq = tape.square(diff)?;
        let rec = tape.mean(sq)?;
        let loss = if config.beta_kl > 0.0 {
            // 0.5 Σ(μ² + σ² − 1 − 2 log σ) / rows
            let mu2 = tape.square(mu)?;
            let s2 = tape.square(sigma)?;
            let a = tape.add(mu2, s2)?;
            let two_ls = tape.scalar_mul(ls, 2.0)?;
            let a = tape.sub(a, two_ls)?;
            let a = tape.add_scalar(a, -1.0)?;
            let kl = tape.sum(a)?;
            let kl = tape.scalar_mul(kl, 0.5 / rows as f64)?;
            let kl = tape.scalar_mul(kl, config.beta_kl)?;
            tape.add(rec, kl)?
        } else {
            rec
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(VaeError::Diverged { iteration: it, loss: value });
        }
        curve.push(value);
        let mut grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(TensorError::NonFinite { .. }) => {
                return Err(VaeError::Diverged { iteration: it, loss: f64::NAN })
            }
            Err(e) => return Err(e.into()),
        };
        let mut g: Vec<Tensor> = ev.vars().into_iter().map(|v| grads.take(v)).collect();
        g.extend(dv.vars().into_iter().map(|v| grads.take(v)));
        let mut params = vae.encoder.params_mut();
        params.extend(vae.decoder.params_mut());
        adam.step(&mut params, &g)?;
    }
    let val_refs: Vec<&MotionWindow> = if val.is_empty() { all } else { val.iter().collect() };
    let (val_mse, future_variance, median_joint_error) = vae.evaluate(&val_refs)?;
    Ok((
        vae,
        VaeReport {
            loss_curve: curve,
            val_mse,
            future_variance,
            median_joint_error,
        },
    ))
}
