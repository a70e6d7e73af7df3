//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria needing a trained model share one bundle
//! trained in memory from `configs/acceptance.toml` (a few minutes).
//!
//! `cargo test -p safeflow-cli --test acceptance -- ac3 ac8` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use safeflow::config::RunConfig;
use safeflow::eval::diversity_ratio;
use safeflow::flow::{initial_noise, sample, train_flow, Conditioning, FlowConfig, FlowTrainingSet, SamplerConfig};
use safeflow::kinematics::ChainModel;
use safeflow::physics_cost::{grad_wrt_latent, total_cost, CostWeights};
use safeflow::pipeline::{conditioning, embedding_rows, run_episode, EpisodeSpec, GateMode, Injection};
use safeflow::rng::{derive, normal_vec, seeded, Rng};
use safeflow::runs::{bench_run, default_prompts, eval_run, gate_eval_run, rate_rows};
use safeflow::safety_gate::{instability_score, instability_score_serial, stage3, ProbeConfig, ReasonCode};
use safeflow::tensor::{Tape, Tensor, Var};
use safeflow::vae::history_rows;
use safeflow::workflow::{embedder, Bundle, DeployOptions, Variant};

type Outcome = Result<String, String>;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bundle() -> &'static Bundle {
    static B: OnceLock<Bundle> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = RunConfig::load(&repo().join("configs/acceptance.toml")).expect("acceptance config");
        let t = Instant::now();
        let b = Bundle::train(&cfg).expect("acceptance bundle trains");
        eprintln!("trained acceptance bundle in {:.0} s", t.elapsed().as_secs_f64());
        b
    })
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1. autodiff against central differences

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sin,
    Cos,
    ExpTanh,
    Square,
    SoftSqrt,
    Scale(f64),
    Shift(f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    /// Right-multiplies by leaf `leaf`.
    Matmul(usize, usize),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
    Sum(usize),
    Mean(usize),
}

const SCALAR: [usize; 2] = [0, 0];

struct Graph {
    leaves: Vec<Tensor>,
    ops: Vec<Op>,
}

fn random_graph(rng: &mut Rng) -> Graph {
    let mut leaves = Vec::new();
    let mut shapes: Vec<[usize; 2]> = Vec::new();
    let leaf = |rng: &mut Rng, r: usize, c: usize, leaves: &mut Vec<Tensor>| {
        leaves.push(Tensor::matrix(r, c, normal_vec(rng, r * c).iter().map(|v| 0.8 * v).collect()).unwrap());
    };
    for _ in 0..rng.random_range(1..=3) {
        let (r, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
        leaf(rng, r, c, &mut leaves);
        shapes.push([r, c]);
    }
    // pool entries: leaves first, then op results, each with its shape
    let n_inputs = shapes.len();
    let mut ops = Vec::new();
    let mut pending_leaves = Vec::new();
    for _ in 0..rng.random_range(4..=12) {
        let a = rng.random_range(0..shapes.len());
        let sa = shapes[a];
        // reductions yield rank-0 scalars; those only feed unary ops
        let choice = if sa == SCALAR { 0 } else { rng.random_range(0..10) };
        let (op, shape) = match choice {
            0..=3 => {
                let u = match rng.random_range(0..8) {
                    0 => Unary::Tanh,
                    1 => Unary::Sin,
                    2 => Unary::Cos,
                    3 => Unary::ExpTanh,
                    4 => Unary::Square,
                    5 => Unary::SoftSqrt,
                    6 => Unary::Scale(rng.random_range(-2.0..2.0)),
                    _ => Unary::Shift(rng.random_range(-1.0..1.0)),
                };
                (Op::Unary(u, a), sa)
            }
            4 | 5 => {
                let partners: Vec<usize> = (0..shapes.len()).filter(|&b| shapes[b] == sa || shapes[b] == SCALAR).collect();
                let b = partners[rng.random_range(0..partners.len())];
                let k = match rng.random_range(0..3) {
                    0 => Binary::Add,
                    1 => Binary::Sub,
                    _ => Binary::Mul,
                };
                (Op::Binary(k, a, b), sa)
            }
            6 => {
                let n = rng.random_range(1..=3);
                pending_leaves.push((sa[1], n));
                (Op::Matmul(a, n_inputs + pending_leaves.len() - 1), [sa[0], n])
            }
            7 if sa[1] >= 2 => {
                let s = rng.random_range(0..sa[1] - 1);
                let e = rng.random_range(s + 1..=sa[1]);
                (Op::SliceCols(a, s, e), [sa[0], e - s])
            }
            7 => {
                let partners: Vec<usize> = (0..shapes.len()).filter(|&b| shapes[b] != SCALAR && shapes[b][0] == sa[0]).collect();
                let b = partners[rng.random_range(0..partners.len())];
                (Op::ConcatCols(a, b), [sa[0], sa[1] + shapes[b][1]])
            }
            8 => (Op::Sum(a), SCALAR),
            _ => (Op::Mean(a), SCALAR),
        };
        ops.push(op);
        shapes.push(shape);
    }
    for (r, c) in pending_leaves {
        leaf(rng, r, c, &mut leaves);
    }
    Graph { leaves, ops }
}

/// Builds the graph on a fresh tape; the root sums every intermediate so
/// each op reaches it.
fn build(g: &Graph, leaves: &[Tensor]) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let n_inputs = g.leaves.len() - g.ops.iter().filter(|o| matches!(o, Op::Matmul(..))).count();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone()).unwrap()).collect();
    let mut pool: Vec<Var> = vars[..n_inputs].to_vec();
    for op in &g.ops {
        let v = match *op {
            Op::Unary(u, a) => {
                let x = pool[a];
                match u {
                    Unary::Tanh => tape.tanh(x),
                    Unary::Sin => tape.sin(x),
                    Unary::Cos => tape.cos(x),
                    Unary::ExpTanh => {
                        let t = tape.tanh(x).unwrap();
                        tape.exp(t)
                    }
                    Unary::Square => tape.square(x),
                    Unary::SoftSqrt => {
                        let s = tape.square(x).unwrap();
                        let s = tape.add_scalar(s, 1.0).unwrap();
                        tape.sqrt(s)
                    }
                    Unary::Scale(k) => tape.scalar_mul(x, k),
                    Unary::Shift(k) => tape.add_scalar(x, k),
                }
            }
            Op::Binary(k, a, b) => match k {
                Binary::Add => tape.add(pool[a], pool[b]),
                Binary::Sub => tape.sub(pool[a], pool[b]),
                Binary::Mul => tape.elem_mul(pool[a], pool[b]),
            },
            Op::Matmul(a, l) => tape.matmul(pool[a], vars[l]),
            Op::SliceCols(a, s, e) => tape.slice(pool[a], 1, s, e),
            Op::ConcatCols(a, b) => tape.concat(&[pool[a], pool[b]], 1),
            Op::Sum(a) => tape.sum(pool[a]),
            Op::Mean(a) => tape.mean(pool[a]),
        }
        .unwrap();
        pool.push(v);
    }
    let mut root = tape.sum(pool[n_inputs]).unwrap();
    for &v in &pool[n_inputs + 1..] {
        let s = tape.sum(v).unwrap();
        let s = tape.tanh(s).unwrap();
        root = tape.add(root, s).unwrap();
    }
    (tape, vars, root)
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn graph_rel_err(g: &Graph) -> f64 {
    let (mut tape, vars, root) = build(g, &g.leaves);
    let grads = tape.backward(root).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).data());
        for k in 0..g.leaves[i].len() {
            let eval = |d: f64| {
                let mut leaves = g.leaves.clone();
                leaves[i].data_mut()[k] += d;
                let (tape, _, root) = build(g, &leaves);
                tape.value(root).item()
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    norm_rel(&analytic, &numeric)
}

fn full_path_rel_err(b: &Bundle, weights: CostWeights, windows: usize) -> f64 {
    let cfg = &b.cfg;
    let chain = &cfg.chain;
    let setup = safeflow::pipeline::GuidanceSetup::new(chain, cfg.data.t_fut, cfg.data.frame_dt, weights, cfg.guidance);
    let mut rng = seeded(17);
    let n = chain.n_joints();
    let mut worst: f64 = 0.0;
    for w in safeflow::workflow::strided(&b.dataset.val, windows) {
        let h = history_rows(&[&w]);
        let z = normal_vec(&mut rng, b.vae.d_z());
        let analytic = grad_wrt_latent(&Tensor::row(&z), &h, &b.vae, &setup.program).unwrap().grad;
        let plain = |z: &[f64]| {
            let fut = b.vae.decode(&h, &Tensor::row(z)).unwrap();
            let frames: Vec<Vec<f64>> = std::iter::once(w.history.last().unwrap().clone())
                .chain(fut.data().chunks(n).map(<[f64]>::to_vec))
                .collect();
            total_cost(&frames, chain, cfg.data.frame_dt, &weights).unwrap().total
        };
        let step = 1e-5;
        let numeric: Vec<f64> = (0..z.len())
            .map(|i| {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += step;
                zm[i] -= step;
                (plain(&zp) - plain(&zm)) / (2.0 * step)
            })
            .collect();
        worst = worst.max(norm_rel(analytic.data(), &numeric));
    }
    worst
}

fn ac1() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(2024);
    let graph_worst = (0..50).map(|_| graph_rel_err(&random_graph(&mut rng))).fold(0.0, f64::max);
    let b = bundle();
    let deployed = full_path_rel_err(b, b.cfg.cost, 20);
    let published = full_path_rel_err(b, CostWeights::default(), 20);
    let secs = t.elapsed().as_secs_f64();
    check(
        graph_worst <= 1e-6 && deployed <= 1e-5 && published <= 1e-5 && secs < 60.0,
        format!("50 graphs max rel {graph_worst:.1e}; full path max rel {deployed:.1e} (run weights), {published:.1e} (published weights); {secs:.1} s"),
    )
}

// 2. flow on a 2-D Gaussian mixture

fn ac2() -> Outcome {
    let means = [[-2.0, 0.0], [2.0, 1.0]];
    let weights = [0.3, 0.7];
    let std = 0.5;
    let n_train = 8000;
    let mut rng = seeded(7);
    let mut z1 = Vec::with_capacity(2 * n_train);
    for _ in 0..n_train {
        let k = usize::from(rng.random::<f64>() >= weights[0]);
        let e = normal_vec(&mut rng, 2);
        z1.push(means[k][0] + std * e[0]);
        z1.push(means[k][1] + std * e[1]);
    }
    let set = FlowTrainingSet {
        z1: Tensor::matrix(n_train, 2, z1).unwrap(),
        z0: None,
        ctx: Conditioning::empty(n_train),
    };
    let cfg = FlowConfig {
        hidden: vec![64, 64],
        history_code: 0,
        p_drop: 0.0,
        iterations: 6000,
        batch_size: 128,
        lr: 2e-3,
        cosine_decay: true,
        seed: 3,
        ..FlowConfig::default()
    };
    let (field, _) = train_flow(&set, None, &cfg).map_err(|e| e.to_string())?;
    let n = 4096;
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive(99, &[i])).collect();
    let out = sample(&field, &Conditioning::empty(n), &initial_noise(&seeds, 2), &SamplerConfig { nfe: 50, cfg: None }).map_err(|e| e.to_string())?;
    // assign each sample to the component with the higher posterior
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    for row in out.z.data().chunks(2) {
        let logp = |k: usize| weights[k].ln() - ((row[0] - means[k][0]).powi(2) + (row[1] - means[k][1]).powi(2)) / (2.0 * std * std);
        let k = usize::from(logp(1) > logp(0));
        counts[k] += 1;
        sums[k][0] += row[0];
        sums[k][1] += row[1];
    }
    let sep = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2)).sqrt();
    let mut mean_err: f64 = 0.0;
    let mut weight_err: f64 = 0.0;
    for k in 0..2 {
        let c = counts[k].max(1) as f64;
        let m = [sums[k][0] / c, sums[k][1] / c];
        mean_err = mean_err.max(((m[0] - means[k][0]).powi(2) + (m[1] - means[k][1]).powi(2)).sqrt() / sep);
        weight_err = weight_err.max((counts[k] as f64 / n as f64 - weights[k]).abs());
    }
    check(
        mean_err <= 0.10 && weight_err <= 0.05,
        format!("mean error {:.1}% of separation, weight error {weight_err:.3}", 100.0 * mean_err),
    )
}

// 3, 4: guidance and reflow

fn rates() -> Result<&'static [safeflow::runs::RateRow], String> {
    static R: OnceLock<Result<Vec<safeflow::runs::RateRow>, String>> = OnceLock::new();
    R.get_or_init(|| rate_rows(bundle()).map_err(|e| e.to_string())).as_deref().map_err(Clone::clone)
}

fn ac3() -> Outcome {
    let rows = rates()?;
    let (base, teacher) = (&rows[0], &rows[1]);
    check(
        base.windows >= 200 && base.jv > 0.0 && teacher.jv <= 0.5 * base.jv && teacher.sc < base.sc,
        format!(
            "{} windows: JV {:.2}% -> {:.2}%, SC {:.2}% -> {:.2}%",
            base.windows, base.jv, teacher.jv, base.sc, teacher.sc
        ),
    )
}

fn ac4() -> Outcome {
    let b = bundle();
    let rows = rates()?;
    let (teacher, student) = (&rows[1], &rows[2]);
    let bench = bench_run(b, DeployOptions::default()).map_err(|e| e.to_string())?;
    let speedup = bench.teacher_ms / bench.student_ms;
    check(
        student.jv <= 1.5 * teacher.jv && speedup >= 5.0 && b.cfg.eval.latency_runs >= 100,
        format!(
            "student JV {:.2}% vs teacher {:.2}% (limit {:.2}%); {:.3} ms vs {:.3} ms per window, {speedup:.1}x",
            student.jv,
            teacher.jv,
            1.5 * teacher.jv,
            bench.student_ms,
            bench.teacher_ms
        ),
    )
}

// 5, 7: gate studies

fn gate_study() -> &'static Result<safeflow::runs::GateEvalOutput, String> {
    static G: OnceLock<Result<safeflow::runs::GateEvalOutput, String>> = OnceLock::new();
    G.get_or_init(|| gate_eval_run(bundle(), Variant::Student).map_err(|e| e.to_string()))
}

fn ac5() -> Outcome {
    let s = &gate_study().as_ref().map_err(Clone::clone)?.stage1;
    check(
        s.auroc_a >= 0.95 && s.auroc_b >= 0.95 && (85.0..=95.0).contains(&s.id_accept) && s.ood_a_accept <= 15.0 && s.ood_b_accept <= 15.0,
        format!(
            "AUROC {:.4} / {:.4}; accept ID {:.1}%, OOD {:.1}% / {:.1}%",
            s.auroc_a, s.auroc_b, s.id_accept, s.ood_a_accept, s.ood_b_accept
        ),
    )
}

fn ac7() -> Outcome {
    let q = &gate_study().as_ref().map_err(Clone::clone)?.quintiles;
    if q.len() != 5 {
        return Err(format!("{} quintiles", q.len()));
    }
    let windows: usize = q.iter().map(|r| r.count).sum();
    let m: Vec<f64> = q.iter().map(|r| r.mean_mpjpe).collect();
    let inversions: Vec<f64> = m.windows(2).filter(|w| w[1] < w[0]).map(|w| (w[0] - w[1]) / w[0]).collect();
    let ok_shape = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.05);
    let lift = m[4] / m[0] - 1.0;
    check(
        windows >= 2000 && ok_shape && lift >= 0.20,
        format!(
            "{windows} windows; mean MPJPE {} mm; Q5 over Q1 {:+.0}%",
            m.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" / "),
            100.0 * lift
        ),
    )
}

// 6: stage-2 exactness on linear fields

fn linear(a: Vec<f64>, d: usize) -> impl Fn(&Tensor) -> Result<Tensor, safeflow::tensor::TensorError> {
    move |z: &Tensor| {
        let at = Tensor::matrix(d, d, a.clone())?.transpose();
        z.matmul(&at)
    }
}

fn ac6() -> Outcome {
    let d = 16;
    let cfg = ProbeConfig::default();
    let mut rng = seeded(61);
    let mut worst_g: f64 = 0.0;
    let mut bitwise = true;
    for trial in 0..10 {
        let a = normal_vec(&mut rng, d * d);
        let z = normal_vec(&mut rng, d);
        let probes = cfg.probes(trial, d);
        let s = instability_score(linear(a.clone(), d), &z, &probes, cfg.delta).map_err(|e| e.to_string())?;
        for (g, eps) in s.g.iter().zip(&probes) {
            let quad: f64 = (0..d).map(|i| (0..d).map(|j| eps[i] * a[i * d + j] * eps[j]).sum::<f64>()).sum();
            worst_g = worst_g.max((g - quad).abs());
        }
        bitwise &= s == instability_score_serial(linear(a, d), &z, &probes, cfg.delta).map_err(|e| e.to_string())?;
    }
    let mut worst_r: f64 = 0.0;
    for (trial, c) in [0.5, 1.0, 2.5, -3.0].into_iter().enumerate() {
        let a: Vec<f64> = (0..d * d).map(|k| if k % (d + 1) == 0 { c } else { 0.0 }).collect();
        let z = normal_vec(&mut rng, d);
        let s = instability_score(linear(a, d), &z, &cfg.probes(100 + trial as u64, d), cfg.delta).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(s.r);
    }
    // the trained student field, batched exactly as Stage 2 batches it
    let b = bundle();
    let w = &b.dataset.val[0];
    let m = cfg.m;
    let ctx = conditioning(&b.vae, &history_rows(&vec![w; m + 1]), &embedding_rows(&embedder(&b.cfg), &vec![w.prompt.as_str(); m + 1]));
    let field = b.field(Variant::Student).map_err(|e| e.to_string())?;
    let dz = b.vae.d_z();
    let probes = cfg.probes(5, dz);
    let z = normal_vec(&mut rng, dz);
    let batched = instability_score(|t: &Tensor| field.guided_velocity(t, 0.0, &ctx.select(&vec![0; t.rows()]), None), &z, &probes, cfg.delta)
        .map_err(|e| e.to_string())?;
    let serial = instability_score_serial(|t: &Tensor| field.guided_velocity(t, 0.0, &ctx.select(&vec![0; t.rows()]), None), &z, &probes, cfg.delta)
        .map_err(|e| e.to_string())?;
    bitwise &= batched == serial;
    check(
        worst_g <= 1e-6 && worst_r <= 1e-9 && bitwise,
        format!("max |g - quadratic form| {worst_g:.1e}; isotropic R {worst_r:.1e}; batched == serial: {bitwise}"),
    )
}

// 8: stage-3 soundness

/// Independent scanner: every position, one-sided/central velocity and
/// second-difference acceleration, worst normalized excess wins.
fn scan(frames: &[Vec<f64>], m: &ChainModel, dt: f64) -> Option<(ReasonCode, usize, usize)> {
    let t_len = frames.len();
    let mut worst: Option<(f64, ReasonCode, usize, usize)> = None;
    let mut note = |e: f64, code, j, t| {
        if e > 0.0 && worst.is_none_or(|w| e > w.0) {
            worst = Some((e, code, j, t));
        }
    };
    for t in 0..t_len {
        for j in 0..m.n_joints() {
            let [lo, hi] = m.joint_limits[j];
            let q = frames[t][j];
            note((q - hi).max(lo - q) / ((hi - lo) / 2.0), ReasonCode::Position, j, t);
            if t_len >= 3 {
                let v = if t == 0 {
                    (frames[1][j] - frames[0][j]) / dt
                } else if t == t_len - 1 {
                    (frames[t][j] - frames[t - 1][j]) / dt
                } else {
                    (frames[t + 1][j] - frames[t - 1][j]) / (2.0 * dt)
                };
                let c = t.clamp(1, t_len - 2);
                let a = (frames[c + 1][j] - 2.0 * frames[c][j] + frames[c - 1][j]) / (dt * dt);
                note(v.abs() / m.vel_limits[j] - 1.0, ReasonCode::Velocity, j, t);
                note(a.abs() / m.acc_limits[j] - 1.0, ReasonCode::Acceleration, j, t);
            }
        }
    }
    worst.map(|w| (w.1, w.2, w.3))
}

fn ac8() -> Outcome {
    let m = ChainModel::default();
    let dt = 0.04;
    let mut failures = Vec::new();
    let mut cases = 0;
    for j in 0..m.n_joints() {
        let [lo, hi] = m.joint_limits[j];
        let mid = 0.5 * (lo + hi);
        for sign in [1.0, -1.0] {
            let edge = if sign > 0.0 { hi } else { lo };
            // position: a constant pose on, or just past, the limit
            let pose = |q: f64| {
                let mut p = m.nominal_pose.clone();
                p[j] = q;
                vec![p; 9]
            };
            // velocity: a ramp at the limit slope through mid-range
            let ramp = |v: f64| -> Vec<Vec<f64>> {
                (0..9)
                    .map(|t| {
                        let mut p = m.nominal_pose.clone();
                        p[j] = mid + sign * v * dt * (t as f64 - 4.0);
                        p
                    })
                    .collect()
            };
            // acceleration: a three-frame parabola at the limit curvature
            let parab = |a: f64| -> Vec<Vec<f64>> {
                (0..3)
                    .map(|t| {
                        let mut p = m.nominal_pose.clone();
                        let s = dt * (t as f64 - 1.0);
                        p[j] = mid + sign * 0.5 * a * s * s;
                        p
                    })
                    .collect()
            };
            let family: [(ReasonCode, Vec<Vec<f64>>, Vec<Vec<f64>>); 3] = [
                (ReasonCode::Position, pose(edge + sign * 1e-9), pose(edge)),
                (ReasonCode::Velocity, ramp(m.vel_limits[j] * (1.0 + 1e-9)), ramp(m.vel_limits[j] * (1.0 - 1e-9))),
                (ReasonCode::Acceleration, parab(m.acc_limits[j] * (1.0 + 1e-9)), parab(m.acc_limits[j] * (1.0 - 1e-9))),
            ];
            for (code, bad, good) in family {
                cases += 2;
                let d = stage3(&bad, &m, dt);
                let r = d.reason;
                if d.accept || r.map(|r| (r.code, r.joint)) != Some((code, Some(j))) {
                    failures.push(format!("{code:?} joint {j} sign {sign}: violating reference gave {r:?}"));
                }
                if !stage3(&good, &m, dt).accept {
                    failures.push(format!("{code:?} joint {j} sign {sign}: boundary reference rejected"));
                }
            }
        }
    }
    let mut rng = seeded(808);
    let mut mismatches = 0;
    let mut rejected = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=12);
        let spread = rng.random_range(0.0..0.6);
        let start: Vec<f64> = m.nominal_pose.iter().map(|q| q + rng.random_range(-1.5..1.5)).collect();
        let mut frames = vec![start];
        for _ in 1..len {
            let prev = frames.last().unwrap();
            frames.push(prev.iter().zip(normal_vec(&mut rng, m.n_joints())).map(|(q, e)| q + spread * e * dt * 4.0).collect());
        }
        let d = stage3(&frames, &m, dt);
        let expect = scan(&frames, &m, dt);
        rejected += usize::from(!d.accept);
        let got = d.reason.map(|r| (r.code, r.joint.unwrap_or(usize::MAX), r.frame.unwrap_or(usize::MAX)));
        if d.accept != expect.is_none() || got != expect {
            mismatches += 1;
        }
    }
    check(
        failures.is_empty() && mismatches == 0 && rejected > 1000 && rejected < 9000,
        format!(
            "{cases} unit cases, {} wrong; 10000 random references ({rejected} rejected), {mismatches} mismatches{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// 9: fallback safety

fn ac9() -> Outcome {
    let b = bundle();
    let cfg = &b.cfg;
    let tracker = cfg.tracker.build(&cfg.chain);
    let on = b.pipeline(Variant::Student, GateMode::Enforce).map_err(|e| e.to_string())?;
    let off = b.pipeline(Variant::Student, GateMode::Off).map_err(|e| e.to_string())?;
    let prompts = default_prompts(b, 100);
    let mut rng = seeded(909);
    let (mut failed_on, mut failed_off, mut caught) = (0, 0, 0);
    for k in 0..50usize {
        let at = rng.random_range(8..32u64);
        let spec = EpisodeSpec {
            prompts: vec![(0, prompts[2 * k].clone()), (20, prompts[2 * k + 1].clone())],
            windows: 40,
            seed: derive(cfg.run.seed, &[0x6662, k as u64]),
            injection: Some(Injection {
                windows: vec![at],
                joint: rng.random_range(0..cfg.chain.n_joints()),
                magnitude: rng.random_range(2.0..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            }),
        };
        let gated = run_episode(&on, &tracker, &spec).map_err(|e| e.to_string())?.0;
        failed_on += usize::from(!gated.success);
        caught += usize::from(gated.windows.iter().any(|w| w.window == at && !w.accepted && w.fallback));
        let ungated = run_episode(&off, &tracker, &spec).map_err(|e| e.to_string())?.0;
        failed_off += usize::from(!ungated.success);
    }
    check(
        failed_on == 0 && failed_off >= 1 && caught == 50,
        format!("50 episodes: injected window rejected in {caught}; failures gates on {failed_on}, gates off {failed_off}"),
    )
}

// 10: diversity

fn ac10() -> Outcome {
    let b = bundle();
    let prompts = default_prompts(b, b.cfg.eval.episodes);
    let out = eval_run(b, &prompts, GateMode::Enforce).map_err(|e| e.to_string())?;
    let both = out.diversity.iter().filter(|r| r.both_succeed).count();
    let labels: Vec<&str> = out.table.iter().map(|r| r.variant.as_str()).collect();
    let ratio = diversity_ratio(&out.diversity);
    check(
        ratio.is_some_and(|r| r >= 0.8) && labels == ["SafeFlow (Flow)", "+ Guid.", "+ Guid. & Reflow"],
        format!(
            "guided / unguided multimodality {} over {both} of {} prompts",
            ratio.map_or("n/a".into(), |r| format!("{r:.3}")),
            out.diversity.len()
        ),
    )
}

// 11: latency

fn ac11() -> Outcome {
    let bench = bench_run(bundle(), DeployOptions::default()).map_err(|e| e.to_string())?;
    let p = &bench.pipeline;
    let get = |s: &str| p.median_ms(s).ok_or(format!("no {s} row"));
    let (total, generate, s1, s3) = (get("total")?, get("generate")?, get("stage1")?, get("stage3")?);
    let share = (s1 + s3) / generate;
    check(
        total < 160.0 && share < 0.10,
        format!("median {total:.3} ms per guarded window; Stage 1 + Stage 3 {:.1}% of generation ({generate:.3} ms)", 100.0 * share),
    )
}

// 12: determinism through the CLI

fn cli_run(out: &Path, args: &[&str], stdin: Option<&Path>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_safeflow"));
    cmd.arg("--config").arg(repo().join("configs/tiny.toml")).arg("--out").arg(out).args(args);
    if let Some(p) = stdin {
        cmd.stdin(std::fs::File::open(p).map_err(|e| e.to_string())?);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn run_all_commands(out: &Path, prompts: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let _ = std::fs::remove_dir_all(out);
    let mut printed = String::new();
    for c in ["gen-data", "train-vae", "train-flow", "distill-reflow", "calibrate-gates", "eval", "gate-eval", "bench-latency"] {
        let text = cli_run(out, &[c], None)?;
        if c != "bench-latency" {
            printed.push_str(&text);
        }
    }
    printed.push_str(&cli_run(out, &["stream", "--windows", "4"], Some(prompts))?);
    printed.push_str(&cli_run(out, &["config", "print"], None)?);
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(out).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    files.insert("<stdout>".into(), printed.into_bytes());
    Ok(files)
}

fn ac12() -> Outcome {
    let tmp = std::env::temp_dir().join(format!("safeflow-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
    let prompts = tmp.join("prompts.txt");
    std::fs::write(&prompts, "stand\nwave hands\ndouble backflip\nnod your head please\nquit\n").map_err(|e| e.to_string())?;
    // same directory both times, so printed paths match too
    let a = run_all_commands(&tmp.join("run"), &prompts)?;
    let b = run_all_commands(&tmp.join("run"), &prompts)?;
    let _ = std::fs::remove_dir_all(&tmp);
    // wall-clock measurements are the one artifact that cannot repeat
    let timed = |n: &str| n.starts_with("latency.");
    let compared: Vec<&String> = a.keys().filter(|n| !timed(n)).collect();
    let differing: Vec<&String> = compared.iter().copied().filter(|n| a.get(*n) != b.get(*n)).collect();
    let same_set = a.keys().eq(b.keys());
    check(
        same_set && differing.is_empty() && compared.len() >= 15,
        format!("{} artifacts compared, {} differ {differing:?}", compared.len(), differing.len()),
    )
}

/// (id, title, needs the trained bundle, check)
type Criterion = (&'static str, &'static str, bool, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    ("ac1", "autodiff matches central differences", true, ac1),
    ("ac2", "flow reproduces a 2-D Gaussian mixture", false, ac2),
    ("ac3", "guidance lowers violation rates", true, ac3),
    ("ac4", "one-step student keeps safety and speed", true, ac4),
    ("ac5", "Stage-1 separates out-of-distribution prompts", true, ac5),
    ("ac6", "Stage-2 score is exact on linear fields", true, ac6),
    ("ac7", "tracking error rises with the instability score", true, ac7),
    ("ac8", "Stage-3 agrees with a brute-force scan", false, ac8),
    ("ac9", "fallback keeps injected episodes upright", true, ac9),
    ("ac10", "guidance preserves multimodality", true, ac10),
    ("ac11", "guarded window fits the generator period", true, ac11),
    ("ac12", "commands reproduce their artifacts bit for bit", false, ac12),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let selected: Vec<&Criterion> = CRITERIA.iter().filter(|c| filters.is_empty() || filters.iter().any(|x| x == c.0)).collect();
    // train up front so no criterion's timing includes it
    if selected.iter().any(|c| c.2) {
        bundle();
    }
    let mut failed = 0;
    let mut ran = 0;
    for &(id, title, _, f) in selected {
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:<5} {title}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:<5} {title}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
