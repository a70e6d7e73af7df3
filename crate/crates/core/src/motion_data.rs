//! Toy prompt embedder and the synthetic motion-primitive dataset.
//!
//! Each primitive is a per-joint sinusoid around an offset. Trajectories jitter
//! amplitude, frequency and phase, and every window carries its own paraphrase
//! of the primitive's phrase so the prompt distribution has some spread.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::ChainModel;
use crate::rng::{derive, fnv1a, normal_vec, seeded, Rng};

pub const EMBED_DIM: usize = 32;
pub const EMBED_BUCKETS: usize = 256;
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 4 primitives including \"stand\", got {0:?}")]
    Primitives(Vec<String>),
    #[error("primitive {name}: {reason}")]
    BadPrimitive { name: String, reason: String },
    #[error("primitive {name} produced a non-finite angle")]
    NonFinite { name: String },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("dataset format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Bag-of-hashed-tokens embedder standing in for a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedder {
    pub seed: u64,
    projection: Vec<f64>,
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).collect()
}

impl PromptEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(derive(seed, &[0x656d_6264]));
        Self {
            seed,
            projection: normal_vec(&mut rng, EMBED_BUCKETS * EMBED_DIM),
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(token.as_bytes());
        (fnv1a(&bytes) % EMBED_BUCKETS as u64) as usize
    }

    pub fn embed(&self, prompt: &str) -> Vec<f64> {
        let mut e = vec![0.0; EMBED_DIM];
        for tok in tokenize(prompt) {
            let row = &self.projection[self.bucket(&tok) * EMBED_DIM..][..EMBED_DIM];
            for (a, b) in e.iter_mut().zip(row) {
                *a += b;
            }
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            e.iter_mut().for_each(|v| *v /= norm);
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionPrimitive {
    /// Canonical prompt phrase.
    pub name: String,
    /// Alternative phrasings used for paraphrased prompts.
    #[serde(default)]
    pub phrases: Vec<String>,
    pub amplitude: Vec<f64>,
    /// Hz
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
    pub offset: Vec<f64>,
    pub duration_frames: usize,
    /// Relative jitter of amplitude and frequency per trajectory.
    #[serde(default)]
    pub jitter: f64,
}

impl MotionPrimitive {
    fn validate(&self, n: usize) -> Result<(), DataError> {
        let bad = |reason: String| DataError::BadPrimitive {
            name: self.name.clone(),
            reason,
        };
        for (what, v) in [
            ("amplitude", &self.amplitude),
            ("frequency", &self.frequency),
            ("phase", &self.phase),
            ("offset", &self.offset),
        ] {
            if v.len() != n {
                return Err(bad(format!("{what} has {} entries, expected {n}", v.len())));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(bad("jitter must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn all_phrases(&self) -> Vec<&str> {
        std::iter::once(self.name.as_str())
            .chain(self.phrases.iter().map(String::as_str))
            .collect()
    }

    /// Per-trajectory draw: amplitude scaled down by up to `jitter`, frequency
    /// scaled by `1 ± jitter/2`, one random phase shift shared by all joints.
    pub fn sample_trajectory(&self, frame_dt: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>, DataError> {
        let (a_scale, f_scale, shift) = if self.jitter > 0.0 {
            (
                1.0 - self.jitter * rng.random::<f64>(),
                1.0 + self.jitter * (rng.random::<f64>() - 0.5),
                std::f64::consts::TAU * rng.random::<f64>(),
            )
        } else {
            (1.0, 1.0, 0.0)
        };
        let two_pi = std::f64::consts::TAU;
        let frames: Vec<Vec<f64>> = (0..self.duration_frames)
            .map(|t| {
                let time = t as f64 * frame_dt;
                (0..self.offset.len())
                    .map(|j| {
                        self.offset[j]
                            + a_scale
                                * self.amplitude[j]
                                * (two_pi * f_scale * self.frequency[j] * time + self.phase[j] + shift).sin()
                    })
                    .collect()
            })
            .collect();
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                name: self.name.clone(),
            });
        }
        Ok(frames)
    }
}

/// Primitives tailored to `chain`. Two of them push past joint limits by at
/// most 0.15 rad and one curls the chain into sphere contact, so unguided
/// generation has something to violate.
pub fn default_primitives(chain: &ChainModel) -> Vec<MotionPrimitive> {
    let n = chain.n_joints();
    let nominal = chain.nominal_pose.clone();
    let base = |name: &str, phrases: &[&str]| MotionPrimitive {
        name: name.into(),
        phrases: phrases.iter().map(|s| s.to_string()).collect(),
        amplitude: vec![0.0; n],
        frequency: vec![0.5; n],
        phase: vec![0.0; n],
        offset: nominal.clone(),
        duration_frames: 48,
        jitter: 0.2,
    };
    let set = |p: &mut MotionPrimitive, j: usize, amp: f64, freq: f64, phase: f64, dq: f64| {
        if j < n {
            p.amplitude[j] = amp;
            p.frequency[j] = freq;
            p.phase[j] = phase;
            p.offset[j] = nominal[j] + dq;
        }
    };
    // offset for a joint whose peak exceeds q_max by `excess`
    let graze = |j: usize, amp: f64, excess: f64| chain.joint_limits[j.min(n - 1)][1] + excess - amp - nominal[j.min(n - 1)];

    let mut out = Vec::new();
    let mut stand = base("stand", &["stand still", "stay still", "hold still"]);
    stand.jitter = 0.0;
    out.push(stand);

    let mut wave = base("wave hands", &["wave your hands", "wave hello", "wave"]);
    for (k, j) in (5..n).enumerate() {
        set(&mut wave, j, 0.7, 1.2, 0.6 * k as f64, 0.0);
    }
    out.push(wave);

    let mut bow = base("bow", &["take a bow", "bow down", "bend forward"]);
    set(&mut bow, 0, 0.5, 0.4, 0.0, -0.5);
    set(&mut bow, 1, 0.3, 0.4, 0.0, -0.3);
    out.push(bow);

    let mut sway = base("sway side to side", &["sway", "rock side to side", "swing gently"]);
    set(&mut sway, 0, 0.4, 0.6, 0.0, 0.0);
    set(&mut sway, 1, 0.3, 0.6, std::f64::consts::PI, 0.0);
    set(&mut sway, 2, 0.2, 0.6, 0.0, 0.0);
    out.push(sway);

    let mut nod = base("nod", &["nod your head", "nod yes", "bob head"]);
    set(&mut nod, n - 2, 0.3, 1.5, 0.0, 0.0);
    set(&mut nod, n - 1, 0.4, 1.5, 0.5, 0.0);
    out.push(nod);

    let mut circle = base("circle arms", &["make circles", "rotate arms", "circle around"]);
    for j in 2..n.min(6) {
        set(&mut circle, j, 0.35, 0.8, 0.9 * j as f64, 0.0);
    }
    out.push(circle);

    // limit-grazing
    let mut stretch = base("stretch up high", &["stretch", "reach up", "stretch high"]);
    set(&mut stretch, 1, 0.6, 0.5, 0.0, graze(1, 0.6, 0.12));
    set(&mut stretch, 2, 0.5, 0.5, 0.3, graze(2, 0.5, 0.12));
    out.push(stretch);

    let mut kick = base("high step", &["step high", "lift knee", "march high"]);
    set(&mut kick, 3, 0.7, 0.9, 0.0, graze(3, 0.7, 0.12));
    set(&mut kick, 4, 0.6, 0.9, 0.4, graze(4, 0.6, 0.12));
    out.push(kick);

    // collision-grazing: bending the outer joints together folds the tip
    // back onto the inner links
    let mut curl = base("curl up", &["curl", "curl into a ball", "fold up"]);
    for j in 2..n {
        set(&mut curl, j, 0.14, 0.5, 0.0, 0.88);
    }
    curl.jitter = 0.1;
    out.push(curl);

    out
}

/// Prompt template pieces. Every window picks one of each.
const PREFIXES: &[&str] = &["", "please", "now", "robot", "ok", "go and", "time to"];
const SUFFIXES: &[&str] = &["", "slowly", "again", "for me", "a little", "smoothly", "please"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub frame_dt: f64,
    pub t_hist: usize,
    pub t_fut: usize,
    pub trajectories_per_primitive: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            frame_dt: 0.04,
            t_hist: 2,
            t_fut: 8,
            trajectories_per_primitive: 30,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionWindow {
    pub history: Vec<Vec<f64>>,
    pub future: Vec<Vec<f64>>,
    pub prompt: String,
    /// Source trajectory index and first frame, for reassembly.
    pub trajectory: usize,
    pub start: usize,
}

impl MotionWindow {
    pub fn frames(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter().chain(&self.future)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryInfo {
    pub primitive: String,
    pub split: Split,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub primitives: Vec<MotionPrimitive>,
    pub trajectories: Vec<TrajectoryInfo>,
    pub train: Vec<MotionWindow>,
    pub val: Vec<MotionWindow>,
}

pub fn paraphrase(primitive: &MotionPrimitive, rng: &mut Rng) -> String {
    let phrase = primitive.all_phrases().choose(rng).copied().unwrap_or("");
    let pre = PREFIXES.choose(rng).copied().unwrap_or("");
    let suf = SUFFIXES.choose(rng).copied().unwrap_or("");
    [pre, phrase, suf]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate_dataset(spec: &DatasetSpec, primitives: &[MotionPrimitive], n_joints: usize) -> Result<Dataset, DataError> {
    if primitives.len() < 4 || !primitives.iter().any(|p| p.name == "stand") {
        return Err(DataError::Primitives(
            primitives.iter().map(|p| p.name.clone()).collect(),
        ));
    }
    if !(spec.frame_dt > 0.0) || spec.t_hist == 0 || spec.t_fut == 0 || !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(DataError::Spec(format!("{spec:?}")));
    }
    let window = spec.t_hist + spec.t_fut;
    for p in primitives {
        p.validate(n_joints)?;
        if p.duration_frames < window {
            return Err(DataError::BadPrimitive {
                name: p.name.clone(),
                reason: format!("duration {} shorter than a window", p.duration_frames),
            });
        }
    }
    let mut trajectories = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let per = spec.trajectories_per_primitive.max(1);
    let n_val = ((per as f64) * spec.val_fraction).round() as usize;
    for (pi, prim) in primitives.iter().enumerate() {
        for k in 0..per {
            let idx = trajectories.len();
            let mut rng = seeded(derive(spec.seed, &[0x7472_616a, pi as u64, k as u64]));
            let frames = prim.sample_trajectory(spec.frame_dt, &mut rng)?;
            // the last n_val trajectories of each primitive go to validation
            let split = if k >= per - n_val { Split::Val } else { Split::Train };
            trajectories.push(TrajectoryInfo {
                primitive: prim.name.clone(),
                split,
                len: frames.len(),
            });
            for start in 0..=frames.len() - window {
                let w = MotionWindow {
                    history: frames[start..start + spec.t_hist].to_vec(),
                    future: frames[start + spec.t_hist..start + window].to_vec(),
                    prompt: paraphrase(prim, &mut rng),
                    trajectory: idx,
                    start,
                };
                match split {
                    Split::Train => train.push(w),
                    Split::Val => val.push(w),
                }
            }
        }
    }
    Ok(Dataset {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        primitives: primitives.to_vec(),
        trajectories,
        train,
        val,
    })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let ds: Dataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ds.format_version != DATASET_FORMAT_VERSION {
            return Err(DataError::Version {
                found: ds.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        Ok(ds)
    }

    pub fn primitive_of(&self, w: &MotionWindow) -> &str {
        &self.trajectories[w.trajectory].primitive
    }

    pub fn training_vocabulary(&self) -> BTreeSet<String> {
        self.train.iter().flat_map(|w| tokenize(&w.prompt)).collect()
    }

    /// Rebuilds trajectory `idx` from its stride-1 windows.
    pub fn reassemble(&self, idx: usize) -> Vec<Vec<f64>> {
        let mut frames: Vec<Vec<f64>> = Vec::new();
        for w in self.train.iter().chain(&self.val).filter(|w| w.trajectory == idx) {
            for (i, f) in w.frames().enumerate() {
                let t = w.start + i;
                if t == frames.len() {
                    frames.push(f.clone());
                }
            }
        }
        frames
    }
}

/// Fresh prompts from the training grammar, used as the in-distribution
/// validation prompt set for Stage 1.
pub fn id_prompts(primitives: &[MotionPrimitive], seed: u64, n: usize) -> Vec<(String, String)> {
    let mut rng = seeded(derive(seed, &[0x6964_7072]));
    (0..n)
        .map(|_| {
            let p = primitives.choose(&mut rng).expect("primitives");
            (paraphrase(p, &mut rng), p.name.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OodType {
    /// unseen verbs
    A,
    /// extreme dynamics
    B,
}

const OOD_A_VERBS: &[&str] = &[
    "levitate", "crochet", "juggle", "knit", "whistle", "paint", "sew", "photograph", "vacuum", "moonwalk",
    "skateboard", "hula-hoop",
];
const OOD_A_TAILS: &[&str] = &[
    "quickly", "the scarf", "with style", "underwater", "forever", "twice", "sideways", "at midnight", "like crazy",
    "above the table",
];
const OOD_B_MODS: &[&str] = &[
    "double", "triple", "flying", "spinning", "explosive", "reverse", "aerial", "jumping", "360", "butterfly",
];
const OOD_B_MOVES: &[&str] = &[
    "backflip", "tornado kick", "cartwheel", "handspring", "somersault", "split leap", "frontflip", "windmill",
    "corkscrew", "twist jump",
];

/// 100 curated out-of-distribution prompts of the given type, in a seeded
/// order. Type B always contains "double backflip" and "flying tornado kick".
pub fn make_ood_prompts(seed: u64, kind: OodType) -> Vec<String> {
    let mut all: Vec<String> = match kind {
        OodType::A => OOD_A_VERBS
            .iter()
            .flat_map(|v| OOD_A_TAILS.iter().map(move |t| format!("{v} {t}")))
            .collect(),
        OodType::B => OOD_B_MODS
            .iter()
            .flat_map(|m| OOD_B_MOVES.iter().map(move |v| format!("{m} {v}")))
            .collect(),
    };
    let mut rng = seeded(derive(seed, &[0x6f6f_64, kind as u64]));
    use rand::seq::SliceRandom;
    all.shuffle(&mut rng);
    all.truncate(100);
    for must in match kind {
        OodType::A => &[][..],
        OodType::B => &["double backflip", "flying tornado kick"][..],
    } {
        if !all.iter().any(|p| p == must) {
            all[0] = must.to_string();
            all.rotate_left(1);
        }
    }
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            trajectories_per_primitive: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn embedder_properties() {
        let e = PromptEmbedder::new(0);
        let a = e.embed("wave hands");
        assert_eq!(a, e.embed("wave hands"));
        assert_eq!(a, e.embed("hands wave"));
        assert_eq!(a, e.embed("  Wave   HANDS "));
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e.embed(""), vec![0.0; EMBED_DIM]);
        assert_ne!(a, e.embed("double backflip"));
        assert_ne!(PromptEmbedder::new(1).embed("wave hands"), a);
    }

    #[test]
    fn training_tokens_do_not_collide_in_buckets() {
        let chain = ChainModel::default();
        let ds = generate_dataset(&small_spec(), &default_primitives(&chain), 8).unwrap();
        let e = PromptEmbedder::new(0);
        let vocab = ds.training_vocabulary();
        assert!(vocab.len() < 60, "vocabulary {}", vocab.len());
        // single-token bucket collisions are tolerated; whole prompts with
        // disjoint token sets must still embed differently
        let prompts: BTreeSet<&String> = ds.train.iter().map(|w| &w.prompt).collect();
        let prompts: Vec<(&String, BTreeSet<String>, Vec<f64>)> = prompts
            .into_iter()
            .map(|p| (p, tokenize(p).into_iter().collect(), e.embed(p)))
            .collect();
        for (i, a) in prompts.iter().enumerate() {
            for b in &prompts[i + 1..] {
                if a.1.is_disjoint(&b.1) {
                    assert_ne!(a.2, b.2, "{} vs {}", a.0, b.0);
                }
            }
        }
    }

    #[test]
    fn stand_windows_are_constant_nominal() {
        let chain = ChainModel::default();
        let ds = generate_dataset(&small_spec(), &default_primitives(&chain), 8).unwrap();
        let stand: Vec<_> = ds.train.iter().filter(|w| ds.primitive_of(w) == "stand").collect();
        assert!(!stand.is_empty());
        for w in stand {
            for f in w.frames() {
                assert_eq!(f, &chain.nominal_pose);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_split_by_trajectory() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        let a = generate_dataset(&small_spec(), &prims, 8).unwrap();
        let b = generate_dataset(&small_spec(), &prims, 8).unwrap();
        assert_eq!(a, b);
        let train_traj: BTreeSet<usize> = a.train.iter().map(|w| w.trajectory).collect();
        let val_traj: BTreeSet<usize> = a.val.iter().map(|w| w.trajectory).collect();
        assert!(train_traj.is_disjoint(&val_traj));
        assert_eq!(val_traj.len() * 9, train_traj.len());
    }

    #[test]
    fn windows_reassemble_losslessly() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        let spec = small_spec();
        let ds = generate_dataset(&spec, &prims, 8).unwrap();
        for (idx, info) in ds.trajectories.iter().enumerate().step_by(7) {
            let pi = prims.iter().position(|p| p.name == info.primitive).unwrap();
            let k = ds.trajectories[..idx].iter().filter(|t| t.primitive == info.primitive).count();
            let mut rng = seeded(derive(spec.seed, &[0x7472_616a, pi as u64, k as u64]));
            let orig = prims[pi].sample_trajectory(spec.frame_dt, &mut rng).unwrap();
            assert_eq!(ds.reassemble(idx), orig);
        }
    }

    #[test]
    fn limit_grazing_trajectories_violate_limits() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        let ds = generate_dataset(&small_spec(), &prims, 8).unwrap();
        for name in ["stretch up high", "high step"] {
            let p = prims.iter().find(|p| p.name == name).unwrap();
            // peak excess is within the 0.15 rad budget
            for j in 0..8 {
                let peak = p.offset[j] + p.amplitude[j];
                assert!(peak - chain.joint_limits[j][1] <= 0.15 + 1e-12);
            }
            let frames: Vec<&Vec<f64>> = ds
                .train
                .iter()
                .filter(|w| ds.primitive_of(w) == name)
                .flat_map(|w| w.frames())
                .collect();
            let bad = frames
                .iter()
                .filter(|f| f.iter().enumerate().any(|(j, &q)| !chain.within_limits(j, q)))
                .count();
            assert!(bad > 0, "{name} never violates");
        }
    }

    #[test]
    fn curl_reaches_contact() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        let ds = generate_dataset(&small_spec(), &prims, 8).unwrap();
        let touching = ds
            .train
            .iter()
            .filter(|w| ds.primitive_of(w) == "curl up")
            .flat_map(|w| w.frames())
            .filter(|q| {
                chain.collision_pairs.iter().any(|&p| {
                    chain.pair_distance(q, p).unwrap() < chain.contact_distance(p)
                })
            })
            .count();
        assert!(touching > 0);
    }

    #[test]
    fn ood_prompts_are_disjoint_from_training() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        let ds = generate_dataset(&small_spec(), &prims, 8).unwrap();
        let vocab = ds.training_vocabulary();
        let id: BTreeSet<String> = id_prompts(&prims, 3, 300).into_iter().map(|p| p.0).collect();
        for kind in [OodType::A, OodType::B] {
            let ood = make_ood_prompts(0, kind);
            assert_eq!(ood.len(), 100);
            assert_eq!(ood.iter().collect::<BTreeSet<_>>().len(), 100);
            for p in &ood {
                assert!(tokenize(p).iter().all(|t| !vocab.contains(t)), "{p}");
                assert!(!id.contains(p));
            }
            assert_eq!(ood, make_ood_prompts(0, kind));
        }
        let b = make_ood_prompts(0, OodType::B);
        assert!(b.iter().any(|p| p == "double backflip"));
        assert!(b.iter().any(|p| p == "flying tornado kick"));
    }

    #[test]
    fn too_few_primitives_is_an_error() {
        let chain = ChainModel::default();
        let prims = default_primitives(&chain);
        assert!(generate_dataset(&small_spec(), &prims[1..4], 8).is_err());
        let mut broken = prims.clone();
        broken[1].amplitude.pop();
        assert!(generate_dataset(&small_spec(), &broken, 8).is_err());
    }
}
