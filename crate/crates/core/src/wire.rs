//! Newline-delimited JSON messages exchanged with a streaming client.
//!
//! Every line is one object `{"type": ..., "seq": n, "payload": {...}}`.
//! Unknown fields are ignored; an unknown `type` is an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::ChainModel;
use crate::safety_gate::{GateDecision, Reason};
use crate::tracker::EpisodeReport;

pub const MESSAGE_TYPES: [&str; 7] = ["prompt", "ack", "gate_report", "frames", "fallback", "metrics", "error"];

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("empty line")]
    Empty,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Prompt(PromptPayload),
    Ack(AckPayload),
    GateReport(GateReportPayload),
    Frames(FramesPayload),
    Fallback(FallbackPayload),
    Metrics(MetricsPayload),
    Error(ErrorPayload),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Prompt(_) => "prompt",
            Body::Ack(_) => "ack",
            Body::GateReport(_) => "gate_report",
            Body::Frames(_) => "frames",
            Body::Fallback(_) => "fallback",
            Body::Metrics(_) => "metrics",
            Body::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub text: String,
    /// Generator window at which the prompt takes effect.
    pub window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReportPayload {
    pub window: u64,
    pub stage: u8,
    pub accept: bool,
    pub score: f64,
    /// Threshold the score was compared with, when the stage has one.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub reason: Option<Reason>,
    pub t: f64,
}

impl GateReportPayload {
    pub fn new(window: u64, decision: &GateDecision, threshold: Option<f64>) -> Self {
        Self {
            window,
            stage: decision.stage,
            accept: decision.accept,
            score: decision.score,
            threshold,
            reason: decision.reason,
            t: decision.t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Generator,
    Fallback,
}

/// One executed control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub q: Vec<f64>,
    /// Link endpoints from the base outwards, meters.
    pub endpoints: Vec<[f64; 2]>,
    /// Joints outside their position limits.
    #[serde(default)]
    pub violating: Vec<usize>,
}

impl Frame {
    pub fn new(chain: &ChainModel, t: f64, q: &[f64]) -> Self {
        let endpoints = chain.forward_kinematics(q).map(|fk| fk.endpoints).unwrap_or_default();
        let violating = (0..q.len().min(chain.n_joints())).filter(|&j| !chain.within_limits(j, q[j])).collect();
        Self {
            t,
            q: q.to_vec(),
            endpoints,
            violating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesPayload {
    pub window: u64,
    pub source: FrameSource,
    pub dt: f64,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackPayload {
    pub window: u64,
    /// Stage that rejected the window.
    pub stage: u8,
    #[serde(default)]
    pub reason: Option<Reason>,
    pub prompt: String,
    /// Interpolation length in frames.
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPayload {
    pub window: u64,
    pub t: f64,
    pub control_steps: usize,
    pub tracking_ok: bool,
    /// Running joint-limit violation rate over committed frames, percent.
    pub jv: f64,
    /// Running self-collision rate, percent.
    pub sc: f64,
    pub mpjpe_mm: f64,
    #[serde(default)]
    pub r: Option<f64>,
    /// Set on the last message of a scripted prompt in lockstep mode.
    #[serde(default)]
    pub idle: bool,
    #[serde(default)]
    pub report: Option<EpisodeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

// HTTP bodies of the service

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub gates: crate::pipeline::GateMode,
    pub nfe: usize,
    pub guided: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Reply {
    pub d2: f64,
    pub tau: f64,
    pub accept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRequest {
    pub text: String,
    /// Past reference frames; the nominal pose when absent.
    #[serde(default)]
    pub history: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub window: u64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReply {
    pub accepted: bool,
    pub decisions: Vec<GateDecision>,
    pub d2: Option<f64>,
    pub r: Option<f64>,
    pub future: Option<Vec<Vec<f64>>>,
}

pub fn parse_line(line: &str) -> Result<WireMessage, WireError> {
    let line = line.trim();
    if line.is_empty() {
        return Err(WireError::Empty);
    }
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| WireError::Malformed(e.to_string()))?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some(t) if !MESSAGE_TYPES.contains(&t) => return Err(WireError::UnknownType(t.to_string())),
        None => return Err(WireError::Malformed("missing \"type\"".into())),
        _ => {}
    }
    serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Serializes one message as a single line ending in `\n`.
pub fn to_line(msg: &WireMessage) -> String {
    let mut s = serde_json::to_string(msg).expect("wire messages serialize");
    s.push('\n');
    s
}
