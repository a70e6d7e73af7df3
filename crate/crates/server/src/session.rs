//! The streaming control loop. It runs on its own OS thread and owns the
//! episode; the socket tasks only move messages in and out.

use safeflow::pipeline::{Pipeline, PipelineError, Session, Tick};
use safeflow::safety_gate::STAND_PROMPT;
use safeflow::tracker::{EpisodeReport, TrackerConfig};
use safeflow::wire::{
    AckPayload, Body, ErrorPayload, FallbackPayload, Frame, FrameSource, FramesPayload, GateReportPayload, MetricsPayload,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

/// How the session advances in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clock", rename_all = "snake_case")]
pub enum Clock {
    /// One generator period per `0.16 s / speed` of wall time, starting at the
    /// first prompt.
    Realtime { speed: f64 },
    /// Each prompt runs exactly `windows` generator periods, then the loop
    /// reports `idle` and waits for the next prompt.
    Lockstep { windows: u64 },
}

#[derive(Debug)]
pub enum Command {
    Prompt(String),
    Tick,
    Reset,
    Report(oneshot::Sender<Option<EpisodeReport>>),
}

/// Outbound side of the bounded queue. `gate_report`, `frames`, `fallback`,
/// `ack` and `error` wait for room; periodic `metrics` are dropped instead.
#[derive(Debug, Clone)]
pub struct Outbound {
    tx: mpsc::Sender<Body>,
}

impl Outbound {
    pub fn new(tx: mpsc::Sender<Body>) -> Self {
        Self { tx }
    }

    fn send(&self, body: Body) -> bool {
        self.tx.blocking_send(body).is_ok()
    }

    fn send_droppable(&self, body: Body) -> bool {
        match self.tx.try_send(body) {
            Ok(()) | Err(mpsc::error::TrySendError::Full(_)) => true,
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        }
    }
}

/// Runs until the command channel closes or the client goes away.
pub fn control_loop(pipeline: &Pipeline, tracker: &TrackerConfig, seed: u64, clock: Clock, mut commands: mpsc::Receiver<Command>, out: Outbound) {
    let mut session: Option<Session> = None;
    while let Some(cmd) = commands.blocking_recv() {
        let alive = match cmd {
            Command::Prompt(text) => on_prompt(pipeline, tracker, seed, clock, &mut session, &text, &out),
            Command::Tick => match (&mut session, clock) {
                (Some(s), Clock::Realtime { .. }) => run_tick(s, false, &out),
                _ => Ok(true),
            },
            Command::Reset => {
                session = None;
                Ok(true)
            }
            Command::Report(reply) => {
                let _ = reply.send(session.as_ref().and_then(|s| s.report().ok()));
                Ok(true)
            }
        };
        match alive {
            Ok(true) => {}
            Ok(false) => return,
            Err(e) => {
                tracing::warn!("session error: {e}");
                session = None;
                let body = Body::Error(ErrorPayload {
                    code: "internal".into(),
                    message: e.to_string(),
                });
                if !out.send(body) {
                    return;
                }
            }
        }
    }
}

fn on_prompt<'a>(
    pipeline: &'a Pipeline,
    tracker: &TrackerConfig,
    seed: u64,
    clock: Clock,
    session: &mut Option<Session<'a>>,
    text: &str,
    out: &Outbound,
) -> Result<bool, PipelineError> {
    match session {
        Some(s) => s.set_prompt(text),
        None => *session = Some(Session::new(pipeline, tracker.clone(), seed, text)?),
    }
    let s = session.as_mut().expect("session started");
    let ack = Body::Ack(AckPayload {
        text: text.to_string(),
        window: s.window_index(),
    });
    if !out.send(ack) {
        return Ok(false);
    }
    if let Clock::Lockstep { windows } = clock {
        for k in 0..windows {
            if !run_tick(s, k + 1 == windows, out)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Advances one generator period and emits its messages in protocol order.
fn run_tick(session: &mut Session, last_of_prompt: bool, out: &Outbound) -> Result<bool, PipelineError> {
    let tick = session.tick()?;
    for body in tick_messages(session, &tick) {
        if !out.send(body) {
            return Ok(false);
        }
    }
    let metrics = metrics_message(session, &tick, last_of_prompt)?;
    Ok(if last_of_prompt {
        out.send(metrics)
    } else {
        out.send_droppable(metrics)
    })
}

/// Gate reports, then the fallback event if one was engaged, then frames.
pub fn tick_messages(session: &Session, tick: &Tick) -> Vec<Body> {
    let pipeline = session.pipeline();
    let chain = &pipeline.generator.chain;
    let window = tick.log.window;
    let mut out = Vec::new();
    if let Some(outcome) = &tick.outcome {
        for d in &tick.log.decisions {
            let threshold = pipeline.gates.as_ref().and_then(|g| match d.stage {
                1 => Some(g.semantic.tau),
                2 => Some(g.tau_stab),
                _ => Some(0.0),
            });
            out.push(Body::GateReport(GateReportPayload::new(window, d, threshold)));
        }
        if tick.fallback_engaged {
            let rejecting = outcome.decisions.iter().find(|d| !d.accept);
            out.push(Body::Fallback(FallbackPayload {
                window,
                stage: rejecting.map_or(0, |d| d.stage),
                reason: rejecting.and_then(|d| d.reason),
                prompt: STAND_PROMPT.into(),
                frames: session.fallback_len(),
            }));
        }
    }
    let dt = session.tracker.cfg.control_dt;
    let first = tick.log.steps[0];
    out.push(Body::Frames(FramesPayload {
        window,
        source: if tick.log.accepted {
            FrameSource::Generator
        } else {
            FrameSource::Fallback
        },
        dt,
        frames: tick
            .executed
            .iter()
            .enumerate()
            .map(|(i, q)| Frame::new(chain, (first + i + 1) as f64 * dt, q))
            .collect(),
    }));
    out
}

fn metrics_message(session: &Session, tick: &Tick, idle: bool) -> Result<Body, PipelineError> {
    let report = session.report()?;
    Ok(Body::Metrics(MetricsPayload {
        window: tick.log.window,
        t: session.time(),
        control_steps: report.control_steps,
        tracking_ok: !session.tracker.failed(),
        jv: report.jv_rate,
        sc: report.sc_rate,
        mpjpe_mm: report.mpjpe_mm,
        r: tick.log.r,
        idle,
        report: None,
    }))
}
