//! HTTP/JSON and WebSocket front end for a trained safeflow run.
//!
//! | route | method | body | reply |
//! |---|---|---|---|
//! | `/health` | GET | | `{"status":"ok", ...}` |
//! | `/config` | GET | | the run configuration |
//! | `/stage1` | POST | `{"text"}` | `{"d2","tau","accept"}` |
//! | `/window` | POST | `{"text","history"?,"window"?,"seed"?}` | gate verdicts and the generated future |
//! | `/episode` | POST | an episode spec | an episode report |
//! | `/session/report` | GET | | report of the live WebSocket session |
//! | `/ws` | GET | | one NDJSON streaming session |

pub mod session;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use safeflow::config::RunConfig;
use safeflow::pipeline::{run_episode, EpisodeSpec, Pipeline, PipelineError};
use safeflow::tracker::{EpisodeReport, TrackerConfig};
use safeflow::wire::{parse_line, to_line, Body, ErrorPayload, Health, Stage1Reply, TextRequest, WindowReply, WindowRequest, WireMessage};
use serde::Deserialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

pub use session::{Clock, Command};

/// Capacity of the outbound message queue of a streaming session.
pub const QUEUE_CAPACITY: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("worker failed: {0}")]
    Join(#[from] tokio::task::JoinError),
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = match self {
            ServerError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServerError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

pub struct AppState {
    pub cfg: RunConfig,
    pub pipeline: Arc<Pipeline>,
    pub tracker: TrackerConfig,
    pub seed: u64,
    /// Used when a WebSocket client does not pick a clock.
    pub default_clock: Clock,
    session: Mutex<Option<mpsc::Sender<Command>>>,
    busy: AtomicBool,
}

impl AppState {
    pub fn new(cfg: RunConfig, pipeline: Pipeline, seed: u64, default_clock: Clock) -> Self {
        let tracker = cfg.tracker.build(&cfg.chain);
        Self {
            cfg,
            pipeline: Arc::new(pipeline),
            tracker,
            seed,
            default_clock,
            session: Mutex::new(None),
            busy: AtomicBool::new(false),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/config", get(config))
        .route("/stage1", post(stage1))
        .route("/window", post(window))
        .route("/episode", post(episode))
        .route("/session/report", get(session_report))
        .route("/ws", get(ws_upgrade))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    let g = &st.pipeline.generator;
    Json(Health {
        status: "ok".into(),
        gates: st.pipeline.mode,
        nfe: g.sampler.nfe,
        guided: g.guidance.is_some() || g.field.role != safeflow::flow::FieldRole::Base,
    })
}

async fn config(State(st): State<Arc<AppState>>) -> Json<RunConfig> {
    Json(st.cfg.clone())
}

async fn stage1(State(st): State<Arc<AppState>>, Json(req): Json<TextRequest>) -> Result<Json<Stage1Reply>, ServerError> {
    let gates = st
        .pipeline
        .gates
        .as_ref()
        .ok_or_else(|| ServerError::BadRequest("gates are disabled".into()))?;
    let e = st.pipeline.generator.embedder.embed(&req.text);
    let d2 = gates.semantic.d2(&e);
    Ok(Json(Stage1Reply {
        d2,
        tau: gates.semantic.tau,
        accept: d2 <= gates.semantic.tau,
    }))
}

async fn window(State(st): State<Arc<AppState>>, Json(req): Json<WindowRequest>) -> Result<Json<WindowReply>, ServerError> {
    let p = st.pipeline.clone();
    let t_hist = p.t_hist();
    let n = p.generator.n_joints();
    let history = req
        .history
        .unwrap_or_else(|| vec![p.generator.chain.nominal_pose.clone(); t_hist]);
    if history.len() != t_hist || history.iter().any(|f| f.len() != n || f.iter().any(|v| !v.is_finite())) {
        return Err(ServerError::BadRequest(format!("history must be {t_hist} finite frames of {n} joints")));
    }
    let seed = req.seed.unwrap_or(st.seed);
    let out = tokio::task::spawn_blocking(move || p.window(&history, &req.text, req.window, seed, None)).await??;
    Ok(Json(WindowReply {
        accepted: out.accepted,
        decisions: out.decisions,
        d2: out.d2,
        r: out.r,
        future: out.future,
    }))
}

async fn episode(State(st): State<Arc<AppState>>, Json(spec): Json<EpisodeSpec>) -> Result<Json<EpisodeReport>, ServerError> {
    if spec.windows == 0 || spec.windows > 10_000 {
        return Err(ServerError::BadRequest("windows must be in 1..=10000".into()));
    }
    let (p, tracker) = (st.pipeline.clone(), st.tracker.clone());
    let report = tokio::task::spawn_blocking(move || run_episode(&p, &tracker, &spec)).await??;
    Ok(Json(report.0))
}

async fn session_report(State(st): State<Arc<AppState>>) -> Result<Json<EpisodeReport>, ServerError> {
    let tx = st.session.lock().expect("session lock").clone();
    let tx = tx.ok_or_else(|| ServerError::NotFound("no streaming session".into()))?;
    let (reply, rx) = oneshot::channel();
    tx.send(Command::Report(reply))
        .await
        .map_err(|_| ServerError::NotFound("session ended".into()))?;
    rx.await
        .ok()
        .flatten()
        .map(Json)
        .ok_or_else(|| ServerError::NotFound("session has not started".into()))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct WsParams {
    pub clock: Option<String>,
    pub windows: Option<u64>,
    pub speed: Option<f64>,
    pub seed: Option<u64>,
}

impl WsParams {
    fn clock(&self, default: Clock) -> Result<Clock, ServerError> {
        let clock = match self.clock.as_deref() {
            None => default,
            Some("realtime") => Clock::Realtime {
                speed: match default {
                    Clock::Realtime { speed } => speed,
                    Clock::Lockstep { .. } => 1.0,
                },
            },
            Some("lockstep") => Clock::Lockstep {
                windows: match default {
                    Clock::Lockstep { windows } => windows,
                    Clock::Realtime { .. } => 10,
                },
            },
            Some(other) => return Err(ServerError::BadRequest(format!("unknown clock {other:?}"))),
        };
        Ok(match clock {
            Clock::Realtime { speed } => {
                let speed = self.speed.unwrap_or(speed);
                if !(speed > 0.0 && speed.is_finite()) {
                    return Err(ServerError::BadRequest("speed must be positive".into()));
                }
                Clock::Realtime { speed }
            }
            Clock::Lockstep { windows } => {
                let windows = self.windows.unwrap_or(windows);
                if windows == 0 {
                    return Err(ServerError::BadRequest("windows must be at least 1".into()));
                }
                Clock::Lockstep { windows }
            }
        })
    }
}

async fn ws_upgrade(State(st): State<Arc<AppState>>, Query(params): Query<WsParams>, ws: WebSocketUpgrade) -> Response {
    let clock = match params.clock(st.default_clock) {
        Ok(c) => c,
        Err(e) => return e.into_response(),
    };
    if st.busy.swap(true, Ordering::SeqCst) {
        return (StatusCode::CONFLICT, "a session is already connected").into_response();
    }
    let seed = params.seed.unwrap_or(st.seed);
    ws.on_upgrade(move |socket| async move {
        run_socket(socket, st.clone(), clock, seed).await;
        *st.session.lock().expect("session lock") = None;
        st.busy.store(false, Ordering::SeqCst);
    })
}

/// Client-side sequence and type checks for inbound lines.
#[derive(Debug, Default)]
pub struct InboundCheck {
    last_seq: Option<u64>,
}

impl InboundCheck {
    /// The prompt text of a valid line; `Err((code, message, reset))` otherwise.
    pub fn check(&mut self, line: &str) -> Result<String, (String, String, bool)> {
        let msg = parse_line(line).map_err(|e| ("protocol".to_string(), e.to_string(), true))?;
        if self.last_seq.is_some_and(|s| msg.seq <= s) {
            return Err(("protocol".into(), format!("sequence number {} does not increase", msg.seq), true));
        }
        self.last_seq = Some(msg.seq);
        match msg.body {
            Body::Prompt(p) if p.text.trim().is_empty() => Err(("empty_prompt".into(), "prompt text is empty".into(), false)),
            Body::Prompt(p) => Ok(p.text.trim().to_string()),
            other => Err((
                "protocol".into(),
                format!("clients may only send prompt messages, got {}", other.kind()),
                true,
            )),
        }
    }

    pub fn reset(&mut self) {
        self.last_seq = None;
    }
}

async fn run_socket(socket: WebSocket, st: Arc<AppState>, clock: Clock, seed: u64) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<Body>(QUEUE_CAPACITY);
    let (cmd_tx, cmd_rx) = mpsc::channel::<Command>(64);
    *st.session.lock().expect("session lock") = Some(cmd_tx.clone());

    let pipeline = st.pipeline.clone();
    let tracker = st.tracker.clone();
    let outbound = session::Outbound::new(out_tx.clone());
    let control = std::thread::spawn(move || session::control_loop(&pipeline, &tracker, seed, clock, cmd_rx, outbound));

    // one writer assigns sequence numbers in emission order
    let writer = tokio::spawn(async move {
        let mut seq = 0u64;
        while let Some(body) = out_rx.recv().await {
            seq += 1;
            let line = to_line(&WireMessage { seq, body });
            if sink.send(Message::Text(line.into())).await.is_err() {
                break;
            }
        }
    });

    let ticker = match clock {
        Clock::Realtime { speed } => {
            let tx = cmd_tx.clone();
            let period = std::time::Duration::from_secs_f64(safeflow::pipeline::GENERATOR_PERIOD / speed);
            Some(tokio::spawn(async move {
                let mut interval = tokio::time::interval(period);
                interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    interval.tick().await;
                    if tx.send(Command::Tick).await.is_err() {
                        break;
                    }
                }
            }))
        }
        Clock::Lockstep { .. } => None,
    };

    let mut check = InboundCheck::default();
    'read: while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            Message::Binary(_) => {
                let err = Body::Error(ErrorPayload {
                    code: "protocol".into(),
                    message: "binary frames are not part of the protocol".into(),
                });
                if out_tx.send(err).await.is_err() || cmd_tx.send(Command::Reset).await.is_err() {
                    break;
                }
                check.reset();
                continue;
            }
            _ => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let cmd = match check.check(line) {
                Ok(prompt) => Command::Prompt(prompt),
                Err((code, message, reset)) => {
                    if out_tx.send(Body::Error(ErrorPayload { code, message })).await.is_err() {
                        break 'read;
                    }
                    if !reset {
                        continue;
                    }
                    check.reset();
                    Command::Reset
                }
            };
            if cmd_tx.send(cmd).await.is_err() {
                break 'read;
            }
        }
    }

    if let Some(t) = ticker {
        t.abort();
    }
    *st.session.lock().expect("session lock") = None;
    drop(cmd_tx);
    drop(out_tx);
    // the control thread exits once its command channel closes
    let _ = tokio::task::spawn_blocking(move || control.join()).await;
    let _ = writer.await;
}
