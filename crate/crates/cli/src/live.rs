//! `stream` and `serve`. Both go through the service: `stream` starts one in
//! process on an ephemeral port unless `--connect` names a running one.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use safeflow::config::{Artifacts, RunConfig};
use safeflow::wire::Body;
use safeflow::workflow::{write_json, Bundle, DeployOptions};
use safeflow_client::{Client, ClientError};
use safeflow_server::{AppState, Clock};
use tokio::sync::mpsc;

use crate::CliError;

async fn start_local(cfg: &RunConfig, opts: DeployOptions, clock: Clock, addr: &str) -> Result<std::net::SocketAddr, CliError> {
    let bundle = Bundle::load(cfg, &Artifacts::new(&cfg.run.out_dir))?;
    let pipeline = bundle.deployed(opts)?;
    let state = Arc::new(AppState::new(cfg.clone(), pipeline, cfg.run.seed, clock));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = safeflow_server::serve(listener, state).await {
            eprintln!("error: service stopped: {e}");
        }
    });
    Ok(local)
}

pub fn serve(cfg: &RunConfig, opts: DeployOptions, port: u16, speed: f64) -> Result<(), CliError> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(safeflow::config::ConfigError::Invalid("--speed must be positive".into()).into());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = start_local(cfg, opts, Clock::Realtime { speed }, &format!("127.0.0.1:{port}")).await?;
        println!("listening on http://{addr} (WebSocket at ws://{addr}/ws)");
        tokio::signal::ctrl_c().await?;
        Ok(())
    })
}

/// A prompt line from the operator, or why it was skipped.
#[derive(Debug, PartialEq)]
pub enum InputLine {
    Prompt(String),
    Quit,
    Blank,
    Malformed(String),
}

pub fn classify(raw: &[u8]) -> InputLine {
    let Ok(text) = std::str::from_utf8(raw) else {
        return InputLine::Malformed("not valid UTF-8".into());
    };
    let text = text.trim();
    if text.is_empty() || text.starts_with('#') {
        return InputLine::Blank;
    }
    if text.chars().any(char::is_control) {
        return InputLine::Malformed("contains control characters".into());
    }
    if text == "quit" {
        return InputLine::Quit;
    }
    InputLine::Prompt(text.to_string())
}

fn spawn_reader(prompts: Option<&Path>) -> Result<mpsc::Receiver<Vec<u8>>, CliError> {
    let (tx, rx) = mpsc::channel(16);
    let mut reader: Box<dyn BufRead + Send> = match prompts {
        Some(p) => Box::new(std::io::BufReader::new(std::fs::File::open(p)?)),
        None => Box::new(std::io::BufReader::new(std::io::stdin())),
    };
    std::thread::spawn(move || loop {
        let mut buf = Vec::new();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                if tx.blocking_send(buf).is_err() {
                    break;
                }
            }
        }
    });
    Ok(rx)
}

fn describe(body: &Body) -> Option<String> {
    match body {
        Body::Ack(a) => Some(format!("> {} (window {})", a.text, a.window)),
        Body::GateReport(g) => {
            let verdict = if g.accept { "accept" } else { "REJECT" };
            let mut s = format!("  w{} stage {}: {verdict} score {:.4}", g.window, g.stage, g.score);
            if let Some(tau) = g.threshold {
                s.push_str(&format!(" (threshold {tau:.4})"));
            }
            if let Some(r) = &g.reason {
                s.push_str(&format!(" {r:?}"));
            }
            Some(s)
        }
        Body::Fallback(f) => Some(format!(
            "  w{} fallback to \"{}\" over {} frames after stage {} rejection",
            f.window, f.prompt, f.frames, f.stage
        )),
        Body::Metrics(m) if m.idle => Some(format!(
            "  t {:.2} s, {} steps, JV {:.3}%, SC {:.3}%, MPJPE {:.2} mm, tracking {}",
            m.t,
            m.control_steps,
            m.jv,
            m.sc,
            m.mpjpe_mm,
            if m.tracking_ok { "ok" } else { "FAILED" }
        )),
        Body::Error(e) => Some(format!("warning: {} ({})", e.message, e.code)),
        _ => None,
    }
}

pub fn stream(cfg: &RunConfig, opts: DeployOptions, prompts: Option<&Path>, windows: u64, connect: Option<&str>) -> Result<(), CliError> {
    if windows == 0 {
        return Err(safeflow::config::ConfigError::Invalid("--windows must be at least 1".into()).into());
    }
    let art = Artifacts::new(&cfg.run.out_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let base = match connect {
            Some(url) => url.to_string(),
            None => format!("http://{}", start_local(cfg, opts, Clock::Lockstep { windows }, "127.0.0.1:0").await?),
        };
        let client = Client::new(&base);
        let mut ws = client.connect(&format!("clock=lockstep&windows={windows}&seed={}", cfg.run.seed)).await?;
        let mut input = spawn_reader(prompts)?;
        std::fs::create_dir_all(&art.dir)?;
        let log_path = art.file("stream_gate_log.jsonl");
        let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        let mut line_no = 0usize;
        let mut ran = 0usize;
        while let Some(raw) = input.recv().await {
            line_no += 1;
            let text = match classify(&raw) {
                InputLine::Prompt(t) => t,
                InputLine::Quit => break,
                InputLine::Blank => continue,
                InputLine::Malformed(why) => {
                    eprintln!("warning: line {line_no} skipped: {why}");
                    continue;
                }
            };
            for msg in ws.run_prompt(&text).await? {
                if let Some(s) = describe(&msg.body) {
                    println!("{s}");
                }
                if matches!(msg.body, Body::Ack(_) | Body::GateReport(_) | Body::Fallback(_)) {
                    writeln!(log, "{}", serde_json::to_string(&msg.body).expect("wire bodies serialize"))?;
                }
                if matches!(msg.body, Body::Ack(_)) {
                    ran += 1;
                }
            }
            std::io::stdout().flush()?;
        }
        log.flush()?;
        eprintln!("wrote {}", log_path.display());
        if ran == 0 {
            println!("no prompts were run");
        } else {
            let report = client.session_report().await?;
            let path = art.file("stream_report.json");
            write_json(&path, &report)?;
            eprintln!("wrote {}", path.display());
            println!(
                "episode {}: {} windows, JV {:.3}%, SC {:.3}%, MPJPE {:.2} mm",
                if report.success { "succeeded" } else { "failed" },
                report.windows.len(),
                report.jv_rate,
                report.sc_rate,
                report.mpjpe_mm
            );
        }
        match ws.close().await {
            Ok(()) | Err(ClientError::Ws(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    })
}
