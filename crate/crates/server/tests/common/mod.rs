use std::sync::{Arc, OnceLock};

use safeflow::config::RunConfig;
use safeflow::pipeline::{GateMode, Pipeline};
use safeflow::workflow::{Bundle, DeployOptions};
use safeflow_client::Client;
use safeflow_server::{AppState, Clock};

pub fn bundle() -> &'static Bundle {
    static B: OnceLock<Bundle> = OnceLock::new();
    B.get_or_init(|| {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
        let cfg = RunConfig::load(&path).expect("tiny config");
        Bundle::train(&cfg).expect("tiny bundle trains")
    })
}

/// The deployed pipeline with Stage 1 and Stage 2 thresholds forced open
/// (`accept`) or Stage 1 forced shut.
pub fn forced(accept: bool) -> Pipeline {
    let mut p = bundle().deployed(DeployOptions::default()).unwrap();
    assert_eq!(p.mode, GateMode::Enforce);
    let g = p.gates.as_mut().unwrap();
    if accept {
        g.semantic.tau = f64::MAX;
        g.tau_stab = f64::MAX;
    } else {
        g.semantic.tau = -1.0;
    }
    p
}

pub async fn start(pipeline: Pipeline, clock: Clock) -> Client {
    let cfg = bundle().cfg.clone();
    let state = Arc::new(AppState::new(cfg, pipeline, 3, clock));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { safeflow_server::serve(listener, state).await.unwrap() });
    Client::new(&format!("http://{addr}"))
}
