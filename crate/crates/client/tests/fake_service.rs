//! The client against a scripted stand-in service.

use axum::extract::ws::{Message, WebSocketUpgrade};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use safeflow::wire::Body;
use safeflow_client::{Client, ClientError};

async fn ws(up: WebSocketUpgrade) -> impl IntoResponse {
    up.on_upgrade(|mut socket| async move {
        while let Some(Ok(Message::Text(t))) = socket.recv().await {
            let v: serde_json::Value = serde_json::from_str(&t).unwrap();
            let text = v["payload"]["text"].as_str().unwrap().to_string();
            let seq = v["seq"].as_u64().unwrap();
            if text == "boom" {
                let line = format!(r#"{{"type":"error","seq":{seq},"payload":{{"code":"internal","message":"boom"}}}}"#);
                socket.send(Message::Text(line.into())).await.unwrap();
                continue;
            }
            // two lines in one frame, then the idle metrics alone
            let batch = format!(
                "{{\"type\":\"ack\",\"seq\":{seq},\"payload\":{{\"text\":\"{text}\",\"window\":0}}}}\n\
                 {{\"type\":\"metrics\",\"seq\":{},\"payload\":{{\"window\":0,\"t\":0.16,\"control_steps\":8,\"tracking_ok\":true,\"jv\":0.0,\"sc\":0.0,\"mpjpe_mm\":1.0}}}}\n",
                seq + 100
            );
            socket.send(Message::Text(batch.into())).await.unwrap();
            let idle = format!(
                r#"{{"type":"metrics","seq":{},"payload":{{"window":1,"t":0.32,"control_steps":16,"tracking_ok":true,"jv":0.0,"sc":0.0,"mpjpe_mm":1.0,"idle":true}}}}"#,
                seq + 200
            );
            socket.send(Message::Text(idle.into())).await.unwrap();
        }
    })
}

async fn start() -> String {
    let app = Router::new()
        .route("/ws", get(ws))
        .route("/health", get(|| async { (StatusCode::SERVICE_UNAVAILABLE, "warming up") }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/")
}

#[tokio::test]
async fn non_success_status_carries_the_body() {
    let client = Client::new(&start().await);
    match client.health().await {
        Err(ClientError::Status { status, body }) => assert_eq!((status, body.as_str()), (503, "warming up")),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn run_prompt_collects_until_idle_and_splits_batched_lines() {
    let client = Client::new(&start().await);
    let mut ws = client.connect("").await.unwrap();
    let msgs = ws.run_prompt("nod").await.unwrap();
    let kinds: Vec<_> = msgs.iter().map(|m| m.body.kind()).collect();
    assert_eq!(kinds, ["ack", "metrics", "metrics"]);
    assert_eq!(msgs[0].seq, 1);

    let msgs = ws.run_prompt("boom").await.unwrap();
    assert!(matches!(&msgs[..], [m] if matches!(&m.body, Body::Error(e) if e.message == "boom")));
    // the prompt counter kept going
    let msgs = ws.run_prompt("wave").await.unwrap();
    assert_eq!(msgs[0].seq, 3);
    ws.close().await.unwrap();
}

#[tokio::test]
async fn unreachable_service_is_an_http_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = Client::new(&format!("http://{addr}"));
    assert!(matches!(client.health().await, Err(ClientError::Http(_))));
    assert!(matches!(client.connect("").await, Err(ClientError::Ws(_))));
}
