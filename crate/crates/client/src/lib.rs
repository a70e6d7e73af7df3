//! Thin async client for the safeflow service: typed calls for the HTTP/JSON
//! routes and a line-oriented WebSocket stream.

use futures::{SinkExt, StreamExt};
use safeflow::config::RunConfig;
use safeflow::pipeline::EpisodeSpec;
use safeflow::tracker::EpisodeReport;
use safeflow::wire::{
    parse_line, to_line, Body, Health, PromptPayload, Stage1Reply, TextRequest, WindowReply, WindowRequest, WireError,
    WireMessage,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server replied {status}: {body}")]
    Status { status: u16, body: String },
    #[error("websocket: {0}")]
    Ws(#[from] Box<tokio_tungstenite::tungstenite::Error>),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("stream closed")]
    Closed,
}

impl From<tokio_tungstenite::tungstenite::Error> for ClientError {
    fn from(e: tokio_tungstenite::tungstenite::Error) -> Self {
        Self::Ws(Box::new(e))
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is `http://host:port`.
    pub fn new(base: &str) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base.trim_end_matches('/').to_string(),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        Ok(resp.json().await?)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn config(&self) -> Result<RunConfig, ClientError> {
        self.get("/config").await
    }

    pub async fn stage1(&self, text: &str) -> Result<Stage1Reply, ClientError> {
        self.post("/stage1", &TextRequest { text: text.into() }).await
    }

    pub async fn window(&self, req: &WindowRequest) -> Result<WindowReply, ClientError> {
        self.post("/window", req).await
    }

    pub async fn episode(&self, spec: &EpisodeSpec) -> Result<EpisodeReport, ClientError> {
        self.post("/episode", spec).await
    }

    pub async fn session_report(&self) -> Result<EpisodeReport, ClientError> {
        self.get("/session/report").await
    }

    /// Opens the streaming session; `query` is appended verbatim, e.g.
    /// `clock=lockstep&windows=10`.
    pub async fn connect(&self, query: &str) -> Result<Stream, ClientError> {
        let ws_base = self.base.replacen("http", "ws", 1);
        let url = if query.is_empty() {
            format!("{ws_base}/ws")
        } else {
            format!("{ws_base}/ws?{query}")
        };
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(Stream {
            ws,
            seq: 0,
            pending: std::collections::VecDeque::new(),
        })
    }
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

pub struct Stream {
    ws: Socket,
    seq: u64,
    pending: std::collections::VecDeque<String>,
}

impl Stream {
    /// Sends one raw line as-is, for protocol tests.
    pub async fn send_raw(&mut self, line: &str) -> Result<(), ClientError> {
        self.ws.send(Message::Text(line.to_string().into())).await?;
        Ok(())
    }

    pub async fn send_prompt(&mut self, text: &str) -> Result<u64, ClientError> {
        self.seq += 1;
        let line = to_line(&WireMessage {
            seq: self.seq,
            body: Body::Prompt(PromptPayload { text: text.into() }),
        });
        self.send_raw(&line).await?;
        Ok(self.seq)
    }

    /// Next raw line from the server, `None` once the socket closes.
    pub async fn next_line(&mut self) -> Result<Option<String>, ClientError> {
        loop {
            if let Some(line) = self.pending.pop_front() {
                return Ok(Some(line));
            }
            match self.ws.next().await {
                None => return Ok(None),
                Some(Err(e)) => return Err(e.into()),
                Some(Ok(Message::Text(t))) => {
                    self.pending.extend(t.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
                }
                Some(Ok(Message::Close(_))) => return Ok(None),
                Some(Ok(_)) => {}
            }
        }
    }

    pub async fn next(&mut self) -> Result<Option<WireMessage>, ClientError> {
        match self.next_line().await? {
            None => Ok(None),
            Some(line) => Ok(Some(parse_line(&line)?)),
        }
    }

    /// Sends a prompt and collects messages up to the `idle` metrics that ends
    /// it. Only meaningful with the lockstep clock.
    pub async fn run_prompt(&mut self, text: &str) -> Result<Vec<WireMessage>, ClientError> {
        self.send_prompt(text).await?;
        let mut out = Vec::new();
        loop {
            let msg = self.next().await?.ok_or(ClientError::Closed)?;
            let done = matches!(&msg.body, Body::Metrics(m) if m.idle) || matches!(msg.body, Body::Error(_));
            out.push(msg);
            if done {
                return Ok(out);
            }
        }
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        self.ws.close(None).await?;
        Ok(())
    }
}
