//! Blocking client for a running server: HTTP for commands and views,
//! WebSocket for the event stream.

use std::net::TcpStream;
use std::time::Duration;

use itrain_core::agent::CommandSink;
use itrain_core::protocol::{decode_event, encode_command, CommandEnvelope, TrainingEvent};
use serde_json::Value;
use thiserror::Error;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Connection(String),
    #[error("server rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String, body: Value },
    #[error("unexpected response: {0}")]
    Protocol(String),
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client"),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn ws_url(&self) -> String {
        let rest = self
            .base
            .strip_prefix("https://")
            .map(|r| format!("wss://{r}"))
            .or_else(|| self.base.strip_prefix("http://").map(|r| format!("ws://{r}")))
            .unwrap_or_else(|| format!("ws://{}", self.base));
        format!("{rest}/ws")
    }

    fn read(resp: reqwest::blocking::Response) -> Result<Value, ClientError> {
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| ClientError::Protocol(e.to_string()))?;
        if status.is_success() {
            Ok(body)
        } else {
            Err(ClientError::Rejected {
                status: status.as_u16(),
                message: body["error"].as_str().unwrap_or("request failed").to_string(),
                body,
            })
        }
    }

    /// Posts an envelope; returns the server's `{uuid, status}` answer.
    pub fn submit(&self, envelope: &CommandEnvelope) -> Result<Value, ClientError> {
        let resp = self
            .http
            .post(format!("{}/command", self.base))
            .header("content-type", "application/json")
            .body(encode_command(envelope))
            .send()
            .map_err(|e| ClientError::Connection(e.to_string()))?;
        Self::read(resp)
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .send()
            .map_err(|e| ClientError::Connection(e.to_string()))?;
        Self::read(resp)
    }

    pub fn events(&self) -> Result<EventStream, ClientError> {
        let (ws, _) = tungstenite::connect(self.ws_url()).map_err(|e| ClientError::Connection(e.to_string()))?;
        Ok(EventStream { ws })
    }
}

impl CommandSink for &Client {
    fn submit(&mut self, envelope: CommandEnvelope) -> Result<(), String> {
        Client::submit(self, &envelope).map(|_| ()).map_err(|e| e.to_string())
    }
}

pub struct EventStream {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl EventStream {
    pub fn set_timeout(&self, timeout: Option<Duration>) {
        if let MaybeTlsStream::Plain(s) = self.ws.get_ref() {
            let _ = s.set_read_timeout(timeout);
        }
    }

    /// Next event; `Ok(None)` when the server closes the stream.
    pub fn next_event(&mut self) -> Result<Option<TrainingEvent>, ClientError> {
        loop {
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    return decode_event(t.as_bytes())
                        .map(Some)
                        .map_err(|e| ClientError::Protocol(e.to_string()))
                }
                Ok(Message::Close(_)) => return Ok(None),
                Ok(_) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                Err(e) => return Err(ClientError::Connection(e.to_string())),
            }
        }
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
