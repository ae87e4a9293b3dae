//! Helpers for driving the `itrain` binary from tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_itrain"));
    c.env_remove("ITRAIN_LOG").env_remove("ITRAIN_URL");
    c
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, value.to_string()).unwrap();
    p
}

pub fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("run itrain")
}

/// A `serve` child process with its announced URL.
pub struct Served {
    pub child: Child,
    pub url: String,
    pub run_dir: PathBuf,
    stdout: BufReader<ChildStdout>,
}

impl Served {
    pub fn start(config: &Path, run_dir: &Path, extra: &[&str]) -> Self {
        let mut child = bin()
            .args(["serve", "--port", "0", "--config"])
            .arg(config)
            .arg("--run-dir")
            .arg(run_dir)
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn serve");
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        let v: Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("bad serve banner: {line:?}"));
        Self {
            child,
            url: v["url"].as_str().unwrap().to_string(),
            run_dir: run_dir.to_path_buf(),
            stdout,
        }
    }

    /// Waits for exit; returns the exit code and the `finished` line.
    pub fn wait(mut self, limit: Duration) -> (i32, Value) {
        let deadline = Instant::now() + limit;
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                let mut rest = String::new();
                self.stdout.read_to_string(&mut rest).unwrap();
                let finished = json_lines(rest.as_bytes()).pop().unwrap_or(Value::Null);
                return (status.code().unwrap_or(-1), finished);
            }
            if Instant::now() > deadline {
                let _ = self.child.kill();
                panic!("serve did not exit within {limit:?}");
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn interrupt(&self) {
        let ok = Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap()
            .success();
        assert!(ok, "kill -INT failed");
    }

    pub fn get(&self, path: &str) -> Value {
        reqwest::blocking::get(format!("{}{path}", self.url)).unwrap().json().unwrap()
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

/// Minimal chat-completions server answering with `script` in order
/// (the last entry repeats). Records every request body and auth header.
pub struct MockLlm {
    pub url: String,
    pub requests: Arc<Mutex<Vec<(String, String)>>>,
    _thread: JoinHandle<()>,
}

impl MockLlm {
    pub fn start(script: Vec<String>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let thread = std::thread::spawn(move || {
            for (i, conn) in listener.incoming().enumerate() {
                let Ok(mut conn) = conn else { break };
                let mut reader = BufReader::new(conn.try_clone().unwrap());
                let (mut len, mut auth) = (0usize, String::new());
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("authorization:") {
                        auth = line["authorization:".len()..].trim().to_string();
                    }
                }
                let mut body = vec![0; len];
                let _ = reader.read_exact(&mut body);
                seen.lock().unwrap().push((String::from_utf8_lossy(&body).into_owned(), auth));
                let content = script[i.min(script.len() - 1)].clone();
                let reply = serde_json::json!({
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
                })
                .to_string();
                let _ = write!(
                    conn,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Self {
            url,
            requests,
            _thread: thread,
        }
    }
}
