use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use itrain_core::hub::Hub;
use itrain_core::protocol::{decode_event, CommandStatus, EventType, TrainingEvent};
use itrain_core::schedule::{InterventionSchedule, ScheduleHook};
use itrain_core::trainer::{BoundaryHook, RunConfig, TrainerOptions};
use itrain_server::{bind, serve, TrainingRun};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

struct TestServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    fn start(hub: Arc<Hub>) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let (listener, addr) = bind("127.0.0.1", 0).await.unwrap();
                addr_tx.send(addr).unwrap();
                serve(listener, hub, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        Self {
            addr: addr_rx.recv().unwrap(),
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    fn post(&self, body: &str) -> (u16, Value) {
        let resp = reqwest::blocking::Client::new()
            .post(self.url("/command"))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().unwrap())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let resp = reqwest::blocking::get(self.url(path)).unwrap();
        (resp.status().as_u16(), resp.json().unwrap())
    }

    fn ws(&self) -> WebSocket<MaybeTlsStream<TcpStream>> {
        let (ws, _) = tungstenite::connect(format!("ws://{}/ws", self.addr)).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        }
        ws
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn next_event(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>) -> Option<TrainingEvent> {
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => return Some(decode_event(t.as_bytes()).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

const A2_OPTIMIZER: &str = r#"{
  "command": "update_optimizer",
  "args": "{\"lr\": {\"value\": 1e-5}}"
}"#;

#[test]
fn documented_example_is_accepted_and_queued() {
    let server = TestServer::start(Arc::new(Hub::default()));
    let (code, body) = server.post(A2_OPTIMIZER);
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["status"], "pending");
    let uuid = body["uuid"].as_str().unwrap().to_string();

    let (_, state) = server.get("/state");
    assert_eq!(state["run_status"], "idle");
    assert_eq!(state["queue_depths"]["optimizer"], 1);
    let (_, history) = server.get("/commands");
    assert_eq!(history.as_array().unwrap().len(), 1);
    assert_eq!(history[0]["envelope"]["uuid"], uuid.as_str());
    assert_eq!(history[0]["envelope"]["args"], r#"{"lr": {"value": 1e-5}}"#);

    let (code, body) = server.post(r#"{"command": "load_checkpoint", "args": "{\"uuid\": \"[uuid]\"}"}"#);
    assert_eq!(code, 200, "{body}");
    assert_eq!(server.get("/state").1["queue_depths"]["checkpoint"], 1);
}

#[test]
fn rejections_carry_reason_and_field() {
    let hub = Arc::new(Hub::default());
    let server = TestServer::start(Arc::clone(&hub));
    let env = json!({"command": "pause_training", "args": "{}", "time": 1.5, "uuid": "fixed"}).to_string();
    assert_eq!(server.post(&env).0, 200);
    let (code, body) = server.post(&env);
    assert_eq!(code, 409);
    assert_eq!(body["code"], "duplicate_uuid");
    assert_eq!(body["field"], "uuid");

    let (code, body) = server.post(r#"{"command": "update_optimizer", "args": "{\"lr\": {\"value\": -1}}"}"#);
    assert_eq!(code, 400);
    assert_eq!(body["field"], "args.lr.value");
    let (code, body) = server.post(r#"{"command": "warp", "args": "{}"}"#);
    assert_eq!(code, 400);
    assert_eq!(body["code"], "unknown_command");
    let (code, _) = server.post("not json");
    assert_eq!(code, 400);
    // Nothing rejected reached the history or a queue.
    assert_eq!(hub.history().len(), 1);
    assert_eq!(hub.pending_count(), 1);
}

/// Resumes a paused run once `n` commands are in the history.
struct ResumeAfter(usize, bool);
impl BoundaryHook for ResumeAfter {
    fn before_boundary(&mut self, _: u64, _: &str, hub: &Hub) {
        if !self.1 && hub.history().len() >= self.0 {
            self.1 = true;
            let env = itrain_core::CommandEnvelope::new(itrain_core::CommandKind::ResumeTraining, &json!({}));
            hub.submit_envelope(env).unwrap();
        }
    }
}

#[test]
fn lifecycle_is_observable_on_the_stream() {
    let hub = Arc::new(Hub::default());
    let server = TestServer::start(Arc::clone(&hub));
    let mut ws = server.ws();
    let snap = next_event(&mut ws).unwrap();
    assert_eq!(snap.event_type, EventType::Snapshot);
    assert_eq!(snap.payload["run_status"], "idle");

    let mut cfg = RunConfig::quadratic(10.0, 0.01, 30);
    cfg.start_paused = true;
    let run = TrainingRun::start(
        Arc::clone(&hub),
        cfg,
        TrainerOptions::default(),
        Box::new(|_| vec![Box::new(ResumeAfter(1, false)) as Box<dyn BoundaryHook>]),
    )
    .unwrap();
    let (_, body) = server.post(A2_OPTIMIZER);
    let uuid = body["uuid"].as_str().unwrap().to_string();

    let mut statuses = Vec::new();
    let mut lrs = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        let Some(ev) = next_event(&mut ws) else { break };
        if let Some((u, s)) = ev.status_update() {
            if u == uuid {
                statuses.push(s);
            }
        }
        if ev.event_type == EventType::Metric {
            lrs.push(ev.payload["lr"].as_f64().unwrap());
        }
        if ev.event_type == EventType::TrainingEnded {
            break;
        }
    }
    use CommandStatus::*;
    assert_eq!(statuses, vec![Requested, Pending, Running, Success]);
    assert_eq!(lrs.len(), 30);
    assert!(lrs.iter().all(|lr| *lr == 1e-5));
    let rt = tokio::runtime::Runtime::new().unwrap();
    let out = rt.block_on(run.finish()).unwrap();
    assert_eq!(out.end_reason, "completed");
    assert_eq!(server.get("/state").1["run_status"], "stopped");
}

#[test]
fn subscribers_get_identical_frames() {
    let hub = Arc::new(Hub::default());
    let server = TestServer::start(Arc::clone(&hub));
    let mut clients: Vec<_> = (0..3).map(|_| server.ws()).collect();
    for c in &mut clients {
        assert_eq!(next_event(c).unwrap().event_type, EventType::Snapshot);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while hub.subscriber_count() < 3 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    hub.publish(&TrainingEvent::log(3, "b0", "info", "hello"));
    hub.publish(&TrainingEvent::training_ended(3, "b0", "completed"));
    let frames: Vec<Vec<String>> = clients
        .iter_mut()
        .map(|c| {
            (0..2)
                .map(|_| match c.read().unwrap() {
                    Message::Text(t) => t.to_string(),
                    other => panic!("{other:?}"),
                })
                .collect()
        })
        .collect();
    assert_eq!(frames[0], frames[1]);
    assert_eq!(frames[1], frames[2]);
}

#[test]
fn branches_and_metrics_after_a_fork() {
    let hub = Arc::new(Hub::default());
    let server = TestServer::start(Arc::clone(&hub));
    let sched = InterventionSchedule::parse(
        "{\"at_step\": 10, \"command\": \"save_checkpoint\", \"uuid\": \"ck\"}\n\
         {\"at_step\": 30, \"command\": \"load_checkpoint\", \"args\": {\"uuid\": \"ck\"}}",
        hub.registry(),
    )
    .unwrap();
    let run = TrainingRun::start(
        Arc::clone(&hub),
        RunConfig::quadratic(10.0, 0.01, 30),
        TrainerOptions::default(),
        Box::new(move |_| vec![Box::new(ScheduleHook::new(sched)) as Box<dyn BoundaryHook>]),
    )
    .unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(run.finish()).unwrap();

    let (_, branches) = server.get("/branches");
    let nodes = branches.as_array().unwrap();
    assert_eq!(nodes.len(), 2);
    assert_eq!(nodes[0]["branch_id"], "b0");
    assert!(nodes[0]["parent_branch_id"].is_null());
    assert_eq!(nodes[1]["parent_branch_id"], "b0");
    assert_eq!(nodes[1]["fork_step"], 10);

    let (code, root) = server.get("/metrics?branch_id=b0");
    assert_eq!(code, 200);
    assert_eq!(root.as_array().unwrap().len(), 30);
    let (_, child) = server.get("/metrics?branch_id=b0.1");
    assert_eq!(child.as_array().unwrap().len(), 20);
    assert_eq!(child[0]["step"], 11);
    assert_eq!(server.get("/metrics?branch_id=b7").0, 404);
    assert_eq!(server.get("/state").1["checkpoints"][0]["uuid"], "ck");
}

#[test]
fn trainer_start_errors_surface() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), "{}").unwrap();
    let hub = Arc::new(Hub::default());
    let opts = TrainerOptions {
        run_dir: Some(dir.path().into()),
        ..Default::default()
    };
    let err = TrainingRun::start(hub, RunConfig::quadratic(1.0, 0.1, 5), opts, Box::new(|_| vec![]));
    assert!(err.is_err());
}
