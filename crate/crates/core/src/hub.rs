//! Control-server state: command queues, history and event fan-out.
//!
//! The hub is shared between the HTTP layer (any number of threads or tasks)
//! and the single training loop. Every mutation and the broadcast of the
//! events it produces happen under one lock, so subscribers observe status
//! changes in the order they were made. Broadcasting never blocks: each
//! subscriber owns a bounded buffer and slow readers lose metric and log
//! frames first. Lifecycle frames are never dropped.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::protocol::{
    decode_command_with, encode_event_string, now_unix, validate_transition, Category, CommandEnvelope,
    CommandRegistry, CommandStatus, EventType, ProtocolError, TrainingEvent,
};
use crate::state::{BranchNode, CheckpointMeta, ROOT_BRANCH};

#[derive(Debug, Error, PartialEq)]
pub enum SubmitError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("duplicate uuid `{0}`")]
    DuplicateUuid(String),
    #[error("submitted status must be `requested`, got `{0}`")]
    NotRequested(CommandStatus),
}

impl SubmitError {
    pub fn code(&self) -> &'static str {
        match self {
            SubmitError::Protocol(e) => e.code(),
            SubmitError::DuplicateUuid(_) => "duplicate_uuid",
            SubmitError::NotRequested(_) => "invalid_status",
        }
    }

    pub fn field(&self) -> Option<String> {
        match self {
            SubmitError::Protocol(e) => e.field(),
            SubmitError::DuplicateUuid(_) => Some("uuid".into()),
            SubmitError::NotRequested(_) => Some("status".into()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ResolveError {
    #[error("unknown command `{0}`")]
    UnknownUuid(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: CommandStatus, to: CommandStatus },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Training,
    Paused,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusChange {
    pub status: CommandStatus,
    pub time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub envelope: CommandEnvelope,
    pub category: Category,
    pub timeline: Vec<StatusChange>,
}

impl HistoryEntry {
    pub fn status(&self) -> CommandStatus {
        self.timeline.last().map(|c| c.status).unwrap_or(CommandStatus::Requested)
    }
}

/// Consistent point-in-time view of the hub.
#[derive(Debug, Clone, Serialize)]
pub struct HubSnapshot {
    pub run_status: RunStatus,
    pub step: u64,
    pub branch_id: String,
    pub queue_depths: BTreeMap<Category, usize>,
    pub history: Vec<HistoryEntry>,
    pub branches: Vec<BranchNode>,
    pub checkpoints: Vec<CheckpointMeta>,
}

impl HubSnapshot {
    /// The `snapshot` event that opens an event stream.
    pub fn to_event(&self) -> TrainingEvent {
        let payload = match serde_json::to_value(self).expect("snapshot serializes") {
            Value::Object(m) => m,
            _ => unreachable!("snapshot is an object"),
        };
        TrainingEvent::new(EventType::Snapshot, self.step, &self.branch_id, payload)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HubConfig {
    /// Frames buffered per subscriber before metric/log frames are dropped.
    pub subscriber_buffer: usize,
    /// Consecutive overflowing pushes after which a subscriber is detached.
    pub detach_after: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            subscriber_buffer: 1024,
            detach_after: 4096,
        }
    }
}

// ---------------------------------------------------------------------------
// Subscribers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub event_type: EventType,
    pub text: Arc<str>,
}

#[derive(Debug, Default)]
struct Buffer {
    queue: VecDeque<Frame>,
    closed: bool,
    dropped: u64,
    overflow_streak: usize,
}

/// One event-stream client. Frames are consumed with [`Subscriber::recv_timeout`]
/// from threads or [`Subscriber::recv`] from async tasks.
#[derive(Debug)]
pub struct Subscriber {
    id: u64,
    capacity: usize,
    detach_after: usize,
    buf: Mutex<Buffer>,
    cond: Condvar,
    notify: tokio::sync::Notify,
}

#[derive(Debug, PartialEq)]
pub enum Recv {
    Frame(Frame),
    Timeout,
    Closed,
}

impl Subscriber {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Frames dropped so far by the backpressure policy.
    pub fn dropped(&self) -> u64 {
        self.buf.lock().dropped
    }

    pub fn is_closed(&self) -> bool {
        self.buf.lock().closed
    }

    pub fn len(&self) -> usize {
        self.buf.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, frame: Frame) -> bool {
        let mut b = self.buf.lock();
        if b.closed {
            return false;
        }
        if b.queue.len() >= self.capacity {
            b.overflow_streak += 1;
            if let Some(i) = b.queue.iter().position(|f| !f.event_type.is_lifecycle()) {
                b.queue.remove(i);
                b.dropped += 1;
                b.queue.push_back(frame);
            } else if !frame.event_type.is_lifecycle() {
                b.dropped += 1;
            } else {
                b.queue.push_back(frame);
            }
            if b.overflow_streak >= self.detach_after || b.queue.len() >= 2 * self.capacity {
                debug!(subscriber = self.id, "detaching slow subscriber");
                b.closed = true;
            }
        } else {
            b.queue.push_back(frame);
        }
        drop(b);
        self.cond.notify_all();
        self.notify.notify_one();
        true
    }

    fn close(&self) {
        self.buf.lock().closed = true;
        self.cond.notify_all();
        self.notify.notify_one();
    }

    fn pop(&self, b: &mut Buffer) -> Option<Frame> {
        let f = b.queue.pop_front();
        if f.is_some() {
            b.overflow_streak = 0;
        }
        f
    }

    pub fn try_recv(&self) -> Recv {
        let mut b = self.buf.lock();
        match self.pop(&mut b) {
            Some(f) => Recv::Frame(f),
            None if b.closed => Recv::Closed,
            None => Recv::Timeout,
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Recv {
        let deadline = Instant::now() + timeout;
        let mut b = self.buf.lock();
        loop {
            if let Some(f) = self.pop(&mut b) {
                return Recv::Frame(f);
            }
            if b.closed {
                return Recv::Closed;
            }
            if self.cond.wait_until(&mut b, deadline).timed_out() {
                return match self.pop(&mut b) {
                    Some(f) => Recv::Frame(f),
                    None if b.closed => Recv::Closed,
                    None => Recv::Timeout,
                };
            }
        }
    }

    /// Next frame, or `None` once the subscriber is detached and drained.
    pub async fn recv(&self) -> Option<Frame> {
        loop {
            let notified = self.notify.notified();
            match self.try_recv() {
                Recv::Frame(f) => return Some(f),
                Recv::Closed => return None,
                Recv::Timeout => notified.await,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Hub
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Inner {
    history: Vec<HistoryEntry>,
    index: HashMap<String, usize>,
    queues: BTreeMap<Category, VecDeque<usize>>,
    run_status: RunStatus,
    step: u64,
    branch_id: String,
    branches: Vec<BranchNode>,
    checkpoints: BTreeMap<String, CheckpointMeta>,
    metrics: BTreeMap<String, Vec<Map<String, Value>>>,
}

pub struct Hub {
    config: HubConfig,
    registry: Arc<CommandRegistry>,
    inner: Mutex<Inner>,
    commands_ready: Condvar,
    subscribers: Mutex<Vec<Arc<Subscriber>>>,
    next_subscriber: AtomicU64,
    history_file: Mutex<Option<BufWriter<File>>>,
    shutdown: AtomicBool,
}

impl Default for Hub {
    fn default() -> Self {
        Self::new(HubConfig::default())
    }
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("config", &self.config).finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    uuid: &'a str,
    status: CommandStatus,
    time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    envelope: Option<&'a CommandEnvelope>,
}

impl Hub {
    pub fn new(config: HubConfig) -> Self {
        Self::with_registry(config, Arc::new(CommandRegistry::builtin()))
    }

    pub fn with_registry(config: HubConfig, registry: Arc<CommandRegistry>) -> Self {
        Self {
            config,
            registry,
            inner: Mutex::new(Inner {
                history: Vec::new(),
                index: HashMap::new(),
                queues: Category::ALL.into_iter().map(|c| (c, VecDeque::new())).collect(),
                run_status: RunStatus::Idle,
                step: 0,
                branch_id: ROOT_BRANCH.to_string(),
                branches: Vec::new(),
                checkpoints: BTreeMap::new(),
                metrics: BTreeMap::new(),
            }),
            commands_ready: Condvar::new(),
            subscribers: Mutex::new(Vec::new()),
            next_subscriber: AtomicU64::new(0),
            history_file: Mutex::new(None),
            shutdown: AtomicBool::new(false),
        }
    }

    /// Mirrors every status change to a JSON-lines file.
    pub fn persist_history(&self, path: &Path) -> std::io::Result<()> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        *self.history_file.lock() = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn registry(&self) -> &Arc<CommandRegistry> {
        &self.registry
    }

    fn persist(&self, uuid: &str, change: &StatusChange, envelope: Option<&CommandEnvelope>) {
        let mut guard = self.history_file.lock();
        let Some(w) = guard.as_mut() else { return };
        let line = HistoryLine {
            uuid,
            status: change.status,
            time: change.time,
            detail: change.detail.as_deref(),
            envelope,
        };
        let text = serde_json::to_string(&line).expect("history line serializes");
        if let Err(e) = writeln!(w, "{text}").and_then(|_| w.flush()) {
            warn!(error = %e, "failed to persist command history");
        }
    }

    fn broadcast_locked(&self, event: &TrainingEvent) {
        let frame = Frame {
            event_type: event.event_type,
            text: Arc::from(encode_event_string(event)),
        };
        let mut subs = self.subscribers.lock();
        subs.retain(|s| s.push(frame.clone()));
    }

    fn status_event(inner: &Inner, uuid: &str, status: CommandStatus, detail: Option<&str>) -> TrainingEvent {
        TrainingEvent::command_status(inner.step, &inner.branch_id, uuid, status, detail)
    }

    /// Appends a status change and broadcasts it. Caller holds the lock.
    fn transition_locked(
        &self,
        inner: &mut Inner,
        idx: usize,
        to: CommandStatus,
        detail: Option<&str>,
    ) -> Result<(), ResolveError> {
        let from = inner.history[idx].status();
        if !validate_transition(from, to) {
            return Err(ResolveError::IllegalTransition { from, to });
        }
        let change = StatusChange {
            status: to,
            time: now_unix(),
            detail: detail.map(str::to_string),
        };
        let uuid = inner.history[idx].envelope.uuid.clone();
        self.persist(&uuid, &change, None);
        inner.history[idx].timeline.push(change);
        inner.history[idx].envelope.status = to;
        let ev = Self::status_event(inner, &uuid, to, detail);
        self.broadcast_locked(&ev);
        Ok(())
    }

    /// Decodes, records and enqueues a command. Rejections leave every queue
    /// and the history untouched.
    pub fn submit(&self, raw: &[u8]) -> Result<(String, CommandStatus), SubmitError> {
        let envelope = decode_command_with(raw, &self.registry)?;
        self.submit_envelope(envelope)
    }

    pub fn submit_envelope(&self, envelope: CommandEnvelope) -> Result<(String, CommandStatus), SubmitError> {
        if envelope.status != CommandStatus::Requested {
            return Err(SubmitError::NotRequested(envelope.status));
        }
        self.registry.parse_args(&envelope.command, &envelope.args)?;
        let category = self.registry.category(&envelope.command);
        let mut inner = self.inner.lock();
        if inner.index.contains_key(&envelope.uuid) {
            return Err(SubmitError::DuplicateUuid(envelope.uuid));
        }
        let uuid = envelope.uuid.clone();
        let requested = StatusChange {
            status: CommandStatus::Requested,
            time: envelope.time,
            detail: None,
        };
        self.persist(&uuid, &requested, Some(&envelope));
        let idx = inner.history.len();
        inner.history.push(HistoryEntry {
            envelope,
            category,
            timeline: vec![requested],
        });
        inner.index.insert(uuid.clone(), idx);
        let ev = Self::status_event(&inner, &uuid, CommandStatus::Requested, None);
        self.broadcast_locked(&ev);
        self.transition_locked(&mut inner, idx, CommandStatus::Pending, None)
            .expect("requested -> pending");
        inner.queues.get_mut(&category).expect("queue").push_back(idx);
        drop(inner);
        self.commands_ready.notify_all();
        Ok((uuid, CommandStatus::Pending))
    }

    /// Empties one queue atomically, moving each command to `running`.
    pub fn drain(&self, category: Category) -> Vec<CommandEnvelope> {
        let mut inner = self.inner.lock();
        let idxs: Vec<usize> = inner.queues.get_mut(&category).expect("queue").drain(..).collect();
        idxs.into_iter()
            .map(|idx| {
                self.transition_locked(&mut inner, idx, CommandStatus::Running, None)
                    .expect("pending -> running");
                inner.history[idx].envelope.clone()
            })
            .collect()
    }

    /// Drains every queue in step-boundary application order.
    pub fn drain_all(&self) -> Vec<CommandEnvelope> {
        Category::APPLY_ORDER.into_iter().flat_map(|c| self.drain(c)).collect()
    }

    /// Takes one specific pending command out of its queue and marks it running.
    pub fn claim(&self, uuid: &str) -> Option<CommandEnvelope> {
        let mut inner = self.inner.lock();
        let idx = *inner.index.get(uuid)?;
        let cat = inner.history[idx].category;
        let q = inner.queues.get_mut(&cat).expect("queue");
        let pos = q.iter().position(|i| *i == idx)?;
        q.remove(pos);
        self.transition_locked(&mut inner, idx, CommandStatus::Running, None).ok()?;
        Some(inner.history[idx].envelope.clone())
    }

    pub fn resolve(&self, uuid: &str, status: CommandStatus, detail: Option<&str>) -> Result<(), ResolveError> {
        let mut inner = self.inner.lock();
        let idx = *inner
            .index
            .get(uuid)
            .ok_or_else(|| ResolveError::UnknownUuid(uuid.to_string()))?;
        self.transition_locked(&mut inner, idx, status, detail)
    }

    /// Fails every command still waiting in a queue.
    pub fn fail_pending(&self, reason: &str) -> usize {
        let mut inner = self.inner.lock();
        let idxs: Vec<usize> = Category::ALL
            .into_iter()
            .flat_map(|c| inner.queues.get_mut(&c).expect("queue").drain(..).collect::<Vec<_>>())
            .collect();
        for &idx in &idxs {
            self.transition_locked(&mut inner, idx, CommandStatus::Failed, Some(reason))
                .expect("pending -> failed");
        }
        idxs.len()
    }

    pub fn pending_count(&self) -> usize {
        self.inner.lock().queues.values().map(VecDeque::len).sum()
    }

    /// Broadcasts an event; metric events also land in the per-branch log.
    pub fn publish(&self, event: &TrainingEvent) {
        let mut inner = self.inner.lock();
        if event.event_type == EventType::Metric {
            let mut record = event.payload.clone();
            record.entry("step").or_insert(Value::from(event.step));
            inner.metrics.entry(event.branch_id.clone()).or_default().push(record);
        }
        self.broadcast_locked(event);
    }

    pub fn subscribe(&self) -> Arc<Subscriber> {
        let sub = Arc::new(Subscriber {
            id: self.next_subscriber.fetch_add(1, Ordering::Relaxed),
            capacity: self.config.subscriber_buffer.max(1),
            detach_after: self.config.detach_after.max(1),
            buf: Mutex::new(Buffer::default()),
            cond: Condvar::new(),
            notify: tokio::sync::Notify::new(),
        });
        self.subscribers.lock().push(Arc::clone(&sub));
        sub
    }

    /// Subscribes and captures a snapshot atomically: every event after the
    /// snapshot reaches the subscriber, none before it.
    pub fn subscribe_with_snapshot(&self) -> (Arc<Subscriber>, HubSnapshot) {
        let inner = self.inner.lock();
        let sub = self.subscribe();
        (sub, Self::snapshot_locked(&inner))
    }

    pub fn unsubscribe(&self, subscriber: &Subscriber) {
        subscriber.close();
        self.subscribers.lock().retain(|s| s.id != subscriber.id);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().len()
    }

    fn snapshot_locked(inner: &Inner) -> HubSnapshot {
        HubSnapshot {
            run_status: inner.run_status,
            step: inner.step,
            branch_id: inner.branch_id.clone(),
            queue_depths: inner.queues.iter().map(|(c, q)| (*c, q.len())).collect(),
            history: inner.history.clone(),
            branches: inner.branches.clone(),
            checkpoints: inner.checkpoints.values().cloned().collect(),
        }
    }

    pub fn snapshot(&self) -> HubSnapshot {
        Self::snapshot_locked(&self.inner.lock())
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.inner.lock().history.clone()
    }

    pub fn command(&self, uuid: &str) -> Option<HistoryEntry> {
        let inner = self.inner.lock();
        inner.index.get(uuid).map(|i| inner.history[*i].clone())
    }

    pub fn branches(&self) -> Vec<BranchNode> {
        self.inner.lock().branches.clone()
    }

    pub fn metrics(&self, branch_id: &str) -> Vec<Map<String, Value>> {
        self.inner.lock().metrics.get(branch_id).cloned().unwrap_or_default()
    }

    pub fn run_status(&self) -> RunStatus {
        self.inner.lock().run_status
    }

    // Trainer-side updates.

    pub fn set_progress(&self, step: u64, branch_id: &str, run_status: RunStatus) {
        let mut inner = self.inner.lock();
        inner.step = step;
        if inner.branch_id != branch_id {
            inner.branch_id = branch_id.to_string();
        }
        inner.run_status = run_status;
    }

    pub fn set_branches(&self, branches: &[BranchNode]) {
        self.inner.lock().branches = branches.to_vec();
    }

    pub fn register_checkpoint(&self, meta: CheckpointMeta) {
        self.inner.lock().checkpoints.insert(meta.uuid.clone(), meta);
    }

    /// Blocks until a command is queued, shutdown is requested, or `timeout` passes.
    pub fn wait_for_commands(&self, timeout: Duration) {
        let mut inner = self.inner.lock();
        if inner.queues.values().any(|q| !q.is_empty()) || self.shutdown_requested() {
            return;
        }
        self.commands_ready.wait_for(&mut inner, timeout);
    }

    pub fn request_shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _guard = self.inner.lock();
        self.commands_ready.notify_all();
    }

    pub fn shutdown_requested(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    /// Detaches every subscriber; their streams end once drained.
    pub fn close_subscribers(&self) {
        for s in self.subscribers.lock().drain(..) {
            s.close();
        }
    }
}
