//! Checkpoints, the branch tree, the intervention log and replay.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json
//! <run>/interventions.jsonl          {applied_at_step, branch_id, envelope}
//! <run>/history.jsonl                one line per command status change
//! <run>/checkpoints/<uuid>.ckpt
//! <run>/metrics/<branch_id>.jsonl    one MetricRecord per line
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hub::Hub;
use crate::protocol::{envelope_from_value, now_unix, CommandEnvelope, CommandRegistry};
use crate::trainer::{CommandSource, MetricRecord, RunConfig, Trainer, TrainerError, TrainerOptions, TrainerState};

pub const CHECKPOINT_MAGIC: &str = "ITRAIN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ROOT_BRANCH: &str = "b0";

#[derive(Debug, Error)]
pub enum StateError {
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("invalid branch tree: {0}")]
    InvalidTree(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("replay refused: {0}")]
    ReplayRefused(String),
    #[error("replay diverged: {0}")]
    ReplayDiverged(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StateError + '_ {
    move |source| StateError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub uuid: String,
    pub branch_id: String,
    pub step: u64,
    pub created_at: f64,
    pub state: TrainerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub uuid: String,
    pub branch_id: String,
    pub step: u64,
    pub created_at: f64,
}

impl Checkpoint {
    pub fn capture(uuid: &str, state: &TrainerState) -> Self {
        Self {
            uuid: uuid.to_string(),
            branch_id: state.branch_id.clone(),
            step: state.step,
            created_at: now_unix(),
            state: state.clone(),
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            uuid: self.uuid.clone(),
            branch_id: self.branch_id.clone(),
            step: self.step,
            created_at: self.created_at,
        }
    }

    /// Header line (magic, version, config hash, body checksum) followed by
    /// the canonical JSON body.
    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        let mut out = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} config={config_hash} sha256={}\n",
            sha256_hex(body.as_bytes())
        )
        .into_bytes();
        out.extend_from_slice(body.as_bytes());
        out
    }

    /// Parses and verifies a checkpoint file. When `config_hash` is given the
    /// header must carry the same run configuration.
    pub fn from_bytes(bytes: &[u8], config_hash: Option<&str>) -> Result<Self, StateError> {
        let corrupt = |m: &str| StateError::CorruptCheckpoint(m.to_string());
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| corrupt("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not UTF-8"))?;
        let body = &bytes[nl + 1..];
        let mut parts = header.split(' ');
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(corrupt("bad magic"));
        }
        if parts.next() != Some(&format!("v{CHECKPOINT_VERSION}")) {
            return Err(corrupt("unsupported format version"));
        }
        let cfg = parts
            .next()
            .and_then(|p| p.strip_prefix("config="))
            .ok_or_else(|| corrupt("missing config hash"))?;
        let sum = parts
            .next()
            .and_then(|p| p.strip_prefix("sha256="))
            .ok_or_else(|| corrupt("missing checksum"))?;
        if sha256_hex(body) != sum {
            return Err(corrupt("checksum mismatch"));
        }
        if let Some(expected) = config_hash {
            if expected != cfg {
                return Err(corrupt("checkpoint belongs to a different run configuration"));
            }
        }
        serde_json::from_slice(body).map_err(|e| StateError::CorruptCheckpoint(e.to_string()))
    }
}

/// Checkpoints kept in memory and, when a directory is configured, on disk
/// as `<dir>/<uuid>.ckpt`. Loads fall back to disk for checkpoints written
/// by an earlier process. Uuids are client-chosen, so any uuid that is not a
/// plain `[A-Za-z0-9_-]` name is stored under its SHA-256 instead.
#[derive(Debug)]
pub struct CheckpointStore {
    dir: Option<PathBuf>,
    config_hash: String,
    mem: HashMap<String, Vec<u8>>,
}

impl CheckpointStore {
    pub fn new(dir: Option<PathBuf>, config_hash: &str) -> Result<Self, StateError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
        Ok(Self {
            dir,
            config_hash: config_hash.to_string(),
            mem: HashMap::new(),
        })
    }

    fn file_name(uuid: &str) -> String {
        let plain = !uuid.is_empty() && uuid.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if plain {
            format!("{uuid}.ckpt")
        } else {
            format!("sha256-{}.ckpt", sha256_hex(uuid.as_bytes()))
        }
    }

    pub fn save(&mut self, checkpoint: &Checkpoint) -> Result<(), StateError> {
        let bytes = checkpoint.to_bytes(&self.config_hash);
        if let Some(d) = &self.dir {
            let path = d.join(Self::file_name(&checkpoint.uuid));
            fs::write(&path, &bytes).map_err(io_err(&path))?;
        }
        self.mem.insert(checkpoint.uuid.clone(), bytes);
        Ok(())
    }

    pub fn load(&self, uuid: &str) -> Result<Checkpoint, StateError> {
        if let Some(bytes) = self.mem.get(uuid) {
            return Checkpoint::from_bytes(bytes, Some(&self.config_hash));
        }
        match &self.dir {
            Some(d) => {
                let path = d.join(Self::file_name(uuid));
                match fs::read(&path) {
                    Ok(bytes) => Checkpoint::from_bytes(&bytes, Some(&self.config_hash)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        Err(StateError::UnknownCheckpoint(uuid.to_string()))
                    }
                    Err(e) => Err(io_err(&path)(e)),
                }
            }
            None => Err(StateError::UnknownCheckpoint(uuid.to_string())),
        }
    }

    pub fn contains(&self, uuid: &str) -> bool {
        self.load(uuid).is_ok()
    }
}

// ---------------------------------------------------------------------------
// Branch tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchNode {
    pub branch_id: String,
    pub parent_branch_id: Option<String>,
    pub fork_step: u64,
    pub fork_checkpoint_uuid: Option<String>,
    pub created_at: f64,
}

/// Branches in creation order. Root is `b0`; children of `p` are `p.1`,
/// `p.2`, … in the order they were forked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTree {
    nodes: Vec<BranchNode>,
}

impl Default for BranchTree {
    fn default() -> Self {
        Self::new()
    }
}

impl BranchTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![BranchNode {
                branch_id: ROOT_BRANCH.to_string(),
                parent_branch_id: None,
                fork_step: 0,
                fork_checkpoint_uuid: None,
                created_at: now_unix(),
            }],
        }
    }

    pub fn nodes(&self) -> &[BranchNode] {
        &self.nodes
    }

    pub fn get(&self, id: &str) -> Option<&BranchNode> {
        self.nodes.iter().find(|n| n.branch_id == id)
    }

    pub fn children(&self, id: &str) -> impl Iterator<Item = &BranchNode> {
        let id = id.to_string();
        self.nodes
            .iter()
            .filter(move |n| n.parent_branch_id.as_deref() == Some(id.as_str()))
    }

    pub fn fork(&mut self, parent: &str, fork_step: u64, checkpoint: &str) -> Result<BranchNode, StateError> {
        if self.get(parent).is_none() {
            return Err(StateError::UnknownBranch(parent.to_string()));
        }
        let n = self.children(parent).count() + 1;
        let node = BranchNode {
            branch_id: format!("{parent}.{n}"),
            parent_branch_id: Some(parent.to_string()),
            fork_step,
            fork_checkpoint_uuid: Some(checkpoint.to_string()),
            created_at: now_unix(),
        };
        self.nodes.push(node.clone());
        Ok(node)
    }

    /// Single root, unique ids, every parent created before its child.
    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |m: String| Err(StateError::InvalidTree(m));
        let roots = self.nodes.iter().filter(|n| n.parent_branch_id.is_none()).count();
        if roots != 1 {
            return bad(format!("{roots} roots"));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(&n.branch_id, i).is_some() {
                return bad(format!("duplicate id `{}`", n.branch_id));
            }
            if let Some(p) = &n.parent_branch_id {
                if !seen.contains_key(p.as_str()) || p == &n.branch_id {
                    return bad(format!("`{}` has no earlier parent `{p}`", n.branch_id));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Intervention log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterventionEntry {
    pub applied_at_step: u64,
    pub branch_id: String,
    pub envelope: CommandEnvelope,
}

/// Append-only record of every applied command, mirrored to a JSON-lines
/// file when one is attached. Each append is flushed and synced before it
/// returns.
#[derive(Debug, Default)]
pub struct InterventionLog {
    entries: Vec<InterventionEntry>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl InterventionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> Result<Self, StateError> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            entries: Vec::new(),
            file: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn record(&mut self, step: u64, branch_id: &str, envelope: &CommandEnvelope) -> Result<(), StateError> {
        let entry = InterventionEntry {
            applied_at_step: step,
            branch_id: branch_id.to_string(),
            envelope: envelope.clone(),
        };
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .and_then(|_| w.get_ref().sync_data())
                .map_err(io_err(path))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[InterventionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read(path: &Path, registry: &CommandRegistry) -> Result<Vec<InterventionEntry>, StateError> {
        let f = File::open(path).map_err(io_err(path))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |reason: String| StateError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason,
            };
            let mut v: Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            let step = v["applied_at_step"]
                .as_u64()
                .ok_or_else(|| parse("applied_at_step must be a non-negative integer".into()))?;
            let branch = v["branch_id"]
                .as_str()
                .ok_or_else(|| parse("branch_id must be a string".into()))?
                .to_string();
            let envelope = envelope_from_value(v["envelope"].take(), registry).map_err(|e| parse(e.to_string()))?;
            out.push(InterventionEntry {
                applied_at_step: step,
                branch_id: branch,
                envelope,
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Metric logs
// ---------------------------------------------------------------------------

/// Per-branch metric trajectories, kept in memory and optionally appended
/// to `metrics/<branch_id>.jsonl`.
#[derive(Debug, Default)]
pub struct MetricLog {
    branches: BTreeMap<String, Vec<MetricRecord>>,
    dir: Option<PathBuf>,
    writers: HashMap<String, BufWriter<File>>,
}

impl MetricLog {
    pub fn new(dir: Option<PathBuf>) -> Result<Self, StateError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
        Ok(Self {
            dir,
            ..Self::default()
        })
    }

    pub fn append(&mut self, branch_id: &str, record: MetricRecord) -> Result<(), StateError> {
        if let Some(d) = &self.dir {
            let path = d.join(format!("{branch_id}.jsonl"));
            if !self.writers.contains_key(branch_id) {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                self.writers.insert(branch_id.to_string(), BufWriter::new(f));
            }
            let w = self.writers.get_mut(branch_id).expect("writer");
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(&path))?;
        }
        self.branches.entry(branch_id.to_string()).or_default().push(record);
        Ok(())
    }

    pub fn branches(&self) -> &BTreeMap<String, Vec<MetricRecord>> {
        &self.branches
    }

    pub fn into_branches(self) -> BTreeMap<String, Vec<MetricRecord>> {
        self.branches
    }
}

pub fn read_metric_file(path: &Path) -> Result<Vec<MetricRecord>, StateError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StateError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads every `metrics/*.jsonl` file of a run directory.
pub fn read_metric_dir(dir: &Path) -> Result<BTreeMap<String, Vec<MetricRecord>>, StateError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            let branch = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.insert(branch, read_metric_file(&path)?);
        }
    }
    Ok(out)
}

/// SHA-256 over a branch's metric records in canonical JSON-lines form.
pub fn metric_log_digest(records: &[MetricRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_string(r).expect("record serializes").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn interventions(&self) -> PathBuf {
        self.root.join("interventions.jsonl")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn create(&self, config: &RunConfig) -> Result<(), StateError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.config();
        let text = serde_json::to_string_pretty(config).expect("config serializes");
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read_config(&self) -> Result<RunConfig, StateError> {
        let path = self.config();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StateError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Feeds logged commands back at the step and branch where they were
/// originally applied, in original order.
pub struct LogSource {
    entries: std::collections::VecDeque<InterventionEntry>,
    stalled: bool,
}

impl LogSource {
    pub fn new(entries: Vec<InterventionEntry>) -> Self {
        Self {
            entries: entries.into(),
            stalled: false,
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.len()
    }
}

impl CommandSource for LogSource {
    fn fetch(&mut self, hub: &Hub, step: u64, branch_id: &str) -> Result<Vec<CommandEnvelope>, String> {
        let mut out = Vec::new();
        while let Some(next) = self.entries.front() {
            if next.applied_at_step != step || next.branch_id != branch_id {
                if next.branch_id == branch_id && next.applied_at_step < step {
                    return Err(format!(
                        "log entry for step {} on {} was never reached",
                        next.applied_at_step, next.branch_id
                    ));
                }
                break;
            }
            let entry = self.entries.pop_front().expect("front");
            let env = entry
                .envelope
                .clone()
                .with_status(crate::protocol::CommandStatus::Requested);
            hub.submit_envelope(env.clone()).map_err(|e| e.to_string())?;
            out.push(hub.claim(&env.uuid).ok_or("logged command could not be claimed")?);
        }
        Ok(out)
    }

    fn idle(&mut self, _hub: &Hub) {
        self.stalled = true;
    }

    fn closed(&self) -> bool {
        self.stalled
    }
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub metrics: BTreeMap<String, Vec<MetricRecord>>,
    pub final_state: TrainerState,
    pub end_reason: String,
}

/// Describes how two run configurations differ, field by field.
pub fn config_differences(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (Value::Object(va), Value::Object(vb)) = (
        serde_json::to_value(a).expect("config serializes"),
        serde_json::to_value(b).expect("config serializes"),
    ) else {
        return vec!["config".into()];
    };
    va.iter()
        .filter(|(k, v)| vb.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: recorded {} vs given {v}", vb.get(k).unwrap_or(&Value::Null)))
        .collect()
}

/// Re-executes a recorded run. `config` must match `recorded` exactly.
pub fn replay(
    config: &RunConfig,
    recorded: &RunConfig,
    log: Vec<InterventionEntry>,
    options: TrainerOptions,
) -> Result<ReplayOutcome, TrainerError> {
    let diffs = config_differences(config, recorded);
    if !diffs.is_empty() {
        return Err(StateError::ReplayRefused(diffs.join("; ")).into());
    }
    let hub = Hub::with_registry(Default::default(), options.registry.clone());
    let mut source = LogSource::new(log);
    let mut trainer = Trainer::new(config.clone(), &hub, options)?;
    let outcome = trainer.run(&mut source)?;
    if source.remaining() > 0 {
        return Err(StateError::ReplayDiverged(format!(
            "{} logged commands were never applied",
            source.remaining()
        ))
        .into());
    }
    Ok(ReplayOutcome {
        metrics: outcome.metrics,
        final_state: outcome.state,
        end_reason: outcome.end_reason,
    })
}

/// First bitwise difference between two per-branch trajectories.
pub fn compare_trajectories(
    expected: &BTreeMap<String, Vec<MetricRecord>>,
    actual: &BTreeMap<String, Vec<MetricRecord>>,
) -> Result<(), String> {
    let keys_e: Vec<_> = expected.keys().collect();
    let keys_a: Vec<_> = actual.keys().collect();
    if keys_e != keys_a {
        return Err(format!("branches differ: expected {keys_e:?}, got {keys_a:?}"));
    }
    for (branch, exp) in expected {
        let act = &actual[branch];
        for (i, (e, a)) in exp.iter().zip(act).enumerate() {
            if !e.bitwise_eq(a) {
                return Err(format!("{branch}[{i}]: expected {e:?}, got {a:?}"));
            }
        }
        if exp.len() != act.len() {
            return Err(format!("{branch}: expected {} records, got {}", exp.len(), act.len()));
        }
    }
    Ok(())
}
