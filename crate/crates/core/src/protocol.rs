//! Wire format for intervention commands and training events.
//!
//! A command travels as a five-key JSON object whose `args` value is itself a
//! JSON document serialized into a string:
//!
//! ```json
//! {"command":"update_optimizer","args":"{\"lr\": {\"value\": 1e-5}}","time":1718000000.000,"uuid":"…","status":"requested"}
//! ```
//!
//! The `args` string is carried verbatim so a decoded envelope re-encodes to
//! the same bytes. Events use a sibling object with `event_type`, `step`,
//! `branch_id`, `time` and a `payload` object.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAX_UUID_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("missing required field(s): {}", .0.join(", "))]
    MissingFields(Vec<String>),
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("unexpected field `{0}`")]
    UnexpectedField(String),
    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("invalid args `{field}`: {reason}")]
    InvalidArgs { field: String, reason: String },
}

impl ProtocolError {
    /// Machine-readable error class.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Malformed(_) => "malformed_json",
            ProtocolError::MissingFields(_) => "missing_fields",
            ProtocolError::UnknownCommand(_) => "unknown_command",
            ProtocolError::UnknownEventType(_) => "unknown_event_type",
            ProtocolError::UnexpectedField(_) => "unexpected_field",
            ProtocolError::InvalidField { .. } => "invalid_field",
            ProtocolError::InvalidArgs { .. } => "invalid_args",
        }
    }

    /// The offending field, when one can be named.
    pub fn field(&self) -> Option<String> {
        match self {
            ProtocolError::Malformed(_) => None,
            ProtocolError::MissingFields(f) => Some(f.join(",")),
            ProtocolError::UnknownCommand(_) => Some("command".into()),
            ProtocolError::UnknownEventType(_) => Some("event_type".into()),
            ProtocolError::UnexpectedField(f) => Some(f.clone()),
            ProtocolError::InvalidField { field, .. } => Some(field.clone()),
            ProtocolError::InvalidArgs { field, .. } => Some(field.clone()),
        }
    }

    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ProtocolError::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn args(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ProtocolError::InvalidArgs {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Command taxonomy
// ---------------------------------------------------------------------------

/// Queue a command is routed through. Also fixes the order in which a step
/// boundary applies drained commands, see [`Category::APPLY_ORDER`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Optimizer,
    Checkpoint,
    Control,
    Model,
    Dataset,
    Evaluation,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Optimizer,
        Category::Checkpoint,
        Category::Control,
        Category::Model,
        Category::Dataset,
        Category::Evaluation,
    ];

    /// A stop or checkpoint revert preempts tuning commands queued behind it.
    pub const APPLY_ORDER: [Category; 6] = [
        Category::Control,
        Category::Checkpoint,
        Category::Optimizer,
        Category::Model,
        Category::Dataset,
        Category::Evaluation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Optimizer => "optimizer",
            Category::Checkpoint => "checkpoint",
            Category::Control => "control",
            Category::Model => "model",
            Category::Dataset => "dataset",
            Category::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    UpdateOptimizer,
    SaveCheckpoint,
    LoadCheckpoint,
    PauseTraining,
    ResumeTraining,
    StopTraining,
    ModelLayerOperation,
    ModelLayerParameterUpdate,
    UpdateDataset,
    UpdateDatasetRuntimeHyperparameters,
    DoEvaluate,
    /// A command added through [`CommandRegistry::register`].
    Extension(Arc<str>),
}

impl CommandKind {
    pub const BUILTIN: [CommandKind; 11] = [
        CommandKind::UpdateOptimizer,
        CommandKind::SaveCheckpoint,
        CommandKind::LoadCheckpoint,
        CommandKind::PauseTraining,
        CommandKind::ResumeTraining,
        CommandKind::StopTraining,
        CommandKind::ModelLayerOperation,
        CommandKind::ModelLayerParameterUpdate,
        CommandKind::UpdateDataset,
        CommandKind::UpdateDatasetRuntimeHyperparameters,
        CommandKind::DoEvaluate,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            CommandKind::UpdateOptimizer => "update_optimizer",
            CommandKind::SaveCheckpoint => "save_checkpoint",
            CommandKind::LoadCheckpoint => "load_checkpoint",
            CommandKind::PauseTraining => "pause_training",
            CommandKind::ResumeTraining => "resume_training",
            CommandKind::StopTraining => "stop_training",
            CommandKind::ModelLayerOperation => "model_layer_operation",
            CommandKind::ModelLayerParameterUpdate => "model_layer_parameter_update",
            CommandKind::UpdateDataset => "update_dataset",
            CommandKind::UpdateDatasetRuntimeHyperparameters => {
                "update_dataset_runtime_hyperparameters"
            }
            CommandKind::DoEvaluate => "do_evaluate",
            CommandKind::Extension(name) => name,
        }
    }

    /// Category of a built-in command. Extensions carry theirs in the registry.
    pub fn builtin_category(&self) -> Option<Category> {
        Some(match self {
            CommandKind::UpdateOptimizer => Category::Optimizer,
            CommandKind::SaveCheckpoint | CommandKind::LoadCheckpoint => Category::Checkpoint,
            CommandKind::PauseTraining | CommandKind::ResumeTraining | CommandKind::StopTraining => {
                Category::Control
            }
            CommandKind::ModelLayerOperation | CommandKind::ModelLayerParameterUpdate => {
                Category::Model
            }
            CommandKind::UpdateDataset | CommandKind::UpdateDatasetRuntimeHyperparameters => {
                Category::Dataset
            }
            CommandKind::DoEvaluate => Category::Evaluation,
            CommandKind::Extension(_) => return None,
        })
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommandKind {
    type Err = ProtocolError;

    /// Parses a built-in command name. Extensions resolve through a registry.
    fn from_str(s: &str) -> Result<Self> {
        CommandKind::BUILTIN
            .iter()
            .find(|k| k.as_str() == s)
            .cloned()
            .ok_or_else(|| ProtocolError::UnknownCommand(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandStatus {
    Requested,
    Pending,
    Running,
    Completed,
    Success,
    Failed,
}

impl CommandStatus {
    pub const ALL: [CommandStatus; 6] = [
        CommandStatus::Requested,
        CommandStatus::Pending,
        CommandStatus::Running,
        CommandStatus::Completed,
        CommandStatus::Success,
        CommandStatus::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandStatus::Requested => "requested",
            CommandStatus::Pending => "pending",
            CommandStatus::Running => "running",
            CommandStatus::Completed => "completed",
            CommandStatus::Success => "success",
            CommandStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CommandStatus::Success | CommandStatus::Failed)
    }
}

impl fmt::Display for CommandStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommandStatus {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self> {
        CommandStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ProtocolError::invalid("status", format!("unknown status `{s}`")))
    }
}

/// Lifecycle edges. Instantaneous commands go requested, pending, running,
/// then success or failed; long-running ones stop at completed (result
/// emitted) before their terminal status.
pub fn validate_transition(from: CommandStatus, to: CommandStatus) -> bool {
    use CommandStatus::*;
    matches!(
        (from, to),
        (Requested, Pending)
            | (Pending, Running)
            | (Pending, Failed)
            | (Running, Success)
            | (Running, Failed)
            | (Running, Completed)
            | (Completed, Success)
            | (Completed, Failed)
    )
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Shortest round-trip decimal, padded to at least three fractional digits.
pub fn format_time(t: f64) -> String {
    let mut s = format!("{t}");
    match s.find('.') {
        None => s.push_str(".000"),
        Some(dot) => {
            let decimals = s.len() - dot - 1;
            for _ in decimals..3 {
                s.push('0');
            }
        }
    }
    s
}

fn check_time(field: &str, v: &Value) -> Result<f64> {
    let t = v
        .as_f64()
        .ok_or_else(|| ProtocolError::invalid(field, "expected a number"))?;
    if !t.is_finite() || t < 0.0 {
        return Err(ProtocolError::invalid(field, "must be a finite non-negative number"));
    }
    Ok(t)
}

/// Serializes as a JSON number with at least millisecond digits.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Timestamp(f64);

impl Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format_time(self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

// ---------------------------------------------------------------------------
// Typed arguments and the registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Reset,
    Reinitialize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerUpdate {
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    /// `Some(None)` disables clipping.
    pub grad_clip: Option<Option<f64>>,
}

/// Arguments of a command after schema validation.
#[derive(Debug, Clone, PartialEq)]
pub enum CommandArgs {
    UpdateOptimizer(OptimizerUpdate),
    SaveCheckpoint,
    LoadCheckpoint { uuid: String },
    PauseTraining,
    ResumeTraining,
    StopTraining,
    ModelLayerOperation { layer: String, op: LayerOp },
    ModelLayerParameterUpdate { layer: String, param: String, value: f64 },
    UpdateDataset { source: String, data_path: String },
    UpdateDatasetRuntimeHyperparameters { weights: BTreeMap<String, f64> },
    DoEvaluate,
    Extension(Map<String, Value>),
}

type ArgsValidator = dyn Fn(&Map<String, Value>) -> Result<()> + Send + Sync;

struct RegistryEntry {
    category: Category,
    validator: Arc<ArgsValidator>,
}

/// Maps command names to their queue category and args validator. New
/// commands can be registered without touching the codec.
pub struct CommandRegistry {
    extensions: BTreeMap<String, RegistryEntry>,
}

impl Default for CommandRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl fmt::Debug for CommandRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommandRegistry")
            .field("extensions", &self.extensions.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl CommandRegistry {
    /// Registry holding exactly the eleven built-in commands.
    pub fn builtin() -> Self {
        Self {
            extensions: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, category: Category, validator: F) -> Result<()>
    where
        F: Fn(&Map<String, Value>) -> Result<()> + Send + Sync + 'static,
    {
        if name.parse::<CommandKind>().is_ok() || self.extensions.contains_key(name) {
            return Err(ProtocolError::invalid("command", format!("`{name}` already registered")));
        }
        self.extensions.insert(
            name.to_string(),
            RegistryEntry {
                category,
                validator: Arc::new(validator),
            },
        );
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Result<CommandKind> {
        if let Ok(kind) = name.parse::<CommandKind>() {
            return Ok(kind);
        }
        match self.extensions.get_key_value(name) {
            Some((k, _)) => Ok(CommandKind::Extension(Arc::from(k.as_str()))),
            None => Err(ProtocolError::UnknownCommand(name.to_string())),
        }
    }

    pub fn category(&self, kind: &CommandKind) -> Category {
        match kind {
            CommandKind::Extension(name) => self
                .extensions
                .get(name.as_ref())
                .map(|e| e.category)
                .unwrap_or(Category::Control),
            builtin => builtin.builtin_category().expect("builtin"),
        }
    }

    /// Parses and schema-checks an `args` string for `kind`.
    pub fn parse_args(&self, kind: &CommandKind, args: &str) -> Result<CommandArgs> {
        let obj = parse_args_object(args)?;
        if let CommandKind::Extension(name) = kind {
            let entry = self
                .extensions
                .get(name.as_ref())
                .ok_or_else(|| ProtocolError::UnknownCommand(name.to_string()))?;
            (entry.validator)(&obj)?;
            return Ok(CommandArgs::Extension(obj));
        }
        parse_builtin_args(kind, &obj)
    }
}

fn parse_args_object(args: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(args) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ProtocolError::args("args", "must encode a JSON object")),
        Err(e) => Err(ProtocolError::args("args", format!("not valid JSON: {e}"))),
    }
}

fn only_keys(obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ProtocolError::args(format!("args.{k}"), "unexpected key")),
        None => Ok(()),
    }
}

fn req_str(obj: &Map<String, Value>, key: &str) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(_) => Err(ProtocolError::args(format!("args.{key}"), "expected a non-empty string")),
        None => Err(ProtocolError::args(format!("args.{key}"), "missing")),
    }
}

fn finite(v: &Value, field: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ProtocolError::args(field, "expected a finite number"))
}

fn wrapped_value<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a Value>> {
    let Some(v) = obj.get(key) else {
        return Ok(None);
    };
    let inner = v
        .as_object()
        .ok_or_else(|| ProtocolError::args(format!("args.{key}"), "expected {\"value\": ...}"))?;
    if inner.len() != 1 {
        return Err(ProtocolError::args(format!("args.{key}"), "expected exactly one key `value`"));
    }
    inner
        .get("value")
        .map(Some)
        .ok_or_else(|| ProtocolError::args(format!("args.{key}.value"), "missing"))
}

fn parse_builtin_args(kind: &CommandKind, obj: &Map<String, Value>) -> Result<CommandArgs> {
    use CommandKind as K;
    let empty = |variant: CommandArgs| only_keys(obj, &[]).map(|_| variant);
    match kind {
        K::UpdateOptimizer => {
            only_keys(obj, &["lr", "momentum", "weight_decay", "grad_clip"])?;
            if obj.is_empty() {
                return Err(ProtocolError::args("args", "at least one hyperparameter required"));
            }
            let mut up = OptimizerUpdate::default();
            if let Some(v) = wrapped_value(obj, "lr")? {
                let lr = finite(v, "args.lr.value")?;
                if lr <= 0.0 {
                    return Err(ProtocolError::args("args.lr.value", "must be > 0"));
                }
                up.lr = Some(lr);
            }
            if let Some(v) = wrapped_value(obj, "momentum")? {
                let m = finite(v, "args.momentum.value")?;
                if !(0.0..1.0).contains(&m) {
                    return Err(ProtocolError::args("args.momentum.value", "must be in [0, 1)"));
                }
                up.momentum = Some(m);
            }
            if let Some(v) = wrapped_value(obj, "weight_decay")? {
                let wd = finite(v, "args.weight_decay.value")?;
                if wd < 0.0 {
                    return Err(ProtocolError::args("args.weight_decay.value", "must be >= 0"));
                }
                up.weight_decay = Some(wd);
            }
            if let Some(v) = wrapped_value(obj, "grad_clip")? {
                up.grad_clip = Some(if v.is_null() {
                    None
                } else {
                    let c = finite(v, "args.grad_clip.value")?;
                    if c <= 0.0 {
                        return Err(ProtocolError::args("args.grad_clip.value", "must be > 0 or null"));
                    }
                    Some(c)
                });
            }
            Ok(CommandArgs::UpdateOptimizer(up))
        }
        K::SaveCheckpoint => empty(CommandArgs::SaveCheckpoint),
        K::LoadCheckpoint => {
            only_keys(obj, &["uuid"])?;
            Ok(CommandArgs::LoadCheckpoint {
                uuid: req_str(obj, "uuid")?,
            })
        }
        K::PauseTraining => empty(CommandArgs::PauseTraining),
        K::ResumeTraining => empty(CommandArgs::ResumeTraining),
        K::StopTraining => empty(CommandArgs::StopTraining),
        K::ModelLayerOperation => {
            only_keys(obj, &["layer", "op"])?;
            let layer = req_str(obj, "layer")?;
            let op = match req_str(obj, "op")?.as_str() {
                "reset" => LayerOp::Reset,
                "reinitialize" => LayerOp::Reinitialize,
                other => {
                    return Err(ProtocolError::args(
                        "args.op",
                        format!("`{other}` is not one of reset, reinitialize"),
                    ))
                }
            };
            Ok(CommandArgs::ModelLayerOperation { layer, op })
        }
        K::ModelLayerParameterUpdate => {
            only_keys(obj, &["layer", "param", "value"])?;
            let layer = req_str(obj, "layer")?;
            let param = req_str(obj, "param")?;
            let value = obj
                .get("value")
                .ok_or_else(|| ProtocolError::args("args.value", "missing"))
                .and_then(|v| finite(v, "args.value"))?;
            Ok(CommandArgs::ModelLayerParameterUpdate { layer, param, value })
        }
        K::UpdateDataset => {
            only_keys(obj, &["source", "data_path"])?;
            Ok(CommandArgs::UpdateDataset {
                source: req_str(obj, "source")?,
                data_path: req_str(obj, "data_path")?,
            })
        }
        K::UpdateDatasetRuntimeHyperparameters => {
            only_keys(obj, &["weights"])?;
            let w = obj
                .get("weights")
                .ok_or_else(|| ProtocolError::args("args.weights", "missing"))?
                .as_object()
                .ok_or_else(|| ProtocolError::args("args.weights", "expected an object"))?;
            if w.is_empty() {
                return Err(ProtocolError::args("args.weights", "must name at least one source"));
            }
            let mut weights = BTreeMap::new();
            for (name, v) in w {
                let field = format!("args.weights.{name}");
                let x = finite(v, &field)?;
                if x < 0.0 {
                    return Err(ProtocolError::args(field, "must be >= 0"));
                }
                weights.insert(name.clone(), x);
            }
            Ok(CommandArgs::UpdateDatasetRuntimeHyperparameters { weights })
        }
        K::DoEvaluate => empty(CommandArgs::DoEvaluate),
        K::Extension(name) => Err(ProtocolError::UnknownCommand(name.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Command envelope
// ---------------------------------------------------------------------------

/// Random RFC 4122 version-4 identifier.
pub fn fresh_uuid() -> String {
    uuid::Uuid::new_v4().to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandEnvelope {
    pub command: CommandKind,
    /// Serialized JSON object, kept byte-for-byte as received.
    pub args: String,
    pub time: f64,
    pub uuid: String,
    pub status: CommandStatus,
}

impl CommandEnvelope {
    /// Fresh `requested` envelope with a random uuid and the current time.
    pub fn new(command: CommandKind, args: &Value) -> Self {
        Self {
            command,
            args: args.to_string(),
            time: now_unix(),
            uuid: fresh_uuid(),
            status: CommandStatus::Requested,
        }
    }

    pub fn with_uuid(mut self, uuid: impl Into<String>) -> Self {
        self.uuid = uuid.into();
        self
    }

    pub fn with_status(mut self, status: CommandStatus) -> Self {
        self.status = status;
        self
    }

    pub fn args_value(&self) -> Value {
        serde_json::from_str(&self.args).unwrap_or(Value::Null)
    }
}

impl Serialize for CommandEnvelope {
    /// Same bytes as [`encode_command`], nested as a JSON object.
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(encode_command_string(self))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

const ENVELOPE_KEYS: [&str; 5] = ["command", "args", "time", "uuid", "status"];

pub fn encode_command(envelope: &CommandEnvelope) -> Vec<u8> {
    encode_command_string(envelope).into_bytes()
}

pub fn encode_command_string(e: &CommandEnvelope) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string encodes");
    format!(
        "{{\"command\":{},\"args\":{},\"time\":{},\"uuid\":{},\"status\":{}}}",
        q(e.command.as_str()),
        q(&e.args),
        format_time(e.time),
        q(&e.uuid),
        q(e.status.as_str()),
    )
}

/// Decodes against the built-in command set.
pub fn decode_command(raw: &[u8]) -> Result<CommandEnvelope> {
    decode_command_with(raw, &CommandRegistry::builtin())
}

pub fn decode_command_with(raw: &[u8], registry: &CommandRegistry) -> Result<CommandEnvelope> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    envelope_from_value(value, registry)
}

pub fn envelope_from_value(value: Value, registry: &CommandRegistry) -> Result<CommandEnvelope> {
    let Value::Object(obj) = value else {
        return Err(ProtocolError::Malformed("expected a JSON object".into()));
    };
    if let Some(k) = obj.keys().find(|k| !ENVELOPE_KEYS.contains(&k.as_str())) {
        return Err(ProtocolError::UnexpectedField(k.clone()));
    }
    let missing: Vec<String> = ["command", "args", "time", "uuid"]
        .iter()
        .filter(|k| !obj.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ProtocolError::MissingFields(missing));
    }
    let name = obj["command"]
        .as_str()
        .ok_or_else(|| ProtocolError::invalid("command", "expected a string"))?;
    let command = registry.resolve(name)?;
    let args = obj["args"]
        .as_str()
        .ok_or_else(|| ProtocolError::invalid("args", "expected a JSON-encoded string"))?
        .to_string();
    registry.parse_args(&command, &args)?;
    let time = check_time("time", &obj["time"])?;
    let uuid = obj["uuid"]
        .as_str()
        .ok_or_else(|| ProtocolError::invalid("uuid", "expected a string"))?;
    if uuid.is_empty() || uuid.len() > MAX_UUID_LEN {
        return Err(ProtocolError::invalid("uuid", "must be 1..=128 characters"));
    }
    let status = match obj.get("status") {
        None => CommandStatus::Requested,
        Some(Value::String(s)) => s.parse()?,
        Some(_) => return Err(ProtocolError::invalid("status", "expected a string")),
    };
    Ok(CommandEnvelope {
        command,
        args,
        time,
        uuid: uuid.to_string(),
        status,
    })
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Metric,
    Log,
    CommandStatus,
    CheckpointSaved,
    BranchCreated,
    EvaluationResult,
    TrainingEnded,
    /// Point-in-time server state, sent first on every stream connection.
    Snapshot,
}

impl EventType {
    pub const ALL: [EventType; 8] = [
        EventType::Metric,
        EventType::Log,
        EventType::CommandStatus,
        EventType::CheckpointSaved,
        EventType::BranchCreated,
        EventType::EvaluationResult,
        EventType::TrainingEnded,
        EventType::Snapshot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Metric => "metric",
            EventType::Log => "log",
            EventType::CommandStatus => "command_status",
            EventType::CheckpointSaved => "checkpoint_saved",
            EventType::BranchCreated => "branch_created",
            EventType::EvaluationResult => "evaluation_result",
            EventType::TrainingEnded => "training_ended",
            EventType::Snapshot => "snapshot",
        }
    }

    /// Lifecycle events are never dropped under backpressure.
    pub fn is_lifecycle(self) -> bool {
        !matches!(self, EventType::Metric | EventType::Log)
    }

    fn required_payload_keys(self) -> &'static [&'static str] {
        match self {
            EventType::Metric => &["train_loss", "grad_norm", "lr"],
            EventType::Log => &["level", "message"],
            EventType::CommandStatus => &["uuid", "status"],
            EventType::CheckpointSaved => &["uuid", "step", "branch_id"],
            EventType::BranchCreated => &["branch_id", "parent_branch_id", "fork_step"],
            EventType::EvaluationResult => &["val_loss", "step"],
            EventType::TrainingEnded => &["reason"],
            EventType::Snapshot => &[],
        }
    }
}

impl FromStr for EventType {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownEventType(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEvent {
    pub event_type: EventType,
    pub step: u64,
    pub branch_id: String,
    pub time: f64,
    pub payload: Map<String, Value>,
}

#[derive(Serialize)]
struct EventWire<'a> {
    event_type: EventType,
    step: u64,
    branch_id: &'a str,
    time: Timestamp,
    payload: &'a Map<String, Value>,
}

fn payload_of<T: Serialize>(value: T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

impl TrainingEvent {
    pub fn new(event_type: EventType, step: u64, branch_id: &str, payload: Map<String, Value>) -> Self {
        Self {
            event_type,
            step,
            branch_id: branch_id.to_string(),
            time: now_unix(),
            payload,
        }
    }

    pub fn metric(branch_id: &str, record: &crate::trainer::MetricRecord) -> Self {
        Self::new(EventType::Metric, record.step, branch_id, payload_of(record))
    }

    pub fn log(step: u64, branch_id: &str, level: &str, message: &str) -> Self {
        Self::new(
            EventType::Log,
            step,
            branch_id,
            payload_of(serde_json::json!({ "level": level, "message": message })),
        )
    }

    pub fn command_status(
        step: u64,
        branch_id: &str,
        uuid: &str,
        status: CommandStatus,
        detail: Option<&str>,
    ) -> Self {
        let mut p = payload_of(serde_json::json!({ "uuid": uuid, "status": status }));
        if let Some(d) = detail {
            p.insert("detail".into(), Value::String(d.to_string()));
        }
        Self::new(EventType::CommandStatus, step, branch_id, p)
    }

    pub fn checkpoint_saved(step: u64, branch_id: &str, uuid: &str) -> Self {
        Self::new(
            EventType::CheckpointSaved,
            step,
            branch_id,
            payload_of(serde_json::json!({ "uuid": uuid, "step": step, "branch_id": branch_id })),
        )
    }

    pub fn branch_created(branch_id: &str, parent_branch_id: &str, fork_step: u64) -> Self {
        Self::new(
            EventType::BranchCreated,
            fork_step,
            branch_id,
            payload_of(serde_json::json!({
                "branch_id": branch_id,
                "parent_branch_id": parent_branch_id,
                "fork_step": fork_step,
            })),
        )
    }

    pub fn evaluation_result(step: u64, branch_id: &str, val_loss: f64) -> Self {
        Self::new(
            EventType::EvaluationResult,
            step,
            branch_id,
            payload_of(serde_json::json!({ "val_loss": val_loss, "step": step })),
        )
    }

    pub fn training_ended(step: u64, branch_id: &str, reason: &str) -> Self {
        Self::new(
            EventType::TrainingEnded,
            step,
            branch_id,
            payload_of(serde_json::json!({ "reason": reason })),
        )
    }

    /// Command status carried by a `command_status` event.
    pub fn status_update(&self) -> Option<(&str, CommandStatus)> {
        if self.event_type != EventType::CommandStatus {
            return None;
        }
        let uuid = self.payload.get("uuid")?.as_str()?;
        let status = self.payload.get("status")?.as_str()?.parse().ok()?;
        Some((uuid, status))
    }
}

pub fn encode_event(event: &TrainingEvent) -> Vec<u8> {
    encode_event_string(event).into_bytes()
}

pub fn encode_event_string(event: &TrainingEvent) -> String {
    serde_json::to_string(&EventWire {
        event_type: event.event_type,
        step: event.step,
        branch_id: &event.branch_id,
        time: Timestamp(event.time),
        payload: &event.payload,
    })
    .expect("event encodes")
}

pub fn decode_event(raw: &[u8]) -> Result<TrainingEvent> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::Malformed("expected a JSON object".into()));
    };
    const KEYS: [&str; 5] = ["event_type", "step", "branch_id", "time", "payload"];
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(ProtocolError::UnexpectedField(k.clone()));
    }
    let missing: Vec<String> = KEYS
        .iter()
        .filter(|k| !obj.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ProtocolError::MissingFields(missing));
    }
    let event_type: EventType = obj["event_type"]
        .as_str()
        .ok_or_else(|| ProtocolError::invalid("event_type", "expected a string"))?
        .parse()?;
    let step = obj["step"]
        .as_u64()
        .ok_or_else(|| ProtocolError::invalid("step", "expected a non-negative integer"))?;
    let branch_id = obj["branch_id"]
        .as_str()
        .ok_or_else(|| ProtocolError::invalid("branch_id", "expected a string"))?
        .to_string();
    let time = check_time("time", &obj["time"])?;
    let Some(Value::Object(payload)) = obj.remove("payload") else {
        return Err(ProtocolError::invalid("payload", "expected an object"));
    };
    if let Some(k) = event_type
        .required_payload_keys()
        .iter()
        .find(|k| !payload.contains_key(**k))
    {
        return Err(ProtocolError::invalid(format!("payload.{k}"), "missing"));
    }
    Ok(TrainingEvent {
        event_type,
        step,
        branch_id,
        time,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: CommandKind, args: &str) -> CommandEnvelope {
        CommandEnvelope {
            command: kind,
            args: args.into(),
            time: 1_718_000_000.25,
            uuid: "3f2c9d1e-0000-4000-8000-000000000001".into(),
            status: CommandStatus::Requested,
        }
    }

    #[test]
    fn update_optimizer_example_encodes_double_encoded_args() {
        let e = sample(CommandKind::UpdateOptimizer, r#"{"lr": {"value": 1e-5}}"#);
        let s = encode_command_string(&e);
        assert!(s.contains(r#""command":"update_optimizer""#));
        assert!(s.contains(r#""args":"{\"lr\": {\"value\": 1e-5}}""#), "{s}");
        let back = decode_command(s.as_bytes()).unwrap();
        assert_eq!(back, e);
        match CommandRegistry::builtin().parse_args(&back.command, &back.args).unwrap() {
            CommandArgs::UpdateOptimizer(u) => assert_eq!(u.lr, Some(1e-5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_checkpoint_example() {
        let e = sample(CommandKind::LoadCheckpoint, r#"{"uuid": "[uuid]"}"#);
        let s = encode_command_string(&e);
        assert!(s.contains(r#""command":"load_checkpoint""#));
        assert_eq!(decode_command(s.as_bytes()).unwrap(), e);
    }

    #[test]
    fn empty_object_lists_missing_fields() {
        let err = decode_command(b"{}").unwrap_err();
        assert_eq!(
            err,
            ProtocolError::MissingFields(vec![
                "command".into(),
                "args".into(),
                "time".into(),
                "uuid".into()
            ])
        );
    }

    #[test]
    fn decode_errors_name_the_field() {
        let bad_json = decode_command(b"{not json").unwrap_err();
        assert_eq!(bad_json.code(), "malformed_json");

        let unknown = br#"{"command":"explode","args":"{}","time":1,"uuid":"a"}"#;
        let err = decode_command(unknown).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownCommand("explode".into()));
        assert_eq!(err.field().as_deref(), Some("command"));

        let not_obj = br#"{"command":"do_evaluate","args":"[1,2]","time":1,"uuid":"a"}"#;
        assert_eq!(decode_command(not_obj).unwrap_err().field().as_deref(), Some("args"));

        let bad_lr = br#"{"command":"update_optimizer","args":"{\"lr\":{\"value\":-1}}","time":1,"uuid":"a"}"#;
        assert_eq!(
            decode_command(bad_lr).unwrap_err().field().as_deref(),
            Some("args.lr.value")
        );

        let extra = br#"{"command":"do_evaluate","args":"{}","time":1,"uuid":"a","x":1}"#;
        assert_eq!(decode_command(extra).unwrap_err(), ProtocolError::UnexpectedField("x".into()));
    }

    #[test]
    fn missing_status_defaults_to_requested() {
        let raw = br#"{"command":"pause_training","args":"{}","time":12.5,"uuid":"u1"}"#;
        assert_eq!(decode_command(raw).unwrap().status, CommandStatus::Requested);
    }

    #[test]
    fn time_keeps_millisecond_digits() {
        assert_eq!(format_time(1_700_000_000.0), "1700000000.000");
        assert_eq!(format_time(1.5), "1.500");
        assert_eq!(format_time(0.123456), "0.123456");
        let t = 1_700_000_000.123_f64;
        assert_eq!(format_time(t).parse::<f64>().unwrap(), t);
    }

    #[test]
    fn exhaustive_transition_table() {
        use CommandStatus::*;
        let edges = [
            (Requested, Pending),
            (Pending, Running),
            (Pending, Failed),
            (Running, Success),
            (Running, Failed),
            (Running, Completed),
            (Completed, Success),
            (Completed, Failed),
        ];
        for from in CommandStatus::ALL {
            for to in CommandStatus::ALL {
                assert_eq!(validate_transition(from, to), edges.contains(&(from, to)), "{from}->{to}");
            }
        }
        assert!(validate_transition(Requested, Pending));
        assert!(!validate_transition(Success, Running));
    }

    #[test]
    fn only_success_and_failed_have_no_exits() {
        let sinks: Vec<_> = CommandStatus::ALL
            .into_iter()
            .filter(|s| CommandStatus::ALL.iter().all(|t| !validate_transition(*s, *t)))
            .collect();
        assert_eq!(sinks, vec![CommandStatus::Success, CommandStatus::Failed]);
        assert!(sinks.iter().all(|s| s.is_terminal()));
    }

    #[test]
    fn every_builtin_has_a_category_and_schema() {
        let reg = CommandRegistry::builtin();
        let samples = [
            r#"{"lr":{"value":0.1},"momentum":{"value":0.9},"weight_decay":{"value":0},"grad_clip":{"value":null}}"#,
            "{}",
            r#"{"uuid":"x"}"#,
            "{}",
            "{}",
            "{}",
            r#"{"layer":"h1","op":"reinitialize"}"#,
            r#"{"layer":"h1","param":"dropout_rate","value":0.1}"#,
            r#"{"source":"deployed","data_path":"/tmp/d.json"}"#,
            r#"{"weights":{"a":3,"b":1}}"#,
            "{}",
        ];
        for (kind, args) in CommandKind::BUILTIN.iter().zip(samples) {
            assert!(kind.builtin_category().is_some());
            reg.parse_args(kind, args).unwrap_or_else(|e| panic!("{kind}: {e}"));
        }
    }

    #[test]
    fn extension_commands_resolve_through_registry() {
        let raw = br#"{"command":"set_temperature","args":"{\"t\":2}","time":1,"uuid":"e1"}"#;
        assert!(matches!(decode_command(raw), Err(ProtocolError::UnknownCommand(_))));

        let mut reg = CommandRegistry::builtin();
        reg.register("set_temperature", Category::Model, |args| {
            match args.get("t").and_then(Value::as_f64) {
                Some(t) if t > 0.0 => Ok(()),
                _ => Err(ProtocolError::InvalidArgs {
                    field: "args.t".into(),
                    reason: "must be > 0".into(),
                }),
            }
        })
        .unwrap();
        let e = decode_command_with(raw, &reg).unwrap();
        assert_eq!(e.command.as_str(), "set_temperature");
        assert_eq!(reg.category(&e.command), Category::Model);
        assert_eq!(decode_command_with(&encode_command(&e), &reg).unwrap(), e);
        assert!(reg.register("pause_training", Category::Control, |_| Ok(())).is_err());
    }

    #[test]
    fn metric_event_round_trip() {
        let mut payload = Map::new();
        payload.insert("train_loss".into(), 0.5.into());
        payload.insert("grad_norm".into(), 1.2.into());
        payload.insert("lr".into(), 1e-5.into());
        let ev = TrainingEvent {
            event_type: EventType::Metric,
            step: 10,
            branch_id: "b0".into(),
            time: 1_718_000_000.5,
            payload,
        };
        let bytes = encode_event(&ev);
        assert_eq!(decode_event(&bytes).unwrap(), ev);
    }

    #[test]
    fn negative_step_and_unknown_type_rejected() {
        let neg = br#"{"event_type":"metric","step":-1,"branch_id":"b0","time":1.0,"payload":{"train_loss":1,"grad_norm":1,"lr":1}}"#;
        assert_eq!(decode_event(neg).unwrap_err().field().as_deref(), Some("step"));
        let unk = br#"{"event_type":"weather","step":1,"branch_id":"b0","time":1.0,"payload":{}}"#;
        assert_eq!(decode_event(unk).unwrap_err(), ProtocolError::UnknownEventType("weather".into()));
    }
}
