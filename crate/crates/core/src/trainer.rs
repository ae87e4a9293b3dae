//! The interactive training loop.
//!
//! Commands take effect only at step boundaries, before the forward pass of
//! the next step. At each boundary the loop runs its hooks, then fetches and
//! applies commands until none are left, then either ends, idles while
//! paused, or performs exactly one optimizer update.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::dataset::{self, Batch, Example, InteractiveDataset};
use crate::hub::{Hub, RunStatus};
use crate::model::{self, DropoutMasks, LayerBuffer, ModelError, ModelParams, Objective, ParamBuffers};
use crate::par::Exec;
use crate::protocol::{
    CommandArgs, CommandEnvelope, CommandRegistry, CommandStatus, LayerOp, OptimizerUpdate, TrainingEvent,
};
use crate::rng::TrainRng;
use crate::state::{
    sha256_hex, BranchTree, Checkpoint, CheckpointStore, InterventionLog, MetricLog, RunDir, StateError,
};

pub const FAULT_MESSAGE: &str = "Gradient overflow detected";

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("command source: {0}")]
    Source(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    MlpSin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    None,
    Linear,
}

fn d_lambda() -> f64 {
    500.0
}
fn d_w0() -> f64 {
    1.0
}
fn d_hidden() -> usize {
    32
}
fn d_batch() -> usize {
    32
}
fn d_train_points() -> usize {
    256
}
fn d_val_points() -> usize {
    128
}
fn d_noise() -> f64 {
    0.1
}

/// Run configuration, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Curvature of the quadratic bowl.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Starting value of the quadratic's scalar parameter.
    #[serde(default = "d_w0")]
    pub w0: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    pub lr0: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// Steps between automatic evaluations; 0 evaluates only on demand.
    #[serde(default)]
    pub eval_cadence: u64,
    #[serde(default = "d_hidden")]
    pub hidden_width: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "d_train_points")]
    pub train_points: usize,
    #[serde(default = "d_val_points")]
    pub val_points: usize,
    /// Standard deviation of the label noise.
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    /// Start paused and wait for a `resume_training` command.
    #[serde(default)]
    pub start_paused: bool,
}

impl RunConfig {
    pub fn quadratic(lambda: f64, lr0: f64, total_steps: u64) -> Self {
        Self {
            task: TaskKind::Quadratic,
            lambda,
            w0: 1.0,
            total_steps,
            seed: 0,
            lr0,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: None,
            schedule: ScheduleKind::None,
            eval_cadence: 0,
            hidden_width: d_hidden(),
            batch_size: d_batch(),
            dropout: 0.0,
            train_points: d_train_points(),
            val_points: d_val_points(),
            noise_std: d_noise(),
            start_paused: false,
        }
    }

    pub fn mlp_sin(lr0: f64, total_steps: u64, seed: u64) -> Self {
        Self {
            task: TaskKind::MlpSin,
            seed,
            ..Self::quadratic(d_lambda(), lr0, total_steps)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainerError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| TrainerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        match self.task {
            TaskKind::Quadratic => {
                if !(self.lambda > 0.0 && self.lambda.is_finite()) || !self.w0.is_finite() {
                    return bad("quadratic needs a positive lambda and finite w0");
                }
            }
            TaskKind::MlpSin => {
                if self.hidden_width == 0 || self.batch_size == 0 {
                    return bad("hidden_width and batch_size must be positive");
                }
                if self.train_points == 0 || self.val_points == 0 {
                    return bad("train_points and val_points must be positive");
                }
                if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                    return bad("noise_std must be >= 0");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn objective(&self) -> Objective {
        match self.task {
            TaskKind::Quadratic => Objective::Quadratic { lambda: self.lambda },
            TaskKind::MlpSin => Objective::Mse,
        }
    }
}

/// Noisy `sin(3x)` samples with `x ~ U(-1, 1)`.
pub fn sin_examples(n: usize, noise_std: f64, rng: &mut TrainRng) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let x = rng.uniform_range(-1.0, 1.0);
            let y = (3.0 * x).sin() + noise_std * rng.normal();
            Example { x, y }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearAnneal {
    pub lr0: f64,
    pub total_steps: u64,
}

impl LinearAnneal {
    /// Learning rate for the update that follows `completed` updates.
    pub fn lr_at(&self, completed: u64) -> f64 {
        self.lr0 * (1.0 - completed as f64 / self.total_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Built-in anneal; cleared for good by the first explicit lr change.
    pub schedule: Option<LinearAnneal>,
    pub velocity: ParamBuffers,
}

impl OptimizerState {
    fn apply(&mut self, up: &OptimizerUpdate) {
        if let Some(lr) = up.lr {
            self.lr = lr;
            self.schedule = None;
        }
        if let Some(m) = up.momentum {
            self.momentum = m;
        }
        if let Some(wd) = up.weight_decay {
            self.weight_decay = wd;
        }
        if let Some(c) = up.grad_clip {
            self.grad_clip = c;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub paused: bool,
    pub stopping: bool,
    pub branch_id: String,
    pub rng: TrainRng,
    pub dataset: InteractiveDataset,
    pub eval_cadence: u64,
}

impl TrainerState {
    /// SHA-256 of the serialized state.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("state serializes"))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient actually applied.
    pub effective_grad_norm: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

impl MetricRecord {
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let b = |x: f64| x.to_bits();
        self.step == other.step
            && b(self.train_loss) == b(other.train_loss)
            && b(self.grad_norm) == b(other.grad_norm)
            && b(self.effective_grad_norm) == b(other.effective_grad_norm)
            && b(self.lr) == b(other.lr)
            && self.val_loss.map(b) == other.val_loss.map(b)
    }
}

impl PartialEq for MetricRecord {
    fn eq(&self, other: &Self) -> bool {
        self.bitwise_eq(other)
    }
}

// ---------------------------------------------------------------------------
// Command sources and hooks
// ---------------------------------------------------------------------------

/// Where a step boundary gets its commands from.
pub trait CommandSource {
    /// Commands to apply now, already in `running` state.
    fn fetch(&mut self, hub: &Hub, step: u64, branch_id: &str) -> Result<Vec<CommandEnvelope>, String>;

    /// Called while paused with nothing to apply.
    fn idle(&mut self, hub: &Hub);

    /// `true` when no further commands can ever arrive.
    fn closed(&self) -> bool {
        false
    }
}

/// Live source: drains the hub's queues in application order.
#[derive(Debug, Clone)]
pub struct HubSource {
    pub idle_wait: Duration,
}

impl Default for HubSource {
    fn default() -> Self {
        Self {
            idle_wait: Duration::from_millis(100),
        }
    }
}

impl CommandSource for HubSource {
    fn fetch(&mut self, hub: &Hub, _step: u64, _branch_id: &str) -> Result<Vec<CommandEnvelope>, String> {
        Ok(hub.drain_all())
    }

    fn idle(&mut self, hub: &Hub) {
        hub.wait_for_commands(self.idle_wait);
    }
}

/// Runs at every step boundary before commands are fetched. Used for exact
/// in-process schedules and agents.
pub trait BoundaryHook {
    fn before_boundary(&mut self, step: u64, branch_id: &str, hub: &Hub);
}

pub type ExtensionHandler = Box<dyn FnMut(&mut TrainerState, &Map<String, Value>) -> Result<(), String> + Send>;

pub struct TrainerOptions {
    /// Run directory for config, logs, metrics and checkpoints.
    pub run_dir: Option<PathBuf>,
    pub exec: Exec,
    pub registry: Arc<CommandRegistry>,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            run_dir: None,
            exec: Exec::default(),
            registry: Arc::new(CommandRegistry::builtin()),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainerState,
    pub metrics: BTreeMap<String, Vec<MetricRecord>>,
    pub end_reason: String,
    /// Optimizer updates across every branch.
    pub optimizer_updates: u64,
    pub branches: BranchTree,
}

/// Example counts per `source@generation` for one update's batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchProvenance {
    pub step: u64,
    pub branch_id: String,
    pub sources: BTreeMap<String, usize>,
}

enum Applied {
    Done(Option<String>),
    /// Long-running command that produced a result before succeeding.
    Completed(Option<String>),
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer<'a> {
    config: RunConfig,
    objective: Objective,
    validation: Vec<Example>,
    state: TrainerState,
    store: CheckpointStore,
    branches: BranchTree,
    interventions: InterventionLog,
    metrics: MetricLog,
    hub: &'a Hub,
    exec: Exec,
    registry: Arc<CommandRegistry>,
    hooks: Vec<Box<dyn BoundaryHook + 'a>>,
    extensions: HashMap<String, ExtensionHandler>,
    updates: u64,
    provenance: Vec<BatchProvenance>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, hub: &'a Hub, options: TrainerOptions) -> Result<Self, TrainerError> {
        config.validate()?;
        let mut rng = TrainRng::seed_from_u64(config.seed);
        let (dataset, validation, model) = match config.task {
            TaskKind::Quadratic => (InteractiveDataset::empty(), Vec::new(), ModelParams::scalar(config.w0)),
            TaskKind::MlpSin => {
                let train = sin_examples(config.train_points, config.noise_std, &mut rng);
                let val = sin_examples(config.val_points, config.noise_std, &mut rng);
                let model = ModelParams::mlp(config.hidden_width, config.dropout, &mut rng);
                (InteractiveDataset::with_source("train", train)?, val, model)
            }
        };
        let schedule = match config.schedule {
            ScheduleKind::None => None,
            ScheduleKind::Linear => Some(LinearAnneal {
                lr0: config.lr0,
                total_steps: config.total_steps.max(1),
            }),
        };
        let optimizer = OptimizerState {
            lr: config.lr0,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            grad_clip: config.grad_clip,
            schedule,
            velocity: ParamBuffers::zeros_like(&model),
        };
        let state = TrainerState {
            step: 0,
            model,
            optimizer,
            paused: config.start_paused,
            stopping: false,
            branch_id: crate::state::ROOT_BRANCH.to_string(),
            rng,
            dataset,
            eval_cadence: config.eval_cadence,
        };

        let config_hash = config.hash();
        let (store, interventions, metrics) = match &options.run_dir {
            Some(root) => {
                let dir = RunDir::new(root);
                if dir.config().exists() {
                    return Err(TrainerError::Config(format!(
                        "run directory {} is already in use",
                        root.display()
                    )));
                }
                dir.create(&config)?;
                hub.persist_history(&dir.history())
                    .map_err(crate::state::io_err(&dir.history()))?;
                (
                    CheckpointStore::new(Some(dir.checkpoints()), &config_hash)?,
                    InterventionLog::create(&dir.interventions())?,
                    MetricLog::new(Some(dir.metrics()))?,
                )
            }
            None => (
                CheckpointStore::new(None, &config_hash)?,
                InterventionLog::in_memory(),
                MetricLog::new(None)?,
            ),
        };

        Ok(Self {
            objective: config.objective(),
            config,
            validation,
            state,
            store,
            branches: BranchTree::new(),
            interventions,
            metrics,
            hub,
            exec: options.exec,
            registry: options.registry,
            hooks: Vec::new(),
            extensions: HashMap::new(),
            updates: 0,
            provenance: Vec::new(),
        })
    }

    pub fn add_hook(&mut self, hook: Box<dyn BoundaryHook + 'a>) {
        self.hooks.push(hook);
    }

    /// Installs the handler for a command registered in the registry.
    pub fn register_extension(&mut self, name: &str, handler: ExtensionHandler) {
        self.extensions.insert(name.to_string(), handler);
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn validation(&self) -> &[Example] {
        &self.validation
    }

    pub fn branches(&self) -> &BranchTree {
        &self.branches
    }

    pub fn interventions(&self) -> &InterventionLog {
        &self.interventions
    }

    /// Where each update's batch came from, one entry per optimizer update.
    pub fn provenance(&self) -> &[BatchProvenance] {
        &self.provenance
    }

    pub fn metrics(&self) -> &BTreeMap<String, Vec<MetricRecord>> {
        self.metrics.branches()
    }

    /// Mean loss over the validation set (or the bowl value) with dropout
    /// off. Reads state only.
    pub fn evaluate(&self) -> f64 {
        match self.objective {
            Objective::Quadratic { lambda } => {
                let w = self.state.model.layers[0].weight[0];
                0.5 * lambda * w * w
            }
            Objective::Mse => model::mse(&self.state.model, &self.validation, self.exec),
        }
    }

    fn run_status(&self) -> RunStatus {
        if self.state.paused {
            RunStatus::Paused
        } else {
            RunStatus::Training
        }
    }

    fn sync_hub(&self, status: RunStatus) {
        self.hub.set_progress(self.state.step, &self.state.branch_id, status);
    }

    fn publish(&self, event: TrainingEvent) {
        self.hub.publish(&event);
    }

    /// Runs until `total_steps` updates are done on the active branch, a
    /// stop is requested, or the source closes while paused.
    pub fn run(&mut self, source: &mut dyn CommandSource) -> Result<RunOutcome, TrainerError> {
        self.hub.set_branches(self.branches.nodes());
        self.sync_hub(self.run_status());
        let end_reason = loop {
            let (step, branch) = (self.state.step, self.state.branch_id.clone());
            for hook in &mut self.hooks {
                hook.before_boundary(step, &branch, self.hub);
            }
            loop {
                let batch = source
                    .fetch(self.hub, self.state.step, &self.state.branch_id)
                    .map_err(TrainerError::Source)?;
                if batch.is_empty() {
                    break;
                }
                for env in batch {
                    self.dispatch(env)?;
                }
            }
            self.sync_hub(self.run_status());
            if self.state.stopping {
                break "stopped";
            }
            if self.hub.shutdown_requested() {
                break "interrupted";
            }
            if self.state.step >= self.config.total_steps {
                break "completed";
            }
            if self.state.paused {
                if source.closed() {
                    break "command source closed while paused";
                }
                source.idle(self.hub);
                continue;
            }
            self.train_step()?;
        };
        let reason = if self.state.stopping { "training stopped" } else { "training ended" };
        self.hub.fail_pending(reason);
        self.publish(TrainingEvent::training_ended(self.state.step, &self.state.branch_id, end_reason));
        self.sync_hub(RunStatus::Stopped);
        debug!(end_reason, step = self.state.step, "training loop finished");
        Ok(RunOutcome {
            state: self.state.clone(),
            metrics: self.metrics.branches().clone(),
            end_reason: end_reason.to_string(),
            optimizer_updates: self.updates,
            branches: self.branches.clone(),
        })
    }

    fn resolve(&self, uuid: &str, status: CommandStatus, detail: Option<&str>) {
        if let Err(e) = self.hub.resolve(uuid, status, detail) {
            warn!(uuid, error = %e, "could not resolve command");
        }
    }

    fn dispatch(&mut self, env: CommandEnvelope) -> Result<(), TrainerError> {
        if self.state.stopping {
            self.resolve(&env.uuid, CommandStatus::Failed, Some("training stopped"));
            return Ok(());
        }
        self.interventions
            .record(self.state.step, &self.state.branch_id, &env)?;
        match self.apply_command(&env) {
            Ok(Applied::Done(detail)) => self.resolve(&env.uuid, CommandStatus::Success, detail.as_deref()),
            Ok(Applied::Completed(detail)) => {
                self.resolve(&env.uuid, CommandStatus::Completed, detail.as_deref());
                self.resolve(&env.uuid, CommandStatus::Success, detail.as_deref());
            }
            Err(reason) => {
                self.publish(TrainingEvent::log(
                    self.state.step,
                    &self.state.branch_id,
                    "warning",
                    &format!("{} failed: {reason}", env.command),
                ));
                self.resolve(&env.uuid, CommandStatus::Failed, Some(&reason));
            }
        }
        Ok(())
    }

    /// Applies one command. On error the trainer state is left untouched.
    fn apply_command(&mut self, env: &CommandEnvelope) -> Result<Applied, String> {
        let args = self
            .registry
            .parse_args(&env.command, &env.args)
            .map_err(|e| e.to_string())?;
        match args {
            CommandArgs::UpdateOptimizer(up) => {
                self.state.optimizer.apply(&up);
                Ok(Applied::Done(None))
            }
            CommandArgs::PauseTraining => {
                self.state.paused = true;
                Ok(Applied::Done(None))
            }
            CommandArgs::ResumeTraining => {
                self.state.paused = false;
                Ok(Applied::Done(None))
            }
            CommandArgs::StopTraining => {
                self.state.stopping = true;
                Ok(Applied::Done(None))
            }
            CommandArgs::SaveCheckpoint => {
                // A checkpoint is addressed by the uuid of the command that created it.
                let ck = Checkpoint::capture(&env.uuid, &self.state);
                self.store.save(&ck).map_err(|e| e.to_string())?;
                self.hub.register_checkpoint(ck.meta());
                self.publish(TrainingEvent::checkpoint_saved(ck.step, &ck.branch_id, &ck.uuid));
                Ok(Applied::Done(Some(ck.uuid)))
            }
            CommandArgs::LoadCheckpoint { uuid } => {
                let ck = self.store.load(&uuid).map_err(|e| e.to_string())?;
                let node = self
                    .branches
                    .fork(&ck.branch_id, ck.step, &ck.uuid)
                    .map_err(|e| e.to_string())?;
                let (paused, stopping) = (self.state.paused, self.state.stopping);
                self.state = ck.state;
                self.state.paused = paused;
                self.state.stopping = stopping;
                self.state.branch_id = node.branch_id.clone();
                self.hub.set_branches(self.branches.nodes());
                self.publish(TrainingEvent::branch_created(
                    &node.branch_id,
                    node.parent_branch_id.as_deref().unwrap_or_default(),
                    node.fork_step,
                ));
                Ok(Applied::Completed(Some(node.branch_id)))
            }
            CommandArgs::ModelLayerOperation { layer, op } => {
                let idx = self
                    .state
                    .model
                    .layer_index(&layer)
                    .ok_or_else(|| ModelError::UnknownLayer(layer.clone()).to_string())?;
                let l = &mut self.state.model.layers[idx];
                match op {
                    LayerOp::Reset => l.reset(),
                    LayerOp::Reinitialize => l.reinitialize(&mut self.state.rng),
                }
                let LayerBuffer { weight, bias } = &mut self.state.optimizer.velocity.layers[idx];
                weight.iter_mut().chain(bias.iter_mut()).for_each(|v| *v = 0.0);
                Ok(Applied::Done(None))
            }
            CommandArgs::ModelLayerParameterUpdate { layer, param, value } => {
                let l = self
                    .state
                    .model
                    .layer_mut(&layer)
                    .ok_or_else(|| ModelError::UnknownLayer(layer.clone()).to_string())?;
                match (param.as_str(), l.dropout_rate.is_some()) {
                    ("dropout_rate", true) if (0.0..1.0).contains(&value) => {
                        l.dropout_rate = Some(value);
                        Ok(Applied::Done(None))
                    }
                    ("dropout_rate", true) => Err(ModelError::InvalidValue {
                        param,
                        reason: "must be in [0, 1)".into(),
                    }
                    .to_string()),
                    _ => Err(ModelError::UnknownParam { layer, param }.to_string()),
                }
            }
            CommandArgs::UpdateDataset { source, data_path } => {
                let examples = dataset::load_examples(std::path::Path::new(&data_path)).map_err(|e| e.to_string())?;
                self.state
                    .dataset
                    .update_data(&source, examples)
                    .map_err(|e| e.to_string())?;
                Ok(Applied::Done(None))
            }
            CommandArgs::UpdateDatasetRuntimeHyperparameters { weights } => {
                self.state
                    .dataset
                    .set_mixture_weights(&weights)
                    .map_err(|e| e.to_string())?;
                Ok(Applied::Done(None))
            }
            CommandArgs::DoEvaluate => {
                let val = self.evaluate();
                self.publish(TrainingEvent::evaluation_result(self.state.step, &self.state.branch_id, val));
                Ok(Applied::Completed(Some(format!("val_loss={val}"))))
            }
            CommandArgs::Extension(map) => {
                let name = env.command.as_str().to_string();
                let handler = self
                    .extensions
                    .get_mut(&name)
                    .ok_or_else(|| format!("no handler installed for `{name}`"))?;
                let mut scratch = self.state.clone();
                handler(&mut scratch, &map)?;
                self.state = scratch;
                Ok(Applied::Done(None))
            }
        }
    }

    fn fault(&mut self, err: &ModelError) {
        warn!(step = self.state.step, error = %err, "non-finite training values; pausing");
        self.state.paused = true;
        self.sync_hub(RunStatus::Paused);
        self.publish(TrainingEvent::log(self.state.step, &self.state.branch_id, "warning", FAULT_MESSAGE));
    }

    /// One optimizer update. Non-finite values pause training instead.
    fn train_step(&mut self) -> Result<(), TrainerError> {
        let lr = match &self.state.optimizer.schedule {
            Some(s) => s.lr_at(self.state.step),
            None => self.state.optimizer.lr,
        };
        self.state.optimizer.lr = lr;
        let batch = match self.objective {
            Objective::Mse => self.state.dataset.next_batch(self.config.batch_size, &mut self.state.rng)?,
            Objective::Quadratic { .. } => Batch { items: Vec::new() },
        };
        let masks = match self.objective {
            Objective::Mse => DropoutMasks::draw(&self.state.model, batch.len(), &mut self.state.rng),
            Objective::Quadratic { .. } => None,
        };
        let (loss, mut grads) =
            match model::forward_backward(self.objective, &self.state.model, &batch, masks.as_ref(), self.exec) {
                Ok(v) => v,
                Err(e @ ModelError::NonFinite(_)) => {
                    self.fault(&e);
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            };
        let grad_norm = grads.l2_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            self.fault(&ModelError::NonFinite("loss or gradients"));
            return Ok(());
        }
        let effective_grad_norm = match self.state.optimizer.grad_clip {
            Some(c) => {
                model::clip_gradients(&mut grads, c)?;
                grads.l2_norm()
            }
            None => grad_norm,
        };
        let opt = &mut self.state.optimizer;
        if let Err(e) = model::sgd_momentum_step(
            &mut self.state.model,
            &mut opt.velocity,
            &grads,
            lr,
            opt.momentum,
            opt.weight_decay,
        ) {
            if matches!(e, ModelError::NonFinite(_)) {
                self.fault(&e);
                return Ok(());
            }
            return Err(e.into());
        }
        self.state.step += 1;
        self.updates += 1;
        let mut sources: BTreeMap<String, usize> = BTreeMap::new();
        for item in &batch.items {
            *sources.entry(format!("{}@{}", item.source, item.generation)).or_default() += 1;
        }
        self.provenance.push(BatchProvenance {
            step: self.state.step,
            branch_id: self.state.branch_id.clone(),
            sources,
        });
        let mut record = MetricRecord {
            step: self.state.step,
            train_loss: loss,
            grad_norm,
            effective_grad_norm,
            lr,
            val_loss: None,
        };
        let branch = self.state.branch_id.clone();
        if self.state.eval_cadence > 0 && self.state.step.is_multiple_of(self.state.eval_cadence) {
            let val = self.evaluate();
            record.val_loss = Some(val);
            self.publish(TrainingEvent::evaluation_result(self.state.step, &branch, val));
        }
        self.metrics.append(&branch, record)?;
        self.publish(TrainingEvent::metric(&branch, &record));
        self.sync_hub(RunStatus::Training);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{CommandKind, EventType};
    use serde_json::json;

    /// Submits fixed commands when the loop reaches given steps.
    struct At(Vec<(u64, CommandEnvelope)>);

    impl BoundaryHook for At {
        fn before_boundary(&mut self, step: u64, _branch: &str, hub: &Hub) {
            let (now, later): (Vec<_>, Vec<_>) = self.0.drain(..).partition(|(s, _)| *s == step);
            self.0 = later;
            for (_, e) in now {
                hub.submit_envelope(e).unwrap();
            }
        }
    }

    fn cmd(kind: CommandKind, args: Value) -> CommandEnvelope {
        CommandEnvelope::new(kind, &args)
    }

    fn run_with(cfg: RunConfig, schedule: Vec<(u64, CommandEnvelope)>) -> (RunOutcome, Hub) {
        let hub = Hub::default();
        let out = {
            let mut t = Trainer::new(cfg, &hub, TrainerOptions::default()).unwrap();
            t.add_hook(Box::new(At(schedule)));
            t.run(&mut HubSource::default()).unwrap()
        };
        (out, hub)
    }

    #[test]
    fn five_steps_five_metrics() {
        let (out, hub) = run_with(RunConfig::quadratic(500.0, 1e-3, 5), vec![]);
        let steps: Vec<u64> = out.metrics["b0"].iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5]);
        assert_eq!(out.end_reason, "completed");
        assert_eq!(hub.metrics("b0").len(), 5);
    }

    #[test]
    fn lr_change_shows_in_later_metrics() {
        let up = cmd(CommandKind::UpdateOptimizer, json!({"lr": {"value": 1e-5}}));
        let (out, hub) = run_with(RunConfig::mlp_sin(0.05, 20, 0), vec![(10, up.clone())]);
        let recs = &out.metrics["b0"];
        assert!(recs[..10].iter().all(|r| r.lr == 0.05));
        assert!(recs[10..].iter().all(|r| r.lr == 1e-5));
        assert_eq!(hub.command(&up.uuid).unwrap().status(), CommandStatus::Success);
    }

    #[test]
    fn pause_then_resume_keeps_step_count() {
        let p = cmd(CommandKind::PauseTraining, json!({}));
        let r = cmd(CommandKind::ResumeTraining, json!({}));
        let (out, _) = run_with(RunConfig::quadratic(500.0, 1e-3, 10), vec![(2, p), (2, r)]);
        assert_eq!(out.optimizer_updates, 10);
        assert_eq!(out.metrics["b0"].len(), 10);
    }

    #[test]
    fn stop_ends_early_and_fails_leftovers() {
        let stop = cmd(CommandKind::StopTraining, json!({}));
        let eval = cmd(CommandKind::DoEvaluate, json!({}));
        let (out, hub) = run_with(RunConfig::quadratic(500.0, 1e-3, 50), vec![(7, stop), (7, eval.clone())]);
        assert_eq!(out.end_reason, "stopped");
        assert_eq!(out.state.step, 7);
        let h = hub.command(&eval.uuid).unwrap();
        assert_eq!(h.status(), CommandStatus::Failed);
        assert_eq!(h.timeline.last().unwrap().detail.as_deref(), Some("training stopped"));
    }

    #[test]
    fn layer_reset_zeros_params_and_velocity() {
        let hub = Hub::default();
        let mut cfg = RunConfig::mlp_sin(0.05, 5, 1);
        cfg.momentum = 0.9;
        let mut t = Trainer::new(cfg, &hub, TrainerOptions::default()).unwrap();
        t.run(&mut HubSource::default()).unwrap();
        let env = cmd(CommandKind::ModelLayerOperation, json!({"layer": "h1", "op": "reset"}));
        assert!(matches!(t.apply_command(&env), Ok(Applied::Done(None))));
        let idx = t.state.model.layer_index("h1").unwrap();
        let l = &t.state.model.layers[idx];
        assert!(l.weight.iter().chain(&l.bias).all(|v| *v == 0.0));
        let v = &t.state.optimizer.velocity.layers[idx];
        assert!(v.weight.iter().chain(&v.bias).all(|x| *x == 0.0));
        // The other layer's velocity is untouched.
        assert!(t.state.optimizer.velocity.layers[1].weight.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn failed_commands_leave_state_identical() {
        let hub = Hub::default();
        let mut t = Trainer::new(RunConfig::mlp_sin(0.05, 3, 2), &hub, TrainerOptions::default()).unwrap();
        t.run(&mut HubSource::default()).unwrap();
        let before = t.state.digest();
        for (kind, args) in [
            (CommandKind::LoadCheckpoint, json!({"uuid": "bogus"})),
            (CommandKind::ModelLayerOperation, json!({"layer": "nope", "op": "reset"})),
            (CommandKind::ModelLayerParameterUpdate, json!({"layer": "out", "param": "dropout_rate", "value": 0.1})),
            (CommandKind::ModelLayerParameterUpdate, json!({"layer": "h1", "param": "dropout_rate", "value": 1.5})),
            (CommandKind::UpdateDataset, json!({"source": "x", "data_path": "/nonexistent/file.json"})),
            (CommandKind::UpdateDatasetRuntimeHyperparameters, json!({"weights": {"train": 0}})),
        ] {
            assert!(t.apply_command(&cmd(kind.clone(), args)).is_err(), "{kind}");
            assert_eq!(t.state.digest(), before, "{kind}");
        }
    }

    #[test]
    fn nan_pauses_with_warning_and_reset_recovers() {
        let hub = Hub::default();
        let sub = hub.subscribe();
        let mut t = Trainer::new(RunConfig::mlp_sin(0.05, 10, 3), &hub, TrainerOptions::default()).unwrap();
        t.state.model.layers[0].weight[0] = f64::NAN;
        // Source that resets the faulted layer once training pauses, then resumes.
        struct Recover(u8);
        impl CommandSource for Recover {
            fn fetch(&mut self, hub: &Hub, _: u64, _: &str) -> Result<Vec<CommandEnvelope>, String> {
                Ok(hub.drain_all())
            }
            fn idle(&mut self, hub: &Hub) {
                if self.0 == 0 {
                    self.0 = 1;
                    hub.submit_envelope(cmd(CommandKind::ModelLayerOperation, json!({"layer": "h1", "op": "reinitialize"})))
                        .unwrap();
                    hub.submit_envelope(cmd(CommandKind::ResumeTraining, json!({}))).unwrap();
                }
            }
        }
        let out = t.run(&mut Recover(0)).unwrap();
        assert_eq!(out.optimizer_updates, 10);
        assert!(out.state.model.is_finite());
        let mut saw_warning = false;
        while let crate::hub::Recv::Frame(f) = sub.try_recv() {
            let ev = crate::protocol::decode_event(f.text.as_bytes()).unwrap();
            if ev.event_type == EventType::Log && ev.payload["message"] == FAULT_MESSAGE {
                saw_warning = true;
            }
        }
        assert!(saw_warning);
    }

    #[test]
    fn linear_schedule_anneals_until_overridden() {
        let mut cfg = RunConfig::mlp_sin(1e-2, 10, 0);
        cfg.schedule = ScheduleKind::Linear;
        let up = cmd(CommandKind::UpdateOptimizer, json!({"lr": {"value": 0.5}}));
        let (out, _) = run_with(cfg, vec![(5, up)]);
        let lrs: Vec<f64> = out.metrics["b0"].iter().map(|r| r.lr).collect();
        for (k, lr) in lrs[..5].iter().enumerate() {
            assert_eq!(*lr, 1e-2 * (1.0 - k as f64 / 10.0));
        }
        assert!(lrs[5..].iter().all(|lr| *lr == 0.5));
    }

    #[test]
    fn evaluation_does_not_touch_state() {
        let hub = Hub::default();
        let t = Trainer::new(RunConfig::mlp_sin(0.05, 3, 4), &hub, TrainerOptions::default()).unwrap();
        let before = t.state.digest();
        let a = t.evaluate();
        let b = t.evaluate();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(t.state.digest(), before);
        // Independent single-pass mean.
        let mut sum = 0.0;
        for e in t.validation() {
            let h1 = &t.state.model.layers[0];
            let out = &t.state.model.layers[1];
            let mut y = out.bias[0];
            for j in 0..h1.rows {
                y += out.weight[j] * (h1.weight[j] * e.x + h1.bias[j]).tanh();
            }
            sum += (y - e.y).powi(2);
        }
        let oracle = sum / t.validation().len() as f64;
        assert!(((a - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::from_json(r#"{"task":"quadratic","total_steps":10,"lr0":0.1}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"task":"quadratic","total_steps":10,"lr0":-1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"task":"cubic","total_steps":10,"lr0":0.1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"task":"mlp_sin","total_steps":1,"lr0":0.1,"bogus":1}"#).is_err());
    }
}
