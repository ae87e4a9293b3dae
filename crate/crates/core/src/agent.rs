//! Learning-rate intervention agent: builds an observation from the event
//! stream, asks a policy for double/halve/keep, and submits the lr change.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{info, warn};

use crate::hub::{Hub, Recv, Subscriber};
use crate::protocol::{decode_event, CommandEnvelope, CommandKind, EventType, TrainingEvent};
use crate::trainer::BoundaryHook;

pub const PLACEHOLDERS: [&str; 5] = [
    "current_step",
    "current_lr",
    "lr_history",
    "train_loss_history",
    "valid_loss_history",
];

/// Default prompt shipped with the agent.
pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/lr_prompt.txt");

pub const WINDOW: usize = 5;
const PLATEAU: f64 = 0.01;
const OSCILLATION: f64 = 0.10;
const MAX_EXPLANATION_WORDS: usize = 100;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub current_step: u64,
    pub current_lr: f64,
    pub lr_history: Vec<(u64, f64)>,
    pub train_loss_history: Vec<(u64, f64)>,
    pub valid_loss_history: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Double,
    Halve,
    Keep,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Double => "double",
            Action::Halve => "halve",
            Action::Keep => "keep",
        }
    }

    /// Multiplier applied to the current lr. Powers of two keep it exact.
    pub fn factor(self) -> f64 {
        match self {
            Action::Double => 2.0,
            Action::Halve => 0.5,
            Action::Keep => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub action: Action,
    pub explanation: String,
}

impl AgentDecision {
    pub fn new(action: Action, explanation: &str) -> Self {
        Self {
            action,
            explanation: truncate_words(explanation, MAX_EXPLANATION_WORDS),
        }
    }
}

fn truncate_words(text: &str, max: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max {
        text.trim().to_string()
    } else {
        words[..max].join(" ")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("template is missing placeholder {{{{{0}}}}}")]
    MissingPlaceholder(&'static str),
    #[error("no JSON decision found in response")]
    NoDecision,
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("current lr must be positive, got {0}")]
    InvalidLr(f64),
    #[error("cadence must be at least 1")]
    InvalidCadence,
    #[error("{0}")]
    Backend(String),
    #[error("command rejected: {0}")]
    Rejected(String),
}

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

fn render_pairs(pairs: &[(u64, f64)]) -> String {
    let mut out = String::from("[");
    for (i, (s, v)) in pairs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "({s}, {v:?})");
    }
    out.push(']');
    out
}

/// Substitutes the five `{{placeholders}}` in `template`.
pub fn render_prompt(obs: &AgentObservation, template: &str) -> Result<String, AgentError> {
    for p in PLACEHOLDERS {
        if !template.contains(&format!("{{{{{p}}}}}")) {
            return Err(AgentError::MissingPlaceholder(p));
        }
    }
    Ok(template
        .replace("{{current_step}}", &obs.current_step.to_string())
        .replace("{{current_lr}}", &format!("{:?}", obs.current_lr))
        .replace("{{lr_history}}", &render_pairs(&obs.lr_history))
        .replace("{{train_loss_history}}", &render_pairs(&obs.train_loss_history))
        .replace("{{valid_loss_history}}", &render_pairs(&obs.valid_loss_history)))
}

// ---------------------------------------------------------------------------
// Rule policy
// ---------------------------------------------------------------------------

/// Deterministic stand-in for the language-model agent, judged on the last
/// [`WINDOW`] training losses.
pub fn decide_rule(obs: &AgentObservation) -> AgentDecision {
    let hist = &obs.train_loss_history;
    if hist.len() < 2 {
        return AgentDecision::new(Action::Keep, "not enough history");
    }
    let w: Vec<f64> = hist[hist.len().saturating_sub(WINDOW)..].iter().map(|p| p.1).collect();
    let (first, last) = (w[0], w[w.len() - 1]);
    if !w.iter().all(|x| x.is_finite()) {
        return AgentDecision::new(Action::Halve, "loss is not finite");
    }
    let deltas: Vec<f64> = w.windows(2).map(|p| p[1] - p[0]).collect();
    if last > first {
        return AgentDecision::new(Action::Halve, "loss is rising over the window");
    }
    let sign_changes = deltas
        .windows(2)
        .filter(|d| (d[0] > 0.0 && d[1] < 0.0) || (d[0] < 0.0 && d[1] > 0.0))
        .count();
    let mean_abs_delta = deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64;
    let mean_loss = w.iter().sum::<f64>() / w.len() as f64;
    if sign_changes >= 2 && mean_abs_delta > OSCILLATION * mean_loss {
        return AgentDecision::new(Action::Halve, "loss is oscillating");
    }
    let strictly_decreasing = deltas.iter().all(|d| *d < 0.0);
    if strictly_decreasing && first > 0.0 && (first - last) / first < PLATEAU {
        return AgentDecision::new(Action::Double, "loss is decreasing too slowly");
    }
    AgentDecision::new(Action::Keep, "loss is decreasing steadily")
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

/// First JSON object in `text` with an `"action"` key.
pub fn parse_decision(text: &str) -> Result<AgentDecision, AgentError> {
    let mut unknown = None;
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = stream.next() else {
            continue;
        };
        let Some(action) = obj.get("action") else {
            continue;
        };
        let name = action.as_str().unwrap_or_default().trim().to_ascii_lowercase();
        let action = match name.as_str() {
            "double" => Action::Double,
            "halve" => Action::Halve,
            "keep" => Action::Keep,
            _ => {
                unknown.get_or_insert_with(|| action.to_string());
                continue;
            }
        };
        let explanation = obj.get("explanation").and_then(Value::as_str).unwrap_or_default();
        return Ok(AgentDecision::new(action, explanation));
    }
    Err(unknown.map_or(AgentError::NoDecision, AgentError::UnknownAction))
}

// ---------------------------------------------------------------------------
// Acting
// ---------------------------------------------------------------------------

/// Somewhere to send commands: the in-process hub or a remote server.
pub trait CommandSink {
    fn submit(&mut self, envelope: CommandEnvelope) -> Result<(), String>;
}

impl CommandSink for &Hub {
    fn submit(&mut self, envelope: CommandEnvelope) -> Result<(), String> {
        self.submit_envelope(envelope).map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Builds and submits the lr change for `decision`. `Keep` submits nothing.
pub fn act(
    decision: &AgentDecision,
    current_lr: f64,
    sink: &mut dyn CommandSink,
) -> Result<Option<CommandEnvelope>, AgentError> {
    if !(current_lr > 0.0 && current_lr.is_finite()) {
        return Err(AgentError::InvalidLr(current_lr));
    }
    if decision.action == Action::Keep {
        return Ok(None);
    }
    let lr = current_lr * decision.action.factor();
    let env = CommandEnvelope::new(CommandKind::UpdateOptimizer, &json!({"lr": {"value": lr}}));
    sink.submit(env.clone()).map_err(AgentError::Rejected)?;
    Ok(Some(env))
}

/// Decision source behind the agent loop.
pub trait Policy {
    fn decide(&mut self, obs: &AgentObservation) -> Result<AgentDecision, AgentError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RulePolicy;

impl Policy for RulePolicy {
    fn decide(&mut self, obs: &AgentObservation) -> Result<AgentDecision, AgentError> {
        Ok(decide_rule(obs))
    }
}

// ---------------------------------------------------------------------------
// Agent loop
// ---------------------------------------------------------------------------

/// Rolling observation built from training events. Histories are cleared
/// when the active branch changes.
#[derive(Debug, Clone)]
pub struct ObservationTracker {
    max_history: usize,
    branch_id: Option<String>,
    step: u64,
    lr: VecDeque<(u64, f64)>,
    train: VecDeque<(u64, f64)>,
    valid: VecDeque<(u64, f64)>,
}

impl ObservationTracker {
    pub fn new(max_history: usize) -> Self {
        Self {
            max_history: max_history.max(WINDOW),
            branch_id: None,
            step: 0,
            lr: VecDeque::new(),
            train: VecDeque::new(),
            valid: VecDeque::new(),
        }
    }

    fn switch_branch(&mut self, branch: &str) {
        if self.branch_id.as_deref() != Some(branch) {
            self.branch_id = Some(branch.to_string());
            self.lr.clear();
            self.train.clear();
            self.valid.clear();
        }
    }

    fn push(q: &mut VecDeque<(u64, f64)>, max: usize, item: (u64, f64)) {
        if q.len() == max {
            q.pop_front();
        }
        q.push_back(item);
    }

    /// Returns the step of a newly observed metric event.
    pub fn observe(&mut self, ev: &TrainingEvent) -> Option<u64> {
        let num = |k: &str| ev.payload.get(k).and_then(Value::as_f64);
        match ev.event_type {
            EventType::Metric => {
                self.switch_branch(&ev.branch_id);
                let (loss, lr) = (num("train_loss")?, num("lr")?);
                self.step = ev.step;
                Self::push(&mut self.lr, self.max_history, (ev.step, lr));
                Self::push(&mut self.train, self.max_history, (ev.step, loss));
                if let Some(v) = num("val_loss") {
                    Self::push(&mut self.valid, self.max_history, (ev.step, v));
                }
                Some(ev.step)
            }
            EventType::EvaluationResult => {
                if self.branch_id.as_deref() == Some(ev.branch_id.as_str())
                    && self.valid.back().map(|p| p.0) != Some(ev.step)
                {
                    if let Some(v) = num("val_loss") {
                        Self::push(&mut self.valid, self.max_history, (ev.step, v));
                    }
                }
                None
            }
            _ => None,
        }
    }

    pub fn observation(&self) -> AgentObservation {
        AgentObservation {
            current_step: self.step,
            current_lr: self.lr.back().map_or(0.0, |p| p.1),
            lr_history: self.lr.iter().copied().collect(),
            train_loss_history: self.train.iter().copied().collect(),
            valid_loss_history: self.valid.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentStep {
    pub step: u64,
    pub decision: AgentDecision,
    pub submitted: Option<CommandEnvelope>,
}

/// Decides every `cadence` metric steps.
pub struct Agent<P> {
    pub policy: P,
    cadence: u64,
    tracker: ObservationTracker,
    decisions: Vec<AgentStep>,
}

impl<P: Policy> Agent<P> {
    pub fn new(policy: P, cadence: u64) -> Result<Self, AgentError> {
        if cadence == 0 {
            return Err(AgentError::InvalidCadence);
        }
        Ok(Self {
            policy,
            cadence,
            tracker: ObservationTracker::new(50),
            decisions: Vec::new(),
        })
    }

    pub fn decisions(&self) -> &[AgentStep] {
        &self.decisions
    }

    pub fn observation(&self) -> AgentObservation {
        self.tracker.observation()
    }

    /// Feeds one event; decides and acts when a metric lands on the cadence.
    /// A policy failure falls back to keeping the lr.
    pub fn on_event(
        &mut self,
        ev: &TrainingEvent,
        sink: &mut dyn CommandSink,
    ) -> Result<Option<&AgentStep>, AgentError> {
        let Some(step) = self.tracker.observe(ev) else {
            return Ok(None);
        };
        if step % self.cadence != 0 {
            return Ok(None);
        }
        let obs = self.tracker.observation();
        let decision = self.policy.decide(&obs).unwrap_or_else(|e| {
            warn!(step, error = %e, "policy failed; keeping lr");
            AgentDecision::new(Action::Keep, &format!("policy error: {e}"))
        });
        info!(step, action = decision.action.as_str(), lr = obs.current_lr, "agent decision");
        let submitted = act(&decision, obs.current_lr, sink)?;
        self.decisions.push(AgentStep {
            step,
            decision,
            submitted,
        });
        Ok(self.decisions.last())
    }
}

/// Runs an agent inside the training process. Events are consumed at each
/// boundary, so decisions land at exactly the step they were made for.
pub struct AgentHook<P> {
    pub agent: Agent<P>,
    sub: Arc<Subscriber>,
}

impl<P: Policy> AgentHook<P> {
    pub fn new(agent: Agent<P>, hub: &Hub) -> Self {
        Self {
            agent,
            sub: hub.subscribe(),
        }
    }
}

impl<P: Policy> BoundaryHook for AgentHook<P> {
    fn before_boundary(&mut self, _step: u64, _branch_id: &str, hub: &Hub) {
        while let Recv::Frame(f) = self.sub.try_recv() {
            let Ok(ev) = decode_event(f.text.as_bytes()) else {
                continue;
            };
            let mut sink = hub;
            if let Err(e) = self.agent.on_event(&ev, &mut sink) {
                warn!(error = %e, "agent action failed");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(losses: &[f64]) -> AgentObservation {
        AgentObservation {
            current_step: losses.len() as u64,
            current_lr: 5e-3,
            lr_history: (1..=losses.len() as u64).map(|s| (s, 5e-3)).collect(),
            train_loss_history: losses.iter().enumerate().map(|(i, l)| (i as u64 + 1, *l)).collect(),
            valid_loss_history: vec![],
        }
    }

    #[test]
    fn rule_examples() {
        assert_eq!(decide_rule(&obs(&[250.0, 312.0, 280.0, 350.0, 330.0])).action, Action::Halve);
        assert_eq!(decide_rule(&obs(&[1.0, 0.5, 0.25, 0.12, 0.06])).action, Action::Keep);
        assert_eq!(decide_rule(&obs(&[1.0, 0.999, 0.998, 0.997, 0.996])).action, Action::Double);
        assert_eq!(decide_rule(&obs(&[1.0])).action, Action::Keep);
        // Falling overall but swinging hard.
        assert_eq!(decide_rule(&obs(&[10.0, 5.0, 9.0, 4.0, 8.0])).action, Action::Halve);
        // Small wiggles below the amplitude threshold.
        assert_eq!(decide_rule(&obs(&[1.0, 0.99, 0.995, 0.98, 0.985])).action, Action::Keep);
    }

    #[test]
    fn rule_uses_only_last_window() {
        let mut l = vec![100.0, 1.0];
        l.extend([0.5, 0.25, 0.12, 0.06, 0.03]);
        assert_eq!(decide_rule(&obs(&l)).action, Action::Keep);
    }

    #[test]
    fn current_lr_renders_plainly() {
        let o = obs(&[]);
        let t = "{{current_lr}} {{current_step}} {{lr_history}} {{train_loss_history}} {{valid_loss_history}}";
        assert_eq!(render_prompt(&o, t).unwrap(), "0.005 0 [] [] []");
    }

    #[test]
    fn missing_placeholder_is_an_error() {
        assert_eq!(
            render_prompt(&obs(&[]), "{{current_lr}}"),
            Err(AgentError::MissingPlaceholder("current_step"))
        );
    }

    #[test]
    fn default_template_renders_fully() {
        let out = render_prompt(&obs(&[3.0, 2.0]), DEFAULT_TEMPLATE).unwrap();
        assert!(!out.contains("{{"));
        assert!(out.contains("[(1, 3.0), (2, 2.0)]"));
    }

    #[test]
    fn parse_examples() {
        let d = parse_decision(r#"{"action": "halve", "explanation": "loss oscillating"}"#).unwrap();
        assert_eq!(d, AgentDecision::new(Action::Halve, "loss oscillating"));
        assert_eq!(parse_decision(r#"Sure! {"action":"KEEP"}"#).unwrap().action, Action::Keep);
        assert_eq!(
            parse_decision(r#"{"note": 1} then {"action": " Double "}"#).unwrap().action,
            Action::Double
        );
        assert_eq!(parse_decision("no json here"), Err(AgentError::NoDecision));
        assert!(matches!(parse_decision(r#"{"action": "triple"}"#), Err(AgentError::UnknownAction(_))));
    }

    #[test]
    fn long_explanations_are_cut() {
        let long = vec!["word"; 150].join(" ");
        let d = parse_decision(&json!({"action": "keep", "explanation": long}).to_string()).unwrap();
        assert_eq!(d.explanation.split_whitespace().count(), 100);
    }

    struct Collect(Vec<CommandEnvelope>);
    impl CommandSink for Collect {
        fn submit(&mut self, e: CommandEnvelope) -> Result<(), String> {
            self.0.push(e);
            Ok(())
        }
    }

    #[test]
    fn act_halves_doubles_and_keeps() {
        let mut sink = Collect(vec![]);
        let halve = AgentDecision::new(Action::Halve, "");
        let env = act(&halve, 5e-3, &mut sink).unwrap().unwrap();
        assert_eq!(env.args_value(), json!({"lr": {"value": 2.5e-3}}));
        assert!(act(&AgentDecision::new(Action::Keep, ""), 1.0, &mut sink).unwrap().is_none());
        assert_eq!(sink.0.len(), 1);
        assert_eq!(act(&halve, 0.0, &mut sink), Err(AgentError::InvalidLr(0.0)));

        let mut lr = 0.1f64;
        for _ in 0..20 {
            lr *= Action::Double.factor();
            lr *= Action::Halve.factor();
        }
        assert_eq!(lr.to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn zero_cadence_rejected() {
        assert!(matches!(Agent::new(RulePolicy, 0), Err(AgentError::InvalidCadence)));
    }
}
