use std::path::PathBuf;
use std::time::Duration;

use itrain_core::agent::{Agent, AgentError, Policy, RulePolicy, DEFAULT_TEMPLATE};
use itrain_core::protocol::EventType;
use serde_json::{json, Value};
use tracing::warn;

use super::emit;
use crate::client::{Client, ClientError};
use crate::llm::ChatPolicy;
use crate::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyKind {
    Rule,
    Llm,
}

#[derive(Debug, Clone)]
pub struct LlmOptions {
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub key_env: String,
}

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub url: String,
    pub policy: PolicyKind,
    pub cadence: u64,
    pub template: Option<PathBuf>,
    pub llm: LlmOptions,
    /// Reconnect attempts after a lost connection, with doubling backoff.
    pub retries: u32,
    pub backoff: Duration,
}

pub fn run(opts: AgentOptions) -> CliResult {
    match opts.policy {
        PolicyKind::Rule => drive(Agent::new(RulePolicy, opts.cadence).map_err(Failure::invalid)?, &opts),
        PolicyKind::Llm => {
            let template = match &opts.template {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", p.display())))?,
                None => DEFAULT_TEMPLATE.to_string(),
            };
            let endpoint = opts
                .llm
                .endpoint
                .clone()
                .ok_or_else(|| Failure::invalid("--llm-endpoint is required for the llm policy"))?;
            let key = std::env::var(&opts.llm.key_env).ok().filter(|k| !k.is_empty());
            let policy = ChatPolicy::new(&endpoint, &opts.llm.model, key, template).map_err(Failure::invalid)?;
            drive(Agent::new(policy, opts.cadence).map_err(Failure::invalid)?, &opts)
        }
    }
}

fn drive<P: Policy>(mut agent: Agent<P>, opts: &AgentOptions) -> CliResult {
    let client = Client::new(&opts.url);
    let mut failures = 0u32;
    loop {
        match follow(&mut agent, &client) {
            Ok(()) => break,
            Err(ClientError::Connection(e)) if failures < opts.retries => {
                let wait = opts.backoff * 2u32.saturating_pow(failures);
                failures += 1;
                warn!(error = %e, attempt = failures, ?wait, "event stream lost; reconnecting");
                std::thread::sleep(wait);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let halvings = agent
        .decisions()
        .iter()
        .filter(|d| d.decision.action.as_str() == "halve")
        .count();
    emit(&json!({
        "event": "agent_finished",
        "decisions": agent.decisions().len(),
        "halvings": halvings,
        "final_lr": agent.observation().current_lr,
    }));
    Ok(())
}

/// Consumes one event-stream connection until training ends.
fn follow<P: Policy>(agent: &mut Agent<P>, client: &Client) -> Result<(), ClientError> {
    let mut stream = client.events()?;
    let mut sink = client;
    while let Some(ev) = stream.next_event()? {
        match ev.event_type {
            EventType::Snapshot if ev.payload.get("run_status") == Some(&Value::from("stopped")) => return Ok(()),
            EventType::TrainingEnded => return Ok(()),
            _ => {}
        }
        match agent.on_event(&ev, &mut sink) {
            Ok(Some(step)) => emit(&json!({
                "step": step.step,
                "action": step.decision.action.as_str(),
                "explanation": step.decision.explanation,
                "lr": step.submitted.as_ref().map(|e| e.args_value()["lr"]["value"].clone()),
            })),
            Ok(None) => {}
            Err(AgentError::Rejected(e)) => warn!(error = %e, "server rejected the agent's command"),
            Err(e) => warn!(error = %e, "agent step failed"),
        }
    }
    Err(ClientError::Connection("event stream closed before training ended".into()))
}
