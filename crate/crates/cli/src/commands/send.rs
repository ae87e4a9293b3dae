use std::time::{Duration, Instant};

use itrain_core::protocol::{CommandEnvelope, CommandKind, CommandRegistry, CommandStatus, EventType};
use serde_json::{json, Map, Value};

use super::emit;
use crate::client::{Client, ClientError};
use crate::{CliResult, Failure};

#[derive(Debug, Clone)]
pub struct SendOptions {
    pub url: String,
    pub kind: String,
    /// `key=value` pairs; see [`build_args`].
    pub pairs: Vec<String>,
    /// Raw JSON args object, merged under the pairs.
    pub args_json: Option<String>,
    pub wait: bool,
    pub timeout: Duration,
    pub json: bool,
}

/// Builds the args object from `key=value` pairs. Values are parsed as JSON
/// when possible and kept as strings otherwise; dotted keys nest
/// (`weights.main=0`). For `update_optimizer`, bare values are wrapped as
/// `{"value": v}`, so `lr=1e-5` becomes `{"lr": {"value": 1e-5}}`.
pub fn build_args(kind: &str, base: Option<&str>, pairs: &[String]) -> Result<Value, String> {
    let mut root = match base {
        Some(text) => match serde_json::from_str(text) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err("--args must be a JSON object".into()),
            Err(e) => return Err(format!("--args is not valid JSON: {e}")),
        },
        None => Map::new(),
    };
    for pair in pairs {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| format!("`{pair}` is not key=value"))?;
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("`{pair}` has an empty key"));
        }
        let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let path: Vec<&str> = key.split('.').collect();
        if kind == "update_optimizer" && path.len() == 1 && !value.is_object() {
            value = json!({ "value": value });
        }
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            let next = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = next
                .as_object_mut()
                .ok_or_else(|| format!("`{key}` nests under a non-object value"))?;
        }
        node.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(Value::Object(root))
}

fn kind_of(name: &str) -> CommandKind {
    CommandRegistry::builtin()
        .resolve(name)
        .unwrap_or_else(|_| CommandKind::Extension(name.into()))
}

struct Outcome {
    uuid: String,
    status: String,
    detail: Option<String>,
}

fn report(o: &Outcome, json: bool) {
    if json {
        emit(&json!({"uuid": o.uuid, "status": o.status, "detail": o.detail}));
    } else {
        match &o.detail {
            Some(d) => println!("{} {}: {d}", o.uuid, o.status),
            None => println!("{} {}", o.uuid, o.status),
        }
    }
}

pub fn run(opts: SendOptions) -> CliResult {
    let args = build_args(&opts.kind, opts.args_json.as_deref(), &opts.pairs).map_err(Failure::invalid)?;
    let envelope = CommandEnvelope::new(kind_of(&opts.kind), &args);
    let client = Client::new(&opts.url);

    // Subscribe before submitting so no status change can be missed; the
    // snapshot frame confirms the subscription is live.
    let mut stream = if opts.wait {
        let mut s = client.events()?;
        s.set_timeout(Some(opts.timeout));
        s.next_event()?;
        Some(s)
    } else {
        None
    };

    let ack = match client.submit(&envelope) {
        Ok(v) => v,
        Err(ClientError::Rejected { body, message, .. }) => {
            let detail = match body.get("field").and_then(Value::as_str) {
                Some(f) => format!("{message} (field {f})"),
                None => message,
            };
            report(
                &Outcome {
                    uuid: envelope.uuid.clone(),
                    status: "rejected".into(),
                    detail: Some(detail.clone()),
                },
                opts.json,
            );
            return Err(Failure::invalid(format!("command rejected: {detail}")));
        }
        Err(e) => return Err(e.into()),
    };
    let mut outcome = Outcome {
        uuid: envelope.uuid.clone(),
        status: ack["status"].as_str().unwrap_or("pending").to_string(),
        detail: None,
    };

    if let Some(stream) = stream.as_mut() {
        let deadline = Instant::now() + opts.timeout;
        loop {
            if Instant::now() >= deadline {
                return Err(Failure::connection("timed out waiting for a final status"));
            }
            let Some(ev) = stream.next_event()? else {
                // Stream closed: the run ended. The history has the final word.
                if let Some(s) = final_status_from_history(&client, &envelope.uuid) {
                    outcome.status = s.0;
                    outcome.detail = s.1;
                }
                break;
            };
            if ev.event_type != EventType::CommandStatus {
                continue;
            }
            if let Some((uuid, status)) = ev.status_update() {
                if uuid == envelope.uuid {
                    outcome.status = status.as_str().to_string();
                    outcome.detail = ev.payload.get("detail").and_then(Value::as_str).map(str::to_string);
                    if matches!(status, CommandStatus::Success | CommandStatus::Failed) {
                        break;
                    }
                }
            }
        }
    }
    if let Some(s) = stream {
        s.close();
    }
    report(&outcome, opts.json);
    if outcome.status == "failed" {
        return Err(Failure::invalid(format!(
            "command failed: {}",
            outcome.detail.as_deref().unwrap_or("no detail")
        )));
    }
    Ok(())
}

fn final_status_from_history(client: &Client, uuid: &str) -> Option<(String, Option<String>)> {
    let history = client.get("/commands").ok()?;
    let entry = history.as_array()?.iter().find(|e| e["envelope"]["uuid"] == uuid)?;
    let last = entry["timeline"].as_array()?.last()?;
    Some((
        last["status"].as_str()?.to_string(),
        last["detail"].as_str().map(str::to_string),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(kind: &str, pairs: &[&str]) -> Result<Value, String> {
        let pairs: Vec<String> = pairs.iter().map(|s| s.to_string()).collect();
        build_args(kind, None, &pairs)
    }

    #[test]
    fn optimizer_values_are_wrapped() {
        assert_eq!(
            args("update_optimizer", &["lr=1e-5", "grad_clip=null"]).unwrap(),
            json!({"lr": {"value": 1e-5}, "grad_clip": {"value": null}})
        );
    }

    #[test]
    fn strings_and_nesting() {
        assert_eq!(args("load_checkpoint", &["uuid=ck-1"]).unwrap(), json!({"uuid": "ck-1"}));
        assert_eq!(
            args("update_dataset_runtime_hyperparameters", &["weights.main=0", "weights.new=1"]).unwrap(),
            json!({"weights": {"main": 0, "new": 1}})
        );
        assert!(args("x", &["novalue"]).is_err());
        assert!(args("x", &["a=1", "a.b=2"]).is_err());
        assert!(args("x", &["a..b=2"]).is_err());
    }

    #[test]
    fn base_args_merge() {
        let v = build_args("do_evaluate", Some("{\"a\": 1}"), &["b=2".into()]).unwrap();
        assert_eq!(v, json!({"a": 1, "b": 2}));
        assert!(build_args("x", Some("[1]"), &[]).is_err());
    }
}
