//! Remote schedule runner. Commands are posted once the event stream shows
//! the run at or past their step, so they land a few steps late at best.
//! `serve --schedule` applies a schedule at exact steps instead.

use std::path::PathBuf;

use itrain_core::protocol::{now_unix, CommandRegistry, EventType};
use itrain_core::schedule::InterventionSchedule;
use serde_json::json;

use super::emit;
use crate::client::Client;
use crate::{CliResult, Failure};

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    pub url: String,
    pub file: PathBuf,
}

pub fn run(opts: ScheduleOptions) -> CliResult {
    let schedule = InterventionSchedule::load(&opts.file, &CommandRegistry::builtin())
        .map_err(|e| Failure::invalid(format!("schedule {}: {e}", opts.file.display())))?;
    let client = Client::new(&opts.url);
    let mut stream = client.events()?;
    let mut pending = schedule.entries.into_iter().peekable();
    while pending.peek().is_some() {
        let Some(ev) = stream.next_event()? else {
            break;
        };
        if ev.event_type == EventType::TrainingEnded {
            break;
        }
        while let Some(entry) = pending.next_if(|e| e.at_step <= ev.step) {
            let mut env = entry.envelope;
            env.time = now_unix();
            let ack = client.submit(&env)?;
            emit(&json!({
                "at_step": entry.at_step,
                "sent_at_step": ev.step,
                "command": env.command.as_str(),
                "uuid": ack["uuid"],
                "status": ack["status"],
            }));
        }
    }
    stream.close();
    let left = pending.count();
    if left > 0 {
        return Err(Failure::invalid(format!("training ended with {left} scheduled commands unsent")));
    }
    Ok(())
}
