use std::path::PathBuf;

use itrain_core::par::Exec;
use itrain_core::protocol::CommandRegistry;
use itrain_core::state::{compare_trajectories, read_metric_dir, replay, InterventionLog, RunDir, StateError};
use itrain_core::trainer::{RunConfig, TrainerError, TrainerOptions};
use serde_json::json;

use super::emit;
use crate::{CliResult, Failure};

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub run_dir: PathBuf,
    /// Replay under this config instead of the recorded one. Any difference
    /// makes the replay refuse.
    pub config: Option<PathBuf>,
    pub json: bool,
    pub sequential: bool,
}

pub fn run(opts: ReplayOptions) -> CliResult {
    let rd = RunDir::new(&opts.run_dir);
    let recorded = rd.read_config().map_err(Failure::invalid)?;
    let config = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(Failure::invalid)?
        }
        None => recorded.clone(),
    };
    let log = InterventionLog::read(&rd.interventions(), &CommandRegistry::builtin()).map_err(Failure::invalid)?;
    let interventions = log.len();
    let original = read_metric_dir(&rd.metrics()).map_err(Failure::invalid)?;
    let options = TrainerOptions {
        exec: if opts.sequential { Exec::Sequential } else { Exec::Parallel },
        ..Default::default()
    };

    let verdict = match replay(&config, &recorded, log, options) {
        Ok(outcome) => compare_trajectories(&original, &outcome.metrics),
        Err(
            e @ (TrainerError::Source(_)
            | TrainerError::State(StateError::ReplayRefused(_) | StateError::ReplayDiverged(_))),
        ) => Err(e.to_string()),
        Err(e) => return Err(Failure::invalid(format!("replay failed: {e}"))),
    };
    let records: usize = original.values().map(Vec::len).sum();
    if opts.json {
        emit(&json!({
            "match": verdict.is_ok(),
            "branches": original.len(),
            "records": records,
            "interventions": interventions,
            "detail": verdict.as_ref().err(),
        }));
    } else if verdict.is_ok() {
        println!(
            "replay matches: {records} records on {} branches, {interventions} interventions",
            original.len()
        );
    }
    verdict.map_err(|d| Failure::mismatch(format!("replay differs: {d}")))
}
