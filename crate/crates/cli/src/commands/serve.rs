use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use itrain_core::hub::Hub;
use itrain_core::par::Exec;
use itrain_core::protocol::CommandRegistry;
use itrain_core::schedule::{InterventionSchedule, ScheduleHook};
use itrain_core::trainer::{BoundaryHook, RunConfig, TrainerOptions};
use itrain_server::{bind, serve, TrainingRun};
use serde_json::json;
use tokio::sync::oneshot;
use tracing::info;

use super::emit;
use crate::{CliResult, Failure};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub config: PathBuf,
    pub host: String,
    pub port: u16,
    /// Defaults to `runs/<unix-millis>` under the working directory.
    pub run_dir: Option<PathBuf>,
    /// Schedule applied in-process at exact step boundaries.
    pub schedule: Option<PathBuf>,
    /// Keep serving this long after training ends.
    pub linger: Duration,
    pub sequential: bool,
    /// Sleep at every step boundary, so fast runs can be followed live.
    pub pace: Duration,
}

struct Pace(Duration);

impl BoundaryHook for Pace {
    fn before_boundary(&mut self, _step: u64, _branch_id: &str, _hub: &Hub) {
        std::thread::sleep(self.0);
    }
}

pub fn run(opts: ServeOptions) -> CliResult {
    let text = std::fs::read_to_string(&opts.config)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", opts.config.display())))?;
    let config = RunConfig::from_json(&text).map_err(Failure::invalid)?;
    let registry = Arc::new(CommandRegistry::builtin());
    let schedule = match &opts.schedule {
        Some(p) => Some(
            InterventionSchedule::load(p, &registry)
                .map_err(|e| Failure::invalid(format!("schedule {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let run_dir = opts.run_dir.clone().unwrap_or_else(|| {
        let millis = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis());
        PathBuf::from("runs").join(millis.to_string())
    });

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::invalid(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let (listener, addr) = bind(&opts.host, opts.port)
            .await
            .map_err(|e| Failure::connection(format!("cannot listen on {}:{}: {e}", opts.host, opts.port)))?;

        let hub = Arc::new(Hub::with_registry(Default::default(), registry.clone()));
        let options = TrainerOptions {
            run_dir: Some(run_dir.clone()),
            exec: if opts.sequential { Exec::Sequential } else { Exec::Parallel },
            registry,
        };
        let pace = opts.pace;
        let hooks: itrain_server::HookFactory = Box::new(move |_hub: &Hub| {
            let mut hooks: Vec<Box<dyn BoundaryHook>> = Vec::new();
            if let Some(s) = schedule {
                hooks.push(Box::new(ScheduleHook::new(s)));
            }
            if !pace.is_zero() {
                hooks.push(Box::new(Pace(pace)));
            }
            hooks
        });
        let training = TrainingRun::start(hub.clone(), config, options, hooks).map_err(Failure::invalid)?;

        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, hub.clone(), async {
            let _ = stop_rx.await;
        }));
        emit(&json!({
            "event": "listening",
            "url": format!("http://{addr}"),
            "run_dir": run_dir.display().to_string(),
        }));

        let interrupter = {
            let hub = hub.clone();
            tokio::spawn(async move {
                if tokio::signal::ctrl_c().await.is_ok() {
                    info!("interrupt received; stopping at the next step boundary");
                    hub.request_shutdown();
                }
            })
        };

        let outcome = training.finish().await;
        if outcome.is_ok() && !opts.linger.is_zero() && !hub.shutdown_requested() {
            let linger = tokio::time::sleep(opts.linger);
            tokio::select! {
                _ = linger => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        }
        interrupter.abort();
        let _ = stop_tx.send(());
        let _ = server.await;

        let outcome = outcome.map_err(|e| Failure::invalid(format!("training failed: {e}")))?;
        emit(&json!({
            "event": "finished",
            "end_reason": outcome.end_reason,
            "step": outcome.state.step,
            "branch_id": outcome.state.branch_id,
            "optimizer_updates": outcome.optimizer_updates,
        }));
        Ok(())
    })
}
