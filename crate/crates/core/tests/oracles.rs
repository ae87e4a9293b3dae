//! Trajectories pinned against the independent scripts in `oracles/`.

use std::path::PathBuf;

use itrain_core::agent::{Agent, AgentHook, AgentObservation, RulePolicy, render_prompt, DEFAULT_TEMPLATE};
use itrain_core::hub::Hub;
use itrain_core::protocol::CommandRegistry;
use itrain_core::schedule::{InterventionSchedule, ScheduleHook};
use itrain_core::trainer::{HubSource, RunConfig, RunOutcome, Trainer, TrainerOptions};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn mlp_config() -> RunConfig {
    RunConfig::from_json(&std::fs::read_to_string(fixture("mlp_sin.json")).unwrap()).unwrap()
}

fn run_mlp(schedule: Option<&str>) -> (RunOutcome, f64) {
    let hub = Hub::default();
    let mut t = Trainer::new(mlp_config(), &hub, TrainerOptions::default()).unwrap();
    if let Some(name) = schedule {
        let s = InterventionSchedule::load(&fixture(name), &CommandRegistry::builtin()).unwrap();
        t.add_hook(Box::new(ScheduleHook::new(s)));
    }
    let out = t.run(&mut HubSource::default()).unwrap();
    let val = t.evaluate();
    (out, val)
}

#[test]
fn mlp_baseline_and_interactive_match_reference() {
    let (base, base_val) = run_mlp(None);
    let (inter, inter_val) = run_mlp(Some("mlp_interactive.jsonl"));
    assert_eq!(base.optimizer_updates, 2000);
    assert_eq!(inter.optimizer_updates, 2000);
    assert_eq!(base_val, 0.4445998020719759, "{base_val:e}");
    assert_eq!(inter_val, 0.010778025125642174, "{inter_val:e}");
    // The last automatic evaluation is the end-of-run value.
    assert_eq!(inter.metrics["b0"].last().unwrap().val_loss, Some(inter_val));
}

fn quadratic_run(agent: bool) -> (RunOutcome, f64) {
    let cfg = RunConfig::quadratic(500.0, 5e-3, 200);
    let hub = Hub::default();
    let mut t = Trainer::new(cfg, &hub, TrainerOptions::default()).unwrap();
    if agent {
        t.add_hook(Box::new(AgentHook::new(Agent::new(RulePolicy, 10).unwrap(), &hub)));
    }
    let out = t.run(&mut HubSource::default()).unwrap();
    let loss = t.evaluate();
    (out, loss)
}

#[test]
fn quadratic_static_run_diverges() {
    let (out, loss) = quadratic_run(false);
    assert_eq!(out.metrics["b0"][0].train_loss, 250.0);
    assert_eq!(loss, f64::from_bits(0x4F0EED413CD2FA38), "{loss:e}");
}

#[test]
fn quadratic_agent_run_converges() {
    let (out, loss) = quadratic_run(true);
    assert_eq!(loss, 1.3707822909150163e-223);
    assert_eq!(out.state.optimizer.lr, 2.5e-3);
    let lrs: Vec<f64> = out.metrics["b0"].iter().map(|r| r.lr).collect();
    assert!(lrs[..10].iter().all(|l| *l == 5e-3));
    assert!(lrs[10..].iter().all(|l| *l == 2.5e-3));
}

#[test]
fn prompt_matches_golden_file() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let obs: AgentObservation =
        serde_json::from_str(&std::fs::read_to_string(dir.join("observation.json")).unwrap()).unwrap();
    let golden = std::fs::read_to_string(dir.join("prompt.txt")).unwrap();
    assert_eq!(render_prompt(&obs, DEFAULT_TEMPLATE).unwrap(), golden);
}
