use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use vgt_core::evo::{run_evolution, EvolutionObserver, EvolutionState, GenerationRecord};
use vgt_core::objectives::{ObjectiveSpec, TrussEvaluator};
use vgt_core::rl::{
    observation_len, policy_rollout, train_ppo, BanditEnv, Environment, Policy, TrussEnv,
    UpdateRecord,
};
use vgt_core::sim::{trajectory_jsonl, Trajectory};
use vgt_core::truss::TrussFile;

use crate::config::{
    build_truss, genome_checks, load_genome, read_genome, read_text, write_text, CliError,
    ResolvedConfig,
};

fn evaluator(cfg: &ResolvedConfig, objectives: Vec<ObjectiveSpec>) -> Result<TrussEvaluator, CliError> {
    TrussEvaluator::new(cfg.graph()?, cfg.physics.clone(), objectives)
        .map_err(|e| CliError::Config(e.to_string()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn csv_row(w: &mut csv::Writer<std::fs::File>, path: &Path, row: &[String]) -> Result<(), CliError> {
    w.write_record(row).map_err(|e| CliError::io(path, e))
}

fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the full evolution state after every exploration step.
struct Checkpointer {
    dir: PathBuf,
    error: Option<CliError>,
}

impl EvolutionObserver for Checkpointer {
    fn exploration_step(&mut self, state: &EvolutionState) {
        if self.error.is_some() {
            return;
        }
        let path = self
            .dir
            .join(format!("exploration_{:04}.json", state.exploration_step));
        let text = serde_json::to_string(state).expect("state serializes");
        if let Err(e) = write_text(&path, &text) {
            self.error = Some(e);
        }
    }

    fn generation(&mut self, record: &GenerationRecord) {
        if record.generation.is_multiple_of(10) {
            eprintln!("generation {} best {:?}", record.generation, record.best);
        }
    }
}

pub fn run_ga(cfg: &ResolvedConfig) -> Result<(), CliError> {
    if cfg.objectives.is_empty() {
        return Err(CliError::Config("run-ga needs at least one objective".into()));
    }
    let eval = evaluator(cfg, cfg.objectives.clone())?;
    cfg.write()?;
    let checkpoints = cfg.out.join("checkpoints");
    fresh_dir(&checkpoints)?;
    let mut observer = Checkpointer {
        dir: checkpoints,
        error: None,
    };
    let run = run_evolution(eval.graph(), &eval, &cfg.ga, cfg.seed, &mut observer)
        .map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(e) = observer.error {
        return Err(e);
    }

    let path = cfg.out.join("history.csv");
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, &["generation", "objective_name", "best", "mean"].map(String::from))?;
    for rec in &run.history {
        for (o, spec) in cfg.objectives.iter().enumerate() {
            let row = [
                rec.generation.to_string(),
                spec.name(),
                rec.best[o].to_string(),
                rec.mean[o].to_string(),
            ];
            csv_row(&mut w, &path, &row)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let elites_dir = cfg.out.join("elites");
    fresh_dir(&elites_dir)?;
    let elites = run.state.final_elites(cfg.ga.population, cfg.ga.crowding);
    for (i, g) in elites.iter().enumerate() {
        let text = serde_json::to_string_pretty(g).expect("genome serializes");
        write_text(&elites_dir.join(format!("genome_{i:02}.json")), &(text + "\n"))?;
    }
    if let Some(last) = run.history.last() {
        for (spec, best) in cfg.objectives.iter().zip(&last.best) {
            println!("{} {}", spec.name(), best);
        }
    }
    println!("{} elites written to {}", elites.len(), elites_dir.display());
    Ok(())
}

fn write_rl_history(path: &Path, history: &[UpdateRecord]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    csv_row(
        &mut w,
        path,
        &["update", "mean_return", "policy_loss", "value_loss", "entropy"].map(String::from),
    )?;
    for r in history {
        let row = [
            r.update.to_string(),
            r.mean_return.to_string(),
            r.policy_loss.to_string(),
            r.value_loss.to_string(),
            r.entropy.to_string(),
        ];
        csv_row(&mut w, path, &row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn train<E: Environment>(cfg: &ResolvedConfig, env: &E, tag: &str) -> Result<(), CliError> {
    cfg.write()?;
    let (policy, history) = train_ppo(env, &cfg.ppo, cfg.seed, |r| {
        if r.update.is_multiple_of(10) {
            eprintln!("update {} mean_return {}", r.update, r.mean_return);
        }
    })
    .map_err(|e| CliError::Run(e.to_string()))?;
    write_text(
        &cfg.out.join(format!("policy_{tag}.json")),
        &policy.to_checkpoint_json(),
    )?;
    write_rl_history(&cfg.out.join(format!("rl_history_{tag}.csv")), &history)?;
    if let Some(last) = history.last() {
        println!("final mean_return {}", last.mean_return);
    }
    Ok(())
}

/// Trains a policy on top of a genome's channel assignment. Without a genome
/// the config's bandit environment is trained instead.
pub fn run_rl(
    cfg: &ResolvedConfig,
    genome: Option<&Path>,
    objective: Option<&str>,
) -> Result<(), CliError> {
    let Some(genome_path) = genome else {
        let Some(b) = cfg.bandit else {
            return Err(CliError::Config(
                "run-rl needs --genome, or a bandit section in the config".into(),
            ));
        };
        if b.contexts == 0 || b.channels == 0 || b.channels > vgt_core::rl::MAX_CODEC_CHANNELS {
            return Err(CliError::Config("bandit needs positive contexts and 1..=16 channels".into()));
        }
        return train(cfg, &BanditEnv::new(b.contexts, b.channels), "bandit");
    };
    let name = objective.ok_or_else(|| CliError::Config("run-rl needs --objective".into()))?;
    let spec = cfg.objective(name)?.clone();
    let eval = evaluator(cfg, vec![spec.clone()])?;
    let genome = load_genome(genome_path, eval.graph())?;
    let env = TrussEnv::new(
        Arc::new(eval),
        genome.channels,
        spec,
        cfg.ga.n_steps,
        cfg.ppo.position_noise,
        cfg.ppo.blowup_reward,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    train(cfg, &env, name)
}

#[derive(Serialize)]
struct Score {
    objective: String,
    score: f64,
}

/// Replays a genome's schedule, or a policy on the genome's assignment, and
/// scores it.
pub fn simulate(
    cfg: &ResolvedConfig,
    genome: &Path,
    policy: Option<&Path>,
    objective: Option<&str>,
) -> Result<(), CliError> {
    let objectives = match objective {
        Some(name) => vec![cfg.objective(name)?.clone()],
        None => cfg.objectives.clone(),
    };
    if objectives.is_empty() {
        return Err(CliError::Config("no objectives to score".into()));
    }
    let eval = evaluator(cfg, objectives)?;
    let genome = load_genome(genome, eval.graph())?;
    let trajectory: Trajectory = match policy {
        None => eval
            .simulate(&genome)
            .map(|(t, _)| t)
            .map_err(|e| CliError::Run(e.to_string()))?,
        Some(path) => {
            let policy = Policy::from_checkpoint_json(&read_text(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let expected = observation_len(eval.graph());
            if policy.observation_len() != expected || policy.n_channels != eval.graph().n_channels() {
                return Err(CliError::Config(format!(
                    "{}: policy does not fit this truss",
                    path.display()
                )));
            }
            policy_rollout(&eval, &genome.channels, &policy, cfg.ga.n_steps)
                .map_err(|e| CliError::Run(e.to_string()))?
        }
    };
    write_text(&cfg.out.join("trajectory.jsonl"), &trajectory_jsonl(&trajectory))?;
    if let Some(step) = trajectory.blowup_step {
        return Err(CliError::Run(format!("simulation blew up at step {step}")));
    }
    let rating = eval.rate(&trajectory);
    let scores: Vec<Score> = eval
        .objectives()
        .iter()
        .zip(rating.values())
        .map(|(o, &score)| Score {
            objective: o.name(),
            score,
        })
        .collect();
    let text = serde_json::to_string_pretty(&scores).expect("scores serialize");
    write_text(&cfg.out.join("scores.json"), &(text + "\n"))?;
    for s in &scores {
        println!("{} {}", s.objective, s.score);
    }
    Ok(())
}

/// Prints one PASS/FAIL line per invariant check.
pub fn validate(truss: &TrussFile, genome: &Path) -> Result<(), CliError> {
    let graph = build_truss(truss)?;
    let genome = read_genome(genome).map_err(|e| CliError::Config(e.to_string()))?;
    let checks = genome_checks(&graph, &genome);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{failed} check(s) failed")))
    }
}
