use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use u2o_core::bridge::NormalizerState;
use u2o_core::diag::{feature_dot_product, reward_stats_probe, sample_consecutive_pairs};
use u2o_core::env::{Behavior, Task};
use u2o_core::finetune::{evaluate_policy, identify_for_task, RunConfig};
use u2o_core::harness::{
    emit_charts, generate_dataset_file, materialize_dataset, parse_config, pretrain_log_csv,
    report_from_dir, reward_dataset_for, run_experiment, ExperimentConfig,
};
use u2o_core::hilp::{load_bundle, pretrain_skills, save_bundle, PretrainBundle};
use u2o_core::rng::derive_rng;
use u2o_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "u2o",
    version,
    about = "Unsupervised-to-online RL: pretrain skills offline, bridge to a task, fine-tune online"
)]
struct Cli {
    /// Output root (falls back to $U2O_OUT, then the config's `output`).
    #[arg(long, global = true, env = "U2O_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BehaviorArg {
    UniformRandom,
    EpsilonRandomWalk,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline dataset as JSON lines.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100_000)]
        size: usize,
        #[arg(long, value_enum, default_value = "uniform-random")]
        behavior: BehaviorArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination file.
        #[arg(long)]
        file: PathBuf,
    },
    /// Pretrain a skill bundle for one seed.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Identify the task skill from a bundle and print it.
    Bridge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every method, task and seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the run to this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the identified skill policy of a bundle without fine-tuning.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Feature co-adaptation and reward statistics of a bundle.
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-aggregate the per-run CSVs of a run directory and redraw its charts.
    Report { run_dir: PathBuf },
}

fn load_config(path: &Path, out: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(o) = out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn pick_task(cfg: &ExperimentConfig, task: Option<String>) -> Result<Task> {
    let id = task.unwrap_or_else(|| cfg.tasks[0].clone());
    Task::named(&cfg.env_spec()?, &id, cfg.run.train.gamma)
}

/// Shared setup of the bundle-inspecting commands.
fn bundle_context(
    cfg: &ExperimentConfig,
    bundle: &Path,
    task: Option<String>,
    seed: u64,
) -> Result<(
    PretrainBundle,
    Task,
    RunConfig,
    u2o_core::env::TransitionDataset,
)> {
    let bundle = load_bundle(bundle)?;
    let task = pick_task(cfg, task)?;
    let run = RunConfig {
        task: task.task_id.clone(),
        seed,
        ..cfg.run.clone()
    };
    let (ds, _) = materialize_dataset(cfg)?;
    Ok((bundle, task, run, ds))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData {
            env,
            size,
            behavior,
            seed,
            file,
        } => {
            let behavior = match behavior {
                BehaviorArg::UniformRandom => Behavior::UniformRandom,
                BehaviorArg::EpsilonRandomWalk => Behavior::EpsilonRandomWalk,
            };
            let ds = generate_dataset_file(&env, size, behavior, seed, &file)?;
            eprintln!(
                "wrote {} transitions in {} episodes to {}",
                ds.len(),
                ds.num_episodes(),
                file.display()
            );
        }
        Cmd::Pretrain { config, seed } => {
            let cfg = load_config(&config, &cli.out)?;
            let seed = pick_seed(&cfg, seed);
            let (ds, _) = materialize_dataset(&cfg)?;
            let (bundle, log) = pretrain_skills(&ds, &cfg.pretrain, seed)?;
            let dir = cfg.output.join(format!("bundle_seed{seed}"));
            save_bundle(&dir, &bundle)?;
            fs::write(dir.join("pretrain_log.csv"), pretrain_log_csv(&log))?;
            println!("{}", dir.display());
        }
        Cmd::Bridge {
            config,
            bundle,
            task,
            seed,
        } => {
            let cfg = load_config(&config, &cli.out)?;
            let seed = pick_seed(&cfg, seed);
            let (bundle, task, run, ds) = bundle_context(&cfg, &bundle, task, seed)?;
            let rd = reward_dataset_for(&cfg, &ds, &task, Some(&bundle), seed)?;
            let skill = identify_for_task(&run, &ds.spec, &task, &bundle, Some(&rd))?;
            print_json(&serde_json::to_value(&skill)?);
        }
        Cmd::Run { config, seed } => {
            let mut cfg = load_config(&config, &cli.out)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let outcome = run_experiment(&cfg)?;
            for f in &outcome.report.failed {
                eprintln!(
                    "seed {} {:?} {:?} failed: {}",
                    f.seed,
                    f.method.map(|m| m.as_str()),
                    f.task,
                    f.error
                );
            }
            eprintln!("pretraining runs executed: {}", outcome.pretrain_runs);
            println!("{}", outcome.run_dir.display());
            return Ok(outcome.report.failed.is_empty());
        }
        Cmd::Eval {
            config,
            bundle,
            task,
            seed,
        } => {
            let cfg = load_config(&config, &cli.out)?;
            let seed = pick_seed(&cfg, seed);
            let (bundle, task, run, ds) = bundle_context(&cfg, &bundle, task, seed)?;
            let rd = reward_dataset_for(&cfg, &ds, &task, Some(&bundle), seed)?;
            let skill = identify_for_task(&run, &ds.spec, &task, &bundle, Some(&rd))?;
            let r = evaluate_policy(
                &ds.spec,
                &task,
                &bundle.skills.policy,
                Some(skill.z_star.as_slice()),
                run.eval_episodes,
                &mut derive_rng(seed, &["eval", "cli"]),
            )?;
            print_json(
                &json!({ "task": task.task_id, "seed": seed, "skill": skill, "mean_return": r.mean_return, "success_rate": r.success_rate }),
            );
        }
        Cmd::Diag {
            config,
            bundle,
            task,
            seed,
        } => {
            let cfg = load_config(&config, &cli.out)?;
            let seed = pick_seed(&cfg, seed);
            let (bundle, task, run, ds) = bundle_context(&cfg, &bundle, task, seed)?;
            let rd = reward_dataset_for(&cfg, &ds, &task, Some(&bundle), seed)?;
            let skill = identify_for_task(&run, &ds.spec, &task, &bundle, Some(&rd))?;
            let pairs = sample_consecutive_pairs(&ds, 1024, &mut derive_rng(seed, &["probe"]))?;
            let dot =
                feature_dot_product(&bundle.skills.critic, &pairs, Some(skill.z_star.as_slice()))?;
            let normalizer = if cfg.run.reward_matching {
                NormalizerState::new(bundle.stats, true)?
            } else {
                NormalizerState::disabled()
            };
            let probe = reward_stats_probe(&rd.rewards(), &normalizer)?;
            print_json(&json!({
                "task": task.task_id,
                "seed": seed,
                "feature_dot": dot,
                "intrinsic_mean": bundle.stats.mean,
                "intrinsic_std": bundle.stats.std(),
                "reward": probe,
            }));
        }
        Cmd::Report { run_dir } => {
            let report = report_from_dir(&run_dir)?;
            fs::write(
                run_dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            for f in emit_charts(&report, &run_dir.join("charts"))? {
                println!("{}", f.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
