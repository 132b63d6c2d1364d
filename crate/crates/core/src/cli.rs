//! Command-line runner.
//!
//! Every command writes its manifest before computing anything. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error, 3 unreadable config, 4 missing file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::config::{RunConfig, PRESETS};
use crate::env::task::DEFAULT_GOAL_RADIUS;
use crate::env::{EnvironmentClass, GoalTask};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_return, finetune, FinetuneConfig, InitSource};
use crate::io::{emit_heatmap, Cell, CsvTable, RunManifest, HEATMAP_SIZE};
use crate::policy::PolicyParams;
use crate::pretrain::{evaluate_entropy, pretrain_from, TrainerConfig};
use crate::seeding::{self, tag};
use crate::theory::{run_suite, tally, BoundStatus, SuiteShape};
use crate::trajectory::Trajectory;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "riskmaxent", version, about = "Percentile-sensitive maximum-entropy pre-training")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "RISKMAXENT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train a policy on an environment class.
    Pretrain {
        /// Run file, or a preset name (gridslope, multigrid).
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Environment-specific evaluation batches used for the final table.
        #[arg(long, default_value_t = 10)]
        eval_batches: usize,
    },
    /// Fine-tune on sparse goal tasks.
    Finetune {
        #[arg(long)]
        config: String,
        /// `random` or a checkpoint path.
        #[arg(long)]
        init: String,
        /// Task file; random goals are drawn when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        goals: usize,
        /// Environment for random goals.
        #[arg(long, default_value = "GWN")]
        env: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
    },
    /// Per-environment entropy of a checkpoint.
    Eval {
        #[arg(long)]
        config: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the class-level bounds on random tabular instances.
    Theory {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "theory.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        policies: usize,
    },
    /// Pre-train over a grid of alpha values and tabulate per-environment entropy.
    SweepAlpha {
        #[arg(long)]
        config: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.5, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 10)]
        eval_batches: usize,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingFile(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

/// Parse `argv` (program name first), execute, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { 0 } else { EXIT_USAGE };
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
        .and_then(|pool| pool.install(|| execute(cli.command, command)));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(source: &str) -> Result<RunConfig> {
    let path = Path::new(source);
    if !path.exists() && PRESETS.contains(&source) {
        RunConfig::preset(source)
    } else {
        RunConfig::load(path)
    }
}

fn start(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    manifest.write(&out_dir.join("manifest.json"))
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Pretrain {
            config,
            out,
            seed,
            epochs,
            eval_batches,
        } => {
            let mut run = load_config(&config)?;
            if let Some(s) = seed {
                run.trainer.seed = s;
            }
            if let Some(e) = epochs {
                run.trainer.epochs = e;
            }
            run.trainer.validate()?;
            let manifest = RunManifest::new(argv, run.hash(), run.trainer.seed, Some(run.to_toml_string()));
            start(&out, &manifest)?;
            cmd_pretrain(&run, &out, eval_batches, manifest)
        }
        Command::Finetune {
            config,
            init,
            tasks,
            goals,
            env,
            out,
            seed,
            iterations,
            eval_episodes,
        } => {
            let mut run = load_config(&config)?;
            if let Some(s) = seed {
                run.finetune.seed = s;
            }
            if let Some(i) = iterations {
                run.finetune.iterations = i;
            }
            run.finetune.validate()?;
            let init = if init == "random" {
                InitSource::Random
            } else {
                InitSource::Checkpoint(PathBuf::from(init))
            };
            if let InitSource::Checkpoint(p) = &init {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            let tasks = match tasks {
                Some(path) => load_tasks(&path, &run.class)?,
                None => random_tasks(&run.class, &env, goals, run.finetune.seed)?,
            };
            let manifest = RunManifest::new(argv, run.hash(), run.finetune.seed, Some(run.to_toml_string()));
            start(&out, &manifest)?;
            cmd_finetune(&run, &init, &tasks, &out, eval_episodes, manifest)
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            batches,
            seed,
        } => {
            let run = load_config(&config)?;
            let params = PolicyParams::load(&checkpoint)?;
            let mut manifest = RunManifest::new(argv, run.hash(), seed, Some(run.to_toml_string()));
            manifest.outputs.push(out.clone());
            manifest.write(&sibling_manifest(&out))?;
            let mut table = CsvTable::new(&["config", "entropy"]);
            for (i, c) in run.class.configs.iter().enumerate() {
                let h = evaluate_entropy(&params, &run.class, i, &run.trainer, batches, seed)?;
                table.push(&[Cell::Text(&c.name), Cell::Float(h)]);
            }
            table.write(&out)
        }
        Command::Theory {
            instances,
            seed,
            out,
            policies,
        } => {
            let shape = SuiteShape {
                policies,
                ..SuiteShape::default()
            };
            let mut manifest = RunManifest::new(argv, String::new(), seed, None);
            manifest.outputs.push(out.clone());
            manifest.write(&sibling_manifest(&out))?;
            let rows = run_suite(instances, seed, &shape)?;
            let mut table = CsvTable::new(&["instance", "theorem", "policy", "exact", "bound", "status"]);
            for r in &rows {
                let status = match r.status {
                    BoundStatus::Satisfied => "satisfied",
                    BoundStatus::Violated => "violated",
                    BoundStatus::Excluded => "excluded",
                };
                table.push(&[
                    Cell::Int(r.instance as u64),
                    Cell::Int(r.theorem as u64),
                    Cell::Int(r.policy as u64),
                    Cell::Float(r.exact),
                    Cell::Float(r.bound),
                    Cell::Text(status),
                ]);
            }
            table.write(&out)?;
            for (t, (ok, bad, excluded)) in tally(&rows).iter().enumerate() {
                println!("theorem {}: {ok} satisfied, {bad} violated, {excluded} excluded", t + 1);
            }
            Ok(())
        }
        Command::SweepAlpha {
            config,
            alphas,
            seeds,
            out,
            epochs,
            eval_batches,
        } => {
            let mut run = load_config(&config)?;
            if let Some(e) = epochs {
                run.trainer.epochs = e;
            }
            for &a in &alphas {
                TrainerConfig {
                    alpha: a,
                    ..run.trainer.clone()
                }
                .validate()?;
            }
            let manifest = RunManifest::new(argv, run.hash(), run.trainer.seed, Some(run.to_toml_string()));
            start(&out, &manifest)?;
            cmd_sweep(&run, &alphas, &seeds, &out, eval_batches, manifest)
        }
    }
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn entropy_columns(class: &EnvironmentClass) -> Vec<String> {
    class.configs.iter().map(|c| format!("entropy_{}", c.name)).collect()
}

fn cmd_pretrain(run: &RunConfig, out: &Path, eval_batches: usize, mut manifest: RunManifest) -> Result<()> {
    let cfg = &run.trainer;
    let init = cfg.initial_params();
    init.save(&out.join("policy_init.bin"))?;

    let mut header = vec!["epoch".to_string(), "mean_entropy".into(), "cvar_entropy".into(), "var".into()];
    header.extend(entropy_columns(&run.class));
    header.extend(["kl".to_string(), "offpolicy_steps".into()]);
    let mut table = CsvTable::new(&header);
    let (params, _) = pretrain_from(cfg, &run.class, init, |r, _, _| {
        let mut cells = vec![
            Cell::Int(r.epoch as u64),
            Cell::Float(r.mean_entropy),
            Cell::Float(r.cvar_entropy),
            Cell::Float(r.var),
        ];
        cells.extend(r.per_config_entropy.iter().map(|&h| Cell::Float(h)));
        cells.extend([Cell::Float(r.kl), Cell::Int(r.offpolicy_steps as u64)]);
        table.push(&cells);
        Ok(())
    })?;
    table.write(&out.join("epochs.csv"))?;
    params.save(&out.join("policy.bin"))?;

    let maps = out.join("heatmaps");
    fs::create_dir_all(&maps)?;
    let mut eval = CsvTable::new(&["config", "entropy"]);
    for (i, env) in run.class.configs.iter().enumerate() {
        let trajs = (0..cfg.batch_size)
            .map(|j| {
                let mut rng = seeding::stream(cfg.seed, &[tag::EVALUATION, i as u64, u64::MAX, j as u64]);
                Trajectory::rollout(env, i, &params, cfg.horizon, true, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let path = maps.join(format!("{}.pgm", env.name));
        emit_heatmap(&trajs, env.half_side(), HEATMAP_SIZE, &path)?;
        manifest.outputs.push(path);
        if eval_batches > 0 {
            let h = evaluate_entropy(&params, &run.class, i, cfg, eval_batches, cfg.seed)?;
            eval.push(&[Cell::Text(&env.name), Cell::Float(h)]);
        }
    }
    if eval_batches > 0 {
        eval.write(&out.join("final_entropy.csv"))?;
        manifest.outputs.push(out.join("final_entropy.csv"));
    }
    for f in ["epochs.csv", "policy.bin", "policy_init.bin"] {
        manifest.outputs.push(out.join(f));
    }
    manifest.write(&out.join("manifest.json"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    task: Vec<TaskEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    env: String,
    goal: [f64; 2],
    #[serde(default = "default_radius")]
    radius: f64,
}

fn default_radius() -> f64 {
    DEFAULT_GOAL_RADIUS
}

fn env_index(class: &EnvironmentClass, name: &str) -> Result<usize> {
    class
        .position(name)
        .ok_or_else(|| Error::Config(format!("no environment named {name:?} in class {}", class.name)))
}

fn load_tasks(path: &Path, class: &EnvironmentClass) -> Result<Vec<GoalTask>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file: TaskFile = toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    file.task
        .into_iter()
        .map(|t| GoalTask::new(env_index(class, &t.env)?, t.goal, t.radius))
        .collect()
}

/// `count` goals drawn uniformly over the free space of `env`.
pub fn random_tasks(class: &EnvironmentClass, env: &str, count: usize, seed: u64) -> Result<Vec<GoalTask>> {
    let i = env_index(class, env)?;
    (0..count)
        .map(|g| {
            let mut rng = seeding::stream(seed, &[tag::TASKS, g as u64]);
            GoalTask::random(i, &class.configs[i], DEFAULT_GOAL_RADIUS, &mut rng)
        })
        .collect()
}

fn initial_policy(run: &RunConfig, init: &InitSource) -> Result<PolicyParams> {
    match init {
        InitSource::Random => Ok(PolicyParams::init(
            run.trainer.layout(),
            &mut seeding::stream(run.finetune.seed, &[tag::POLICY_INIT]),
        )),
        InitSource::Checkpoint(p) => PolicyParams::load(p),
    }
}

fn cmd_finetune(
    run: &RunConfig,
    init: &InitSource,
    tasks: &[GoalTask],
    out: &Path,
    eval_episodes: usize,
    mut manifest: RunManifest,
) -> Result<()> {
    let start = initial_policy(run, init)?;
    let label = match init {
        InitSource::Random => "random",
        InitSource::Checkpoint(_) => "checkpoint",
    };
    let cfg: &FinetuneConfig = &run.finetune;
    let mut task_table = CsvTable::new(&["task", "config", "goal_x", "goal_y", "radius"]);
    let mut summary = CsvTable::new(&["task", "init", "final_return", "auc", "eval_return"]);
    let curves = out.join("curves");
    fs::create_dir_all(&curves)?;
    for (i, task) in tasks.iter().enumerate() {
        let env = &run.class.configs[task.config];
        task_table.push(&[
            Cell::Int(i as u64),
            Cell::Text(&env.name),
            Cell::Float(task.goal[0]),
            Cell::Float(task.goal[1]),
            Cell::Float(task.radius),
        ]);
        let (params, curve) = finetune(task, env, start.clone(), cfg)?;
        let mut t = CsvTable::new(&["iteration", "return", "kl", "accepted"]);
        for (it, ((r, kl), acc)) in curve.returns.iter().zip(&curve.kl).zip(&curve.accepted).enumerate() {
            t.push(&[Cell::Int(it as u64), Cell::Float(*r), Cell::Float(*kl), Cell::Bool(*acc)]);
        }
        let path = curves.join(format!("task_{i:03}.csv"));
        t.write(&path)?;
        manifest.outputs.push(path);
        let eval = if eval_episodes > 0 {
            evaluate_return(&params, env, task, cfg.horizon, eval_episodes, cfg.seed)?
        } else {
            f64::NAN
        };
        summary.push(&[
            Cell::Int(i as u64),
            Cell::Text(label),
            Cell::Float(curve.final_return()),
            Cell::Float(curve.auc()),
            Cell::Float(eval),
        ]);
    }
    task_table.write(&out.join("tasks.csv"))?;
    summary.write(&out.join("summary.csv"))?;
    manifest.outputs.push(out.join("tasks.csv"));
    manifest.outputs.push(out.join("summary.csv"));
    manifest.write(&out.join("manifest.json"))
}

fn cmd_sweep(
    run: &RunConfig,
    alphas: &[f64],
    seeds: &[u64],
    out: &Path,
    eval_batches: usize,
    mut manifest: RunManifest,
) -> Result<()> {
    if eval_batches == 0 {
        return Err(Error::invalid("sweep-alpha needs at least one evaluation batch"));
    }
    let mut header = vec!["alpha".to_string(), "seed".into()];
    header.extend(entropy_columns(&run.class));
    let mut table = CsvTable::new(&header);
    for &alpha in alphas {
        for &seed in seeds {
            let cfg = TrainerConfig {
                alpha,
                seed,
                ..run.trainer.clone()
            };
            let (params, _) = pretrain_from(&cfg, &run.class, cfg.initial_params(), |_, _, _| Ok(()))?;
            let ckpt = out.join(format!("policy_alpha{alpha}_seed{seed}.bin"));
            params.save(&ckpt)?;
            manifest.outputs.push(ckpt);
            let mut cells = vec![Cell::Float(alpha), Cell::Int(seed)];
            for i in 0..run.class.len() {
                cells.push(Cell::Float(evaluate_entropy(&params, &run.class, i, &cfg, eval_batches, seed)?));
            }
            table.push(&cells);
        }
    }
    table.write(&out.join("sweep.csv"))?;
    manifest.outputs.push(out.join("sweep.csv"));
    manifest.write(&out.join("manifest.json"))
}
