//! Command-line frontend: `meta-train`, `adapt`, `sweep`, `visualize`,
//! `list-tasks`.
//!
//! Configuration comes from a JSON file mirroring [`MetaConfig`]; unknown
//! keys are errors. `--set key=value` overrides individual entries
//! (dotted paths reach into nested objects). Exit codes: 0 success,
//! 1 runtime error, 2 usage or configuration error.

use crate::envs::{self, canonical_map, task_family};
use crate::error::{Error, Result};
use crate::harness::{self, render, rollout, write_adaptation_curve, ExperimentSpec, TrainLogWriter};
use crate::meta::{adapt_and_eval, meta_train, MetaConfig, TrainLogRow};
use crate::policy::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamValues, CHECKPOINT_VERSION};
use crate::rng::tag;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

const CONFIG_KEY_HELP: &str = "\
Config keys (JSON file and --set overrides) with defaults:
  n_options         4       option count N
  m_env_samples     64      tasks sampled per outer update M
  l_adapt_steps     2       differentiable inner updates L
  k_episodes        10      episodes per update k
  alpha_in          10      inner (adaptation) SGD learning rate
  alpha_out         0.01    outer Adam learning rate
  adapt_lr          null    test-time adaptation rate (null = alpha_in)
  gamma             0.95    return discount
  lambda_gae        0.98    GAE lambda
  lambda_dice       0       loaded-DiCE decay
  epochs            2000    meta-training epochs
  mode              \"famp\"  famp | multi_task | learn_high_level |
                            learn_all | no_hierarchy | {\"fixed_term\": c} |
                            single_task  (--set accepts fixed_term:c)
  termination       \"learned\"  learned | {\"fixed\": c} (--set accepts fixed:c)
  seed              0       master seed; expands into all substreams
  family_seed       0       train/test split seed
  checkpoint_every  50      checkpoint cadence in epochs
  single_task_lr    0.3     Adam rate for the single-task baseline
  log_wallclock     false   record real seconds in train_log.csv
";

#[derive(Parser)]
#[command(
    name = "famp",
    about = "Meta-learning reusable options on the Taxi task family",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Worker threads (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (falls back to $FAMP_OUT_DIR, then the CWD).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the meta-training loop and write the log and checkpoints.
    #[command(after_help = CONFIG_KEY_HELP)]
    MetaTrain {
        /// JSON configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override one config key: --set key=value (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonRun,
    },
    /// Adapt a checkpoint to one task, logging the evaluation curve.
    #[command(after_help = CONFIG_KEY_HELP)]
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task id in the family (see list-tasks).
        #[arg(long = "task-id")]
        task_id: u32,
        /// Adaptation updates to perform.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Evaluation seed (default: the checkpoint's seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[command(flatten)]
        common: CommonRun,
    },
    /// Run a sweep specification (seeds x axes) with manifest-based resume.
    #[command(after_help = CONFIG_KEY_HELP)]
    Sweep {
        /// JSON experiment specification.
        #[arg(long)]
        spec: PathBuf,
        /// Print the cell matrix without executing.
        #[arg(long = "dry-run")]
        dry_run: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render termination maps and an option-usage map from a checkpoint.
    #[command(after_help = CONFIG_KEY_HELP)]
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "task-id")]
        task_id: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonRun,
    },
    /// Print the task family as TSV with split labels.
    #[command(after_help = CONFIG_KEY_HELP)]
    ListTasks {
        #[arg(long = "family-seed", default_value_t = 0)]
        family_seed: u64,
        /// Also write the family (map, tasks, split) as JSON.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("famp: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MetaTrain { config, sets, seed, common } => {
            init_jobs(common.jobs)?;
            let mut cfg = load_config(&config, &sets)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_meta_train(&cfg, &out_dir(common.out))
        }
        Command::Adapt { checkpoint, task_id, steps, seed, sets, common } => {
            init_jobs(common.jobs)?;
            cmd_adapt(&checkpoint, task_id, steps, seed, &sets, &out_dir(common.out))
        }
        Command::Sweep { spec, dry_run, jobs } => {
            init_jobs(jobs)?;
            cmd_sweep(&spec, dry_run)
        }
        Command::Visualize { checkpoint, task_id, seed, common } => {
            cmd_visualize(&checkpoint, task_id, seed, &out_dir(common.out))
        }
        Command::ListTasks { family_seed, export } => cmd_list_tasks(family_seed, export.as_deref()),
    }
}

fn init_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    Ok(())
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("FAMP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parse a `--set` value: JSON first, then the `fixed_term:c` / `fixed:c`
/// shorthands, then a bare string.
fn parse_set_value(raw: &str) -> serde_json::Value {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw) {
        return v;
    }
    if let Some((name, num)) = raw.split_once(':') {
        if let Ok(n) = num.parse::<u64>() {
            return serde_json::json!({ name: n });
        }
    }
    serde_json::Value::String(raw.to_string())
}

/// Apply `key=value` overrides onto a JSON object, erroring on unknown keys.
fn apply_sets(json: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set '{set}' is not of the form key=value")))?;
        let mut cursor = &mut *json;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let prefix = parts[..i].join(".");
            let obj = match cursor.as_object_mut() {
                Some(o) => o,
                None => {
                    return Err(Error::Config(format!("--set {key}: '{prefix}' is not an object")))
                }
            };
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), parse_set_value(raw));
                break;
            }
            cursor = obj.get_mut(*part).unwrap();
        }
    }
    Ok(())
}

fn load_config(path: &Path, sets: &[String]) -> Result<MetaConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut json: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // Surface unknown keys in the file itself before applying overrides.
    let _probe: MetaConfig = serde_json::from_value(json.clone())
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    apply_sets(&mut json, sets)?;
    let cfg: MetaConfig =
        serde_json::from_value(json).map_err(|e| Error::Config(format!("--set: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_header(cfg: &MetaConfig, s: usize) -> CheckpointHeader {
    CheckpointHeader {
        version: CHECKPOINT_VERSION,
        s: s as u32,
        n: cfg.effective_n() as u32,
        a: envs::N_ACTIONS as u32,
        mode: cfg.mode.name(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serializes"),
    }
}

fn cmd_meta_train(cfg: &MetaConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let family = task_family(&canonical_map(), cfg.family_seed);
    let header = checkpoint_header(cfg, family.map.encoding_dim());
    let every = cfg.checkpoint_every.max(1);
    let out_owned = out.to_path_buf();
    let header_clone = header.clone();
    let mut log_writer = TrainLogWriter::create(&out.join("train_log.csv"))?;
    let mut observer = move |row: &TrainLogRow, p: &ParamValues| -> Result<()> {
        log_writer.append(row)?;
        if (row.epoch + 1).is_multiple_of(every) {
            let name = format!("checkpoint_{:05}.bin", row.epoch + 1);
            save_checkpoint(&out_owned.join(name), p, &header_clone)?;
        }
        Ok(())
    };
    let (params, log) = meta_train(cfg, &family, Some(&mut observer))?;
    save_checkpoint(&out.join("checkpoint_final.bin"), &params, &header)?;
    println!(
        "meta-train: {} epochs ({}), log and checkpoints under {}",
        log.len(),
        cfg.mode.name(),
        out.display()
    );
    Ok(())
}

fn config_from_header(header: &CheckpointHeader) -> Result<MetaConfig> {
    if header.config.is_null() {
        return Ok(MetaConfig::default());
    }
    serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

fn task_by_id(family: &envs::TaskFamily, task_id: u32) -> Result<envs::TaxiTask> {
    family.task(task_id).copied().ok_or_else(|| {
        Error::Config(format!(
            "task id {task_id} out of range; valid ids are 0..{}",
            family.tasks.len() - 1
        ))
    })
}

fn cmd_adapt(
    checkpoint: &Path,
    task_id: u32,
    steps: usize,
    seed: Option<u64>,
    sets: &[String],
    out: &Path,
) -> Result<()> {
    let (params, header) = load_checkpoint(checkpoint)?;
    let mut json = serde_json::to_value(config_from_header(&header)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    apply_sets(&mut json, sets)?;
    let cfg: MetaConfig =
        serde_json::from_value(json).map_err(|e| Error::Config(format!("--set: {e}")))?;
    cfg.validate()?;
    let family = task_family(&canonical_map(), cfg.family_seed);
    let task = task_by_id(&family, task_id)?;
    let eval_seed = seed.unwrap_or(cfg.seed);
    let curve = adapt_and_eval(&family.map, &task, &params, steps, &cfg, eval_seed)?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let path = out.join(format!("adapt_task{task_id:02}.csv"));
    write_adaptation_curve(&path, &curve)?;
    println!("adapt: task {task_id}, {} points, wrote {}", curve.returns.len(), path.display());
    Ok(())
}

fn cmd_sweep(spec_path: &Path, dry_run: bool) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    if spec.out_dir.is_relative() {
        if let Some(root) = std::env::var_os("FAMP_OUT_DIR") {
            spec.out_dir = PathBuf::from(root).join(&spec.out_dir);
        }
    }
    spec.validate()?;
    if dry_run {
        println!("point\tseed");
        for (label, _) in spec.sweep_points() {
            for &seed in &spec.seeds {
                println!("{label}\t{seed}");
            }
        }
        return Ok(());
    }
    let manifest = harness::run_experiment(&spec)?;
    let done = manifest.cells.iter().filter(|c| c.status == "done").count();
    let failed = manifest.cells.len() - done;
    println!(
        "sweep: {done} cells done, {failed} failed, manifest at {}",
        spec.out_dir.join("manifest.json").display()
    );
    if failed > 0 {
        return Err(Error::Config(format!("{failed} sweep cells failed; see manifest")));
    }
    Ok(())
}

fn cmd_visualize(checkpoint: &Path, task_id: u32, seed: Option<u64>, out: &Path) -> Result<()> {
    let (params, header) = load_checkpoint(checkpoint)?;
    let cfg = config_from_header(&header)?;
    let family = task_family(&canonical_map(), cfg.family_seed);
    let task = task_by_id(&family, task_id)?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut written = 0usize;
    for (name, svg) in render::render_term_maps(&family.map, &params)? {
        std::fs::write(out.join(&name), svg).map_err(Error::io(out))?;
        written += 1;
    }
    let master = seed.unwrap_or(cfg.seed);
    let trajs = rollout(
        &family.map,
        &task,
        &params,
        cfg.k_episodes,
        cfg.termination_mode(),
        master,
        &[tag::VISUALIZE, task_id as u64],
    )?;
    let svg = render::render_option_map(&family.map, &params, &task, &trajs, cfg.termination_mode())?;
    let usage = out.join(format!("usage_task{task_id:02}.svg"));
    std::fs::write(&usage, svg).map_err(Error::io(out))?;
    written += 1;
    println!("visualize: wrote {written} SVG files under {}", out.display());
    Ok(())
}

fn cmd_list_tasks(family_seed: u64, export: Option<&Path>) -> Result<()> {
    let family = task_family(&canonical_map(), family_seed);
    println!("id\tstart\tpassenger\tgoal\tsplit\toptimal_return");
    for task in &family.tasks {
        let split = if family.test_ids.contains(&task.id) { "test" } else { "train" };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            task.id,
            envs::SPECIAL_NAMES[task.start as usize],
            envs::SPECIAL_NAMES[task.passenger as usize],
            envs::SPECIAL_NAMES[task.goal as usize],
            split,
            envs::optimal_return(&family.map, task)
        );
    }
    if let Some(path) = export {
        std::fs::write(path, family.to_json()).map_err(Error::io(path))?;
    }
    Ok(())
}
