//! Rollout collection, multi-seed experiment orchestration, bootstrap
//! confidence intervals and visualization artifacts.

pub mod render;

use crate::envs::{self, TaxiMap, TaxiTask};
use crate::error::{Error, Result};
use crate::iopg::Trajectory;
use crate::meta::{adapt_and_eval, meta_train, AdaptationCurve, MetaConfig, TrainLogRow};
use crate::policy::{sample_step, ParamValues, TerminationMode};
use crate::rng::{self, tag};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Sample `k` episodes with the hierarchical policy, each from its own RNG
/// substream, capped at the environment's step limit.
pub fn rollout(
    map: &TaxiMap,
    task: &TaxiTask,
    values: &ParamValues,
    k: usize,
    mode: TerminationMode,
    master: u64,
    path: &[u64],
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(k);
    for episode in 0..k {
        let mut ep_path = path.to_vec();
        ep_path.push(episode as u64);
        let mut r = rng::stream(master, &ep_path);
        let mut state = envs::reset(map, task);
        let mut exec = None;
        let mut traj = Trajectory {
            state_idx: vec![envs::encode_index(map, &state) as u32],
            actions: Vec::new(),
            rewards: Vec::new(),
            done_by_goal: false,
        };
        loop {
            let s_idx = envs::encode_index(map, &state);
            let (action, new_exec) = sample_step(values, exec, s_idx, state.t, mode, &mut r);
            exec = Some(new_exec);
            let outcome = envs::step(map, task, &state, action)?;
            traj.actions.push(action as u8);
            traj.rewards.push(outcome.reward);
            traj.state_idx.push(envs::encode_index(map, &outcome.next_state) as u32);
            state = outcome.next_state;
            if outcome.done {
                traj.done_by_goal = outcome.reached_goal;
                break;
            }
        }
        out.push(traj);
    }
    Ok(out)
}

/// Percentile bootstrap of the mean: `(mean, lower, upper)`.
pub fn bootstrap_ci(
    samples: &[f64],
    resamples: usize,
    level: f64,
    master: u64,
    path: &[u64],
) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("bootstrap_ci needs at least one sample"));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, mean, mean));
    }
    let mut r = rng::stream(master, path);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += samples[r.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| -> f64 {
        let idx = ((q * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
        means[idx]
    };
    Ok((mean, pick(alpha), pick(1.0 - alpha)))
}

/// Mean and 95% bootstrap interval per curve point, across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSummary {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub episodes_per_update: usize,
}

/// A sweep: base config, seeds, named override axes (cartesian product)
/// and an output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub config: MetaConfig,
    pub seeds: Vec<u64>,
    /// Config-key → list of values; the sweep is the cartesian product.
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<serde_json::Value>>,
    pub out_dir: PathBuf,
    /// Adaptation updates per test-task evaluation curve.
    #[serde(default = "default_eval_steps")]
    pub eval_adapt_steps: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn default_eval_steps() -> usize {
    10
}

fn default_resamples() -> usize {
    10000
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        for (key, values) in &self.axes {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep axis '{key}' has no values")));
            }
        }
        self.config.validate()
    }

    /// All sweep points as (label, key→value) pairs, base config first when
    /// there are no axes.
    pub fn sweep_points(&self) -> Vec<(String, BTreeMap<String, serde_json::Value>)> {
        let mut points: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for point in &points {
                for v in values {
                    let mut p = point.clone();
                    p.insert(key.clone(), v.clone());
                    next.push(p);
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|p| {
                let label = if p.is_empty() {
                    "base".to_string()
                } else {
                    p.iter()
                        .map(|(k, v)| format!("{k}-{}", value_slug(v)))
                        .collect::<Vec<_>>()
                        .join("_")
                };
                (label, p)
            })
            .collect()
    }

    /// Base config with one sweep point's overrides and a seed applied.
    pub fn cell_config(&self, point: &BTreeMap<String, serde_json::Value>, seed: u64) -> Result<MetaConfig> {
        let mut json = serde_json::to_value(&self.config)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        let obj = json.as_object_mut().expect("config serializes to an object");
        for (key, value) in point {
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown sweep axis key '{key}'")));
            }
            obj.insert(key.clone(), value.clone());
        }
        obj.insert("seed".into(), serde_json::json!(seed));
        let mut cfg: MetaConfig = serde_json::from_value(json)
            .map_err(|e| Error::Config(format!("sweep override: {e}")))?;
        // option-count sweeps interact with the no-hierarchy constraint
        if cfg.mode == crate::meta::AblationMode::NoHierarchy {
            cfg.n_options = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn value_slug(v: &serde_json::Value) -> String {
    let s = v.to_string();
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// SHA-256 of a config's canonical JSON, hex-encoded.
pub fn config_hash(cfg: &MetaConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Per-cell record in the experiment manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub point: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub cells: Vec<ManifestCell>,
}

impl Manifest {
    fn load(path: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(Error::io(path))
    }

    fn is_done(&self, point: &str, seed: u64) -> bool {
        self.cells
            .iter()
            .any(|c| c.point == point && c.seed == seed && c.status == "done")
    }
}

fn format_row(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,mode,mean_post_adapt_return,mean_pre_adapt_return,wallclock_s,grad_norm_sub,grad_norm_term";

/// One CSV line for a training-log row (no trailing newline).
pub fn train_log_line(row: &TrainLogRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.epoch,
        row.mode,
        row.mean_post_adapt_return,
        row.mean_pre_adapt_return,
        row.wallclock_s,
        row.grad_norm_sub,
        row.grad_norm_term
    )
}

/// Write a training log as CSV in one shot.
pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&train_log_line(row));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

/// Append-as-you-go training log writer; produces bytes identical to
/// [`write_train_log`].
pub struct TrainLogWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl TrainLogWriter {
    pub fn create(path: &Path) -> Result<TrainLogWriter> {
        use std::io::Write as _;
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(Error::io(path))?,
        );
        writeln!(file, "{TRAIN_LOG_HEADER}").map_err(Error::io(path))?;
        Ok(TrainLogWriter { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, row: &TrainLogRow) -> Result<()> {
        use std::io::Write as _;
        writeln!(self.file, "{}", train_log_line(row)).map_err(Error::io(&self.path))?;
        self.file.flush().map_err(Error::io(&self.path))
    }
}

/// Write an adaptation curve as CSV with both update- and episode-indexed
/// columns.
pub fn write_adaptation_curve(path: &Path, curve: &AdaptationCurve) -> Result<()> {
    let mut out = String::from("update,episodes,mean_return\n");
    for (i, v) in curve.returns.iter().enumerate() {
        writeln!(out, "{},{},{}", i, i * curve.episodes_per_update, v).unwrap();
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

/// Run one experiment cell: meta-train, adaptation curves on every test
/// task, rendered maps. Returns the files written (relative to `dir`).
fn run_cell(dir: &Path, cfg: &MetaConfig, eval_steps: usize) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let family = envs::task_family(&envs::canonical_map(), cfg.family_seed);
    let mut files = Vec::new();

    let ckpt_header = |cfg: &MetaConfig| crate::policy::CheckpointHeader {
        version: crate::policy::CHECKPOINT_VERSION,
        s: family.map.encoding_dim() as u32,
        n: cfg.effective_n() as u32,
        a: crate::envs::N_ACTIONS as u32,
        mode: cfg.mode.name(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };

    let mut ckpt_files: Vec<String> = Vec::new();
    let (params, _log) = {
        let header = ckpt_header(cfg);
        let every = cfg.checkpoint_every.max(1);
        let dir_owned = dir.to_path_buf();
        let mut log_writer = TrainLogWriter::create(&dir.join("train_log.csv"))?;
        let mut observer = move |row: &TrainLogRow, p: &ParamValues| -> Result<()> {
            log_writer.append(row)?;
            if (row.epoch + 1).is_multiple_of(every) {
                let name = format!("checkpoint_{:05}.bin", row.epoch + 1);
                crate::policy::save_checkpoint(&dir_owned.join(&name), p, &header)?;
            }
            Ok(())
        };
        meta_train(cfg, &family, Some(&mut observer))?
    };
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("checkpoint_") {
            ckpt_files.push(name);
        }
    }
    ckpt_files.sort();
    files.extend(ckpt_files);

    let final_ckpt = dir.join("checkpoint_final.bin");
    crate::policy::save_checkpoint(&final_ckpt, &params, &ckpt_header(cfg))?;
    files.push("checkpoint_final.bin".into());

    files.push("train_log.csv".into());

    for task in family.test_tasks() {
        let curve = adapt_and_eval(&family.map, &task, &params, eval_steps, cfg, cfg.seed)?;
        let name = format!("adapt_task{:02}.csv", task.id);
        write_adaptation_curve(&dir.join(&name), &curve)?;
        files.push(name);
    }

    let maps_dir = dir.join("maps");
    std::fs::create_dir_all(&maps_dir).map_err(Error::io(&maps_dir))?;
    for (name, svg) in render::render_term_maps(&family.map, &params)? {
        std::fs::write(maps_dir.join(&name), svg).map_err(Error::io(&maps_dir))?;
        files.push(format!("maps/{name}"));
    }
    if let Some(task) = family.test_tasks().first() {
        let trajs = rollout(
            &family.map,
            task,
            &params,
            cfg.k_episodes,
            cfg.termination_mode(),
            cfg.seed,
            &[tag::VISUALIZE, task.id as u64],
        )?;
        let svg = render::render_option_map(&family.map, &params, task, &trajs, cfg.termination_mode())?;
        let name = format!("usage_task{:02}.svg", task.id);
        std::fs::write(maps_dir.join(&name), svg).map_err(Error::io(&maps_dir))?;
        files.push(format!("maps/{name}"));
    }
    Ok(files)
}

/// Aggregated per-point summary across seeds, written as CSV.
fn write_summary(
    dir: &Path,
    spec: &ExperimentSpec,
    per_seed_curves: &[Vec<AdaptationCurve>],
) -> Result<String> {
    // Mean over test tasks within each seed, then bootstrap over seeds.
    let n_points = per_seed_curves
        .iter()
        .flat_map(|curves| curves.iter().map(|c| c.returns.len()))
        .min()
        .unwrap_or(0);
    let mut out = String::from("update,episodes,mean,lower,upper\n");
    let eps = spec.config.k_episodes;
    for x in 0..n_points {
        let seed_means: Vec<f64> = per_seed_curves
            .iter()
            .map(|curves| {
                curves.iter().map(|c| c.returns[x]).sum::<f64>() / curves.len() as f64
            })
            .collect();
        let (mean, lo, hi) = bootstrap_ci(
            &seed_means,
            spec.bootstrap_resamples,
            0.95,
            spec.config.seed,
            &[tag::BOOTSTRAP, x as u64],
        )?;
        writeln!(out, "{},{},{}", x, x * eps, format_row(&[mean, lo, hi])).unwrap();
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, out).map_err(Error::io(&path))?;
    Ok("summary.csv".into())
}

/// Run every (sweep point × seed) cell, resuming past completed cells via
/// the manifest. A failed cell is recorded and skipped; the run continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out_dir).map_err(Error::io(&spec.out_dir))?;
    let manifest_path = spec.out_dir.join("manifest.json");
    let mut manifest = Manifest::load(&manifest_path).unwrap_or_default();
    manifest.version = 1;
    manifest.seeds = spec.seeds.clone();

    for (label, point) in spec.sweep_points() {
        let mut curves_by_seed: Vec<Vec<AdaptationCurve>> = Vec::new();
        for &seed in &spec.seeds {
            if manifest.is_done(&label, seed) {
                // Already computed; reload curves for aggregation.
                if let Ok(curves) = load_cell_curves(&spec.out_dir.join(&label).join(seed.to_string())) {
                    curves_by_seed.push(curves);
                }
                continue;
            }
            let cfg = spec.cell_config(&point, seed)?;
            let dir = spec.out_dir.join(&label).join(seed.to_string());
            let cell = match run_cell(&dir, &cfg, spec.eval_adapt_steps) {
                Ok(files) => {
                    if let Ok(curves) = load_cell_curves(&dir) {
                        curves_by_seed.push(curves);
                    }
                    ManifestCell {
                        point: label.clone(),
                        seed,
                        config_hash: config_hash(&cfg),
                        status: "done".into(),
                        files,
                    }
                }
                Err(e) => ManifestCell {
                    point: label.clone(),
                    seed,
                    config_hash: config_hash(&cfg),
                    status: format!("failed: {e}"),
                    files: Vec::new(),
                },
            };
            manifest.cells.retain(|c| !(c.point == label && c.seed == seed));
            manifest.cells.push(cell);
            manifest.save(&manifest_path)?;
        }
        if !curves_by_seed.is_empty() {
            let point_dir = spec.out_dir.join(&label);
            std::fs::create_dir_all(&point_dir).map_err(Error::io(&point_dir))?;
            write_summary(&point_dir, spec, &curves_by_seed)?;
        }
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn load_cell_curves(dir: &Path) -> Result<Vec<AdaptationCurve>> {
    let mut curves = Vec::new();
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.starts_with("adapt_task") && n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in names {
        let text = std::fs::read_to_string(dir.join(&name)).map_err(Error::io(dir))?;
        let mut returns = Vec::new();
        let mut episodes_per_update = 0usize;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                continue;
            }
            if i == 2 {
                episodes_per_update = cols[1].parse::<usize>().unwrap_or(0);
            }
            returns.push(cols[2].parse::<f64>().map_err(|e| Error::Config(format!("{name}: {e}")))?);
        }
        curves.push(AdaptationCurve { returns, episodes_per_update });
    }
    if curves.is_empty() {
        return Err(Error::Config(format!("no adaptation curves under {}", dir.display())));
    }
    Ok(curves)
}
