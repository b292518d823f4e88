use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mergeforge::checkpoint::{load_checkpoint, save_checkpoint, EXTENSION};
use mergeforge::expert::{block_distance, merge_experts, ActionExpert};
use mergeforge::mask::{apply_mask, build_mask, mask_stats, TaskMask};
use mergeforge::merge::{merge, MergeRecipe, MergedVector};
use mergeforge::router::{RouterBundle, RoutingDecision};
use mergeforge::task_vector::{apply, extract, fingerprint, TaskVector, KIND_KEY, TASK_ID_KEY};
use mergeforge::toy::{route_observation, run_pipeline, write_block_distance, write_mask_stats, ToyConfig};
use mergeforge::{Error, NamedTensorMap, Result};

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Merge task vectors, build task masks and route between merged experts")]
struct Cli {
    /// Seed for every random draw; falls back to MERGEFORGE_SEED.
    #[arg(long, global = true, env = "MERGEFORGE_SEED")]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Progress messages on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Task vector of a finetuned checkpoint relative to its base.
    Extract {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        /// Defaults to the finetuned file stem.
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge task vectors (or finetuned checkpoints) according to a recipe.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One consistency mask per task, written as `<task>.ntm`.
    Mask {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        recipe: PathBuf,
        /// Reuse a merged vector instead of merging again.
        #[arg(long)]
        merged: Option<PathBuf>,
        /// Overrides the recipe's lambda.
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Add a task vector or merged vector to the base, optionally through a mask.
    Apply {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        /// Requires a merged vector as the delta.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0, conflicts_with = "mask")]
        alpha: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Share blocks before `--head-start` across experts and keep the rest per task.
    MergeExperts {
        #[arg(long, num_args = 1.., required = true)]
        experts: Vec<PathBuf>,
        /// First per-task block (1-based); defaults to the last block.
        #[arg(long)]
        head_start: Option<usize>,
        /// Defaults to the file stems.
        #[arg(long, num_args = 1..)]
        task_ids: Option<Vec<String>>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-block pairwise distance between the input experts.
        #[arg(long)]
        distance_csv: Option<PathBuf>,
    },
    /// Score every masked variant on observations and pick a task.
    Route {
        #[arg(long)]
        bundle: PathBuf,
        /// One observation per row of its single tensor (or the tensor `obs`).
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Selfish and active ratios of a directory of masks.
    Analyze {
        masks: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Synthetic multi-task harness.
    Toy {
        #[command(subcommand)]
        command: ToyCommand,
    },
    /// Reference-task error as leading expert blocks are averaged.
    Progressive {
        /// Toy config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Train, merge, mask, route and evaluate; write CSVs and the bundle.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let log = |msg: &str| {
        if cli.verbose > 0 {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Extract { base, finetuned, task_id, out } => {
            let theta_0 = load_checkpoint(base)?;
            let id = task_id.clone().unwrap_or_else(|| stem(finetuned));
            let tau = extract(&load_checkpoint(finetuned)?, &theta_0, &id)?;
            save(&tau.to_checkpoint(), out)
        }
        Command::Merge { recipe, base, tasks, out } => {
            let theta_0 = load_checkpoint(base)?;
            let (recipe, vectors) = recipe_and_vectors(recipe, &theta_0, tasks)?;
            log(&format!("merging {} task vectors with {}", vectors.len(), recipe.method));
            save(&merge(&recipe, &vectors)?.to_checkpoint(), out)
        }
        Command::Mask { base, tasks, recipe, merged, lambda, out_dir } => {
            let theta_0 = load_checkpoint(base)?;
            let (recipe, vectors) = recipe_and_vectors(recipe, &theta_0, tasks)?;
            let lambda = lambda.unwrap_or(recipe.lambda);
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(Error::Recipe(format!("lambda {lambda} must be >= 0")));
            }
            let merged = match merged {
                Some(p) => MergedVector::from_checkpoint(load_checkpoint(p)?)?,
                None => merge(&recipe, &vectors)?,
            };
            fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
            for tv in &vectors {
                let mask = build_mask(tv, &merged, lambda)?;
                save(&mask.to_checkpoint(), &out_dir.join(file_name(&tv.task_id)?))?;
                log(&format!("mask {} written", tv.task_id));
            }
            Ok(())
        }
        Command::Apply { base, delta, mask, alpha, out } => {
            let theta_0 = load_checkpoint(base)?;
            let delta = load_checkpoint(delta)?;
            let theta = match mask {
                Some(m) => {
                    let merged = MergedVector::from_checkpoint(delta)?;
                    apply_mask(&theta_0, &merged, &TaskMask::from_checkpoint(load_checkpoint(m)?)?)?
                }
                None if delta.meta(KIND_KEY) == Some("merged_task_vector") => {
                    apply(&theta_0, &MergedVector::from_checkpoint(delta)?, *alpha)?
                }
                None => apply(&theta_0, &TaskVector::from_checkpoint(delta)?, *alpha)?,
            };
            save(&theta, out)
        }
        Command::MergeExperts { experts, head_start, task_ids, out_dir, distance_csv } => {
            let loaded: Vec<ActionExpert> = experts
                .iter()
                .map(|p| ActionExpert::from_map(&load_checkpoint(p)?))
                .collect::<Result<_>>()?;
            let ids = match task_ids {
                Some(ids) if ids.len() != experts.len() => {
                    return Err(Error::Config(format!(
                        "{} task ids for {} experts",
                        ids.len(),
                        experts.len()
                    )))
                }
                Some(ids) => ids.clone(),
                None => experts.iter().map(|p| stem(p)).collect(),
            };
            let l = head_start.unwrap_or(loaded[0].config.num_blocks);
            let (shared, heads) = merge_experts(&loaded, &ids, l)?;
            let heads_dir = out_dir.join("heads");
            fs::create_dir_all(&heads_dir).map_err(|e| io_error(&heads_dir, e))?;
            save(&shared.to_map(), &out_dir.join(format!("shared_expert.{EXTENSION}")))?;
            for h in &heads {
                save(&h.to_map(), &heads_dir.join(file_name(&h.task_id)?))?;
            }
            if let Some(path) = distance_csv {
                write_block_distance(path, &block_distance(&loaded)?)?;
            }
            Ok(())
        }
        Command::Route { bundle, obs, csv } => {
            let bundle = RouterBundle::load(bundle)?;
            let rows = observations(&load_checkpoint(obs)?)?;
            let decisions: Vec<RoutingDecision> =
                rows.iter().map(|o| route_observation(&bundle, o)).collect::<Result<_>>()?;
            let ids = bundle.task_ids();
            let mut out = csv::Writer::from_writer(std::io::stdout().lock());
            write_decisions(&mut out, ids, &decisions)?;
            out.flush().map_err(|e| io_error("stdout", e))?;
            if let Some(path) = csv {
                let mut w = csv::Writer::from_path(path)?;
                write_decisions(&mut w, ids, &decisions)?;
                w.flush().map_err(|e| io_error(path, e))?;
            }
            Ok(())
        }
        Command::Analyze { masks, csv } => {
            let loaded = load_masks(masks)?;
            log(&format!("analyzing {} masks", loaded.len()));
            let lambda = loaded[0].lambda;
            if loaded.iter().any(|m| m.lambda != lambda) {
                return Err(Error::Config("masks were built with different lambdas".into()));
            }
            write_mask_stats(csv, &mask_stats(&loaded)?, lambda, &[])
        }
        Command::Toy { command: ToyCommand::Run { config, out } } => {
            let cfg = toy_config(config.as_deref(), cli.seed)?;
            log(&format!("running toy pipeline with {} tasks, seed {}", cfg.num_tasks, cfg.seed));
            let report = run_pipeline(&cfg)?;
            report.write_csv(out)?;
            report.bundle.save(out.join("bundle"))?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "routing_accuracy,{}", report.routing_accuracy).map_err(|e| io_error("stdout", e))?;
            writeln!(stdout, "selfish_ratio,{}", report.mask_stats.selfish_ratio).map_err(|e| io_error("stdout", e))
        }
        Command::Progressive { config, csv } => {
            let cfg = toy_config(config.as_deref(), cli.seed)?;
            let report = run_pipeline(&cfg)?;
            if report.progressive.is_empty() {
                return Err(Error::Config("progressive merging needs at least two tasks".into()));
            }
            let reference = &report.tasks[cfg.eval.reference_task].task_id;
            let mut w = csv::Writer::from_path(csv)?;
            w.write_record(["merged_blocks", "reference_task", "mse"])?;
            for (k, v) in &report.progressive {
                w.write_record([k.to_string(), reference.clone(), v.to_string()])?;
            }
            w.flush().map_err(|e| io_error(csv, e))
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_name(task_id: &str) -> Result<String> {
    if task_id.is_empty() || task_id.starts_with('.') || task_id.contains(['/', '\\']) {
        return Err(Error::Config(format!("task id `{task_id}` is not usable as a file name")));
    }
    Ok(format!("{task_id}.{EXTENSION}"))
}

fn io_error(path: impl AsRef<Path>, source: std::io::Error) -> Error {
    Error::Io { path: path.as_ref().to_path_buf(), source }
}

fn save(map: &NamedTensorMap, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_checkpoint(map, path)
}

fn read_recipe(path: &Path) -> Result<MergeRecipe> {
    // Validated once the task list is known.
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)?)
}

/// Task vectors are used as stored; any other checkpoint is treated as a
/// finetuned model and diffed against the base under its file stem.
fn task_vector(theta_0: &NamedTensorMap, path: &Path) -> Result<TaskVector> {
    let map = load_checkpoint(path)?;
    if map.meta(KIND_KEY) == Some("task_vector") {
        let tv = TaskVector::from_checkpoint(map)?;
        let expected = fingerprint(theta_0);
        if tv.base_fingerprint != expected {
            return Err(Error::FingerprintMismatch { expected, found: tv.base_fingerprint });
        }
        let id = if tv.task_id.is_empty() { stem(path) } else { tv.task_id.clone() };
        Ok(TaskVector { task_id: id, ..tv })
    } else {
        let id = map.meta(TASK_ID_KEY).map_or_else(|| stem(path), str::to_string);
        extract(&map, theta_0, &id)
    }
}

/// Loads the tasks and orders them as the recipe lists them; an empty
/// recipe task list takes the command-line order.
fn recipe_and_vectors(
    recipe: &Path,
    theta_0: &NamedTensorMap,
    tasks: &[PathBuf],
) -> Result<(MergeRecipe, Vec<TaskVector>)> {
    let mut recipe = read_recipe(recipe)?;
    let mut vectors: Vec<TaskVector> = tasks.iter().map(|p| task_vector(theta_0, p)).collect::<Result<_>>()?;
    if recipe.task_ids.is_empty() {
        recipe.task_ids = vectors.iter().map(|t| t.task_id.clone()).collect();
    } else {
        if recipe.task_ids.len() != vectors.len() {
            return Err(Error::Recipe(format!(
                "recipe lists {} tasks, {} given",
                recipe.task_ids.len(),
                vectors.len()
            )));
        }
        let mut ordered = Vec::with_capacity(vectors.len());
        for id in &recipe.task_ids {
            let i = vectors
                .iter()
                .position(|t| &t.task_id == id)
                .ok_or_else(|| Error::Recipe(format!("task `{id}` not among the inputs")))?;
            ordered.push(vectors.swap_remove(i));
        }
        vectors = ordered;
    }
    recipe.validate()?;
    Ok((recipe, vectors))
}

fn load_masks(dir: &Path) -> Result<Vec<TaskMask>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .{EXTENSION} masks in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let mut m = TaskMask::from_checkpoint(load_checkpoint(p)?)?;
            if m.task_id.is_empty() {
                m.task_id = stem(p);
            }
            Ok(m)
        })
        .collect()
}

fn observations(map: &NamedTensorMap) -> Result<Vec<Vec<f64>>> {
    let t = match map.get("obs") {
        Some(t) => t,
        None if map.len() == 1 => map.iter().next().map(|(_, t)| t).expect("one tensor"),
        None => return Err(Error::MissingTensor("obs".into())),
    };
    let width = match t.shape() {
        [n] => *n,
        [_, n] => *n,
        other => return Err(Error::InvalidTensor(format!("observations must be 1-D or 2-D, got {other:?}"))),
    };
    if width == 0 || t.is_empty() {
        return Err(Error::InvalidTensor("empty observation tensor".into()));
    }
    Ok(t.data()
        .chunks(width)
        .map(|row| row.iter().map(|&v| f64::from(v)).collect())
        .collect())
}

fn write_decisions<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    ids: &[String],
    decisions: &[RoutingDecision],
) -> Result<()> {
    let mut header = vec!["observation".to_string(), "selected_task".into()];
    for prefix in ["r_t", "r_a", "score", "p"] {
        header.extend(ids.iter().map(|id| format!("{prefix}_{id}")));
    }
    w.write_record(&header)?;
    for (i, d) in decisions.iter().enumerate() {
        let mut rec = vec![i.to_string(), ids[d.selected].clone()];
        for values in [&d.r_t, &d.r_a, &d.scores, &d.probabilities] {
            rec.extend(values.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    Ok(())
}

fn toy_config(path: Option<&Path>, seed: Option<u64>) -> Result<ToyConfig> {
    let mut cfg = match path {
        Some(p) => ToyConfig::from_json(&fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => ToyConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
