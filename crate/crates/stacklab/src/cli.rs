//! Command-line workflows wiring the library into reproducible batch runs:
//! dataset builds, training, evaluation, CAM export, placement planning, and
//! the dynamic-vs-quasi-static oracle cross-check.
//!
//! Every invocation writes a `run.json` echo of its fully resolved
//! configuration (no timestamps), so any run can be reproduced from that
//! file alone. Exit codes are a stable contract: 0 success, 1 internal or
//! check failure, 2 usage/input error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::dataset::{self, BuildOptions, Split};
use crate::imaging::{self, Heatmap};
use crate::learning::{self, Design, LearnError, TrainConfig, CLASS_STABLE, CLASS_UNSTABLE};
use crate::physics::SimConfig;
use crate::planning::{self, Executor, PlanError};
use crate::scenegen::{self, GroupSpec, Scene};
use crate::seeds;
use crate::stability::{self, Verdict, TAU};

const DEFAULT_SEED: u64 = 42;
const SEED_ENV: &str = "STACKLAB_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "stacklab",
    version,
    about = "Block-tower stability laboratory: synthesize scenes, learn stability, plan placements"
)]
struct Cli {
    /// Master seed; precedence: this flag, then config file, then the
    /// STACKLAB_SEED environment variable, then the built-in default (42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file supplying defaults for seed/out/jobs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for run.json and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scene-level pipelines; results are independent of
    /// the value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or inspect the scene corpus.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a stability classifier and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate: either a stored checkpoint on chosen groups, or a full
    /// experiment design (intra / cross / generalization).
    Eval(EvalArgs),
    /// Export a class activation map for one corpus scene.
    Cam(CamArgs),
    /// Detect the stacking surface, enumerate placements, predict and
    /// execute them.
    Plan(PlanArgs),
    /// Cross-check labels against an independent oracle.
    Oracle {
        #[command(subcommand)]
        action: OracleCmd,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Generate, simulate, label, and render scenes into the out directory.
    Build {
        /// `all` or a comma-separated list such as `4B-2D-Uni,14B-3D-NonUni`.
        #[arg(long, default_value = "all")]
        groups: String,
        #[arg(long, default_value_t = 200)]
        per_group: u32,
    },
    /// Print per-group corpus statistics from a built dataset.
    Stats {
        /// Dataset root (directory holding manifest.jsonl).
        #[arg(long)]
        root: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root (directory holding manifest.jsonl).
    #[arg(long)]
    root: PathBuf,
    /// `all` or a comma-separated group list; training uses the train halves.
    #[arg(long, default_value = "all")]
    groups: String,
    /// Checkpoint output path (default: <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

impl HyperArgs {
    fn resolve(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch.unwrap_or(d.batch_size),
            steps: self.steps.unwrap_or(d.steps),
            seed,
            ..d
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset root (directory holding manifest.jsonl).
    #[arg(long)]
    root: PathBuf,
    /// Self-contained experiment design: intra, cross, or generalization.
    #[arg(long)]
    design: Option<String>,
    /// Evaluate this stored checkpoint instead of running a design.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test groups for checkpoint mode (`all` or comma-separated).
    #[arg(long, default_value = "all")]
    groups: String,
    /// CSV report path (default: <out>/eval.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct CamArgs {
    /// Dataset root (directory holding manifest.jsonl).
    #[arg(long)]
    root: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene reference as GROUP/INDEX, e.g. `4B-2D-Uni/17`.
    #[arg(long)]
    scene: String,
    /// Class to map: `stable`, `unstable`, or the model's own prediction.
    #[arg(long, default_value = "predicted")]
    class: String,
    /// Heat-map output path (default: <out>/cam-<group>-<index>.pgm).
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Scene input: a serialized scene (.json) for the full pipeline, or a
    /// mask (.pbm) for surface detection only.
    #[arg(
        long,
        required_unless_present = "scripted",
        conflicts_with = "scripted"
    )]
    scene: Option<PathBuf>,
    /// Run the built-in six scripted evaluation scenes instead of a file.
    #[arg(long)]
    scripted: bool,
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Placement attempts per predicted-stable candidate.
    #[arg(long, default_value_t = planning::DEFAULT_ATTEMPTS)]
    attempts: u32,
    /// Exit successfully even when no stacking surface is found.
    #[arg(long)]
    allow_empty: bool,
}

#[derive(Subcommand, Debug)]
enum OracleCmd {
    /// Generate scenes, label them dynamically, and compare against the
    /// quasi-static equilibrium oracle. Fails (exit 1) when agreement drops
    /// below 90% on non-marginal scenes or below 100% on |margin| > 0.2.
    Check {
        #[arg(long, default_value = "4B-2D-Uni")]
        group: String,
        #[arg(long, default_value_t = 200)]
        count: u32,
    },
}

enum CliError {
    /// Bad arguments or missing inputs: exit 2.
    Usage(String),
    /// Failure while doing the work (including failed checks): exit 1.
    Internal(String),
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> u8 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

/// Config-file fields; all optional, overridden by flags.
#[derive(serde::Deserialize, Default)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

struct Resolved {
    seed: u64,
    out: PathBuf,
    jobs: Option<usize>,
}

fn resolve(cli: &Cli) -> Result<Resolved, CliError> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV)
        .ok()
        .map(|v| {
            v.parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an integer, got {v:?}")))
        })
        .transpose()?;
    Ok(Resolved {
        seed: cli.seed.or(file.seed).or(env_seed).unwrap_or(DEFAULT_SEED),
        out: cli
            .out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("out")),
        jobs: cli.jobs.or(file.jobs),
    })
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn parse_groups(s: &str) -> Result<Vec<GroupSpec>, CliError> {
    if s == "all" {
        return Ok(scenegen::enumerate_groups());
    }
    s.split(',')
        .map(|name| {
            name.trim().parse::<GroupSpec>().map_err(|_| {
                let valid: Vec<String> = scenegen::enumerate_groups()
                    .iter()
                    .map(|g| g.to_string())
                    .collect();
                CliError::Usage(format!(
                    "unknown group {:?}; valid groups: {}",
                    name.trim(),
                    valid.join(", ")
                ))
            })
        })
        .collect()
}

fn load_manifest_at(root: &Path) -> Result<dataset::Manifest, CliError> {
    let path = root.join("manifest.jsonl");
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no dataset at {}; run `stacklab dataset build` first",
            root.display()
        )));
    }
    Ok(dataset::load_manifest(&path)?)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn write_run_json(out: &Path, value: serde_json::Value) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let path = out.join("run.json");
    fs::write(&path, format!("{:#}\n", value))?;
    println!("run config echoed to {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let r = resolve(&cli)?;
    match &cli.command {
        Command::Dataset { action } => match action {
            DatasetCmd::Build { groups, per_group } => cmd_build(&r, groups, *per_group),
            DatasetCmd::Stats { root } => cmd_stats(&r, root),
        },
        Command::Train(args) => cmd_train(&r, args),
        Command::Eval(args) => cmd_eval(&r, args),
        Command::Cam(args) => cmd_cam(&r, args),
        Command::Plan(args) => cmd_plan(&r, args),
        Command::Oracle { action } => match action {
            OracleCmd::Check { group, count } => cmd_oracle_check(&r, group, *count),
        },
    }
}

fn cmd_build(r: &Resolved, groups: &str, per_group: u32) -> Result<(), CliError> {
    let group_list = parse_groups(groups)?;
    let opts = BuildOptions {
        groups: group_list.clone(),
        per_group,
        base_seed: r.seed,
        ..BuildOptions::default()
    };
    write_run_json(
        &r.out,
        json!({
            "command": "dataset build",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "groups": group_list.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
            "per_group": per_group,
        }),
    )?;
    let out = r.out.clone();
    let manifest = with_jobs(r.jobs, move || dataset::build_dataset(&opts, &out))??;
    let stable: u32 = manifest.records.iter().filter(|rec| rec.stable).count() as u32;
    println!(
        "built {} scenes in {} groups ({} stable / {} unstable) under {}",
        manifest.records.len(),
        manifest.header.groups.len(),
        stable,
        manifest.records.len() as u32 - stable,
        r.out.display()
    );
    Ok(())
}

fn cmd_stats(r: &Resolved, root: &Path) -> Result<(), CliError> {
    let manifest = load_manifest_at(root)?;
    write_run_json(
        &r.out,
        json!({
            "command": "dataset stats",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "root": root,
        }),
    )?;
    println!("group,total,stable,unstable,train,test,retried_scenes");
    for s in dataset::stats(&manifest) {
        println!(
            "{},{},{},{},{},{},{}",
            s.group, s.total, s.stable, s.unstable, s.train, s.test, s.retried_scenes
        );
    }
    Ok(())
}

fn cmd_train(r: &Resolved, args: &TrainArgs) -> Result<(), CliError> {
    let groups = parse_groups(&args.groups)?;
    let manifest = load_manifest_at(&args.root)?;
    let cfg = args.hyper.resolve(r.seed);
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| r.out.join("model.ckpt"));
    write_run_json(
        &r.out,
        json!({
            "command": "train",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "root": args.root,
            "groups": groups.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
            "checkpoint": checkpoint,
            "train_config": cfg,
        }),
    )?;
    let view = learning::dataset_view(&args.root, &manifest, &groups, Split::Train)?;
    let (model, summary) = learning::train(&view, &cfg)?;
    if let Some(parent) = checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    learning::save_model(&checkpoint, &model)?;
    println!(
        "trained on {} samples: {} steps ({} epochs), final loss {:.4}, train accuracy {}%",
        view.samples.len(),
        summary.steps,
        summary.epochs,
        summary.final_mean_loss,
        summary.final_train_accuracy_pct
    );
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

fn cmd_eval(r: &Resolved, args: &EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest_at(&args.root)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| r.out.join("eval.csv"));
    let cfg = args.hyper.resolve(r.seed);
    match (&args.design, &args.checkpoint) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "pass either --design or --checkpoint, not both".into(),
        )),
        (None, None) => Err(CliError::Usage(
            "pass --design intra|cross|generalization, or --checkpoint with --groups".into(),
        )),
        (Some(design), None) => {
            let design: Design = design.parse().map_err(|_| {
                CliError::Usage(format!(
                    "unknown design {design:?}; valid designs: intra, cross, generalization"
                ))
            })?;
            write_run_json(
                &r.out,
                json!({
                    "command": "eval",
                    "seed": r.seed,
                    "jobs": r.jobs,
                    "out": r.out,
                    "root": args.root,
                    "design": design.to_string(),
                    "csv": csv_path,
                    "train_config": cfg,
                }),
            )?;
            let outcome = learning::run_experiment(&args.root, &manifest, design, &cfg)?;
            for (label, model) in &outcome.models {
                let path = r.out.join(format!("model-{label}.ckpt"));
                learning::save_model(&path, model)?;
                println!("checkpoint written to {}", path.display());
            }
            fs::write(&csv_path, outcome.csv())?;
            print!("{}", outcome.csv());
            println!("report written to {}", csv_path.display());
            Ok(())
        }
        (None, Some(checkpoint)) => {
            require_file(checkpoint, "checkpoint")?;
            let groups = parse_groups(&args.groups)?;
            write_run_json(
                &r.out,
                json!({
                    "command": "eval",
                    "seed": r.seed,
                    "jobs": r.jobs,
                    "out": r.out,
                    "root": args.root,
                    "checkpoint": checkpoint,
                    "groups": groups.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
                    "csv": csv_path,
                }),
            )?;
            let model = learning::load_model(checkpoint)?;
            let view = learning::dataset_view(&args.root, &manifest, &groups, Split::Test)?;
            let report = learning::evaluate(&model, &view)?;
            let mut csv = String::from("group,n,accuracy_pct\n");
            for e in &report.entries {
                writeln!(csv, "{},{},{:.1}", e.group, e.n, e.accuracy_pct).unwrap();
            }
            writeln!(
                csv,
                "{},{},{:.1}",
                report.overall.group, report.overall.n, report.overall.accuracy_pct
            )
            .unwrap();
            fs::write(&csv_path, &csv)?;
            print!("{csv}");
            println!("report written to {}", csv_path.display());
            Ok(())
        }
    }
}

fn cmd_cam(r: &Resolved, args: &CamArgs) -> Result<(), CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    let manifest = load_manifest_at(&args.root)?;
    let (group, index) = args.scene.split_once('/').ok_or_else(|| {
        CliError::Usage(format!("--scene wants GROUP/INDEX, got {:?}", args.scene))
    })?;
    let index: u32 = index
        .parse()
        .map_err(|_| CliError::Usage(format!("scene index {index:?} is not a number")))?;
    let record = manifest
        .records
        .iter()
        .find(|rec| rec.group_id == group && rec.scene_index == index)
        .ok_or_else(|| CliError::Usage(format!("scene {}/{} not in manifest", group, index)))?;
    let factor = manifest.header.archive_resolution / manifest.header.train_resolution;
    let archived = imaging::load_mask(&record.mask_file(&args.root))?;
    let mask = imaging::downsample_majority(&archived, factor);
    let model = learning::load_model(&args.checkpoint)?;
    let prediction = learning::predict(&model, &mask)?;
    let class = match args.class.as_str() {
        "stable" => CLASS_STABLE,
        "unstable" => CLASS_UNSTABLE,
        "predicted" => prediction.class,
        other => {
            return Err(CliError::Usage(format!(
                "unknown class {other:?}; valid: stable, unstable, predicted"
            )))
        }
    };
    let pgm = args
        .pgm
        .clone()
        .unwrap_or_else(|| r.out.join(format!("cam-{}-{}.pgm", group, index)));
    write_run_json(
        &r.out,
        json!({
            "command": "cam",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "root": args.root,
            "checkpoint": args.checkpoint,
            "scene": args.scene,
            "class": class_name(class),
            "pgm": pgm,
        }),
    )?;
    let map = learning::cam(&model, &learning::input_from_mask(&mask), class)?;
    let (lo, hi) = map
        .upsampled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let values: Vec<f64> = if hi > lo {
        map.upsampled.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; map.upsampled.len()]
    };
    let side = mask.width;
    imaging::save_heatmap(
        &pgm,
        &Heatmap {
            width: side,
            height: side,
            values,
        },
    )?;
    println!(
        "scene {}/{} ({:?} split, labeled {}): predicted {} (p_stable {:.3})",
        group,
        index,
        record.split,
        if record.stable { "stable" } else { "unstable" },
        class_name(prediction.class),
        prediction.p_stable
    );
    println!(
        "cam for class {}: logit {:.4}, bias {:.4}, raw range [{:.4}, {:.4}] scaled to [0, 255]",
        class_name(class),
        map.logit,
        map.bias,
        lo,
        hi
    );
    println!("heat-map written to {}", pgm.display());
    Ok(())
}

fn class_name(class: usize) -> &'static str {
    if class == CLASS_STABLE {
        "stable"
    } else {
        "unstable"
    }
}

fn cmd_plan(r: &Resolved, args: &PlanArgs) -> Result<(), CliError> {
    require_file(&args.model, "model checkpoint")?;
    let model = learning::load_model(&args.model)?;
    write_run_json(
        &r.out,
        json!({
            "command": "plan",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "model": args.model,
            "scene": args.scene,
            "scripted": args.scripted,
            "attempts": args.attempts,
            "allow_empty": args.allow_empty,
        }),
    )?;

    // Mask input: detection only — a mask carries no world geometry, so
    // there is nothing to composite, simulate, or execute.
    if let Some(path) = &args.scene {
        if path.extension().is_some_and(|e| e == "pbm") {
            require_file(path, "mask")?;
            let mask = imaging::load_mask(path)?;
            return match planning::detect_stacking_surface(&mask) {
                Ok(surface) => {
                    println!(
                        "surface: row {}, columns {}..={} ({} px wide); \
                         candidate prediction needs scene geometry (.json input)",
                        surface.row,
                        surface.col_start,
                        surface.col_end,
                        surface.width()
                    );
                    Ok(())
                }
                Err(e) => no_surface(e, args.allow_empty),
            };
        }
    }

    let scenes: Vec<Scene> = if args.scripted {
        planning::scripted_scenes()
    } else {
        let path = args
            .scene
            .as_ref()
            .expect("clap enforces scene xor scripted");
        require_file(path, "scene")?;
        let text = fs::read_to_string(path)?;
        vec![serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("scene {}: {e}", path.display())))?]
    };

    let sim = SimConfig::default();
    let mut total_candidates = 0usize;
    let mut all_csv_paths = Vec::new();
    for scene in &scenes {
        let set = match planning::generate_candidates(scene) {
            Ok(set) => set,
            Err(e) => return no_surface(e, args.allow_empty),
        };
        let predicted = planning::predict_candidates(&model, &set)?;
        let ground_truth = planning::ground_truth_candidates(scene, &set.candidates, &sim);
        let executor = Executor {
            attempts: args.attempts,
            ..Executor::new(seeds::child(r.seed, &[0x8e57, scene.scene_index as u64]))
        };
        let report =
            planning::manipulation_report(scene, &set, &predicted, &ground_truth, &executor);
        let csv_path = r.out.join(format!("plan-scene{}.csv", scene.scene_index));
        fs::write(&csv_path, report.csv())?;
        let scene_json = r.out.join(format!("plan-scene{}.json", scene.scene_index));
        fs::write(&scene_json, serde_json::to_string_pretty(scene).unwrap())?;
        total_candidates += set.candidates.len();
        println!(
            "scene {}: {} candidates, prediction accuracy {}%, success rate {}% \
             ({} of {} ground-truth-stable placed; {} lucky false positives){}",
            scene.scene_index,
            set.candidates.len(),
            report.prediction_accuracy_pct,
            report.success_rate_pct,
            report.successes,
            report.gt_stable,
            report.false_positive_successes,
            if report.all_rejected {
                "; all candidates rejected, nothing attempted"
            } else {
                ""
            }
        );
        all_csv_paths.push(csv_path);
    }
    println!("total candidates: {total_candidates}");
    for p in all_csv_paths {
        println!("per-candidate report written to {}", p.display());
    }
    Ok(())
}

fn no_surface(e: PlanError, allow_empty: bool) -> Result<(), CliError> {
    if allow_empty {
        println!("{e}; nothing to plan");
        Ok(())
    } else {
        Err(CliError::Internal(e.to_string()))
    }
}

fn cmd_oracle_check(r: &Resolved, group: &str, count: u32) -> Result<(), CliError> {
    let group_spec = parse_groups(group)?
        .into_iter()
        .next()
        .expect("one group parsed");
    write_run_json(
        &r.out,
        json!({
            "command": "oracle check",
            "seed": r.seed,
            "jobs": r.jobs,
            "out": r.out,
            "group": group_spec.to_string(),
            "count": count,
        }),
    )?;
    let params = scenegen::GenParams::default();
    let sim = SimConfig::default();
    let mut non_marginal = 0u32;
    let mut non_marginal_agree = 0u32;
    let mut confident = 0u32;
    let mut confident_agree = 0u32;
    let mut marginal = 0u32;
    let mut csv = String::from("scene_index,dynamic_unstable,oracle_verdict,oracle_margin\n");
    for index in 0..count {
        let (scene, _) = scenegen::generate_scene_with_retries(&group_spec, index, r.seed, &params)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let trace = crate::physics::simulate(&scene, &sim);
        let dynamic_unstable = stability::label_stability(&trace, TAU).unstable;
        let eq =
            stability::quasi_static_check(&scene).map_err(|e| CliError::Internal(e.to_string()))?;
        let verdict_name = match eq.verdict {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Marginal => "marginal",
        };
        writeln!(
            csv,
            "{},{},{},{:.6}",
            index, dynamic_unstable as u8, verdict_name, eq.margin
        )
        .unwrap();
        match eq.verdict {
            Verdict::Marginal => marginal += 1,
            v => {
                let agree = (v == Verdict::Unstable) == dynamic_unstable;
                non_marginal += 1;
                non_marginal_agree += agree as u32;
                if eq.margin.abs() > 0.2 {
                    confident += 1;
                    confident_agree += agree as u32;
                }
            }
        }
    }
    let csv_path = r.out.join("oracle.csv");
    fs::write(&csv_path, &csv)?;
    let pct = |num: u32, den: u32| {
        if den == 0 {
            100.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let non_marginal_pct = pct(non_marginal_agree, non_marginal);
    let confident_pct = pct(confident_agree, confident);
    println!(
        "{count} scenes of {group_spec}: {marginal} marginal; agreement {non_marginal_agree}/{non_marginal} ({non_marginal_pct:.1}%) non-marginal, {confident_agree}/{confident} ({confident_pct:.1}%) at |margin| > 0.2"
    );
    println!("per-scene verdicts written to {}", csv_path.display());
    if non_marginal_pct >= 90.0 && confident_pct >= 100.0 {
        Ok(())
    } else {
        Err(CliError::Internal(
            "oracle agreement below threshold (90% non-marginal, 100% at |margin| > 0.2)".into(),
        ))
    }
}
