use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masklift::eval::LabelStats;
use masklift::io::{self, read_json, write_json};
use masklift::labels::{init_labels, propagate, MaskBranch, PropagationConfig};
use masklift::losses::total_loss;
use masklift::reliability::split_reliable;
use masklift::synth::{generate_scene, SynthSpec};
use masklift_cli::config::RunConfig;
use masklift_cli::pipeline::{evaluate, lift_scene, run_pipeline, scene_stack, SceneOutcome};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "masklift",
    version,
    about = "Lift 2D masks onto point clouds and expand sparse labels"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Parameter overrides shared by `run` and the stage commands. Unset values
/// come from `--config`, then built-in defaults.
#[derive(Args, Debug, Default)]
struct Params {
    #[arg(long, env = "MASKLIFT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "MASKLIFT_N_VIEW")]
    n_view: Option<usize>,
    #[arg(long, env = "MASKLIFT_DELTA")]
    delta: Option<f64>,
    #[arg(long, env = "MASKLIFT_THETA")]
    theta: Option<f64>,
    #[arg(long, env = "MASKLIFT_TAU")]
    tau: Option<f64>,
    #[arg(long, env = "MASKLIFT_KAPPA")]
    kappa: Option<f64>,
    #[arg(long, env = "MASKLIFT_AUGMENTATIONS")]
    augmentations: Option<usize>,
    #[arg(long, env = "MASKLIFT_ETA")]
    eta: Option<f64>,
    #[arg(long, env = "MASKLIFT_AUG_SEED")]
    aug_seed: Option<u64>,
    #[arg(long, env = "MASKLIFT_KNN_K")]
    knn_k: Option<usize>,
    #[arg(long, env = "MASKLIFT_KNN_TEMPERATURE")]
    knn_temperature: Option<f64>,
    #[arg(long, env = "MASKLIFT_LAMBDA_SEG")]
    lambda_seg: Option<f64>,
    #[arg(long, env = "MASKLIFT_LAMBDA_R")]
    lambda_r: Option<f64>,
    #[arg(long, env = "MASKLIFT_LAMBDA_A")]
    lambda_a: Option<f64>,
    #[arg(long, env = "MASKLIFT_LAMBDA_M")]
    lambda_m: Option<f64>,
    #[arg(long, env = "MASKLIFT_LOG_ZERO", allow_hyphen_values = true)]
    log_zero: Option<f64>,
}

impl Params {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(|e| e.to_string())?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            n_view => n_view,
            theta => theta,
            tau => tau,
            kappa => kappa,
            augmentations => augmentations,
            eta => eta,
            aug_seed => aug_seed,
            knn_k => knn.k,
            knn_temperature => knn.temperature,
            lambda_seg => weights.seg,
            lambda_r => weights.reliable,
            lambda_a => weights.ambiguous,
            lambda_m => weights.expanded,
            log_zero => log_zero,
        );
        if self.delta.is_some() {
            cfg.delta = self.delta;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage on a batch of scenes.
    Run {
        #[command(flatten)]
        params: Params,
        /// Scene directory; repeat for several. Replaces the config's list.
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
        #[arg(long, env = "MASKLIFT_OUT")]
        out: Option<PathBuf>,
        #[arg(long, env = "MASKLIFT_JOBS")]
        jobs: Option<usize>,
        #[arg(long, env = "MASKLIFT_STACK_FILE")]
        stack_file: Option<String>,
    },
    /// Lift and merge the 2D masks of a scene into mask3d.bin.
    Lift {
        #[command(flatten)]
        params: Params,
        #[arg(long)]
        scene: PathBuf,
        /// Output mask file; provenance goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spread sparse annotations over lifted masks.
    InitLabels {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict on augmented clouds and keep the reliable hard labels.
    SelectReliable {
        #[command(flatten)]
        params: Params,
        #[arg(long)]
        scene: PathBuf,
        /// Seed labels for the nearest-seed predictor.
        #[arg(long)]
        seeds: PathBuf,
        /// Use this prediction stack instead of predicting.
        #[arg(long)]
        stack: Option<PathBuf>,
        #[arg(long)]
        stack_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand annotations and reliable labels over lifted masks.
    Propagate {
        #[command(flatten)]
        params: Params,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        reliable: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-mask branch report.
        #[arg(long)]
        branches: Option<PathBuf>,
    },
    /// Evaluate the training objective on a prediction stack.
    Losses {
        #[command(flatten)]
        params: Params,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        expanded: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU and label statistics of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), String> {
    match out {
        Some(p) => write_json(value, p).map_err(|e| e.to_string()),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(value).map_err(|e| e.to_string())?
            );
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct BranchReport {
    eta: f64,
    reliable_masks: usize,
    branches: Vec<MaskBranch>,
}

fn execute(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::Run {
            params,
            scenes,
            out,
            jobs,
            stack_file,
        } => {
            let mut cfg = params.resolve()?;
            if !scenes.is_empty() {
                cfg.scenes = scenes;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            if stack_file.is_some() {
                cfg.stack_file = stack_file;
            }
            let report = run_pipeline(&cfg).map_err(|e| e.to_string())?;
            for SceneOutcome {
                scene, stage, error, ..
            } in report.scenes.iter().filter(|o| !o.ok)
            {
                eprintln!(
                    "scene {scene} failed at {}: {}",
                    stage.map(|s| s.to_string()).unwrap_or_default(),
                    error.as_deref().unwrap_or("")
                );
            }
            eprintln!(
                "{} scenes ok, {} failed; report at {}",
                report.aggregate.scenes_ok,
                report.aggregate.scenes_failed,
                cfg.out.join("report.json").display()
            );
            Ok(if report.failed() > 0 {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Cmd::Lift { params, scene, out } => {
            let cfg = params.resolve()?;
            cfg.validate().map_err(|e| e.to_string())?;
            let bundle = io::load_scene(&scene).map_err(|e| e.to_string())?;
            let delta = cfg.delta.unwrap_or(bundle.meta.delta_depth);
            let lifted = lift_scene(&bundle, cfg.n_view, delta, cfg.theta).map_err(|e| e.to_string())?;
            io::write_mask3d(&lifted.masks, &out).map_err(|e| e.to_string())?;
            let prov = out.with_extension("prov.json");
            io::write_provenance(&lifted.masks, &lifted.views, &prov).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::InitLabels {
            annotations,
            masks,
            out,
        } => {
            let y = io::read_labels(&annotations).map_err(|e| e.to_string())?;
            let m = io::read_mask3d(&masks).map_err(|e| e.to_string())?;
            let init = init_labels(&y, &m).map_err(err("init-labels"))?;
            io::save_labels(&init, &out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::SelectReliable {
            params,
            scene,
            seeds,
            stack,
            stack_out,
            out,
        } => {
            let mut cfg = params.resolve()?;
            cfg.validate().map_err(|e| e.to_string())?;
            let bundle = io::load_scene(&scene).map_err(|e| e.to_string())?;
            let seeds = io::read_labels_checked(&seeds, bundle.num_points(), bundle.num_classes())
                .map_err(|e| e.to_string())?;
            let stack = match stack {
                Some(p) => io::read_stack(&p).map_err(|e| e.to_string())?,
                None => {
                    cfg.stack_file = None;
                    scene_stack(&scene, &bundle, &seeds, &cfg).map_err(|e| e.to_string())?
                }
            };
            if let Some(p) = stack_out {
                io::write_stack(&stack, &p).map_err(|e| e.to_string())?;
            }
            let split = split_reliable(&stack, cfg.tau, cfg.kappa).map_err(err("select-reliable"))?;
            io::save_labels(&split.hard, &out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Propagate {
            params,
            annotations,
            reliable,
            masks,
            out,
            branches,
        } => {
            let cfg = params.resolve()?;
            let pc = PropagationConfig::new(cfg.eta).map_err(err("propagate"))?;
            let y = io::read_labels(&annotations).map_err(|e| e.to_string())?;
            let yr = io::read_labels(&reliable).map_err(|e| e.to_string())?;
            let m = io::read_mask3d(&masks).map_err(|e| e.to_string())?;
            let p = propagate(&y, &yr, &m, &pc).map_err(err("propagate"))?;
            io::save_labels(&p.labels, &out).map_err(|e| e.to_string())?;
            if let Some(b) = branches {
                let report = BranchReport {
                    eta: cfg.eta,
                    reliable_masks: p.reliable_masks(),
                    branches: p.branches,
                };
                write_json(&report, &b).map_err(|e| e.to_string())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Losses {
            params,
            scene,
            stack,
            expanded,
            out,
        } => {
            let cfg = params.resolve()?;
            cfg.validate().map_err(|e| e.to_string())?;
            let bundle = io::load_scene(&scene).map_err(|e| e.to_string())?;
            let stack = io::read_stack(&stack).map_err(|e| e.to_string())?;
            let expanded = io::read_labels_checked(&expanded, bundle.num_points(), bundle.num_classes())
                .map_err(|e| e.to_string())?;
            let split = split_reliable(&stack, cfg.tau, cfg.kappa).map_err(err("losses"))?;
            let report = total_loss(
                &bundle.sparse,
                &expanded,
                &split,
                &stack,
                &cfg.weights,
                cfg.log_zero,
            )
            .map_err(err("losses"))?;
            write_json(&report, &out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            pred,
            gt,
            num_classes,
            out,
        } => {
            let pred = io::read_labels(&pred).map_err(|e| e.to_string())?;
            let gt = io::read_labels(&gt).map_err(|e| e.to_string())?;
            let report = evaluate(&pred, &gt, num_classes).map_err(|e| e.to_string())?;
            let LabelStats { count, accuracy, .. } = report.stats;
            eprintln!(
                "mIoU {:.4}, {count} labels at accuracy {accuracy:.4}",
                report.miou.miou
            );
            emit(&report, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Synth { spec, seed, out } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => read_json(&p).map_err(|e| e.to_string())?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let scene = generate_scene(&spec).map_err(err("synth"))?;
            scene.save(&out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
