use std::fmt;
use std::path::{Path, PathBuf};

use masklift::eval::{label_stats, mean_label_stats, miou, EtaRow, LabelStats, MeanLabelStats, MiouReport};
use masklift::geometry::build_link_matrix;
use masklift::io::{self, write_json};
use masklift::labels::{init_labels, propagate, MaskBranch, PropagationConfig};
use masklift::lift::{backproject_masks, merge_mask_sets, sample_views, MaskSet3D};
use masklift::losses::{total_loss, LossReport};
use masklift::reliability::{build_stack, split_reliable, PredictionStack};
use masklift::{LabelArray, SceneBundle};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{scene_id, ConfigError, RunConfig, SCHEMA_VERSION};

pub const INIT_LABELS: &str = "init.labels";
pub const RELIABLE_LABELS: &str = "reliable.labels";
pub const EXPANDED_LABELS: &str = "expanded.labels";
pub const MASK3D: &str = "mask3d.bin";
pub const MASK3D_PROV: &str = "mask3d.prov.json";
pub const STACK: &str = "stack.bin";
pub const LOSS_REPORT: &str = "loss.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Lift,
    InitLabels,
    SelectReliable,
    Propagate,
    Losses,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {msg}")]
pub struct StageError {
    pub stage: Stage,
    pub msg: String,
}

pub(crate) fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        msg: e.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("writing {path}: {msg}")]
    Write { path: PathBuf, msg: String },
}

/// Lifted masks and the names of the views they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Lifted {
    pub masks: MaskSet3D,
    pub views: Vec<String>,
}

/// Samples `n_view` views, links and back-projects each, and merges them.
pub fn lift_scene(bundle: &SceneBundle, n_view: usize, delta: f64, theta: f64) -> Result<Lifted, StageError> {
    let idx = sample_views(bundle.views.len(), n_view).map_err(at(Stage::Lift))?;
    let mut sets = Vec::with_capacity(idx.len());
    let mut names = Vec::with_capacity(idx.len());
    for &i in &idx {
        let v = &bundle.views[i];
        let link =
            build_link_matrix(&bundle.cloud, &v.intrinsics, &v.pose, &v.depth, delta).map_err(|e| {
                StageError {
                    stage: Stage::Lift,
                    msg: format!("view {}: {e}", v.name),
                }
            })?;
        sets.push(backproject_masks(&v.mask2d, &link).map_err(|e| StageError {
            stage: Stage::Lift,
            msg: format!("view {}: {e}", v.name),
        })?);
        names.push(v.name.clone());
    }
    let masks = merge_mask_sets(&sets, theta).map_err(at(Stage::Lift))?;
    Ok(Lifted { masks, views: names })
}

/// Ground-truth comparison of the expanded labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: MiouReport,
    pub stats: LabelStats,
}

pub fn evaluate(pred: &LabelArray, gt: &LabelArray, num_classes: usize) -> Result<EvalReport, StageError> {
    Ok(EvalReport {
        miou: miou(pred, gt, num_classes).map_err(at(Stage::Eval))?,
        stats: label_stats(pred, gt).map_err(at(Stage::Eval))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub sparse: usize,
    pub init: usize,
    pub reliable: usize,
    pub expanded: usize,
}

/// Label statistics against gt at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub sparse: LabelStats,
    pub init: LabelStats,
    pub reliable: LabelStats,
    pub expanded: LabelStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub reliable: usize,
    pub annotation: usize,
    pub untouched: usize,
}

fn branch_counts(branches: &[MaskBranch]) -> BranchCounts {
    let mut c = BranchCounts {
        reliable: 0,
        annotation: 0,
        untouched: 0,
    };
    for b in branches {
        match b {
            MaskBranch::Reliable(_) => c.reliable += 1,
            MaskBranch::Annotation(_) => c.annotation += 1,
            MaskBranch::Untouched => c.untouched += 1,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub schema_version: u32,
    pub scene: String,
    pub config: RunConfig,
    /// Depth tolerance actually used.
    pub delta: f64,
    pub views: Vec<String>,
    pub num_points: usize,
    pub num_masks: usize,
    pub covered_points: usize,
    pub reliable_points: usize,
    pub branches: BranchCounts,
    pub counts: LabelCounts,
    pub stats: Option<StageStats>,
    pub eval: Option<EvalReport>,
    pub loss: LossReport,
    pub eta_sweep: Vec<EtaRow>,
}

/// Resolved stack: the scene's stored stack when configured, otherwise the
/// nearest-seed predictor seeded with `seeds`.
pub fn scene_stack(
    dir: &Path,
    bundle: &SceneBundle,
    seeds: &LabelArray,
    cfg: &RunConfig,
) -> Result<PredictionStack, StageError> {
    match &cfg.stack_file {
        Some(name) => io::read_stack(&dir.join(name)).map_err(at(Stage::SelectReliable)),
        None => build_stack(&bundle.cloud, seeds, bundle.num_classes(), &cfg.stack_config())
            .map_err(at(Stage::SelectReliable)),
    }
}

/// Runs every stage on one scene and writes its artifacts to `out`.
pub fn run_scene(dir: &Path, out: &Path, cfg: &RunConfig) -> Result<SceneReport, StageError> {
    let bundle = io::load_scene(dir).map_err(at(Stage::Load))?;
    let delta = cfg.delta.unwrap_or(bundle.meta.delta_depth);
    let c = bundle.num_classes();
    std::fs::create_dir_all(out).map_err(at(Stage::Write))?;

    let lifted = lift_scene(&bundle, cfg.n_view, delta, cfg.theta)?;
    let masks = &lifted.masks;
    io::write_mask3d(masks, &out.join(MASK3D)).map_err(at(Stage::Write))?;
    io::write_provenance(masks, &lifted.views, &out.join(MASK3D_PROV)).map_err(at(Stage::Write))?;

    let init = init_labels(&bundle.sparse, masks).map_err(at(Stage::InitLabels))?;
    io::save_labels(&init, &out.join(INIT_LABELS)).map_err(at(Stage::Write))?;

    let stack = scene_stack(dir, &bundle, &bundle.sparse, cfg)?;
    if cfg.write_stack {
        io::write_stack(&stack, &out.join(STACK)).map_err(at(Stage::Write))?;
    }
    let split = split_reliable(&stack, cfg.tau, cfg.kappa).map_err(at(Stage::SelectReliable))?;
    io::save_labels(&split.hard, &out.join(RELIABLE_LABELS)).map_err(at(Stage::Write))?;

    let prop_cfg = PropagationConfig::new(cfg.eta).map_err(at(Stage::Propagate))?;
    let prop = propagate(&bundle.sparse, &split.hard, masks, &prop_cfg).map_err(at(Stage::Propagate))?;
    io::save_labels(&prop.labels, &out.join(EXPANDED_LABELS)).map_err(at(Stage::Write))?;

    let loss = total_loss(
        &bundle.sparse,
        &prop.labels,
        &split,
        &stack,
        &cfg.weights,
        cfg.log_zero,
    )
    .map_err(at(Stage::Losses))?;
    write_json(&loss, &out.join(LOSS_REPORT)).map_err(at(Stage::Write))?;

    let (stats, eval) = match &bundle.gt {
        Some(gt) => {
            let s = |l: &LabelArray| label_stats(l, gt).map_err(at(Stage::Eval));
            let stats = StageStats {
                sparse: s(&bundle.sparse)?,
                init: s(&init)?,
                reliable: s(&split.hard)?,
                expanded: s(&prop.labels)?,
            };
            let eval = evaluate(&prop.labels, gt, c)?;
            write_json(&eval, &out.join(EVAL_REPORT)).map_err(at(Stage::Write))?;
            (Some(stats), Some(eval))
        }
        None => (None, None),
    };

    let mut eta_sweep = Vec::with_capacity(cfg.eta_sweep.len());
    for &eta in &cfg.eta_sweep {
        let pc = PropagationConfig::new(eta).map_err(at(Stage::Propagate))?;
        let p = propagate(&bundle.sparse, &split.hard, masks, &pc).map_err(at(Stage::Propagate))?;
        let accuracy = match &bundle.gt {
            Some(gt) => label_stats(&p.labels, gt).map_err(at(Stage::Eval))?.accuracy,
            None => 0.0,
        };
        eta_sweep.push(EtaRow {
            eta,
            reliable_masks: p.reliable_masks(),
            count: p.labels.count(),
            accuracy,
        });
    }

    let report = SceneReport {
        schema_version: SCHEMA_VERSION,
        scene: scene_id(dir),
        config: cfg.clone(),
        delta,
        views: lifted.views.clone(),
        num_points: bundle.num_points(),
        num_masks: masks.len(),
        covered_points: masks.covered(),
        reliable_points: split.reliable_count(),
        branches: branch_counts(&prop.branches),
        counts: LabelCounts {
            sparse: bundle.sparse.count(),
            init: init.count(),
            reliable: split.hard.count(),
            expanded: prop.labels.count(),
        },
        stats,
        eval,
        loss,
        eta_sweep,
    };
    write_json(&report, &out.join(REPORT)).map_err(at(Stage::Write))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Means over the successful scenes that carry ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub sparse: MeanLabelStats,
    pub init: MeanLabelStats,
    pub reliable: MeanLabelStats,
    pub expanded: MeanLabelStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaSweepRow {
    pub eta: f64,
    pub mean_reliable_masks: f64,
    pub mean_count: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenes_ok: usize,
    pub scenes_failed: usize,
    pub labels: LabelTable,
    pub mean_miou: Option<f64>,
    pub eta_sweep: Vec<EtaSweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub scenes: Vec<SceneOutcome>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.aggregate.scenes_failed
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(cfg: &RunConfig, reports: &[SceneReport], failed: usize) -> Aggregate {
    let stats: Vec<StageStats> = reports.iter().filter_map(|r| r.stats).collect();
    let table = |f: fn(&StageStats) -> LabelStats| mean_label_stats(&stats.iter().map(f).collect::<Vec<_>>());
    let mious: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.eval.as_ref().map(|e| e.miou.miou))
        .collect();
    let eta_sweep = cfg
        .eta_sweep
        .iter()
        .enumerate()
        .map(|(j, &eta)| EtaSweepRow {
            eta,
            mean_reliable_masks: mean(reports.iter().map(|r| r.eta_sweep[j].reliable_masks as f64)),
            mean_count: mean(reports.iter().map(|r| r.eta_sweep[j].count as f64)),
            mean_accuracy: mean(reports.iter().map(|r| r.eta_sweep[j].accuracy)),
        })
        .collect();
    Aggregate {
        scenes_ok: reports.len(),
        scenes_failed: failed,
        labels: LabelTable {
            sparse: table(|s| s.sparse),
            init: table(|s| s.init),
            reliable: table(|s| s.reliable),
            expanded: table(|s| s.expanded),
        },
        mean_miou: (!mious.is_empty()).then(|| mean(mious.iter().copied())),
        eta_sweep,
    }
}

/// Runs every configured scene, writes per-scene artifacts under
/// `cfg.out/<scene>/` and the aggregate to `cfg.out/report.json`. Failing
/// scenes are recorded and skipped.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let results: Vec<Result<SceneReport, StageError>> = pool.install(|| {
        cfg.scenes
            .par_iter()
            .map(|dir| run_scene(dir, &cfg.out.join(scene_id(dir)), cfg))
            .collect()
    });

    let mut outcomes = Vec::with_capacity(results.len());
    let mut reports = Vec::new();
    for (dir, r) in cfg.scenes.iter().zip(results) {
        let scene = scene_id(dir);
        match r {
            Ok(rep) => {
                outcomes.push(SceneOutcome {
                    scene,
                    ok: true,
                    stage: None,
                    error: None,
                });
                reports.push(rep);
            }
            Err(e) => outcomes.push(SceneOutcome {
                scene,
                ok: false,
                stage: Some(e.stage),
                error: Some(e.msg),
            }),
        }
    }
    let failed = outcomes.iter().filter(|o| !o.ok).count();
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        aggregate: aggregate(cfg, &reports, failed),
        scenes: outcomes,
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| RunError::Write {
        path: cfg.out.clone(),
        msg: e.to_string(),
    })?;
    let path = cfg.out.join(REPORT);
    write_json(&report, &path).map_err(|e| RunError::Write {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    Ok(report)
}
