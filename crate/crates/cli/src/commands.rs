//! The experiment commands. Each one writes its outputs and a manifest
//! into the configured output directory and returns what it wrote.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use modality_lab::eval::{assemble_all, balanced_episodes, predict_all, verdicts_for};
use modality_lab::interventions::{depth_sweep, freeze_remove_comparison, SweepRow};
use modality_lab::metrics::{
    aggregate_orders, compute_report, ingest_verdicts, report_rows, rows_to_csv, ReportRow, SelectivityReport,
    VerdictRecord,
};
use modality_lab::model::{load_checkpoint, save_checkpoint, Intervention, Model};
use modality_lab::probes::{sample_embeddings, separation_report, SeparationReport};
use modality_lab::seed::derive_seed;
use modality_lab::trainer::{check_compatible, train_with_progress, LogRecord, TrainingLog};
use modality_lab::world::{Condition, Episode, Order, SampleOptions, TaskRecord, TextLabel, World};
use modality_lab::{LabError, Result};

use crate::config::ExperimentConfig;
use crate::manifest::{FileDigest, Manifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_GRID_FILE: &str = "eval_grid.csv";
pub const EVAL_GRID_JSON_FILE: &str = "eval_grid.json";
pub const SEPARATION_FILE: &str = "separation.csv";
pub const FREEZE_REMOVE_FILE: &str = "freeze_remove.csv";
pub const DELTA_SWEEP_FILE: &str = "delta_sweep.csv";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const SCORE_FILE: &str = "score.csv";
pub const SCORE_JSON_FILE: &str = "score.json";

/// Files written by a command, manifest last.
#[derive(Debug, Clone)]
pub struct Written {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let probe = dir.join(".write-test");
    std::fs::write(&probe, b"").map_err(|e| LabError::io(dir, e))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| LabError::io(path, e))
}

/// Digests recorded by file name, relative to the manifest.
fn digest_rel(dir: &Path, name: &str) -> Result<FileDigest> {
    let mut d = FileDigest::of(&dir.join(name))?;
    d.path = PathBuf::from(name);
    Ok(d)
}

fn finish(command: &str, cfg: &ExperimentConfig, inputs: Vec<FileDigest>, names: &[&str]) -> Result<Written> {
    let dir = &cfg.out_dir;
    let outputs = names.iter().map(|n| digest_rel(dir, n)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(command, cfg, inputs, outputs)?.write(dir)?;
    Ok(Written {
        outputs: names.iter().map(|n| dir.join(n)).collect(),
        manifest,
    })
}

/// The checkpoint an analysis command reads: the configured one, or the
/// training output in the same directory.
pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

/// `cfg` with its checkpoint path made explicit, so a manifest names the
/// file it read even when it came from the default location.
fn pin_checkpoint(cfg: &ExperimentConfig) -> ExperimentConfig {
    let path = checkpoint_path(cfg);
    let path = std::fs::canonicalize(&path).unwrap_or(path);
    ExperimentConfig {
        checkpoint: Some(path),
        ..cfg.clone()
    }
}

/// Loads the checkpoint and checks it against the configured world.
pub fn load_model(cfg: &ExperimentConfig, world: &World) -> Result<(Model<f32>, FileDigest)> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(LabError::Checkpoint {
            path,
            reason: "file not found (train first, or pass --checkpoint)".into(),
        });
    }
    let model = load_checkpoint(&path)?;
    check_compatible(&model, world)?;
    let digest = FileDigest::of(&path)?;
    Ok((model, digest))
}

pub fn cmd_train(cfg: &ExperimentConfig, progress: impl FnMut(&LogRecord)) -> Result<(Written, TrainingLog)> {
    prepare_out_dir(&cfg.out_dir)?;
    let world = World::new(cfg.world.clone())?;
    let init = Model::<f32>::init(cfg.model.clone())?;
    let (model, log) = train_with_progress(&init, &world, &cfg.train, progress)?;
    save_checkpoint(&model, cfg.out_dir.join(CHECKPOINT_FILE))?;
    log.write_csv(cfg.out_dir.join(TRAIN_LOG_FILE))?;
    let w = finish("train", cfg, Vec::new(), &[CHECKPOINT_FILE, TRAIN_LOG_FILE])?;
    Ok((w, log))
}

/// Rows for one grid cell: each order present, then (with both orders) the
/// order-averaged `mean` and the `pooled` counts.
pub fn cell_rows(condition: &str, text_label: &str, verdicts: &[(Order, VerdictRecord)]) -> Result<Vec<ReportRow>> {
    let mut by_order: BTreeMap<Order, Vec<VerdictRecord>> = BTreeMap::new();
    for (o, v) in verdicts {
        by_order.entry(*o).or_default().push(v.clone());
    }
    if by_order.is_empty() {
        return Err(LabError::Domain(format!(
            "empty report for condition {condition}, text label {text_label}: no episodes"
        )));
    }
    let mut rows = Vec::new();
    let mut reports: Vec<SelectivityReport> = Vec::new();
    for (o, vs) in &by_order {
        let r = compute_report(vs)?;
        rows.extend(report_rows(&r, condition, text_label, o.as_str()));
        reports.push(r);
    }
    if let [a, b] = reports.as_slice() {
        rows.extend(report_rows(&aggregate_orders(a, b)?, condition, text_label, "mean"));
        let pooled: Vec<VerdictRecord> = verdicts.iter().map(|(_, v)| v.clone()).collect();
        rows.extend(report_rows(&compute_report(&pooled)?, condition, text_label, "pooled"));
    }
    Ok(rows)
}

/// One cell of the evaluation grid: its label, and episodes.
pub struct GridCell {
    pub condition: String,
    pub text_label: String,
    pub episodes: Vec<Episode>,
}

fn order_policy(cfg: &ExperimentConfig) -> Result<Option<Order>> {
    match cfg.eval.orders.as_slice() {
        [] => Err(LabError::Config("eval.orders must name at least one order".into())),
        [o] => Ok(Some(*o)),
        [a, b] if a != b => Ok(None),
        _ => Err(LabError::Config("eval.orders must not repeat an order".into())),
    }
}

/// The evaluation grid of a config. Every condition shares the eval seed,
/// so cells differ only in their markers wherever the sampler allows.
pub fn grid_cells(cfg: &ExperimentConfig, world: &World) -> Result<Vec<GridCell>> {
    let seeds = cfg.seeds();
    let order = order_policy(cfg)?;
    let n = cfg.eval.n_episodes;
    let mut cells = Vec::new();
    for &tl in &cfg.eval.text_labels {
        for &condition in &cfg.eval.conditions {
            let opts = SampleOptions {
                condition,
                text_label: tl,
                order,
                ..SampleOptions::default()
            };
            cells.push(GridCell {
                condition: condition.as_str().to_string(),
                text_label: tl.as_str().to_string(),
                episodes: balanced_episodes(world, seeds.eval, n, &opts)?,
            });
        }
    }
    if cfg.eval.symbolic {
        let opts = SampleOptions {
            order,
            ..SampleOptions::symbolic()
        };
        cells.push(GridCell {
            condition: "symbolic".into(),
            text_label: "label".into(),
            episodes: balanced_episodes(world, derive_seed(seeds.eval, "symbolic"), n, &opts)?,
        });
    }
    if cells.is_empty() {
        return Err(LabError::Config("the evaluation grid has no cells".into()));
    }
    Ok(cells)
}

pub fn eval_grid_rows(cfg: &ExperimentConfig, model: &Model<f32>, world: &World) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for cell in grid_cells(cfg, world)? {
        let prompts = assemble_all(world, &cell.episodes)?;
        let preds = predict_all(model, &prompts, &Intervention::None)?;
        let verdicts = verdicts_for(&cell.episodes, &prompts, &preds);
        let tagged: Vec<(Order, VerdictRecord)> = cell.episodes.iter().map(|e| e.order).zip(verdicts).collect();
        rows.extend(cell_rows(&cell.condition, &cell.text_label, &tagged)?);
    }
    Ok(rows)
}

pub fn cmd_eval_grid(cfg: &ExperimentConfig) -> Result<(Written, Vec<ReportRow>)> {
    let cfg = &pin_checkpoint(cfg);
    let world = World::new(cfg.world.clone())?;
    let (model, ck) = load_model(cfg, &world)?;
    let rows = eval_grid_rows(cfg, &model, &world)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(EVAL_GRID_FILE), rows_to_csv(&rows).as_bytes())?;
    write_file(&cfg.out_dir.join(EVAL_GRID_JSON_FILE), &serde_json::to_vec_pretty(&rows)?)?;
    let w = finish("eval-grid", cfg, vec![ck], &[EVAL_GRID_FILE, EVAL_GRID_JSON_FILE])?;
    Ok((w, rows))
}

pub fn probe_report(cfg: &ExperimentConfig, model: &Model<f32>, world: &World) -> Result<SeparationReport> {
    let seed = cfg.seeds().probe;
    let samples = sample_embeddings(model, world, cfg.probes.n_instances, derive_seed(seed, "samples"))?;
    separation_report(&samples, cfg.probes.k, cfg.probes.permutations, seed)
}

pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<(Written, SeparationReport)> {
    let cfg = &pin_checkpoint(cfg);
    let world = World::new(cfg.world.clone())?;
    let (model, ck) = load_model(cfg, &world)?;
    let report = probe_report(cfg, &model, &world)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(SEPARATION_FILE), report.to_csv().as_bytes())?;
    let w = finish("probe", cfg, vec![ck], &[SEPARATION_FILE])?;
    Ok((w, report))
}

pub fn freeze_remove_rows(cfg: &ExperimentConfig, model: &Model<f32>, world: &World) -> Result<Vec<ReportRow>> {
    let fr = &cfg.interventions.freeze_remove;
    let episodes = balanced_episodes(
        world,
        derive_seed(cfg.seeds().eval, "freeze-remove"),
        fr.n_episodes,
        &SampleOptions::default(),
    )?;
    if episodes.is_empty() {
        return Err(LabError::Domain("freeze-remove needs at least one episode".into()));
    }
    let c = freeze_remove_comparison(model, world, &episodes, &fr.spec(model.config().n_layers))?;
    let tl = TextLabel::Caption.as_str();
    let mut rows = report_rows(&c.unperturbed, Condition::Unperturbed.as_str(), tl, "mean");
    rows.extend(report_rows(&c.remove, Condition::Remove.as_str(), tl, "mean"));
    rows.extend(report_rows(&c.freeze_remove, "freeze_remove", tl, "mean"));
    Ok(rows)
}

pub fn cmd_freeze_remove(cfg: &ExperimentConfig) -> Result<(Written, Vec<ReportRow>)> {
    let cfg = &pin_checkpoint(cfg);
    let world = World::new(cfg.world.clone())?;
    let (model, ck) = load_model(cfg, &world)?;
    let rows = freeze_remove_rows(cfg, &model, &world)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(FREEZE_REMOVE_FILE), rows_to_csv(&rows).as_bytes())?;
    let w = finish("freeze-remove", cfg, vec![ck], &[FREEZE_REMOVE_FILE])?;
    Ok((w, rows))
}

pub fn cmd_delta_sweep(cfg: &ExperimentConfig, progress: impl FnMut(&SweepRow)) -> Result<Written> {
    let cfg = &pin_checkpoint(cfg);
    let world = World::new(cfg.world.clone())?;
    let (model, ck) = load_model(cfg, &world)?;
    let table = depth_sweep(&model, &world, &cfg.interventions.sweep, cfg.seeds().sweep, progress)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(DELTA_SWEEP_FILE), table.to_csv().as_bytes())?;
    finish("delta-sweep", cfg, vec![ck], &[DELTA_SWEEP_FILE])
}

/// Task records for every episode of the evaluation grid.
pub fn task_records(cfg: &ExperimentConfig, world: &World) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for cell in grid_cells(cfg, world)? {
        for (i, ep) in cell.episodes.iter().enumerate() {
            let prompt = world.assemble_prompt(ep)?;
            let id = format!("{}-{}-{i:05}", cell.condition, cell.text_label);
            out.push(TaskRecord::new(id, ep, &prompt));
        }
    }
    Ok(out)
}

pub fn cmd_export_tasks(cfg: &ExperimentConfig) -> Result<(Written, usize)> {
    let world = World::new(cfg.world.clone())?;
    let records = task_records(cfg, &world)?;
    prepare_out_dir(&cfg.out_dir)?;
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_file(&cfg.out_dir.join(TASKS_FILE), &buf)?;
    let w = finish("export-tasks", cfg, Vec::new(), &[TASKS_FILE])?;
    Ok((w, records.len()))
}

fn read_tasks(path: &Path) -> Result<BTreeMap<String, TaskRecord>> {
    use modality_lab::error::RecordError;
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TaskRecord>(line) {
            Ok(t) => {
                if out.insert(t.id.clone(), t).is_some() {
                    errors.push(RecordError {
                        line: i + 1,
                        message: "duplicate id".into(),
                    });
                }
            }
            Err(e) => errors.push(RecordError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(LabError::Records {
            path: path.to_path_buf(),
            errors,
        })
    }
}

/// Scores external verdicts. Without a task file the result is one pooled
/// report; with one, verdicts are joined by id and broken down like the
/// evaluation grid.
pub fn score_rows(verdicts_path: &Path, tasks_path: Option<&Path>) -> Result<Vec<ReportRow>> {
    let verdicts = ingest_verdicts(verdicts_path)?;
    let Some(tp) = tasks_path else {
        return Ok(report_rows(&compute_report(&verdicts)?, "all", "all", "pooled"));
    };
    let tasks = read_tasks(tp)?;
    let mut cells: BTreeMap<(String, String), Vec<(Order, VerdictRecord)>> = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, v) in verdicts.iter().enumerate() {
        match tasks.get(&v.id) {
            None => errors.push(modality_lab::error::RecordError {
                line: i + 1,
                message: format!("id {:?} is not in {}", v.id, tp.display()),
            }),
            Some(t) if t.target != v.target => errors.push(modality_lab::error::RecordError {
                line: i + 1,
                message: format!("id {:?}: target {} disagrees with the task ({})", v.id, v.target.as_str(), t.target.as_str()),
            }),
            Some(t) => {
                let key = if t.symbolic {
                    ("symbolic".to_string(), "label".to_string())
                } else {
                    (t.condition.as_str().to_string(), t.text_label.as_str().to_string())
                };
                cells.entry(key).or_default().push((t.order, v.clone()));
            }
        }
    }
    if !errors.is_empty() {
        return Err(LabError::Records {
            path: verdicts_path.to_path_buf(),
            errors,
        });
    }
    let mut rows = Vec::new();
    for ((c, tl), vs) in &cells {
        rows.extend(cell_rows(c, tl, vs)?);
    }
    Ok(rows)
}

pub fn cmd_score(cfg: &ExperimentConfig, verdicts: &Path, tasks: Option<&Path>) -> Result<(Written, Vec<ReportRow>)> {
    let rows = score_rows(verdicts, tasks)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(SCORE_FILE), rows_to_csv(&rows).as_bytes())?;
    write_file(&cfg.out_dir.join(SCORE_JSON_FILE), &serde_json::to_vec_pretty(&rows)?)?;
    let mut inputs = vec![FileDigest::of(verdicts)?];
    if let Some(t) = tasks {
        inputs.push(FileDigest::of(t)?);
    }
    let w = finish("score", cfg, inputs, &[SCORE_FILE, SCORE_JSON_FILE])?;
    Ok((w, rows))
}
