//! Adam training on a curriculum of retrieval episodes.
//!
//! Every batch holds `round(batch_size * symbolic)` symbolic episodes and
//! standard ones for the rest. Standard episodes are always unperturbed and
//! labelled `caption`; both targets and both orders are sampled uniformly.
//! The batch for update `s` is drawn from stream `s` of the train seed, so a
//! run is a pure function of its seeds and configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::eval::{assemble_all, balanced_episodes, order_averaged, predict_all, split_by_order, verdicts_for};
use crate::metrics::{compute_report, fmt_opt};
use crate::model::{Intervention, Model, TrainExample};
use crate::seed::{derive_seed, stream_rng};
use crate::world::{Condition, Modality, SampleOptions, TextLabel, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curriculum {
    pub standard: f64,
    pub symbolic: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum {
            standard: 0.8,
            symbolic: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub curriculum: Curriculum,
    pub eval_every: usize,
    /// Held-out episodes per evaluation, for each of the two tasks.
    pub eval_episodes: usize,
    pub train_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 6000,
            batch_size: 64,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 200,
            grad_clip_norm: 1.0,
            curriculum: Curriculum::default(),
            eval_every: 500,
            eval_episodes: 200,
            train_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        let c = self.curriculum;
        if c.standard < 0.0 || c.symbolic < 0.0 || ((c.standard + c.symbolic) - 1.0).abs() > 1e-9 {
            return bad("curriculum weights must be non-negative and sum to 1");
        }
        Ok(())
    }

    /// Symbolic episodes per batch.
    pub fn symbolic_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.curriculum.symbolic).round() as usize
    }
}

/// One evaluation point. Selectivities are order-averaged unless the column
/// names an order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    /// Completed updates.
    pub step: usize,
    /// Mean training loss over the updates since the previous record.
    pub train_loss: f64,
    pub heldout_selectivity: Option<f64>,
    pub heldout_image_target: Option<f64>,
    pub heldout_caption_target: Option<f64>,
    pub heldout_p_valid: f64,
    pub heldout_image_first: Option<f64>,
    pub heldout_caption_first: Option<f64>,
    /// Largest distance between the averaged selectivity and either
    /// single-order selectivity.
    pub order_gap: Option<f64>,
    pub symbolic_selectivity: Option<f64>,
    pub symbolic_p_valid: f64,
}

pub const TRAINING_LOG_HEADER: &str = "step,train_loss,heldout_selectivity,heldout_image_target,\
heldout_caption_target,heldout_p_valid,heldout_image_first,heldout_caption_first,order_gap,\
symbolic_selectivity,symbolic_p_valid";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAINING_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{},{:.6},{},{},{},{},{:.6}",
                r.step,
                r.train_loss,
                fmt_opt(r.heldout_selectivity),
                fmt_opt(r.heldout_image_target),
                fmt_opt(r.heldout_caption_target),
                r.heldout_p_valid,
                fmt_opt(r.heldout_image_first),
                fmt_opt(r.heldout_caption_first),
                fmt_opt(r.order_gap),
                fmt_opt(r.symbolic_selectivity),
                r.symbolic_p_valid,
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| LabError::io(path, e))
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// Checks that `model` can read every prompt `world` produces.
pub fn check_compatible(model: &Model<f32>, world: &World) -> Result<()> {
    let cfg = model.config();
    if cfg.vocab_size != world.vocab().size() {
        return Err(LabError::Contract(format!(
            "model vocab_size {} does not match world vocabulary of {}",
            cfg.vocab_size,
            world.vocab().size()
        )));
    }
    if cfg.max_seq_len < world.max_prompt_len() {
        return Err(LabError::Contract(format!(
            "max_seq_len {} is shorter than the longest prompt ({})",
            cfg.max_seq_len,
            world.max_prompt_len()
        )));
    }
    Ok(())
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1, b2) = (b1 as f32, b2 as f32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2s + eps);
        }
    }
}

fn clip(grads: &mut [f32], max_norm: f64) {
    let norm = grads.iter().map(|g| f64::from(*g) * f64::from(*g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Learning rate for the `step`-th update (0-based).
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// The batch consumed by update `step`.
pub fn training_batch(world: &World, cfg: &TrainConfig, step: usize) -> Result<Vec<crate::world::Episode>> {
    let mut rng = stream_rng(derive_seed(cfg.train_seed, "batches"), step as u64);
    let n_sym = cfg.symbolic_per_batch().min(cfg.batch_size);
    let standard = SampleOptions {
        condition: Condition::Unperturbed,
        text_label: TextLabel::Caption,
        ..SampleOptions::default()
    };
    let symbolic = SampleOptions::symbolic();
    (0..cfg.batch_size)
        .map(|i| {
            let opts = if i < n_sym { &symbolic } else { &standard };
            world.sample_episode(&mut rng, opts)
        })
        .collect()
}

/// Held-out evaluation sets used by the log: standard and symbolic.
fn heldout_sets(world: &World, cfg: &TrainConfig) -> Result<(Vec<crate::world::Episode>, Vec<crate::world::Episode>)> {
    let std_eps = balanced_episodes(
        world,
        derive_seed(cfg.train_seed, "heldout-standard"),
        cfg.eval_episodes,
        &SampleOptions::default(),
    )?;
    let sym_eps = balanced_episodes(
        world,
        derive_seed(cfg.train_seed, "heldout-symbolic"),
        cfg.eval_episodes,
        &SampleOptions::symbolic(),
    )?;
    Ok((std_eps, sym_eps))
}

fn evaluate_for_log(
    model: &Model<f32>,
    world: &World,
    sets: &(Vec<crate::world::Episode>, Vec<crate::world::Episode>),
    step: usize,
    train_loss: f64,
) -> Result<LogRecord> {
    let none = Intervention::None;
    let (std_eps, sym_eps) = sets;
    let prompts = assemble_all(world, std_eps)?;
    let preds = predict_all(model, &prompts, &none)?;
    let verdicts = verdicts_for(std_eps, &prompts, &preds);
    let report = order_averaged(std_eps, &verdicts)?;
    let (a, b) = split_by_order(std_eps, &verdicts);
    let s_a = compute_report(&a).ok().and_then(|r| r.selectivity());
    let s_b = compute_report(&b).ok().and_then(|r| r.selectivity());
    let order_gap = match (report.selectivity(), s_a, s_b) {
        (Some(m), Some(x), Some(y)) => Some((m - x).abs().max((m - y).abs())),
        _ => None,
    };
    let sym_prompts = assemble_all(world, sym_eps)?;
    let sym_preds = predict_all(model, &sym_prompts, &none)?;
    let sym_report = order_averaged(sym_eps, &verdicts_for(sym_eps, &sym_prompts, &sym_preds))?;
    Ok(LogRecord {
        step,
        train_loss,
        heldout_selectivity: report.selectivity(),
        heldout_image_target: report.target_selectivity(Modality::Image),
        heldout_caption_target: report.target_selectivity(Modality::Caption),
        heldout_p_valid: report.p_valid(),
        heldout_image_first: s_a,
        heldout_caption_first: s_b,
        order_gap,
        symbolic_selectivity: sym_report.selectivity(),
        symbolic_p_valid: sym_report.p_valid(),
    })
}

/// Trains a copy of `model`. With `steps = 0` the input is returned unchanged
/// and the log is empty.
pub fn train(model: &Model<f32>, world: &World, cfg: &TrainConfig) -> Result<(Model<f32>, TrainingLog)> {
    train_with_progress(model, world, cfg, |_| {})
}

/// [`train`] calling `progress` after each evaluation.
pub fn train_with_progress(
    model: &Model<f32>,
    world: &World,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LogRecord),
) -> Result<(Model<f32>, TrainingLog)> {
    cfg.validate()?;
    check_compatible(model, world)?;
    let mut model = model.clone();
    let mut log = TrainingLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    let sets = heldout_sets(world, cfg)?;
    let mut adam = Adam::new(model.param_count());
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    for step in 0..cfg.steps {
        let episodes = training_batch(world, cfg, step)?;
        let prompts = assemble_all(world, &episodes)?;
        let batch: Vec<TrainExample> = prompts
            .iter()
            .map(|p| TrainExample {
                tokens: &p.tokens,
                answer_slot: p.answer_slot(),
                answer_token: p.answer_token,
            })
            .collect();
        let (loss, mut grads) = model.loss_and_grads(&batch).map_err(|e| LabError::Training {
            step,
            reason: e.to_string(),
        })?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Training {
                step,
                reason: "non-finite loss or gradient".into(),
            });
        }
        clip(&mut grads, cfg.grad_clip_norm);
        adam.step(
            model.params_mut(),
            &grads,
            learning_rate_at(cfg, step),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        if !model.is_finite() {
            return Err(LabError::Training {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        loss_sum += loss;
        loss_n += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let rec = evaluate_for_log(&model, world, &sets, done, loss_sum / loss_n as f64)?;
            progress(&rec);
            log.records.push(rec);
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok((model, log))
}
