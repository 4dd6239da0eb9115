//! Running a model over episode sets and turning predictions into reports.

use crate::error::{LabError, Result};
use crate::metrics::{aggregate_orders, compute_report, judge_toy, SelectivityReport, VerdictRecord};
use crate::model::{Intervention, Model};
use crate::seed::stream_rng;
use crate::world::{Episode, Modality, Order, PromptSequence, SampleOptions, World};

/// `n` episodes with target and order cycling through all four
/// combinations, so every (target, order) cell gets `n/4` episodes (±1).
/// Fixed fields of `opts.target` / `opts.order` override the cycle.
pub fn balanced_episodes(world: &World, seed: u64, n: usize, opts: &SampleOptions) -> Result<Vec<Episode>> {
    (0..n)
        .map(|i| {
            let target = opts.target.unwrap_or(if i % 2 == 0 {
                Modality::Image
            } else {
                Modality::Caption
            });
            let order = opts.order.unwrap_or(if (i / 2) % 2 == 0 {
                Order::ImageFirst
            } else {
                Order::CaptionFirst
            });
            let o = SampleOptions {
                target: Some(target),
                order: Some(order),
                ..opts.clone()
            };
            world.sample_episode(&mut stream_rng(seed, i as u64), &o)
        })
        .collect()
}

pub fn assemble_all(world: &World, episodes: &[Episode]) -> Result<Vec<PromptSequence>> {
    episodes.iter().map(|e| world.assemble_prompt(e)).collect()
}

/// Predicted answer token for every prompt, all under the same intervention.
pub fn predict_all(model: &Model<f32>, prompts: &[PromptSequence], iv: &Intervention<f32>) -> Result<Vec<u32>> {
    let items: Vec<(&PromptSequence, &Intervention<f32>)> = prompts.iter().map(|p| (p, iv)).collect();
    model.predict_batch(&items)
}

/// Verdicts for episodes whose predictions are already known. Ids are the
/// episode index.
pub fn verdicts_for(episodes: &[Episode], prompts: &[PromptSequence], predictions: &[u32]) -> Vec<VerdictRecord> {
    episodes
        .iter()
        .zip(prompts)
        .zip(predictions)
        .enumerate()
        .map(|(i, ((e, p), pred))| judge_toy(i.to_string(), *pred, p, e.target))
        .collect()
}

/// Report for `verdicts`, averaged over the two orders when both occur.
pub fn order_averaged(episodes: &[Episode], verdicts: &[VerdictRecord]) -> Result<SelectivityReport> {
    let (a, b) = split_by_order(episodes, verdicts);
    match (a.is_empty(), b.is_empty()) {
        (false, false) => aggregate_orders(&compute_report(&a)?, &compute_report(&b)?),
        (false, true) => compute_report(&a),
        (true, false) => compute_report(&b),
        (true, true) => Err(LabError::Domain("cannot compute a report from zero verdicts".into())),
    }
}

/// Splits verdicts into (image_first, caption_first).
pub fn split_by_order(episodes: &[Episode], verdicts: &[VerdictRecord]) -> (Vec<VerdictRecord>, Vec<VerdictRecord>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (e, v) in episodes.iter().zip(verdicts) {
        match e.order {
            Order::ImageFirst => a.push(v.clone()),
            Order::CaptionFirst => b.push(v.clone()),
        }
    }
    (a, b)
}

/// Predicts, judges and order-averages in one go.
pub fn evaluate(
    model: &Model<f32>,
    world: &World,
    episodes: &[Episode],
    iv: &Intervention<f32>,
) -> Result<SelectivityReport> {
    let prompts = assemble_all(world, episodes)?;
    let preds = predict_all(model, &prompts, iv)?;
    order_averaged(episodes, &verdicts_for(episodes, &prompts, &preds))
}
