//! Freeze-remove patching and learned steering deltas.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::eval::{assemble_all, balanced_episodes, order_averaged, predict_all, verdicts_for};
use crate::metrics::{fmt_opt, judge_toy, SelectivityReport, VerdictRecord};
use crate::model::{AddDelta, Intervention, LogitRows, Model, PatchFreeze, SeqRequest};
use crate::seed::{child_seed, derive_seed};
use crate::world::{Condition, Episode, Modality, PromptSequence, SampleOptions, SpanRole, World};

/// Which boundaries and span roles freeze-remove patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeRemoveSpec {
    pub boundaries: BTreeSet<usize>,
    pub spans: Vec<SpanRole>,
}

impl FreezeRemoveSpec {
    /// Every boundary `1..=n_layers`, both content spans.
    pub fn all_layers(n_layers: usize) -> Self {
        FreezeRemoveSpec {
            boundaries: (1..=n_layers).collect(),
            spans: vec![SpanRole::ImgContent, SpanRole::CapContent],
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(b) = self.boundaries.iter().find(|b| **b == 0 || **b > n_layers) {
            return Err(LabError::Config(format!(
                "freeze boundary {b} outside [1, {n_layers}]"
            )));
        }
        Ok(())
    }
}

/// Positions of `roles` in `from`, paired with the same span-relative
/// positions in `to`.
fn map_positions(from: &PromptSequence, to: &PromptSequence, roles: &[SpanRole]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for &role in roles {
        let (a, b) = match (from.spans.get(role), to.spans.get(role)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(LabError::Internal(format!(
                    "span {} missing from one of the prompts",
                    role.as_str()
                )))
            }
        };
        if a.len() != b.len() || from.tokens[a.positions()] != to.tokens[b.positions()] {
            return Err(LabError::Internal(format!(
                "span {} did not survive marker removal verbatim",
                role.as_str()
            )));
        }
        out.extend(a.positions().zip(b.positions()));
    }
    Ok(out)
}

/// Freeze-remove predictions for a batch of unperturbed episodes, patching
/// into prompts rebuilt under `into` (normally `Remove`; `Unperturbed` gives
/// the self-patching control). Returns (patched, clean) verdicts.
pub fn freeze_patch_predict(
    model: &Model<f32>,
    world: &World,
    episodes: &[Episode],
    spec: &FreezeRemoveSpec,
    into: Condition,
) -> Result<(Vec<VerdictRecord>, Vec<VerdictRecord>)> {
    spec.validate(model.config().n_layers)?;
    let mut patched = Vec::with_capacity(episodes.len());
    let mut clean = Vec::with_capacity(episodes.len());
    const CHUNK: usize = 64;
    for (ci, chunk) in episodes.chunks(CHUNK).enumerate() {
        let mut clean_prompts = Vec::with_capacity(chunk.len());
        let mut target_prompts = Vec::with_capacity(chunk.len());
        let mut maps = Vec::with_capacity(chunk.len());
        for ep in chunk {
            if ep.condition != Condition::Unperturbed || ep.symbolic {
                return Err(LabError::Contract(
                    "freeze-remove needs unperturbed, non-symbolic episodes".into(),
                ));
            }
            let c = world.assemble_prompt(ep)?;
            let t = world.assemble_prompt(&ep.with_condition(into))?;
            maps.push(map_positions(&c, &t, &spec.spans)?);
            clean_prompts.push(c);
            target_prompts.push(t);
        }
        let captures: Vec<Vec<usize>> = maps.iter().map(|m| m.iter().map(|(a, _)| *a).collect()).collect();
        let none = Intervention::None;
        let reqs: Vec<SeqRequest<f32>> = clean_prompts
            .iter()
            .zip(&captures)
            .map(|(p, cap)| SeqRequest {
                tokens: &p.tokens,
                intervention: &none,
                capture: cap,
            })
            .collect();
        let slots = clean_prompts.iter().map(|p| p.answer_slot()).collect();
        let outs = model.forward_batch(&reqs, LogitRows::At(slots))?;
        let mut ivs = Vec::with_capacity(chunk.len());
        for (out, map) in outs.iter().zip(&maps) {
            let mut patches = BTreeMap::new();
            for &b in &spec.boundaries {
                for &(from, to) in map {
                    let v = out.trace.get(b, from).ok_or_else(|| {
                        LabError::Internal(format!("missing capture at boundary {b}, position {from}"))
                    })?;
                    patches.insert((b, to), v.to_vec());
                }
            }
            ivs.push(Intervention::PatchFreeze(PatchFreeze { patches }));
        }
        let items: Vec<(&PromptSequence, &Intervention<f32>)> = target_prompts.iter().zip(&ivs).collect();
        let preds = model.predict_batch(&items)?;
        for (i, ep) in chunk.iter().enumerate() {
            let id = (ci * CHUNK + i).to_string();
            let clean_pred = crate::model::argmax(out_row(&outs[i])) as u32;
            clean.push(judge_toy(id.clone(), clean_pred, &clean_prompts[i], ep.target));
            patched.push(judge_toy(id, preds[i], &target_prompts[i], ep.target));
        }
    }
    Ok((patched, clean))
}

fn out_row(o: &crate::model::ForwardOutput<f32>) -> &[f32] {
    &o.logits[..o.vocab_size]
}

/// Single-episode form: (freeze-remove verdict, clean verdict).
pub fn freeze_remove_predict(
    model: &Model<f32>,
    world: &World,
    episode: &Episode,
    spec: &FreezeRemoveSpec,
) -> Result<(VerdictRecord, VerdictRecord)> {
    let (mut p, mut c) = freeze_patch_predict(model, world, std::slice::from_ref(episode), spec, Condition::Remove)?;
    Ok((p.remove(0), c.remove(0)))
}

/// Unperturbed, remove and freeze-remove reports on the same episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeRemoveComparison {
    pub unperturbed: SelectivityReport,
    pub remove: SelectivityReport,
    pub freeze_remove: SelectivityReport,
}

pub fn freeze_remove_comparison(
    model: &Model<f32>,
    world: &World,
    episodes: &[Episode],
    spec: &FreezeRemoveSpec,
) -> Result<FreezeRemoveComparison> {
    let (frz, clean) = freeze_patch_predict(model, world, episodes, spec, Condition::Remove)?;
    let removed: Vec<Episode> = episodes.iter().map(|e| e.with_condition(Condition::Remove)).collect();
    let rp = assemble_all(world, &removed)?;
    let rpred = predict_all(model, &rp, &Intervention::None)?;
    Ok(FreezeRemoveComparison {
        unperturbed: order_averaged(episodes, &clean)?,
        remove: order_averaged(&removed, &verdicts_for(&removed, &rp, &rpred))?,
        freeze_remove: order_averaged(episodes, &frz)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Marker,
    Content,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Marker => "marker",
            Site::Content => "content",
        }
    }
}

/// (image-side, caption-side) positions that receive δ1 and δ2. Marker
/// sites never include the query word.
pub fn site_positions(prompt: &PromptSequence, site: Site) -> Result<(Vec<usize>, Vec<usize>)> {
    let get = |roles: &[SpanRole]| -> Result<Vec<usize>> {
        let mut v = Vec::new();
        for r in roles {
            let s = prompt.spans.get(*r).ok_or_else(|| {
                LabError::Contract(format!("prompt has no {} span for this site", r.as_str()))
            })?;
            v.extend(s.positions());
        }
        Ok(v)
    };
    match site {
        Site::Marker => Ok((
            get(&[SpanRole::ImgMarkerStart, SpanRole::ImgMarkerEnd])?,
            get(&[SpanRole::CapMarker])?,
        )),
        Site::Content => Ok((get(&[SpanRole::ImgContent])?, get(&[SpanRole::CapContent])?)),
    }
}

/// Relative depth to boundary: round half up, clamped to `[0, n_layers]`.
pub fn depth_to_boundary(depth: f64, n_layers: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(LabError::Config(format!("layer depth {depth} outside [0, 1]")));
    }
    Ok(((depth * n_layers as f64 + 0.5).floor() as usize).min(n_layers))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaOptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for DeltaOptConfig {
    fn default() -> Self {
        DeltaOptConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaIntervention {
    pub site: Site,
    pub layer_depth: f64,
    pub boundary: usize,
    pub delta_image: Vec<f32>,
    pub delta_caption: Vec<f32>,
    pub n_train: usize,
    pub seed: u64,
    /// Mean loss of the last optimisation batch (absent with no batches).
    pub final_loss: Option<f64>,
}

impl DeltaIntervention {
    /// The concrete intervention for one prompt.
    pub fn for_prompt(&self, prompt: &PromptSequence) -> Result<Intervention<f32>> {
        let (first_positions, second_positions) = site_positions(prompt, self.site)?;
        Ok(Intervention::AddDelta(AddDelta {
            boundary: self.boundary,
            first_positions,
            second_positions,
            first: self.delta_image.clone(),
            second: self.delta_caption.clone(),
        }))
    }
}

/// Training episodes for delta optimisation: unperturbed, targets and
/// orders balanced, none identical to an episode in `exclude`.
pub fn delta_training_episodes(world: &World, seed: u64, n: usize, exclude: &[Episode]) -> Result<Vec<Episode>> {
    let key = |w: &World, e: &Episode| -> Result<(Vec<u32>, Modality)> { Ok((w.assemble_prompt(e)?.tokens, e.target)) };
    let held: HashSet<(Vec<u32>, Modality)> = exclude.iter().map(|e| key(world, e)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n);
    let mut round = 0u64;
    while out.len() < n {
        let cand = balanced_episodes(world, child_seed(seed, round), n - out.len(), &SampleOptions::default())?;
        for e in cand {
            if !held.contains(&key(world, &e)?) {
                out.push(e);
            }
        }
        round += 1;
    }
    Ok(out)
}

/// The model's own answer when each episode queries the other modality.
pub fn natural_counterpart_predictions(model: &Model<f32>, world: &World, episodes: &[Episode]) -> Result<Vec<u32>> {
    let flipped: Vec<Episode> = episodes.iter().map(|e| e.with_target(e.target.other())).collect();
    let prompts = assemble_all(world, &flipped)?;
    predict_all(model, &prompts, &Intervention::None)
}

/// Optimises δ1 (image side) and δ2 (caption side) with the model frozen.
/// `natural` holds the counterpart predictions for `episodes`; one pass in
/// batches of `opt.batch_size`.
#[allow(clippy::too_many_arguments)]
pub fn train_deltas_on(
    model: &Model<f32>,
    world: &World,
    site: Site,
    layer_depth: f64,
    episodes: &[Episode],
    natural: &[u32],
    opt: &DeltaOptConfig,
    seed: u64,
) -> Result<DeltaIntervention> {
    let n_layers = model.config().n_layers;
    let boundary = depth_to_boundary(layer_depth, n_layers)?;
    if opt.batch_size == 0 {
        return Err(LabError::Config("delta batch_size must be positive".into()));
    }
    if natural.len() != episodes.len() {
        return Err(LabError::Contract("one natural prediction per episode required".into()));
    }
    let d = model.config().d_model;
    let mut di = vec![0f32; d];
    let mut dc = vec![0f32; d];
    let mut m = vec![0f64; 2 * d];
    let mut v = vec![0f64; 2 * d];
    let mut t = 0i32;
    let mut final_loss = None;
    for (bi, (eps, nat)) in episodes.chunks(opt.batch_size).zip(natural.chunks(opt.batch_size)).enumerate() {
        let prompts = assemble_all(world, eps)?;
        let ivs: Vec<Intervention<f32>> = prompts
            .iter()
            .map(|p| {
                let (a, b) = site_positions(p, site)?;
                Ok(Intervention::AddDelta(AddDelta {
                    boundary,
                    first_positions: a,
                    second_positions: b,
                    first: di.clone(),
                    second: dc.clone(),
                }))
            })
            .collect::<Result<_>>()?;
        let reqs: Vec<SeqRequest<f32>> = prompts.iter().zip(&ivs).map(|(p, iv)| SeqRequest::new(&p.tokens, iv)).collect();
        let targets: Vec<(usize, u32)> = prompts.iter().zip(nat).map(|(p, n)| (p.answer_slot(), *n)).collect();
        let out = model
            .loss_and_grads_with(&reqs, &targets, false)
            .map_err(|e| LabError::Training {
                step: bi,
                reason: e.to_string(),
            })?;
        let g: Vec<f64> = out
            .grads
            .delta_first
            .iter()
            .chain(&out.grads.delta_second)
            .map(|x| f64::from(*x))
            .collect();
        if !out.loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Training {
                step: bi,
                reason: "delta optimisation diverged".into(),
            });
        }
        t += 1;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for j in 0..2 * d {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let upd = opt.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + opt.adam_eps);
            if j < d {
                di[j] -= upd as f32;
            } else {
                dc[j - d] -= upd as f32;
            }
        }
        final_loss = Some(out.loss);
    }
    Ok(DeltaIntervention {
        site,
        layer_depth,
        boundary,
        delta_image: di,
        delta_caption: dc,
        n_train: episodes.len(),
        seed,
        final_loss,
    })
}

/// Samples `n_train` episodes from `seed` (avoiding `exclude`), computes the
/// natural targets and trains one delta pair.
#[allow(clippy::too_many_arguments)]
pub fn train_deltas(
    model: &Model<f32>,
    world: &World,
    site: Site,
    layer_depth: f64,
    n_train: usize,
    opt: &DeltaOptConfig,
    seed: u64,
    exclude: &[Episode],
) -> Result<DeltaIntervention> {
    depth_to_boundary(layer_depth, model.config().n_layers)?;
    let eps = delta_training_episodes(world, derive_seed(seed, "delta-train"), n_train, exclude)?;
    let natural = natural_counterpart_predictions(model, world, &eps)?;
    train_deltas_on(model, world, site, layer_depth, &eps, &natural, opt, seed)
}

/// Evaluates with the delta applied to every held-out prompt.
pub fn evaluate_intervention(
    model: &Model<f32>,
    world: &World,
    delta: &DeltaIntervention,
    heldout: &[Episode],
) -> Result<SelectivityReport> {
    let prompts = assemble_all(world, heldout)?;
    let ivs: Vec<Intervention<f32>> = prompts.iter().map(|p| delta.for_prompt(p)).collect::<Result<_>>()?;
    let items: Vec<(&PromptSequence, &Intervention<f32>)> = prompts.iter().zip(&ivs).collect();
    let preds = model.predict_batch(&items)?;
    order_averaged(heldout, &verdicts_for(heldout, &prompts, &preds))
}

pub const DEFAULT_EVAL_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sites: Vec<Site>,
    pub depths: Vec<f64>,
    pub n_seeds: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub opt: DeltaOptConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sites: vec![Site::Marker, Site::Content],
            depths: (0..=8).map(|i| i as f64 / 8.0).collect(),
            n_seeds: 3,
            n_train: 4000,
            n_eval: DEFAULT_EVAL_EPISODES,
            opt: DeltaOptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Delta,
    Unintervened,
    Swap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: RowKind,
    pub site: Option<Site>,
    pub depth: Option<f64>,
    pub seed: Option<u64>,
    pub selectivity: Option<f64>,
    pub selectivity_image_target: Option<f64>,
    pub selectivity_caption_target: Option<f64>,
    pub p_valid: f64,
    pub final_loss: Option<f64>,
}

pub const SWEEP_CSV_HEADER: &str = "site,depth,seed,selectivity,selectivity_image_target,\
selectivity_caption_target,p_valid,baseline_unintervened,baseline_swap,final_loss";

impl SweepRow {
    fn from_report(kind: RowKind, site: Option<Site>, depth: Option<f64>, seed: Option<u64>, r: &SelectivityReport, final_loss: Option<f64>) -> Self {
        SweepRow {
            kind,
            site,
            depth,
            seed,
            selectivity: r.selectivity(),
            selectivity_image_target: r.target_selectivity(Modality::Image),
            selectivity_caption_target: r.target_selectivity(Modality::Caption),
            p_valid: r.p_valid(),
            final_loss,
        }
    }

    pub fn csv_line(&self) -> String {
        let site = match self.kind {
            RowKind::Delta => self.site.map(Site::as_str).unwrap_or(""),
            RowKind::Unintervened => "none",
            RowKind::Swap => "swap",
        };
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{}",
            site,
            self.depth.map(|d| format!("{d:.3}")).unwrap_or_default(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            fmt_opt(self.selectivity),
            fmt_opt(self.selectivity_image_target),
            fmt_opt(self.selectivity_caption_target),
            self.p_valid,
            self.kind == RowKind::Unintervened,
            self.kind == RowKind::Swap,
            fmt_opt(self.final_loss),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn deltas(&self, site: Site) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.kind == RowKind::Delta && r.site == Some(site))
    }

    pub fn baseline(&self, kind: RowKind) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

/// Held-out episodes for a sweep rooted at `seed`.
pub fn sweep_heldout(world: &World, seed: u64, n: usize) -> Result<Vec<Episode>> {
    balanced_episodes(world, derive_seed(seed, "sweep-heldout"), n, &SampleOptions::default())
}

/// Full site × depth × seed grid plus the two baseline rows (first).
/// `progress` is called after every row.
pub fn depth_sweep(
    model: &Model<f32>,
    world: &World,
    cfg: &SweepConfig,
    seed: u64,
    mut progress: impl FnMut(&SweepRow),
) -> Result<SweepTable> {
    for d in &cfg.depths {
        depth_to_boundary(*d, model.config().n_layers)?;
    }
    if cfg.n_eval == 0 {
        return Err(LabError::Domain("sweep needs at least one held-out episode".into()));
    }
    let heldout = sweep_heldout(world, seed, cfg.n_eval)?;
    let mut table = SweepTable::default();
    let none = Intervention::None;
    let base = crate::eval::evaluate(model, world, &heldout, &none)?;
    table.rows.push(SweepRow::from_report(RowKind::Unintervened, None, None, None, &base, None));
    progress(table.rows.last().expect("row"));
    let swapped: Vec<Episode> = heldout.iter().map(|e| e.with_condition(Condition::Swap)).collect();
    let swap = crate::eval::evaluate(model, world, &swapped, &none)?;
    table.rows.push(SweepRow::from_report(RowKind::Swap, None, None, None, &swap, None));
    progress(table.rows.last().expect("row"));

    for s in 0..cfg.n_seeds {
        let cell_seed = child_seed(derive_seed(seed, "sweep-seeds"), s as u64);
        let eps = delta_training_episodes(world, derive_seed(cell_seed, "delta-train"), cfg.n_train, &heldout)?;
        let natural = natural_counterpart_predictions(model, world, &eps)?;
        for &site in &cfg.sites {
            for &depth in &cfg.depths {
                let delta = train_deltas_on(model, world, site, depth, &eps, &natural, &cfg.opt, cell_seed)?;
                let r = evaluate_intervention(model, world, &delta, &heldout)?;
                table.rows.push(SweepRow::from_report(
                    RowKind::Delta,
                    Some(site),
                    Some(depth),
                    Some(s as u64),
                    &r,
                    delta.final_loss,
                ));
                progress(table.rows.last().expect("row"));
            }
        }
    }
    Ok(table)
}
