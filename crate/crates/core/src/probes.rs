//! Embedding-level separation between image and caption content tokens.
//!
//! Standardization centres each fold on the training-fold mean and divides
//! by a single scalar (the root mean per-feature variance). Using one scale
//! for all features keeps the probe equivariant under rotations of the
//! embedding space, so its accuracy does not depend on the basis.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::model::Model;
use crate::seed::{child_seed, derive_seed, rng_from_seed, stream_rng};
use crate::world::{Modality, SampleOptions, TokenClass, World};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingSample {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub episode: usize,
    pub position: usize,
}

/// One image-content and one caption-content embedding from each of
/// `n_instances` unperturbed episodes. Only the embedding table is read.
///
/// Caption positions are drawn from the fillers. The answer token names the
/// entity for both modalities, so it belongs to neither side.
pub fn sample_embeddings(
    model: &Model<f32>,
    world: &World,
    n_instances: usize,
    seed: u64,
) -> Result<Vec<EmbeddingSample>> {
    let mut out = Vec::with_capacity(2 * n_instances);
    for i in 0..n_instances {
        let mut rng = stream_rng(seed, i as u64);
        let ep = world.sample_episode(&mut rng, &SampleOptions::default())?;
        let prompt = world.assemble_prompt(&ep)?;
        for m in [Modality::Image, Modality::Caption] {
            let span = prompt.spans.content(m);
            let eligible: Vec<usize> = span
                .positions()
                .filter(|&p| world.vocab().class_of(prompt.tokens[p]) != Some(TokenClass::Answer))
                .collect();
            if eligible.is_empty() {
                return Err(LabError::Domain("the caption has no filler tokens to probe".into()));
            }
            let position = eligible[rng.random_range(0..eligible.len())];
            let tok = prompt.tokens[position];
            if tok as usize >= model.config().vocab_size {
                return Err(LabError::Contract(format!(
                    "token {tok} outside the model vocabulary"
                )));
            }
            out.push(EmbeddingSample {
                vector: model.embedding(tok).iter().map(|x| f64::from(*x)).collect(),
                modality: m,
                episode: i,
                position,
            });
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(LabError::Numeric {
            stage: "cosine of a zero or non-finite vector",
            layer: 0,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineStats {
    pub within_image: f64,
    pub within_caption: f64,
    /// Mean of the two within-modality values.
    pub within_mean: f64,
    pub cross: f64,
}

/// Mean cosine over all unordered within-modality pairs and all
/// cross-modality pairs.
pub fn cosine_stats(samples: &[EmbeddingSample]) -> Result<CosineStats> {
    let img: Vec<&[f64]> = by_modality(samples, Modality::Image);
    let cap: Vec<&[f64]> = by_modality(samples, Modality::Caption);
    if img.len() < 2 || cap.len() < 2 {
        return Err(LabError::Domain("cosine statistics need at least two samples per modality".into()));
    }
    let within = |xs: &[&[f64]]| -> Result<f64> {
        let mut s = 0.0;
        let mut n = 0usize;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                s += cosine(xs[i], xs[j])?;
                n += 1;
            }
        }
        Ok(s / n as f64)
    };
    let within_image = within(&img)?;
    let within_caption = within(&cap)?;
    let mut cross = 0.0;
    for a in &img {
        for b in &cap {
            cross += cosine(a, b)?;
        }
    }
    cross /= (img.len() * cap.len()) as f64;
    Ok(CosineStats {
        within_image,
        within_caption,
        within_mean: (within_image + within_caption) / 2.0,
        cross,
    })
}

fn by_modality(samples: &[EmbeddingSample], m: Modality) -> Vec<&[f64]> {
    samples
        .iter()
        .filter(|s| s.modality == m)
        .map(|s| s.vector.as_slice())
        .collect()
}

/// Stratified fold index for every sample: each class is shuffled and dealt
/// round-robin into `k` folds.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(LabError::Config("k must be at least 2".into()));
    }
    let mut fold = vec![0; labels.len()];
    let mut rng = rng_from_seed(seed);
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        if idx.len() < k {
            return Err(LabError::Domain(format!(
                "stratification failed: class has {} samples, fewer than k = {k} folds, \
                 so some fold would hold a single class",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    Ok(fold)
}

/// Logistic regression by full-batch gradient descent from zero.
/// Returns (weights, bias).
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], iterations: usize, step: f64) -> (Vec<f64>, f64) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let r = p - if *yi { 1.0 } else { 0.0 };
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += r * a;
            }
            gb += r;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g / n;
        }
        b -= step * gb / n;
    }
    (w, b)
}

/// Centres on the mean of `train` and divides by one shared scale.
fn standardize(train: &[Vec<f64>], test: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for x in train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let var: f64 = train
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum::<f64>()
        / (n * d as f64);
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let f = |xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| x.iter().zip(&mean).map(|(v, m)| (v - m) / scale).collect())
            .collect()
    };
    (f(train), f(test))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Stratified k-fold accuracy of a linear image-vs-caption probe.
/// Returns (mean, population std) over folds. With `shuffle_control` the
/// training labels of each fold are permuted before fitting; held-out
/// accuracy is always measured against the true labels.
pub fn linear_probe_cv(samples: &[EmbeddingSample], k: usize, shuffle_control: bool, seed: u64) -> Result<(f64, f64)> {
    let labels: Vec<bool> = samples.iter().map(|s| s.modality == Modality::Image).collect();
    let folds = stratified_folds(&labels, k, derive_seed(seed, "folds"))?;
    let mut accs = Vec::with_capacity(k);
    for f in 0..k {
        let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            if folds[i] == f {
                xte.push(s.vector.clone());
                yte.push(labels[i]);
            } else {
                xtr.push(s.vector.clone());
                ytr.push(labels[i]);
            }
        }
        if shuffle_control {
            ytr.shuffle(&mut stream_rng(derive_seed(seed, "control"), f as u64));
        }
        let (xtr, xte) = standardize(&xtr, &xte);
        let (w, b) = fit_logistic(&xtr, &ytr, PROBE_ITERATIONS, PROBE_STEP);
        let correct = xte
            .iter()
            .zip(&yte)
            .filter(|(x, y)| {
                let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                (z > 0.0) == **y
            })
            .count();
        accs.push(correct as f64 / xte.len() as f64);
    }
    Ok(mean_std(&accs))
}

/// The separation table: cosine statistics, the probe, and the
/// shuffled-label control repeated over `permutations` label permutations
/// (mean and std of the per-permutation cross-validated accuracy).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub within_image_cos: f64,
    pub within_caption_cos: f64,
    pub within_mean_cos: f64,
    pub cross_cos: f64,
    pub probe_acc_mean: f64,
    pub probe_acc_std: f64,
    pub control_acc_mean: f64,
    pub control_acc_std: f64,
}

pub const SEPARATION_CSV_HEADER: &str = "within_image_cos,within_caption_cos,within_mean_cos,cross_cos,\
probe_acc_mean,probe_acc_std,control_acc_mean,control_acc_std";

impl SeparationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SEPARATION_CSV_HEADER);
        let _ = writeln!(
            s,
            "\n{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.within_image_cos,
            self.within_caption_cos,
            self.within_mean_cos,
            self.cross_cos,
            self.probe_acc_mean,
            self.probe_acc_std,
            self.control_acc_mean,
            self.control_acc_std
        );
        s
    }
}

pub fn separation_report(samples: &[EmbeddingSample], k: usize, permutations: usize, seed: u64) -> Result<SeparationReport> {
    if permutations == 0 {
        return Err(LabError::Config("permutations must be positive".into()));
    }
    let c = cosine_stats(samples)?;
    let (probe_acc_mean, probe_acc_std) = linear_probe_cv(samples, k, false, derive_seed(seed, "probe"))?;
    let control: Vec<f64> = (0..permutations)
        .map(|p| linear_probe_cv(samples, k, true, child_seed(derive_seed(seed, "control"), p as u64)).map(|r| r.0))
        .collect::<Result<_>>()?;
    let (control_acc_mean, control_acc_std) = mean_std(&control);
    Ok(SeparationReport {
        within_image_cos: c.within_image,
        within_caption_cos: c.within_caption,
        within_mean_cos: c.within_mean,
        cross_cos: c.cross,
        probe_acc_mean,
        probe_acc_std,
        control_acc_mean,
        control_acc_std,
    })
}
