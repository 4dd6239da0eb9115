//! Forward pass over a ragged batch of sequences.
//!
//! Sequences are stacked row-wise so every projection is a single GEMM;
//! attention runs per sequence and per head on its own block of rows.

use std::collections::BTreeMap;

use super::Model;
use crate::error::{LabError, Result};
use crate::linalg::{gemm, Op, Scalar};
use crate::world::{PromptSequence, TokenId};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// A residual-stream intervention for one sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Intervention<T> {
    #[default]
    None,
    AddDelta(AddDelta<T>),
    PatchFreeze(PatchFreeze<T>),
}

/// Adds `first` at `first_positions` and `second` at `second_positions` to
/// the residual at `boundary`, before the block at that boundary runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AddDelta<T> {
    pub boundary: usize,
    pub first_positions: Vec<usize>,
    pub second_positions: Vec<usize>,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Overwrites the residual at each `(boundary, position)` key. Patched
/// vectors are constants: no gradient flows through them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchFreeze<T> {
    pub patches: BTreeMap<(usize, usize), Vec<T>>,
}

impl<T: Scalar> Intervention<T> {
    fn validate(&self, seq_len: usize, n_layers: usize, d: usize) -> Result<()> {
        let bad = |m: String| Err(LabError::Domain(m));
        match self {
            Intervention::None => Ok(()),
            Intervention::AddDelta(a) => {
                if a.boundary > n_layers {
                    return bad(format!("delta boundary {} exceeds {n_layers}", a.boundary));
                }
                if a.first.len() != d || a.second.len() != d {
                    return bad("delta vectors must have length d_model".into());
                }
                if let Some(p) = a.first_positions.iter().chain(&a.second_positions).find(|p| **p >= seq_len) {
                    return bad(format!("delta position {p} outside sequence of length {seq_len}"));
                }
                Ok(())
            }
            Intervention::PatchFreeze(p) => {
                for ((b, pos), v) in &p.patches {
                    if *b > n_layers || *pos >= seq_len || v.len() != d {
                        return bad(format!("invalid patch at boundary {b}, position {pos}"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Applies the edits that belong to `boundary` to one sequence's rows.
    fn apply(&self, boundary: usize, x: &mut [T], d: usize) {
        match self {
            Intervention::None => {}
            Intervention::AddDelta(a) if a.boundary == boundary => {
                for &p in &a.first_positions {
                    for (xi, di) in x[p * d..(p + 1) * d].iter_mut().zip(&a.first) {
                        *xi += *di;
                    }
                }
                for &p in &a.second_positions {
                    for (xi, di) in x[p * d..(p + 1) * d].iter_mut().zip(&a.second) {
                        *xi += *di;
                    }
                }
            }
            Intervention::AddDelta(_) => {}
            Intervention::PatchFreeze(p) => {
                for ((_, pos), v) in p.patches.range((boundary, 0)..=(boundary, usize::MAX)) {
                    x[pos * d..(pos + 1) * d].copy_from_slice(v);
                }
            }
        }
    }
}

/// Residual vectors recorded during a forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace<T> {
    vectors: BTreeMap<(usize, usize), Vec<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn get(&self, boundary: usize, position: usize) -> Option<&[T]> {
        self.vectors.get(&(boundary, position)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[T])> {
        self.vectors.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

/// One sequence in a batched pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqRequest<'a, T> {
    pub tokens: &'a [TokenId],
    pub intervention: &'a Intervention<T>,
    /// Positions whose residual vectors are recorded at every boundary.
    pub capture: &'a [usize],
}

impl<'a, T> SeqRequest<'a, T> {
    pub fn new(tokens: &'a [TokenId], intervention: &'a Intervention<T>) -> Self {
        SeqRequest {
            tokens,
            intervention,
            capture: &[],
        }
    }
}

/// Which positions get logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogitRows {
    All,
    /// The final position of each sequence.
    Last,
    /// One position per sequence.
    At(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Row-major logits for the requested positions.
    pub logits: Vec<T>,
    /// Positions the rows of `logits` belong to.
    pub positions: Vec<usize>,
    pub trace: ActivationTrace<T>,
    pub vocab_size: usize,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn logits_at(&self, position: usize) -> Option<&[T]> {
        let row = self.positions.iter().position(|p| *p == position)?;
        Some(&self.logits[row * self.vocab_size..(row + 1) * self.vocab_size])
    }
}

pub(crate) struct LayerCache<T> {
    pub inv1: Vec<T>,
    pub xhat1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub attn: Vec<T>,
    pub inv2: Vec<T>,
    pub xhat2: Vec<T>,
    pub u: Vec<T>,
    pub tanh_u: Vec<T>,
    pub act: Vec<T>,
}

pub(crate) struct Pass<T> {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub prob_starts: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache<T>>,
    pub inv_f: Vec<T>,
    pub xhat_f: Vec<T>,
    /// Global row index of each logit row, and the owning sequence.
    pub logit_rows: Vec<(usize, usize)>,
    pub logits: Vec<T>,
    pub traces: Vec<ActivationTrace<T>>,
    pub rope: Rope<T>,
}

/// Rotary tables: `cos[p * half + i]`, `sin[p * half + i]`.
pub(crate) struct Rope<T> {
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(max_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let a = p as f64 * freq;
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates one head vector at position `p`; `inverse` applies the
    /// transpose rotation (used for gradients).
    #[inline]
    pub fn rotate(&self, x: &mut [T], p: usize, inverse: bool) {
        let h = self.half;
        for i in 0..h {
            let c = self.cos[p * h + i];
            let s = if inverse { -self.sin[p * h + i] } else { self.sin[p * h + i] };
            let (a, b) = (x[i], x[i + h]);
            x[i] = a * c - b * s;
            x[i + h] = a * s + b * c;
        }
    }
}

pub(crate) fn rms_forward<T: Scalar>(x: &[T], d: usize, inv: &mut Vec<T>, xhat: &mut Vec<T>) {
    let eps = T::from_f64(RMS_EPS);
    let dn = T::from_f64(d as f64);
    inv.clear();
    xhat.clear();
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / dn;
        let r = T::ONE / (ms + eps).sqrt();
        inv.push(r);
        xhat.extend(row.iter().map(|v| *v * r));
    }
}

pub(crate) fn scale_rows<T: Scalar>(xhat: &[T], gain: &[T]) -> Vec<T> {
    let d = gain.len();
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks_exact(d) {
        out.extend(row.iter().zip(gain).map(|(a, g)| *a * *g));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU of `u`, returned with the inner tanh so the
/// backward pass need not recompute it.
#[inline]
pub(crate) fn gelu_with_tanh<T: Scalar>(u: T) -> (T, T) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    (half * u * (T::ONE + t), t)
}

/// Derivative of GELU at `u`, given `t` from [`gelu_with_tanh`].
#[inline]
pub(crate) fn gelu_grad<T: Scalar>(u: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::ONE + t) + half * u * (T::ONE - t * t) * c * (T::ONE + three * a * u * u)
}

fn check_finite<T: Scalar>(x: &[T], stage: &'static str, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LabError::Numeric { stage, layer })
    }
}

impl<T: Scalar> Model<T> {
    /// Runs the model on one token sequence, returning logits at every
    /// position and the residual vectors at `capture` positions.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        capture: &[usize],
        intervention: &Intervention<T>,
    ) -> Result<ForwardOutput<T>> {
        let req = SeqRequest {
            tokens,
            intervention,
            capture,
        };
        Ok(self.forward_batch(&[req], LogitRows::All)?.pop().expect("one sequence"))
    }

    /// Batched forward without caching intermediates for a backward pass.
    pub fn forward_batch(&self, seqs: &[SeqRequest<T>], rows: LogitRows) -> Result<Vec<ForwardOutput<T>>> {
        let pass = self.run(seqs, rows, false)?;
        let v = self.cfg.vocab_size;
        let mut outs: Vec<ForwardOutput<T>> = pass
            .traces
            .into_iter()
            .map(|trace| ForwardOutput {
                logits: Vec::new(),
                positions: Vec::new(),
                trace,
                vocab_size: v,
            })
            .collect();
        for (i, (row, s)) in pass.logit_rows.iter().enumerate() {
            let o = &mut outs[*s];
            o.positions.push(row - pass.starts[*s]);
            o.logits.extend_from_slice(&pass.logits[i * v..(i + 1) * v]);
        }
        Ok(outs)
    }

    /// Greedy single-token answer: argmax over the full vocabulary at the
    /// prompt's answer slot.
    pub fn predict_answer(&self, prompt: &PromptSequence, intervention: &Intervention<T>) -> Result<TokenId> {
        Ok(self.predict_batch(&[(prompt, intervention)])?[0])
    }

    /// [`Model::predict_answer`] over many prompts, evaluated in chunks.
    pub fn predict_batch(&self, items: &[(&PromptSequence, &Intervention<T>)]) -> Result<Vec<TokenId>> {
        const CHUNK: usize = 64;
        let v = self.cfg.vocab_size;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let reqs: Vec<SeqRequest<T>> = chunk
                .iter()
                .map(|(p, iv)| SeqRequest::new(&p.tokens, iv))
                .collect();
            let slots: Vec<usize> = chunk.iter().map(|(p, _)| p.answer_slot()).collect();
            let pass = self.run(&reqs, LogitRows::At(slots), false)?;
            for row in pass.logits.chunks_exact(v) {
                out.push(argmax(row) as TokenId);
            }
        }
        Ok(out)
    }

    pub(crate) fn run(&self, seqs: &[SeqRequest<T>], rows: LogitRows, keep_cache: bool) -> Result<Pass<T>> {
        let cfg = &self.cfg;
        let (d, nh, hd, ff, vsz) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let n_layers = cfg.n_layers;
        if seqs.is_empty() {
            return Err(LabError::Domain("empty batch".into()));
        }

        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut prob_starts = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        let mut prob_total = 0;
        for s in seqs {
            let t = s.tokens.len();
            if t == 0 {
                return Err(LabError::Domain("empty sequence".into()));
            }
            if t > cfg.max_seq_len {
                return Err(LabError::Domain(format!(
                    "sequence too long: {t} > max_seq_len {}",
                    cfg.max_seq_len
                )));
            }
            if let Some(bad) = s.tokens.iter().find(|t| **t as usize >= vsz) {
                return Err(LabError::Domain(format!("token {bad} outside vocabulary of {vsz}")));
            }
            if let Some(p) = s.capture.iter().find(|p| **p >= t) {
                return Err(LabError::Domain(format!("capture position {p} outside sequence")));
            }
            s.intervention.validate(t, n_layers, d)?;
            starts.push(tokens.len());
            lens.push(t);
            prob_starts.push(prob_total);
            prob_total += nh * t * t;
            tokens.extend_from_slice(s.tokens);
        }
        let n = tokens.len();
        let rope = Rope::new(cfg.max_seq_len, hd, cfg.rotary_base);
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let mut x = vec![T::ZERO; n * d];
        for (r, tok) in tokens.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(self.embedding(*tok));
        }

        let mut traces: Vec<ActivationTrace<T>> = vec![ActivationTrace::default(); seqs.len()];
        let boundary_hook = |b: usize, x: &mut [T], traces: &mut [ActivationTrace<T>]| {
            for (si, s) in seqs.iter().enumerate() {
                let rows = &mut x[starts[si] * d..(starts[si] + lens[si]) * d];
                s.intervention.apply(b, rows, d);
                for &p in s.capture {
                    traces[si].vectors.insert((b, p), rows[p * d..(p + 1) * d].to_vec());
                }
            }
        };

        let mut layers = Vec::with_capacity(if keep_cache { n_layers } else { 0 });
        let mut inv = Vec::new();
        let mut xhat = Vec::new();
        for (li, lay) in self.layout.layers.iter().enumerate() {
            boundary_hook(li, &mut x, &mut traces);

            rms_forward(&x, d, &mut inv, &mut xhat);
            let h = scale_rows(&xhat, self.slice(&lay.attn_norm));
            let mut q = vec![T::ZERO; n * d];
            let mut k = vec![T::ZERO; n * d];
            let mut v = vec![T::ZERO; n * d];
            gemm(Op::N, Op::N, n, d, d, &h, self.slice(&lay.wq), T::ZERO, &mut q);
            gemm(Op::N, Op::N, n, d, d, &h, self.slice(&lay.wk), T::ZERO, &mut k);
            gemm(Op::N, Op::N, n, d, d, &h, self.slice(&lay.wv), T::ZERO, &mut v);
            for (si, &st) in starts.iter().enumerate() {
                for p in 0..lens[si] {
                    let r = (st + p) * d;
                    for hh in 0..nh {
                        rope.rotate(&mut q[r + hh * hd..r + (hh + 1) * hd], p, false);
                        rope.rotate(&mut k[r + hh * hd..r + (hh + 1) * hd], p, false);
                    }
                }
            }

            let mut probs = vec![T::ZERO; prob_total];
            let mut attn = vec![T::ZERO; n * d];
            for (si, &st) in starts.iter().enumerate() {
                let t = lens[si];
                for hh in 0..nh {
                    let pbase = prob_starts[si] + hh * t * t;
                    let off = hh * hd;
                    for i in 0..t {
                        let qi = &q[(st + i) * d + off..(st + i) * d + off + hd];
                        let prow = &mut probs[pbase + i * t..pbase + i * t + t];
                        let mut mx = T::from_f64(f64::NEG_INFINITY);
                        for j in 0..=i {
                            let kj = &k[(st + j) * d + off..(st + j) * d + off + hd];
                            let s = crate::linalg::dot(qi, kj) * scale;
                            prow[j] = s;
                            if s > mx {
                                mx = s;
                            }
                        }
                        let mut z = T::ZERO;
                        for pj in prow[..=i].iter_mut() {
                            *pj = (*pj - mx).exp();
                            z += *pj;
                        }
                        let out = &mut attn[(st + i) * d + off..(st + i) * d + off + hd];
                        for j in 0..=i {
                            prow[j] /= z;
                            let w = prow[j];
                            let vj = &v[(st + j) * d + off..(st + j) * d + off + hd];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += w * *vv;
                            }
                        }
                    }
                }
            }
            gemm(Op::N, Op::N, n, d, d, &attn, self.slice(&lay.wo), T::ONE, &mut x);

            let mut inv2 = Vec::new();
            let mut xhat2 = Vec::new();
            rms_forward(&x, d, &mut inv2, &mut xhat2);
            let h2 = scale_rows(&xhat2, self.slice(&lay.ff_norm));
            let mut u = vec![T::ZERO; n * ff];
            gemm(Op::N, Op::N, n, d, ff, &h2, self.slice(&lay.w1), T::ZERO, &mut u);
            let mut act = Vec::with_capacity(u.len());
            let mut tanh_u = Vec::with_capacity(if keep_cache { u.len() } else { 0 });
            for z in &u {
                let (g, t) = gelu_with_tanh(*z);
                act.push(g);
                if keep_cache {
                    tanh_u.push(t);
                }
            }
            gemm(Op::N, Op::N, n, ff, d, &act, self.slice(&lay.w2), T::ONE, &mut x);
            check_finite(&x, "forward", li)?;

            if keep_cache {
                layers.push(LayerCache {
                    inv1: std::mem::take(&mut inv),
                    xhat1: std::mem::take(&mut xhat),
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    inv2,
                    xhat2,
                    u,
                    tanh_u,
                    act,
                });
            }
        }
        boundary_hook(n_layers, &mut x, &mut traces);

        let logit_rows: Vec<(usize, usize)> = match &rows {
            LogitRows::All => (0..seqs.len())
                .flat_map(|s| (0..lens[s]).map(move |p| (p, s)))
                .map(|(p, s)| (starts[s] + p, s))
                .collect(),
            LogitRows::Last => (0..seqs.len()).map(|s| (starts[s] + lens[s] - 1, s)).collect(),
            LogitRows::At(ps) => {
                if ps.len() != seqs.len() {
                    return Err(LabError::Domain("one logit position per sequence required".into()));
                }
                let mut out = Vec::with_capacity(ps.len());
                for (s, &p) in ps.iter().enumerate() {
                    if p >= lens[s] {
                        return Err(LabError::Domain(format!("logit position {p} outside sequence")));
                    }
                    out.push((starts[s] + p, s));
                }
                out
            }
        };

        let mut inv_f = Vec::new();
        let mut xhat_f = Vec::new();
        let gain_f = self.slice(&self.layout.final_norm);
        let mut hsel = Vec::with_capacity(logit_rows.len() * d);
        for (r, _) in &logit_rows {
            let row = &x[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / T::from_f64(d as f64);
            let ri = T::ONE / (ms + T::from_f64(RMS_EPS)).sqrt();
            hsel.extend(row.iter().zip(gain_f).map(|(a, g)| *a * ri * *g));
        }
        if keep_cache {
            rms_forward(&x, d, &mut inv_f, &mut xhat_f);
        }
        let mut logits = vec![T::ZERO; logit_rows.len() * vsz];
        gemm(
            Op::N,
            Op::N,
            logit_rows.len(),
            d,
            vsz,
            &hsel,
            self.slice(&self.layout.unembed),
            T::ZERO,
            &mut logits,
        );
        check_finite(&logits, "logits", n_layers)?;

        Ok(Pass {
            starts,
            lens,
            prob_starts,
            tokens,
            layers,
            inv_f,
            xhat_f,
            logit_rows,
            logits,
            traces,
            rope,
        })
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
