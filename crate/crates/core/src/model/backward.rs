//! Exact reverse-mode gradients of the answer-slot cross-entropy.

use super::forward::{Intervention, LogitRows, Pass, SeqRequest};
use super::Model;
use crate::error::{LabError, Result};
use crate::linalg::{gemm, Op, Scalar};
use crate::world::TokenId;

/// One supervised sequence: cross-entropy toward `answer_token` at
/// `answer_slot`.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub tokens: &'a [TokenId],
    pub answer_slot: usize,
    pub answer_token: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Flat parameter gradients, absent when not requested.
    pub params: Option<Vec<T>>,
    /// Gradients of the shared `AddDelta` vectors, summed over sequences.
    pub delta_first: Vec<T>,
    pub delta_second: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: Gradients<T>,
    /// Argmax token at each answer slot.
    pub predictions: Vec<TokenId>,
}

/// Backward of `y = rms(x) * g` for all rows; accumulates `dx` and `dg`.
fn rms_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    gain: &[T],
    dx: &mut [T],
    dgain: Option<&mut [T]>,
) {
    let d = gain.len();
    let dn = T::from_f64(d as f64);
    if let Some(dg) = dgain {
        for (dyr, xr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for i in 0..d {
                dg[i] += dyr[i] * xr[i];
            }
        }
    }
    let mut dxhat = vec![T::ZERO; d];
    for (r, ((dyr, xr), dxr)) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        for i in 0..d {
            dxhat[i] = dyr[i] * gain[i];
        }
        let m = crate::linalg::dot(&dxhat, xr) / dn;
        let ri = inv[r];
        for i in 0..d {
            dxr[i] += ri * (dxhat[i] - xr[i] * m);
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Mean answer-slot cross-entropy and exact gradients for every parameter.
    pub fn loss_and_grads(&self, batch: &[TrainExample]) -> Result<(f64, Vec<T>)> {
        let none = Intervention::None;
        let reqs: Vec<SeqRequest<T>> = batch.iter().map(|e| SeqRequest::new(e.tokens, &none)).collect();
        let targets: Vec<(usize, TokenId)> = batch.iter().map(|e| (e.answer_slot, e.answer_token)).collect();
        let out = self.loss_and_grads_with(&reqs, &targets, true)?;
        Ok((out.loss, out.grads.params.expect("requested")))
    }

    /// General form: per-sequence interventions, optional parameter
    /// gradients, and gradients of any `AddDelta` vectors.
    pub fn loss_and_grads_with(
        &self,
        seqs: &[SeqRequest<T>],
        targets: &[(usize, TokenId)],
        want_params: bool,
    ) -> Result<LossOutput<T>> {
        if seqs.is_empty() {
            return Err(LabError::Domain("empty batch".into()));
        }
        if targets.len() != seqs.len() {
            return Err(LabError::Domain("one target per sequence required".into()));
        }
        let vsz = self.cfg.vocab_size;
        if let Some((_, t)) = targets.iter().find(|(_, t)| *t as usize >= vsz) {
            return Err(LabError::Domain(format!("target token {t} outside vocabulary")));
        }
        let slots: Vec<usize> = targets.iter().map(|(s, _)| *s).collect();
        let pass = self.run(seqs, LogitRows::At(slots), true)?;

        let b = seqs.len();
        let inv_b = 1.0 / b as f64;
        let mut loss = 0.0f64;
        let mut dlogits = vec![T::ZERO; b * vsz];
        let mut predictions = Vec::with_capacity(b);
        for (i, (_, tgt)) in targets.iter().enumerate() {
            let row = &pass.logits[i * vsz..(i + 1) * vsz];
            predictions.push(super::forward::argmax(row) as TokenId);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let z: f64 = row.iter().map(|v| (v.to_f64() - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += (lse - row[*tgt as usize].to_f64()) * inv_b;
            let drow = &mut dlogits[i * vsz..(i + 1) * vsz];
            for (dj, v) in drow.iter_mut().zip(row) {
                *dj = T::from_f64((v.to_f64() - lse).exp() * inv_b);
            }
            drow[*tgt as usize] -= T::from_f64(inv_b);
        }
        if !loss.is_finite() {
            return Err(LabError::Numeric { stage: "loss", layer: self.cfg.n_layers });
        }
        let grads = self.backward(seqs, &pass, &dlogits, want_params)?;
        Ok(LossOutput {
            loss,
            grads,
            predictions,
        })
    }

    fn backward(&self, seqs: &[SeqRequest<T>], pass: &Pass<T>, dlogits: &[T], want_params: bool) -> Result<Gradients<T>> {
        let cfg = &self.cfg;
        let (d, nh, hd, ff, vsz) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let n = pass.tokens.len();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let lay = &self.layout;

        let mut gp = if want_params { vec![T::ZERO; lay.total] } else { Vec::new() };
        let mut gd1 = vec![T::ZERO; d];
        let mut gd2 = vec![T::ZERO; d];

        // Unembedding and final norm.
        let r = pass.logit_rows.len();
        let gain_f = self.slice(&lay.final_norm);
        let mut hsel = Vec::with_capacity(r * d);
        for (row, _) in &pass.logit_rows {
            hsel.extend(
                pass.xhat_f[row * d..(row + 1) * d]
                    .iter()
                    .zip(gain_f)
                    .map(|(a, g)| *a * *g),
            );
        }
        if want_params {
            gemm(Op::T, Op::N, d, r, vsz, &hsel, dlogits, T::ONE, &mut gp[lay.unembed.clone()]);
        }
        let mut dh_sel = vec![T::ZERO; r * d];
        gemm(Op::N, Op::T, r, vsz, d, dlogits, self.slice(&lay.unembed), T::ZERO, &mut dh_sel);
        let mut dh = vec![T::ZERO; n * d];
        for (i, (row, _)) in pass.logit_rows.iter().enumerate() {
            for j in 0..d {
                dh[row * d + j] += dh_sel[i * d + j];
            }
        }
        let mut dx = vec![T::ZERO; n * d];
        {
            let dg = if want_params { Some(&mut gp[lay.final_norm.clone()]) } else { None };
            rms_backward(&dh, &pass.xhat_f, &pass.inv_f, gain_f, &mut dx, dg);
        }

        let boundary_back = |b: usize, dx: &mut [T], gd1: &mut [T], gd2: &mut [T]| {
            for (si, s) in seqs.iter().enumerate() {
                let base = pass.starts[si];
                match s.intervention {
                    Intervention::None => {}
                    Intervention::AddDelta(a) if a.boundary == b => {
                        for &p in &a.first_positions {
                            for j in 0..d {
                                gd1[j] += dx[(base + p) * d + j];
                            }
                        }
                        for &p in &a.second_positions {
                            for j in 0..d {
                                gd2[j] += dx[(base + p) * d + j];
                            }
                        }
                    }
                    Intervention::AddDelta(_) => {}
                    Intervention::PatchFreeze(pf) => {
                        for ((_, p), _) in pf.patches.range((b, 0)..=(b, usize::MAX)) {
                            dx[(base + p) * d..(base + p + 1) * d].fill(T::ZERO);
                        }
                    }
                }
            }
        };

        boundary_back(cfg.n_layers, &mut dx, &mut gd1, &mut gd2);

        for li in (0..cfg.n_layers).rev() {
            let c = &pass.layers[li];
            let ll = &lay.layers[li];

            // Feed-forward: x += gelu(h2 W1) W2
            let mut dact = vec![T::ZERO; n * ff];
            gemm(Op::N, Op::T, n, d, ff, &dx, self.slice(&ll.w2), T::ZERO, &mut dact);
            if want_params {
                gemm(Op::T, Op::N, ff, n, d, &c.act, &dx, T::ONE, &mut gp[ll.w2.clone()]);
            }
            for ((g, u), t) in dact.iter_mut().zip(&c.u).zip(&c.tanh_u) {
                *g *= super::forward::gelu_grad(*u, *t);
            }
            let h2 = super::forward::scale_rows(&c.xhat2, self.slice(&ll.ff_norm));
            if want_params {
                gemm(Op::T, Op::N, d, n, ff, &h2, &dact, T::ONE, &mut gp[ll.w1.clone()]);
            }
            let mut dh2 = vec![T::ZERO; n * d];
            gemm(Op::N, Op::T, n, ff, d, &dact, self.slice(&ll.w1), T::ZERO, &mut dh2);
            {
                let dg = if want_params { Some(&mut gp[ll.ff_norm.clone()]) } else { None };
                rms_backward(&dh2, &c.xhat2, &c.inv2, self.slice(&ll.ff_norm), &mut dx, dg);
            }

            // Attention: x += attn Wo
            let mut dattn = vec![T::ZERO; n * d];
            gemm(Op::N, Op::T, n, d, d, &dx, self.slice(&ll.wo), T::ZERO, &mut dattn);
            if want_params {
                gemm(Op::T, Op::N, d, n, d, &c.attn, &dx, T::ONE, &mut gp[ll.wo.clone()]);
            }
            let mut dq = vec![T::ZERO; n * d];
            let mut dk = vec![T::ZERO; n * d];
            let mut dv = vec![T::ZERO; n * d];
            let mut dp = Vec::new();
            for (si, &st) in pass.starts.iter().enumerate() {
                let t = pass.lens[si];
                for hh in 0..nh {
                    let pbase = pass.prob_starts[si] + hh * t * t;
                    let off = hh * hd;
                    let row = |p: usize| (st + p) * d + off;
                    for i in 0..t {
                        let probs = &c.probs[pbase + i * t..pbase + i * t + t];
                        let da = &dattn[row(i)..row(i) + hd];
                        dp.clear();
                        let mut acc = T::ZERO;
                        for j in 0..=i {
                            let vj = &c.v[row(j)..row(j) + hd];
                            let g = crate::linalg::dot(da, vj);
                            dp.push(g);
                            acc += g * probs[j];
                            let pj = probs[j];
                            for (dvv, a) in dv[row(j)..row(j) + hd].iter_mut().zip(da) {
                                *dvv += pj * *a;
                            }
                        }
                        for j in 0..=i {
                            let ds = probs[j] * (dp[j] - acc) * scale;
                            if ds == T::ZERO {
                                continue;
                            }
                            let (qi, kj) = (row(i), row(j));
                            for e in 0..hd {
                                dq[qi + e] += ds * c.k[kj + e];
                                dk[kj + e] += ds * c.q[qi + e];
                            }
                        }
                    }
                }
                for p in 0..t {
                    let r0 = (st + p) * d;
                    for hh in 0..nh {
                        pass.rope.rotate(&mut dq[r0 + hh * hd..r0 + (hh + 1) * hd], p, true);
                        pass.rope.rotate(&mut dk[r0 + hh * hd..r0 + (hh + 1) * hd], p, true);
                    }
                }
            }
            let h1 = super::forward::scale_rows(&c.xhat1, self.slice(&ll.attn_norm));
            if want_params {
                gemm(Op::T, Op::N, d, n, d, &h1, &dq, T::ONE, &mut gp[ll.wq.clone()]);
                gemm(Op::T, Op::N, d, n, d, &h1, &dk, T::ONE, &mut gp[ll.wk.clone()]);
                gemm(Op::T, Op::N, d, n, d, &h1, &dv, T::ONE, &mut gp[ll.wv.clone()]);
            }
            let mut dh1 = vec![T::ZERO; n * d];
            gemm(Op::N, Op::T, n, d, d, &dq, self.slice(&ll.wq), T::ZERO, &mut dh1);
            gemm(Op::N, Op::T, n, d, d, &dk, self.slice(&ll.wk), T::ONE, &mut dh1);
            gemm(Op::N, Op::T, n, d, d, &dv, self.slice(&ll.wv), T::ONE, &mut dh1);
            {
                let dg = if want_params { Some(&mut gp[ll.attn_norm.clone()]) } else { None };
                rms_backward(&dh1, &c.xhat1, &c.inv1, self.slice(&ll.attn_norm), &mut dx, dg);
            }
            if !dx.iter().all(|v| v.is_finite()) {
                return Err(LabError::Numeric { stage: "backward", layer: li });
            }

            boundary_back(li, &mut dx, &mut gd1, &mut gd2);
        }

        if want_params {
            let e0 = lay.embed.start;
            for (r, tok) in pass.tokens.iter().enumerate() {
                let dst = e0 + *tok as usize * d;
                for j in 0..d {
                    gp[dst + j] += dx[r * d + j];
                }
            }
        }

        Ok(Gradients {
            params: want_params.then_some(gp),
            delta_first: gd1,
            delta_second: gd2,
        })
    }
}
