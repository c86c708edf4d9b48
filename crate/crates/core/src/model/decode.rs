//! Row-level decoding: three successive field-constrained selections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::dot;
use super::loss::masked_softmax;
use super::real::Real;
use super::transformer::{ForwardOutput, ModelState};
use super::ModelError;
use crate::vocab::{field_of, Field, BOS};

pub const DEFAULT_CONTRASTIVE_ALPHA: f64 = 0.6;
pub const DEFAULT_CONTRASTIVE_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    /// Sample from the `k` most likely tokens with logits divided by `temperature`.
    TopK { k: usize, temperature: f64 },
    /// Top-`k` candidates scored by `(1 - alpha) p - alpha * max cosine`
    /// between the candidate's hidden state and every prior hidden state.
    Contrastive { k: usize, alpha: f64 },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Contrastive {
            k: DEFAULT_CONTRASTIVE_K,
            alpha: DEFAULT_CONTRASTIVE_ALPHA,
        }
    }
}

/// Distribution over the field expected at the next position.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDistribution {
    pub field: Field,
    pub support: Vec<u32>,
    /// Aligned with `support`.
    pub probs: Vec<f64>,
}

impl FieldDistribution {
    /// Probability vector over the whole vocabulary; zero outside the support.
    pub fn dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for (&t, &p) in self.support.iter().zip(&self.probs) {
            out[t as usize] = p;
        }
        out
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.support
            .iter()
            .position(|&t| t == token)
            .map_or(0.0, |i| self.probs[i])
    }

    /// Support indices ordered by descending probability; ties keep token order.
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.support.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]));
        idx
    }
}

/// Keeps BOS plus the most recent tokens so that `extra` more tokens still fit.
/// Whole rows are dropped from the front, preserving field alignment.
pub fn truncate_context(tokens: &[u32], context_len: usize, extra: usize) -> Vec<u32> {
    let budget = context_len.saturating_sub(extra);
    if tokens.len() <= budget {
        return tokens.to_vec();
    }
    let over = tokens.len() - budget;
    let drop = over.div_ceil(3) * 3;
    let mut out = Vec::with_capacity(tokens.len() - drop);
    out.push(tokens[0]);
    out.extend_from_slice(&tokens[1 + drop.min(tokens.len() - 1)..]);
    out
}

fn distribution_from<T: Real>(state: &ModelState<T>, out: &ForwardOutput<T>) -> FieldDistribution {
    let field = field_of(out.len).expect("len >= 1");
    let support = state.layout().support(field);
    let probs = masked_softmax(out.logits_at(out.len - 1), &support);
    FieldDistribution { field, support, probs }
}

/// Masked next-token distribution after `context` (which must start with BOS).
pub fn next_field_distribution<T: Real>(
    state: &ModelState<T>,
    context: &[u32],
) -> Result<FieldDistribution, ModelError> {
    let ctx = truncate_context(context, state.config.context_len, 0);
    let out = state.forward(&ctx)?;
    Ok(distribution_from(state, &out))
}

fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let na = dot(a, a).as_f64().sqrt();
    let nb = dot(b, b).as_f64().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b).as_f64() / (na * nb)
}

fn select_token<T: Real, R: Rng + ?Sized>(
    state: &ModelState<T>,
    context: &[u32],
    strategy: &Strategy,
    rng: &mut R,
) -> Result<u32, ModelError> {
    let extra = usize::from(matches!(strategy, Strategy::Contrastive { .. }));
    let ctx = truncate_context(context, state.config.context_len, extra);
    let out = state.forward(&ctx)?;
    let dist = distribution_from(state, &out);
    let ranked = dist.ranked();
    match *strategy {
        Strategy::Greedy => Ok(dist.support[ranked[0]]),
        Strategy::TopK { k, temperature } => {
            let top = &ranked[..k.clamp(1, ranked.len())];
            let t = temperature.max(1e-6);
            let weights: Vec<f64> = top.iter().map(|&i| dist.probs[i].powf(1.0 / t)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Ok(dist.support[top[0]]);
            }
            let mut u = rng.random::<f64>() * total;
            for (&i, w) in top.iter().zip(&weights) {
                if u < *w {
                    return Ok(dist.support[i]);
                }
                u -= w;
            }
            Ok(dist.support[*top.last().expect("k >= 1")])
        }
        Strategy::Contrastive { k, alpha } => {
            let top = &ranked[..k.clamp(1, ranked.len())];
            if top.len() == 1 {
                return Ok(dist.support[top[0]]);
            }
            let mut best: Option<(f64, u32)> = None;
            let mut extended = ctx.clone();
            extended.push(0);
            for &i in top {
                let cand = dist.support[i];
                *extended.last_mut().expect("nonempty") = cand;
                let cand_out = state.forward(&extended)?;
                let h = cand_out.hidden_at(ctx.len());
                let penalty = (0..ctx.len())
                    .map(|j| cosine(h, out.hidden_at(j)))
                    .fold(f64::NEG_INFINITY, f64::max);
                let score = (1.0 - alpha) * dist.probs[i] - alpha * penalty;
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, cand));
                }
            }
            Ok(best.expect("at least one candidate").1)
        }
    }
}

/// Generates the next `(MN, PID, AT)` row after `context`, which must be BOS
/// followed by whole rows.
pub fn decode_row<T: Real, R: Rng + ?Sized>(
    state: &ModelState<T>,
    context: &[u32],
    strategy: &Strategy,
    rng: &mut R,
) -> Result<[u32; 3], ModelError> {
    if context.first() != Some(&BOS) || !(context.len() - 1).is_multiple_of(3) {
        return Err(ModelError::Misaligned(context.len()));
    }
    let mut ctx = context.to_vec();
    let mut row = [0u32; 3];
    for slot in &mut row {
        *slot = select_token(state, &ctx, strategy, rng)?;
        ctx.push(*slot);
    }
    Ok(row)
}

/// Extends `prompt` (BOS plus whole rows) by `rows` generated rows, sliding
/// the context window forward once it is full.
pub fn generate_rows<T: Real, R: Rng + ?Sized>(
    state: &ModelState<T>,
    prompt: &[u32],
    rows: usize,
    strategy: &Strategy,
    rng: &mut R,
) -> Result<Vec<u32>, ModelError> {
    let mut out = prompt.to_vec();
    for _ in 0..rows {
        let context = truncate_context(&out, state.config.context_len, 3);
        let row = decode_row(state, &context, strategy, rng)?;
        out.extend_from_slice(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_bos_and_alignment() {
        let tokens: Vec<u32> = std::iter::once(BOS).chain(10..40).collect();
        let t = truncate_context(&tokens, 16, 1);
        assert_eq!(t[0], BOS);
        assert!(t.len() <= 15);
        assert_eq!((tokens.len() - t.len()) % 3, 0);
        assert_eq!(t.last(), tokens.last());
        assert_eq!(truncate_context(&tokens[..7], 16, 1), tokens[..7].to_vec());
    }

    #[test]
    fn ranking_is_stable_on_ties() {
        let d = FieldDistribution {
            field: Field::AtBin,
            support: vec![5, 6, 7],
            probs: vec![0.25, 0.5, 0.25],
        };
        assert_eq!(d.ranked(), vec![1, 0, 2]);
        assert_eq!(d.dense(8)[6], 0.5);
    }
}
