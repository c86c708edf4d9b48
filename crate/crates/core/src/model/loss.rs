//! Field-masked cross-entropy.
//!
//! The logit row at position `p` predicts the token at `p + 1`. Its softmax is
//! restricted to the support of that position's field (the field block plus
//! the field's permitted special), so probability outside the block is zero.

use rayon::prelude::*;

use super::params::ParamSet;
use super::real::Real;
use super::transformer::{ForwardCache, ModelState};
use super::ModelError;
use crate::vocab::{field_of, Field, FieldLayout, PAD};

/// Equal-length token rows plus a mask of real (non-PAD) tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Right-pads the sequences with PAD to a common length.
    pub fn from_sequences<S: AsRef<[u32]>>(sequences: &[S]) -> Self {
        let width = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(sequences.len());
        let mut mask = Vec::with_capacity(sequences.len());
        for s in sequences {
            let s = s.as_ref();
            let mut row = s.to_vec();
            row.resize(width, PAD);
            tokens.push(row);
            let mut m = vec![true; s.len()];
            m.resize(width, false);
            mask.push(m);
        }
        Self { tokens, mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Real tokens of row `i`: everything up to the last unmasked position.
    /// Trailing PADs cannot influence earlier positions of a causal model.
    fn live_prefix(&self, i: usize) -> &[u32] {
        let end = self.mask[i].iter().rposition(|&m| m).map_or(0, |p| p + 1);
        &self.tokens[i][..end]
    }

    fn target_mask(&self, i: usize) -> Vec<bool> {
        let live = self.live_prefix(i).len();
        (1..live).map(|p| self.mask[i][p] && self.tokens[i][p] != PAD).collect()
    }

    /// Number of positions contributing to the loss.
    pub fn num_targets(&self) -> usize {
        (0..self.len())
            .map(|i| self.target_mask(i).iter().filter(|&&m| m).count())
            .sum()
    }
}

/// Per-field NLL sums and counts; the basis for per-field perplexity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldLosses {
    pub sum: [f64; 3],
    pub count: [usize; 3],
}

impl FieldLosses {
    pub fn add(&mut self, field: Field, nll: f64) {
        self.sum[field.index()] += nll;
        self.count[field.index()] += 1;
    }

    pub fn merge(&mut self, other: &FieldLosses) {
        for i in 0..3 {
            self.sum[i] += other.sum[i];
            self.count[i] += other.count[i];
        }
    }

    pub fn mean(&self, field: Field) -> Option<f64> {
        let i = field.index();
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }

    pub fn total_mean(&self) -> Option<f64> {
        let n: usize = self.count.iter().sum();
        (n > 0).then(|| self.sum.iter().sum::<f64>() / n as f64)
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    /// Mean NLL over all predicted non-PAD positions.
    pub loss: f64,
    pub fields: FieldLosses,
    pub grads: ParamSet<T>,
}

/// Support of the field predicted at logit position `p` (i.e. of token `p + 1`).
pub fn support_for_position(layout: &FieldLayout, p: usize) -> (Field, Vec<u32>) {
    let field = field_of(p + 1).expect("p + 1 >= 1");
    (field, layout.support(field))
}

/// Cached supports for the three fields.
pub(crate) struct Supports(pub [Vec<u32>; 3]);

impl Supports {
    pub fn new(layout: &FieldLayout) -> Self {
        Self(Field::ALL.map(|f| layout.support(f)))
    }

    pub fn get(&self, field: Field) -> &[u32] {
        &self.0[field.index()]
    }
}

/// Masked softmax of `row` over `support`, as probabilities aligned with `support`.
pub fn masked_softmax<T: Real>(row: &[T], support: &[u32]) -> Vec<f64> {
    let lse = super::kernels::logsumexp_over(row, support).as_f64();
    support.iter().map(|&i| (row[i as usize].as_f64() - lse).exp()).collect()
}

/// `-ln p(target)` under the masked softmax; infinite when `target` is
/// outside the support.
pub fn masked_nll<T: Real>(row: &[T], support: &[u32], target: u32) -> T {
    if !support.contains(&target) {
        return T::infinity();
    }
    super::kernels::logsumexp_over(row, support) - row[target as usize]
}

/// NLL per position for `targets[p]` (the token predicted at logit row `p`),
/// writing `scale * (softmax - onehot)` into `dlogits` when given.
pub(crate) fn position_losses<T: Real>(
    logits: &[T],
    vocab_size: usize,
    supports: &Supports,
    targets: &[Option<u32>],
    scale: T,
    mut dlogits: Option<&mut [T]>,
) -> Vec<Option<(Field, T)>> {
    targets
        .iter()
        .enumerate()
        .map(|(p, target)| {
            let target = (*target)?;
            let field = field_of(p + 1).expect("p + 1 >= 1");
            let support = supports.get(field);
            let row = &logits[p * vocab_size..(p + 1) * vocab_size];
            let lse = super::kernels::logsumexp_over(row, support);
            let nll = lse - row[target as usize];
            if let Some(d) = dlogits.as_deref_mut() {
                let drow = &mut d[p * vocab_size..(p + 1) * vocab_size];
                for &i in support {
                    drow[i as usize] = scale * (row[i as usize] - lse).exp();
                }
                drow[target as usize] -= scale;
            }
            Some((field, nll))
        })
        .collect()
}

impl<T: Real> ModelState<T> {
    /// Forward + masked NLL for one sequence, with gradients scaled by `scale`
    /// accumulated into a fresh gradient set.
    fn sequence_loss_grad(
        &self,
        cache: &ForwardCache<T>,
        targets: &[Option<u32>],
        scale: T,
        supports: &Supports,
    ) -> (FieldLosses, ParamSet<T>) {
        let v = self.config.vocab_size;
        let mut dlogits = vec![T::zero(); cache.logits.len()];
        let nlls = position_losses(&cache.logits, v, supports, targets, scale, Some(&mut dlogits));
        let mut fields = FieldLosses::default();
        for (f, nll) in nlls.into_iter().flatten() {
            fields.add(f, nll.as_f64());
        }
        let mut grads = ParamSet::zeros_like(&self.params);
        self.backward(cache, &dlogits, &mut grads);
        (fields, grads)
    }

    /// Mean field-masked NLL over the batch's non-PAD predicted positions, its
    /// per-field components, and exact gradients.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<LossAndGrads<T>, ModelError> {
        let targets: Vec<Vec<Option<u32>>> = (0..batch.len())
            .map(|i| {
                let tokens = batch.live_prefix(i);
                batch
                    .target_mask(i)
                    .into_iter()
                    .enumerate()
                    .map(|(p, keep)| keep.then(|| tokens[p + 1]))
                    .collect()
            })
            .collect();
        self.loss_and_grads_for_targets(batch, &targets)
    }

    /// Like [`Self::loss_and_grads`] but scoring explicit `targets[i][p]` for
    /// logit row `p` of sequence `i` (used with sampled labels).
    pub fn loss_and_grads_for_targets(
        &self,
        batch: &Batch,
        targets: &[Vec<Option<u32>>],
    ) -> Result<LossAndGrads<T>, ModelError> {
        let n: usize = targets.iter().map(|t| t.iter().flatten().count()).sum();
        let scale = if n > 0 { T::one() / T::of(n as f64) } else { T::zero() };
        let supports = Supports::new(&self.layout());
        let per_seq: Vec<Result<(FieldLosses, ParamSet<T>), ModelError>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let tokens = batch.live_prefix(i);
                if tokens.is_empty() {
                    return Ok((FieldLosses::default(), ParamSet::zeros_like(&self.params)));
                }
                let cache = self.forward_cached(tokens)?;
                let mut t = targets[i].clone();
                t.resize(tokens.len(), None);
                Ok(self.sequence_loss_grad(&cache, &t, scale, &supports))
            })
            .collect();
        let mut fields = FieldLosses::default();
        let mut grads = ParamSet::zeros_like(&self.params);
        for r in per_seq {
            let (f, g) = r?;
            fields.merge(&f);
            grads.add_scaled(&g, T::one());
        }
        let loss = fields.total_mean().unwrap_or(0.0);
        Ok(LossAndGrads { loss, fields, grads })
    }

    /// Per-position NLL of each token given its prefix: entry `p` scores
    /// token `p + 1`. No gradients.
    pub fn token_nlls(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let out = self.forward(tokens)?;
        let supports = Supports::new(&self.layout());
        let targets: Vec<Option<u32>> = (0..tokens.len())
            .map(|p| tokens.get(p + 1).copied())
            .collect();
        Ok(position_losses(&out.logits, out.vocab_size, &supports, &targets, T::zero(), None)
            .into_iter()
            .flatten()
            .map(|(_, nll)| nll.as_f64())
            .collect())
    }

    /// Per-field NLL sums over a sequence (no gradients).
    pub fn field_losses(&self, tokens: &[u32]) -> Result<FieldLosses, ModelError> {
        let nlls = self.token_nlls(tokens)?;
        let mut fields = FieldLosses::default();
        for (p, nll) in nlls.into_iter().enumerate() {
            fields.add(field_of(p + 1).expect("p + 1 >= 1"), nll);
        }
        Ok(fields)
    }
}
