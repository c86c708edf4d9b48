//! Parameter updates: AdamW and Sophia with a Gauss-Newton-Bartlett Hessian estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{masked_softmax, Batch, ModelError, ModelState, ParamSet, Real, Tensor};
use crate::vocab::field_of;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("optimizer state does not match the parameter layout")]
    ShapeMismatch,
    #[error("update of {param}[{index}] is {delta:e}, above the clip bound {bound:e}")]
    ClipBound {
        param: String,
        index: usize,
        delta: f64,
        bound: f64,
    },
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SophiaConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Optimizer steps between Hessian refreshes.
    pub hessian_interval: u64,
}

impl Default for SophiaConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.965,
            beta2: 0.99,
            rho: 0.04,
            weight_decay: 0.1,
            eps: 1e-12,
            hessian_interval: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    AdamW(AdamWConfig),
    Sophia(SophiaConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sophia(SophiaConfig::default())
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::AdamW(c) => c.lr,
            OptimizerConfig::Sophia(c) => c.lr,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        let ok = match self {
            OptimizerConfig::AdamW(c) => c.lr > 0.0 && unit(c.beta1) && unit(c.beta2) && c.eps > 0.0,
            OptimizerConfig::Sophia(c) => {
                c.lr > 0.0 && unit(c.beta1) && unit(c.beta2) && c.rho > 0.0 && c.eps > 0.0 && c.hessian_interval >= 1
            }
        };
        if ok && self.weight_decay() >= 0.0 {
            Ok(())
        } else {
            Err(OptimError::Config(format!("{self:?}")))
        }
    }

    fn weight_decay(&self) -> f64 {
        match self {
            OptimizerConfig::AdamW(c) => c.weight_decay,
            OptimizerConfig::Sophia(c) => c.weight_decay,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Sophia only: the Hessian estimate is older than twice its refresh interval.
    pub stale_hessian: bool,
    /// Sophia only: fraction of coordinates whose update hit the clip.
    pub clipped_fraction: f64,
}

/// First moment plus second moment (AdamW) or Hessian diagonal (Sophia).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub config: OptimizerConfig,
    pub m: ParamSet<T>,
    /// AdamW: `v`. Sophia: `h`. Nonnegative.
    pub second: ParamSet<T>,
    pub step: u64,
    /// Step at which `h` was last refreshed.
    pub hessian_step: Option<u64>,
}

const M_PREFIX: &str = "optim.m/";
const SECOND_PREFIX: &str = "optim.s/";

impl<T: Real> OptimState<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            m: ParamSet::zeros_like(params),
            second: ParamSet::zeros_like(params),
            step: 0,
            hessian_step: None,
        }
    }

    /// Whether Sophia should refresh `h` before the upcoming step.
    pub fn hessian_due(&self) -> bool {
        match self.config {
            OptimizerConfig::Sophia(c) => self.step.is_multiple_of(c.hessian_interval),
            OptimizerConfig::AdamW(_) => false,
        }
    }

    /// EMA-merges a fresh diagonal estimate: `h <- beta2 h + (1 - beta2) h_hat`.
    pub fn update_hessian(&mut self, h_hat: &ParamSet<T>) -> Result<(), OptimError> {
        let OptimizerConfig::Sophia(c) = self.config else {
            return Ok(());
        };
        if !self.second.same_layout(h_hat) {
            return Err(OptimError::ShapeMismatch);
        }
        let b2 = T::of(c.beta2);
        let one_minus = T::of(1.0 - c.beta2);
        for (h, e) in self.second.tensors.iter_mut().zip(&h_hat.tensors) {
            for (h, &e) in h.data.iter_mut().zip(&e.data) {
                *h = b2 * *h + one_minus * e.max(T::zero());
            }
        }
        self.hessian_step = Some(self.step);
        Ok(())
    }

    /// One update at learning rate `lr` (the schedule's value for this step).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<StepReport, OptimError> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(OptimError::ShapeMismatch);
        }
        self.step += 1;
        let mut report = StepReport {
            step: self.step,
            ..Default::default()
        };
        match self.config {
            OptimizerConfig::AdamW(c) => self.adamw(params, grads, lr, &c),
            OptimizerConfig::Sophia(c) => {
                let age = self.step - 1 - self.hessian_step.unwrap_or(0);
                report.stale_hessian = self.hessian_step.is_none() || age >= 2 * c.hessian_interval;
                if report.stale_hessian && self.hessian_step.is_some() {
                    log::warn!("Hessian estimate is {age} steps old");
                }
                report.clipped_fraction = self.sophia(params, grads, lr, &c)?;
            }
        }
        Ok(report)
    }

    fn adamw(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64, c: &AdamWConfig) {
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, wd, eps) = (T::of(lr), T::of(c.weight_decay), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.second.tensors.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                let theta = p.data[i];
                p.data[i] = theta - lr_t * m_hat / (v_hat.sqrt() + eps) - lr_t * wd * theta;
            }
        }
    }

    /// Returns the clipped fraction; errors if any coordinate breaks the bound.
    fn sophia(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64, c: &SophiaConfig) -> Result<f64, OptimError> {
        let b1 = T::of(c.beta1);
        let (lr_t, wd, rho, eps) = (T::of(lr), T::of(c.weight_decay), T::of(c.rho), T::of(c.eps));
        let mut clipped = 0usize;
        let mut total = 0usize;
        for ((p, g), (m, h)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(&self.second.tensors))
        {
            for i in 0..p.data.len() {
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * g.data[i];
                let ratio = m.data[i] / (rho * h.data[i]).max(eps);
                let u = ratio.max(-T::one()).min(T::one());
                if u.abs() >= T::one() {
                    clipped += 1;
                }
                let theta = p.data[i];
                let delta = -lr_t * u - lr_t * wd * theta;
                let bound = lr * (1.0 + c.weight_decay * theta.as_f64().abs());
                if delta.as_f64().abs() > bound * (1.0 + 1e-6) {
                    return Err(OptimError::ClipBound {
                        param: p.name.clone(),
                        index: i,
                        delta: delta.as_f64(),
                        bound,
                    });
                }
                p.data[i] = theta + delta;
            }
            total += p.data.len();
        }
        Ok(clipped as f64 / total.max(1) as f64)
    }

    /// Moments as named tensors for the checkpoint container.
    pub fn to_tensors(&self) -> Vec<Tensor<T>> {
        let rename = |prefix: &str, t: &Tensor<T>| Tensor {
            name: format!("{prefix}{}", t.name),
            shape: t.shape.clone(),
            data: t.data.clone(),
        };
        self.m
            .tensors
            .iter()
            .map(|t| rename(M_PREFIX, t))
            .chain(self.second.tensors.iter().map(|t| rename(SECOND_PREFIX, t)))
            .collect()
    }

    /// Inverse of [`Self::to_tensors`] against the parameter layout.
    pub fn from_tensors(
        config: OptimizerConfig,
        params: &ParamSet<T>,
        tensors: &[Tensor<T>],
        step: u64,
        hessian_step: Option<u64>,
    ) -> Result<Self, OptimError> {
        let mut state = Self::new(config, params);
        for (prefix, set) in [(M_PREFIX, &mut state.m), (SECOND_PREFIX, &mut state.second)] {
            for t in &mut set.tensors {
                let name = format!("{prefix}{}", t.name);
                let src = tensors.iter().find(|s| s.name == name).ok_or(OptimError::ShapeMismatch)?;
                if src.shape != t.shape {
                    return Err(OptimError::ShapeMismatch);
                }
                t.data.clone_from(&src.data);
            }
        }
        state.step = step;
        state.hessian_step = hessian_step;
        Ok(state)
    }
}

/// `h_hat = batch_size * g ⊙ g` for a gradient taken against sampled labels.
pub fn gnb_from_gradient<T: Real>(grad: &ParamSet<T>, batch_size: usize) -> ParamSet<T> {
    let b = T::of(batch_size as f64);
    let mut out = grad.clone();
    for t in &mut out.tensors {
        for x in &mut t.data {
            *x = b * *x * *x;
        }
    }
    out
}

/// Draws an index from `probs` (which sum to about 1).
fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Gauss-Newton-Bartlett estimate of the loss Hessian diagonal: labels are
/// sampled from the model's own field-masked distribution at every position
/// that has a real target, and `h_hat = B * g_hat²` with `B` the number of
/// sequences.
pub fn estimate_hessian_diag<T: Real, R: Rng + ?Sized>(
    state: &ModelState<T>,
    batch: &Batch,
    rng: &mut R,
) -> Result<ParamSet<T>, ModelError> {
    let layout = state.layout();
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
    let targets: Vec<Vec<Option<u32>>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let live = batch.mask[i].iter().rposition(|&m| m).map_or(0, |p| p + 1);
            if live < 2 {
                return Ok(Vec::new());
            }
            let tokens = &batch.tokens[i][..live];
            let out = state.forward(tokens)?;
            let mut local = ChaCha8Rng::seed_from_u64(seeds[i]);
            Ok((0..live)
                .map(|p| {
                    let real = p + 1 < live && batch.mask[i][p + 1] && tokens[p + 1] != crate::vocab::PAD;
                    real.then(|| {
                        let support = layout.support(field_of(p + 1).expect("p + 1 >= 1"));
                        let probs = masked_softmax(out.logits_at(p), &support);
                        support[sample_index(&probs, &mut local)]
                    })
                })
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    let g = state.loss_and_grads_for_targets(batch, &targets)?;
    Ok(gnb_from_gradient(&g.grads, batch.len()))
}

/// Linear warmup to `peak`, then cosine decay to `min_ratio * peak` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub const DEFAULT_WARMUP: u64 = 100;
    pub const DEFAULT_MIN_RATIO: f64 = 0.1;

    pub fn new(peak: f64, total_steps: u64) -> Self {
        Self {
            peak,
            warmup_steps: Self::DEFAULT_WARMUP,
            total_steps,
            min_ratio: Self::DEFAULT_MIN_RATIO,
        }
    }

    pub fn constant(peak: f64) -> Self {
        Self {
            peak,
            warmup_steps: 0,
            total_steps: 0,
            min_ratio: 1.0,
        }
    }

    /// Rate for 0-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak * self.min_ratio;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let min = self.peak * self.min_ratio;
        min + (self.peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
