use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Arch, ModelConfig};
use super::kernels::{self, NormCache};
use super::params::{ParamSet, Tensor};
use super::real::Real;
use super::ModelError;
use crate::vocab::{FieldLayout, GlobalVocab};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    norm1_w: usize,
    norm1_b: Option<usize>,
    qkv_w: usize,
    qkv_b: Option<usize>,
    out_w: usize,
    out_b: Option<usize>,
    norm2_w: usize,
    norm2_b: Option<usize>,
    gate_w: Option<usize>,
    up_w: usize,
    up_b: Option<usize>,
    down_w: usize,
    down_b: Option<usize>,
}

/// Indices of every parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
struct Slots {
    tok_emb: usize,
    pos_emb: Option<usize>,
    layers: Vec<LayerSlots>,
    final_w: usize,
    final_b: Option<usize>,
    head: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum InitKind {
    Normal,
    Residual,
    Zero,
    One,
}

fn parameter_specs(config: &ModelConfig) -> (Vec<(String, Vec<usize>, InitKind)>, Slots) {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let absolute = config.arch == Arch::DecoderAbsolute;
    let mut specs: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: InitKind| {
        specs.push((name, shape, kind));
        specs.len() - 1
    };

    let tok_emb = push("tok_emb".into(), vec![v, d], InitKind::Normal);
    let pos_emb = absolute.then(|| push("pos_emb".into(), vec![config.context_len, d], InitKind::Normal));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let norm1_w = push(p("norm1.weight"), vec![d], InitKind::One);
        let norm1_b = absolute.then(|| push(p("norm1.bias"), vec![d], InitKind::Zero));
        let qkv_w = push(p("attn.qkv.weight"), vec![3 * d, d], InitKind::Normal);
        let qkv_b = absolute.then(|| push(p("attn.qkv.bias"), vec![3 * d], InitKind::Zero));
        let out_w = push(p("attn.out.weight"), vec![d, d], InitKind::Residual);
        let out_b = absolute.then(|| push(p("attn.out.bias"), vec![d], InitKind::Zero));
        let norm2_w = push(p("norm2.weight"), vec![d], InitKind::One);
        let norm2_b = absolute.then(|| push(p("norm2.bias"), vec![d], InitKind::Zero));
        let gate_w = (!absolute).then(|| push(p("mlp.gate.weight"), vec![f, d], InitKind::Normal));
        let up_w = push(p("mlp.up.weight"), vec![f, d], InitKind::Normal);
        let up_b = absolute.then(|| push(p("mlp.up.bias"), vec![f], InitKind::Zero));
        let down_w = push(p("mlp.down.weight"), vec![d, f], InitKind::Residual);
        let down_b = absolute.then(|| push(p("mlp.down.bias"), vec![d], InitKind::Zero));
        layers.push(LayerSlots {
            norm1_w,
            norm1_b,
            qkv_w,
            qkv_b,
            out_w,
            out_b,
            norm2_w,
            norm2_b,
            gate_w,
            up_w,
            up_b,
            down_w,
            down_b,
        });
    }
    let final_w = push("final_norm.weight".into(), vec![d], InitKind::One);
    let final_b = absolute.then(|| push("final_norm.bias".into(), vec![d], InitKind::Zero));
    let head = push("head.weight".into(), vec![v, d], InitKind::Normal);
    (
        specs,
        Slots {
            tok_emb,
            pos_emb,
            layers,
            final_w,
            final_b,
            head,
        },
    )
}

/// Architecture, parameters and the hash of the vocabulary they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub vocab_hash: u64,
    slots: Slots,
}

/// Deterministic initialization: N(0, 0.02) weights, residual projections
/// scaled by `1/sqrt(2 * n_layers)`, zero biases, unit norm gains.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>, ModelError> {
    config.validate()?;
    let (specs, slots) = parameter_specs(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let tensors = specs
        .into_iter()
        .map(|(name, shape, kind)| {
            let mut t = Tensor::<T>::zeros(name, shape);
            for x in &mut t.data {
                *x = match kind {
                    InitKind::Normal => T::of(normal.sample(&mut rng)),
                    InitKind::Residual => T::of(normal.sample(&mut rng) * residual_scale),
                    InitKind::Zero => T::zero(),
                    InitKind::One => T::one(),
                };
            }
            t
        })
        .collect();
    let mut config = config.clone();
    config.seed = seed;
    Ok(ModelState {
        config,
        params: ParamSet { tensors },
        vocab_hash: 0,
        slots,
    })
}

/// Per-sequence activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    n1: NormCache<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    y: Vec<T>,
    n2: NormCache<T>,
    up: Vec<T>,
    gate: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    /// `[len, vocab]`
    pub logits: Vec<T>,
}

/// Logits and final (normalized) hidden states of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    /// `[len, vocab_size]`
    pub logits: Vec<T>,
    /// `[len, d_model]`
    pub hidden: Vec<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn logits_at(&self, position: usize) -> &[T] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn hidden_at(&self, position: usize) -> &[T] {
        &self.hidden[position * self.d_model..(position + 1) * self.d_model]
    }
}

impl<T: Real> ModelState<T> {
    pub fn layout(&self) -> FieldLayout {
        self.config.layout()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Attaches a vocabulary; its size must match the output head.
    pub fn bind_vocab(&mut self, vocab: &GlobalVocab) -> Result<(), ModelError> {
        if vocab.len() != self.config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocab has {} tokens, model head has {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.vocab_hash = vocab.hash();
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &GlobalVocab) -> Result<(), ModelError> {
        if self.vocab_hash != vocab.hash() || self.config.vocab_size != vocab.len() {
            return Err(ModelError::VocabMismatch {
                model: self.vocab_hash,
                vocab: vocab.hash(),
            });
        }
        Ok(())
    }

    /// Rebuilds a state from a loaded parameter set, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>, vocab_hash: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, slots) = parameter_specs(&config);
        if specs.len() != params.tensors.len()
            || specs
                .iter()
                .zip(&params.tensors)
                .any(|(s, t)| s.0 != t.name || s.1 != t.shape || t.data.len() != s.1.iter().product::<usize>())
        {
            return Err(ModelError::Config("parameter tensors do not match the configuration".into()));
        }
        if !params.all_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            config,
            params,
            vocab_hash,
            slots,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab_hash: self.vocab_hash,
            slots: self.slots.clone(),
        }
    }

    fn p(&self, slot: usize) -> &[T] {
        &self.params.tensors[slot].data
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(t));
        }
        Ok(())
    }

    /// Causal forward pass over `tokens`.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput<T>, ModelError> {
        let cache = self.forward_cached(tokens)?;
        Ok(ForwardOutput {
            len: tokens.len(),
            vocab_size: self.config.vocab_size,
            d_model: self.config.d_model,
            hidden: cache.final_norm.out,
            logits: cache.logits,
        })
    }

    pub(crate) fn forward_cached(&self, tokens: &[u32]) -> Result<ForwardCache<T>, ModelError> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (len, d, f, h) = (tokens.len(), c.d_model, c.d_ff, c.n_heads);
        let absolute = c.arch == Arch::DecoderAbsolute;

        let mut x = vec![T::zero(); len * d];
        let emb = self.p(self.slots.tok_emb);
        for (t, &tok) in tokens.iter().enumerate() {
            x[t * d..(t + 1) * d].copy_from_slice(&emb[tok as usize * d..(tok as usize + 1) * d]);
        }
        if let Some(pos) = self.slots.pos_emb {
            let pe = self.p(pos);
            for t in 0..len {
                kernels::axpy(&mut x[t * d..(t + 1) * d], T::one(), &pe[t * d..(t + 1) * d]);
            }
        }
        let rope = (!absolute).then(|| kernels::rope_tables::<T>(len, c.head_dim()));

        let mut layers = Vec::with_capacity(c.n_layers);
        for ls in &self.slots.layers {
            let n1 = kernels::norm_forward(&x, self.p(ls.norm1_w), ls.norm1_b.map(|b| self.p(b)), d);
            let mut qkv = vec![T::zero(); len * 3 * d];
            kernels::linear_forward(&mut qkv, &n1.out, self.p(ls.qkv_w), ls.qkv_b.map(|b| self.p(b)), d, 3 * d);
            if let Some((cos, sin)) = &rope {
                let half = c.head_dim() / 2;
                for t in 0..len {
                    let (cs, sn) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
                    let row = &mut qkv[t * 3 * d..(t + 1) * 3 * d];
                    kernels::rope_apply(&mut row[..d], h, c.head_dim(), cs, sn, false);
                    kernels::rope_apply(&mut row[d..2 * d], h, c.head_dim(), cs, sn, false);
                }
            }
            let mut y = vec![T::zero(); len * d];
            let att = kernels::attention_forward(&mut y, &qkv, len, d, h);
            let mut proj = vec![T::zero(); len * d];
            kernels::linear_forward(&mut proj, &y, self.p(ls.out_w), ls.out_b.map(|b| self.p(b)), d, d);
            kernels::axpy(&mut x, T::one(), &proj);

            let n2 = kernels::norm_forward(&x, self.p(ls.norm2_w), ls.norm2_b.map(|b| self.p(b)), d);
            let mut up = vec![T::zero(); len * f];
            kernels::linear_forward(&mut up, &n2.out, self.p(ls.up_w), ls.up_b.map(|b| self.p(b)), d, f);
            let (gate, act) = match ls.gate_w {
                Some(gw) => {
                    let mut gate = vec![T::zero(); len * f];
                    kernels::linear_forward(&mut gate, &n2.out, self.p(gw), None, d, f);
                    let act = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
                    (gate, act)
                }
                None => (Vec::new(), up.iter().map(|&u| kernels::gelu(u)).collect::<Vec<_>>()),
            };
            let mut down = vec![T::zero(); len * d];
            kernels::linear_forward(&mut down, &act, self.p(ls.down_w), ls.down_b.map(|b| self.p(b)), f, d);
            kernels::axpy(&mut x, T::one(), &down);

            layers.push(LayerCache {
                n1,
                qkv,
                att,
                y,
                n2,
                up,
                gate,
                act,
            });
        }
        let final_norm = kernels::norm_forward(
            &x,
            self.p(self.slots.final_w),
            self.slots.final_b.map(|b| self.p(b)),
            d,
        );
        let mut logits = vec![T::zero(); len * c.vocab_size];
        kernels::linear_forward(&mut logits, &final_norm.out, self.p(self.slots.head), None, d, c.vocab_size);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            final_norm,
            logits,
        })
    }

    /// Accumulates parameter gradients for upstream logit gradients `dlogits`.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut ParamSet<T>) {
        let c = &self.config;
        let len = cache.tokens.len();
        let (d, f, h, v) = (c.d_model, c.d_ff, c.n_heads, c.vocab_size);
        let mut dnorm = vec![T::zero(); len * d];
        kernels::linear_backward(
            Some(&mut dnorm),
            &mut grads.tensors[self.slots.head].data,
            None,
            dlogits,
            &cache.final_norm.out,
            self.p(self.slots.head),
            d,
            v,
        );
        let mut dx = vec![T::zero(); len * d];
        self.norm_backward_into(&mut dx, grads, self.slots.final_w, self.slots.final_b, &dnorm, &cache.final_norm);

        let rope = (c.arch == Arch::DecoderRotary).then(|| kernels::rope_tables::<T>(len, c.head_dim()));
        let mut dact = vec![T::zero(); len * f];
        let mut dn = vec![T::zero(); len * d];
        let mut dtmp = vec![T::zero(); len * d];
        let mut dy = vec![T::zero(); len * d];
        let mut dqkv = vec![T::zero(); len * 3 * d];

        for (ls, lc) in self.slots.layers.iter().zip(&cache.layers).rev() {
            // MLP
            kernels::linear_backward(
                Some(&mut dact),
                &mut grads.tensors[ls.down_w].data,
                None,
                &dx,
                &lc.act,
                self.p(ls.down_w),
                f,
                d,
            );
            if let Some(b) = ls.down_b {
                accumulate_bias(&mut grads.tensors[b].data, &dx, d);
            }
            let mut dup = vec![T::zero(); len * f];
            match ls.gate_w {
                Some(gw) => {
                    let mut dgate = vec![T::zero(); len * f];
                    for i in 0..len * f {
                        let s = kernels::silu(lc.gate[i]);
                        dup[i] = dact[i] * s;
                        dgate[i] = dact[i] * lc.up[i] * kernels::silu_grad(lc.gate[i]);
                    }
                    kernels::linear_backward(
                        Some(&mut dn),
                        &mut grads.tensors[gw].data,
                        None,
                        &dgate,
                        &lc.n2.out,
                        self.p(gw),
                        d,
                        f,
                    );
                }
                None => {
                    for i in 0..len * f {
                        dup[i] = dact[i] * kernels::gelu_grad(lc.up[i]);
                    }
                    dn.iter_mut().for_each(|x| *x = T::zero());
                }
            }
            kernels::linear_backward(
                Some(&mut dtmp),
                &mut grads.tensors[ls.up_w].data,
                None,
                &dup,
                &lc.n2.out,
                self.p(ls.up_w),
                d,
                f,
            );
            if let Some(b) = ls.up_b {
                accumulate_bias(&mut grads.tensors[b].data, &dup, f);
            }
            kernels::axpy(&mut dn, T::one(), &dtmp);
            self.norm_backward_into(&mut dx, grads, ls.norm2_w, ls.norm2_b, &dn, &lc.n2);

            // attention
            kernels::linear_backward(
                Some(&mut dy),
                &mut grads.tensors[ls.out_w].data,
                None,
                &dx,
                &lc.y,
                self.p(ls.out_w),
                d,
                d,
            );
            if let Some(b) = ls.out_b {
                accumulate_bias(&mut grads.tensors[b].data, &dx, d);
            }
            kernels::attention_backward(&mut dqkv, &dy, &lc.qkv, &lc.att, len, d, h);
            if let Some((cos, sin)) = &rope {
                let half = c.head_dim() / 2;
                for t in 0..len {
                    let (cs, sn) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
                    let row = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
                    kernels::rope_apply(&mut row[..d], h, c.head_dim(), cs, sn, true);
                    kernels::rope_apply(&mut row[d..2 * d], h, c.head_dim(), cs, sn, true);
                }
            }
            kernels::linear_backward(
                Some(&mut dn),
                &mut grads.tensors[ls.qkv_w].data,
                None,
                &dqkv,
                &lc.n1.out,
                self.p(ls.qkv_w),
                d,
                3 * d,
            );
            if let Some(b) = ls.qkv_b {
                accumulate_bias(&mut grads.tensors[b].data, &dqkv, 3 * d);
            }
            self.norm_backward_into(&mut dx, grads, ls.norm1_w, ls.norm1_b, &dn, &lc.n1);
        }

        let demb = &mut grads.tensors[self.slots.tok_emb].data;
        for (t, &tok) in cache.tokens.iter().enumerate() {
            kernels::axpy(&mut demb[tok as usize * d..(tok as usize + 1) * d], T::one(), &dx[t * d..(t + 1) * d]);
        }
        if let Some(pos) = self.slots.pos_emb {
            let dpe = &mut grads.tensors[pos].data;
            kernels::axpy(&mut dpe[..len * d], T::one(), &dx);
        }
    }

    fn norm_backward_into(
        &self,
        dx: &mut [T],
        grads: &mut ParamSet<T>,
        w_slot: usize,
        b_slot: Option<usize>,
        dout: &[T],
        cache: &NormCache<T>,
    ) {
        let d = self.config.d_model;
        let mut dw = std::mem::take(&mut grads.tensors[w_slot].data);
        let mut db = b_slot.map(|b| std::mem::take(&mut grads.tensors[b].data));
        kernels::norm_backward(dx, &mut dw, db.as_deref_mut(), dout, cache, self.p(w_slot), d);
        grads.tensors[w_slot].data = dw;
        if let (Some(b), Some(db)) = (b_slot, db) {
            grads.tensors[b].data = db;
        }
    }
}

fn accumulate_bias<T: Real>(db: &mut [T], dout: &[T], dim: usize) {
    for row in dout.chunks_exact(dim) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
}
