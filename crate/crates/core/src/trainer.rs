//! Clinician-level splits, the training loop, and the tokenized dataset file.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{save_checkpoint, Batch, Checkpoint, FieldLosses, ModelError, ModelState};
use crate::optim::{estimate_hessian_diag, LrSchedule, OptimError, OptimState, OptimizerConfig};

pub const DATASET_MAGIC: &[u8; 4] = b"ALTK";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_EWMA_ALPHA: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least {needed} clinicians, got {got}")]
    TooFewClinicians { needed: usize, got: usize },
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    Fractions([f64; 3]),
    #[error("smoothing factor {0} outside (0, 1]")]
    Alpha(f64),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss { step: u64, last_checkpoint: Option<PathBuf> },
    #[error("dataset file: {0}")]
    Dataset(String),
    #[error("dataset was built for vocab {dataset:016x}, expected {expected:016x}")]
    VocabMismatch { dataset: u64, expected: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, val, test)
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles the distinct ids with the seed, gives `floor(f * n)` to validation
/// and test, and the remainder to training. Each output list is sorted.
pub fn stratified_split<T: Ord + Clone>(ids: &[T], spec: &SplitSpec) -> Result<Split<T>, TrainError> {
    let f = spec.fractions;
    if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::Fractions(f));
    }
    let mut unique = ids.to_vec();
    unique.sort();
    unique.dedup();
    let n = unique.len();
    if n < 3 {
        return Err(TrainError::TooFewClinicians { needed: 3, got: n });
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_val = (f[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (f[2] * n as f64 + 1e-9).floor() as usize;
    let mut test = unique.split_off(n - n_test);
    let mut val = unique.split_off(n - n_test - n_val);
    let mut train = unique;
    train.sort();
    val.sort();
    test.sort();
    Ok(Split { train, val, test })
}

/// `s_0 = x_0`, `s_t = (1 - alpha) s_{t-1} + alpha x_t`.
pub fn ewma(values: &[f64], alpha: f64) -> Result<Vec<f64>, TrainError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(TrainError::Alpha(alpha));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut s = None;
    for &x in values {
        let next = match s {
            None => x,
            Some(prev) => (1.0 - alpha) * prev + alpha * x,
        };
        s = Some(next);
        out.push(next);
    }
    Ok(out)
}

/// One tokenized chunk and the clinician it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub clinician: u32,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    pub vocab_hash: u64,
    pub sequences: Vec<Sequence>,
}

impl TokenDataset {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.vocab_hash.to_le_bytes());
        buf.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        for s in &self.sequences {
            buf.extend_from_slice(&s.clinician.to_le_bytes());
            buf.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
            for t in &s.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TrainError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| TrainError::Dataset(format!("truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != DATASET_MAGIC {
            return Err(TrainError::Dataset("bad magic".into()));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(take(4)?);
        if version != DATASET_VERSION {
            return Err(TrainError::Dataset(format!("unsupported version {version}")));
        }
        let vocab_hash = u64_of(take(8)?);
        let count = u64_of(take(8)?) as usize;
        let mut sequences = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let clinician = u32_of(take(4)?);
            let len = u32_of(take(4)?) as usize;
            let tokens = take(4 * len)?.chunks_exact(4).map(u32_of).collect();
            sequences.push(Sequence { clinician, tokens });
        }
        if take(1).is_ok() {
            return Err(TrainError::Dataset("trailing bytes".into()));
        }
        Ok(Self { vocab_hash, sequences })
    }

    pub fn load(path: &Path, expected_vocab: Option<u64>) -> Result<Self, TrainError> {
        let ds = Self::read(std::fs::File::open(path)?)?;
        if let Some(expected) = expected_vocab {
            if expected != ds.vocab_hash {
                return Err(TrainError::VocabMismatch {
                    dataset: ds.vocab_hash,
                    expected,
                });
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Sequences whose clinician is in `clinicians` (sorted).
    pub fn subset(&self, clinicians: &[u32]) -> Vec<Vec<u32>> {
        self.sequences
            .iter()
            .filter(|s| clinicians.binary_search(&s.clinician).is_ok())
            .map(|s| s.tokens.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Write a checkpoint after every epoch into this directory.
    pub checkpoint_dir: Option<PathBuf>,
    pub ewma_alpha: f64,
    /// Stored under `header` in every epoch checkpoint's metadata.
    #[serde(skip)]
    pub checkpoint_header: Option<serde_json::Value>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            grad_accum: 4,
            epochs: 5,
            optimizer: OptimizerConfig::default(),
            warmup_steps: LrSchedule::DEFAULT_WARMUP,
            min_lr_ratio: LrSchedule::DEFAULT_MIN_RATIO,
            seed: 0,
            checkpoint_dir: None,
            ewma_alpha: DEFAULT_EWMA_ALPHA,
            checkpoint_header: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n_sequences: usize) -> usize {
        n_sequences.div_ceil(self.batch_size).div_ceil(self.grad_accum)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(TrainError::Config("batch_size and grad_accum must be at least 1".into()));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(TrainError::Alpha(self.ewma_alpha));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub raw_loss: f64,
    pub ewma_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub optimizer: OptimState,
    pub trace: Vec<LossPoint>,
    pub epochs: Vec<EpochSummary>,
}

pub fn write_loss_trace<W: Write>(trace: &[LossPoint], w: W) -> Result<(), TrainError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["step", "raw_loss", "ewma_loss"]).map_err(csv_err)?;
    for p in trace {
        csv.write_record([p.step.to_string(), p.raw_loss.to_string(), p.ewma_loss.to_string()])
            .map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// Token-weighted mean NLL over `sequences`.
pub fn mean_loss(state: &ModelState, sequences: &[Vec<u32>]) -> Result<Option<f64>, ModelError> {
    let parts: Vec<FieldLosses> = sequences
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| state.field_losses(s))
        .collect::<Result<_, _>>()?;
    let mut total = FieldLosses::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.total_mean())
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Runs `config.epochs` epochs over `train`: seeded per-epoch shuffle,
/// `grad_accum` micro-batches averaged per optimizer step, warmup + cosine
/// learning rate, Sophia Hessian refresh every `hessian_interval` steps.
pub fn train(
    mut state: ModelState,
    train_set: &[Vec<u32>],
    val_set: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let steps_per_epoch = config.steps_per_epoch(train_set.len());
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let schedule = LrSchedule {
        peak: config.optimizer.lr(),
        warmup_steps: config.warmup_steps,
        total_steps,
        min_ratio: config.min_lr_ratio,
    };
    let mut optim = OptimState::new(config.optimizer, &state.params);
    let mut hessian_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let mut trace: Vec<LossPoint> = Vec::with_capacity(total_steps as usize);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let micro: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for group in micro.chunks(config.grad_accum) {
            let batches: Vec<Batch> = group
                .iter()
                .map(|idx| Batch::from_sequences(&idx.iter().map(|&i| &train_set[i][..]).collect::<Vec<_>>()))
                .collect();
            if optim.hessian_due() {
                let h = estimate_hessian_diag(&state, &batches[0], &mut hessian_rng)?;
                optim.update_hessian(&h)?;
            }
            let mut grads = crate::model::ParamSet::zeros_like(&state.params);
            let mut raw = 0.0;
            for b in &batches {
                let lg = state.loss_and_grads(b)?;
                raw += lg.loss;
                grads.add_scaled(&lg.grads, 1.0);
            }
            let k = batches.len() as f64;
            grads.scale((1.0 / k) as f32);
            raw /= k;
            let step = optim.step;
            if !raw.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    last_checkpoint,
                });
            }
            optim.step(&mut state.params, &grads, schedule.lr_at(step))?;
            if !state.params.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    last_checkpoint,
                });
            }
            let ewma_loss = match trace.last() {
                None => raw,
                Some(p) => (1.0 - config.ewma_alpha) * p.ewma_loss + config.ewma_alpha * raw,
            };
            trace.push(LossPoint {
                step: optim.step,
                raw_loss: raw,
                ewma_loss,
            });
            epoch_loss += raw;
            epoch_steps += 1;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            mean_loss(&state, val_set)?
        };
        let checkpoint = match &config.checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("epoch-{}.ckpt", epoch + 1));
                // The file's own location is left out so reruns elsewhere match byte for byte.
                let recorded = TrainConfig {
                    checkpoint_dir: None,
                    ..config.clone()
                };
                let mut meta = serde_json::json!({
                    "epoch": epoch + 1,
                    "step": optim.step,
                    "hessian_step": optim.hessian_step,
                    "train_config": recorded,
                });
                if let Some(h) = &config.checkpoint_header {
                    meta["header"] = h.clone();
                }
                let ckpt = Checkpoint {
                    state: state.clone(),
                    optimizer: optim.to_tensors(),
                    meta,
                };
                save_checkpoint(&ckpt, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
                last_checkpoint = Some(path.clone());
                Some(path)
            }
            None => None,
        };
        let train_loss = epoch_loss / epoch_steps.max(1) as f64;
        log::info!(
            "epoch {} train {:.4} val {}",
            epoch + 1,
            train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        epochs.push(EpochSummary {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            checkpoint,
        });
    }
    Ok(TrainOutcome {
        state,
        optimizer: optim,
        trace,
        epochs,
    })
}
