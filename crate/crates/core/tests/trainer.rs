use auditlm::model::{init_model, load_checkpoint, Arch, ModelConfig, ModelState};
use auditlm::optim::{AdamWConfig, OptimizerConfig, SophiaConfig};
use auditlm::pipeline::{prepare_corpus, Partition, PreparedCorpus};
use auditlm::sessionize::PreprocessConfig;
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::trainer::{mean_loss, train, SplitSpec, TrainConfig, TrainError};

fn corpus() -> PreparedCorpus {
    let logs = generate_logs(&ProcessSpec::cycle(5), 12, 400, 8).unwrap();
    let preprocess = PreprocessConfig {
        max_rows: 10,
        ..Default::default()
    };
    prepare_corpus(&logs.streams, &preprocess, &SplitSpec::default()).unwrap()
}

fn model(corpus: &PreparedCorpus) -> ModelState {
    let config = ModelConfig {
        arch: Arch::DecoderAbsolute,
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        context_len: 31,
        vocab_size: corpus.vocab.layout().vocab_size(),
        seed: 0,
    };
    let mut state = init_model::<f32>(&config, 2).unwrap();
    state.bind_vocab(&corpus.vocab).unwrap();
    state
}

#[test]
fn default_effective_batch_is_eight() {
    let c = TrainConfig::default();
    assert_eq!(c.effective_batch(), 8);
    assert_eq!(c.steps_per_epoch(16), 2);
    assert_eq!(c.steps_per_epoch(17), 3);
}

#[test]
fn sixteen_sequences_take_two_steps_per_epoch() {
    let corpus = corpus();
    let seqs: Vec<Vec<u32>> = corpus.sequences(Partition::Train).into_iter().take(16).collect();
    let config = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let out = train(model(&corpus), &seqs, &[], &config).unwrap();
    assert_eq!(out.trace.len(), 6);
    assert_eq!(out.trace.iter().map(|p| p.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert_eq!(out.epochs.len(), 3);
}

#[test]
fn training_lowers_validation_loss() {
    let corpus = corpus();
    let (tr, val) = (corpus.sequences(Partition::Train), corpus.sequences(Partition::Val));
    let state = model(&corpus);
    let before = mean_loss(&state, &val).unwrap().unwrap();
    for optimizer in [
        OptimizerConfig::AdamW(AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        }),
        OptimizerConfig::Sophia(SophiaConfig {
            lr: 1e-3,
            ..Default::default()
        }),
    ] {
        let config = TrainConfig {
            epochs: 3,
            optimizer,
            warmup_steps: 5,
            ..Default::default()
        };
        let out = train(state.clone(), &tr, &val, &config).unwrap();
        let after = out.epochs.last().unwrap().val_loss.unwrap();
        assert!(after < before - 0.1, "{optimizer:?}: {before} -> {after}");
        let (first, last) = (out.trace.first().unwrap().ewma_loss, out.trace.last().unwrap().ewma_loss);
        assert!(last < first);
    }
}

#[test]
fn checkpoints_are_reproducible() {
    let corpus = corpus();
    let tr = corpus.sequences(Partition::Train);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let config = TrainConfig {
                epochs: 2,
                seed: 4,
                checkpoint_dir: Some(d.path().to_path_buf()),
                ..Default::default()
            };
            let out = train(model(&corpus), &tr, &[], &config).unwrap();
            let path = out.epochs[1].checkpoint.clone().unwrap();
            assert!(d.path().join("epoch-1.ckpt").is_file());
            std::fs::read(path).unwrap()
        })
        .collect();
    assert!(bytes[0] == bytes[1]);
    let ckpt = load_checkpoint(bytes[0].as_slice(), Some(corpus.vocab.hash())).unwrap();
    assert_eq!(ckpt.meta["epoch"], 2);
    assert!(!ckpt.optimizer.is_empty());
}

#[test]
fn non_finite_parameters_stop_training() {
    let corpus = corpus();
    let mut state = model(&corpus);
    state.params.tensors[0].data[0] = f32::NAN;
    let tr = corpus.sequences(Partition::Train);
    let err = train(state, &tr, &[], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { step: 0, last_checkpoint: None }), "{err:?}");
}

#[test]
fn dataset_partitions_do_not_share_clinicians() {
    let corpus = corpus();
    let ds = corpus.dataset();
    let parts = [Partition::Train, Partition::Val, Partition::Test].map(|p| corpus.clinician_indices(p));
    let total: usize = parts.iter().map(|p| ds.subset(p).len()).sum();
    assert_eq!(total, ds.sequences.len());
    for (i, p) in parts.iter().enumerate() {
        for q in &parts[i + 1..] {
            assert!(p.iter().all(|c| !q.contains(c)));
        }
    }
    assert_eq!(ds.subset(&parts[1]), corpus.sequences(Partition::Val));
}
