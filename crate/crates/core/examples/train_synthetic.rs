//! Trains a small model with Sophia on synthetic logs and prints the loss trace.
use auditlm::model::{init_model, ModelConfig};
use auditlm::pipeline::{prepare_corpus, Partition};
use auditlm::sessionize::PreprocessConfig;
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::trainer::{train, write_loss_trace, SplitSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logs = generate_logs(&ProcessSpec::reference_workflow(), 20, 1000, 3)?;
    let corpus = prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default())?;
    let mut config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())?.with_width(32, 4);
    config.n_layers = 1;
    let mut state = init_model::<f32>(&config, 1)?;
    state.bind_vocab(&corpus.vocab)?;

    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let (tr, val) = (corpus.sequences(Partition::Train), corpus.sequences(Partition::Val));
    let out = train(state, &tr, &val, &cfg)?;
    for e in &out.epochs {
        println!("epoch {} train {:.4} val {:?}", e.epoch, e.train_loss, e.val_loss);
    }
    write_loss_trace(&out.trace[out.trace.len().saturating_sub(5)..], std::io::stdout().lock())?;
    Ok(())
}
