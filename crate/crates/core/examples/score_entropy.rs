//! Per-row entropy tables for held-out sessions; row 0 is unscored.
use auditlm::eval::entropy_report;
use auditlm::model::{init_model, ModelConfig};
use auditlm::optim::{AdamWConfig, OptimizerConfig};
use auditlm::pipeline::{prepare_corpus, Partition};
use auditlm::sessionize::{PreprocessConfig, QuantizerSpec};
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::trainer::{train, SplitSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logs = generate_logs(&ProcessSpec::reference_workflow(), 20, 800, 4)?;
    let corpus = prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default())?;
    let mut config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())?.with_width(32, 4);
    config.n_layers = 1;
    let mut state = init_model::<f32>(&config, 2)?;
    state.bind_vocab(&corpus.vocab)?;
    let cfg = TrainConfig {
        epochs: 3,
        optimizer: OptimizerConfig::AdamW(AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        }),
        ..Default::default()
    };
    let state = train(state, &corpus.sequences(Partition::Train), &[], &cfg)?.state;
    let test = &corpus.partition(Partition::Test)[..2];
    let report = entropy_report(&state, &corpus.vocab, &QuantizerSpec::default(), test)?;
    print!("{}", report.render_table());
    Ok(())
}
