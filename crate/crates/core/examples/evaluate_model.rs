//! Per-field perplexity, next-action accuracy and ROUGE-1 on the test split.
use auditlm::eval::evaluate;
use auditlm::model::{init_model, ModelConfig, Strategy};
use auditlm::pipeline::{prepare_corpus, Partition};
use auditlm::sessionize::PreprocessConfig;
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::trainer::{train, SplitSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logs = generate_logs(&ProcessSpec::reference_workflow(), 20, 600, 6)?;
    let corpus = prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default())?;
    let mut config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())?.with_width(32, 4);
    config.n_layers = 1;
    let mut state = init_model::<f32>(&config, 4)?;
    state.bind_vocab(&corpus.vocab)?;
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let state = train(state, &corpus.sequences(Partition::Train), &[], &cfg)?.state;
    let report = evaluate(&state, &corpus.sequences(Partition::Test), &Strategy::default(), 0, true)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
