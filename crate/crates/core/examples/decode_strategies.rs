//! Continues a session prompt with greedy, top-k and contrastive decoding.
use auditlm::model::{generate_rows, init_model, ModelConfig, Strategy};
use auditlm::optim::{AdamWConfig, OptimizerConfig};
use auditlm::pipeline::{prepare_corpus, Partition};
use auditlm::sessionize::PreprocessConfig;
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::trainer::{train, SplitSpec, TrainConfig};
use auditlm::vocab::decode_tokens;
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logs = generate_logs(&ProcessSpec::cycle(6), 12, 600, 5)?;
    let corpus = prepare_corpus(&logs.streams, &PreprocessConfig::default(), &SplitSpec::default())?;
    let mut config = ModelConfig::preset("gpt2-3layer", corpus.vocab.len())?.with_width(32, 4);
    config.n_layers = 1;
    let mut state = init_model::<f32>(&config, 3)?;
    state.bind_vocab(&corpus.vocab)?;
    let cfg = TrainConfig {
        epochs: 4,
        optimizer: OptimizerConfig::AdamW(AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        }),
        ..Default::default()
    };
    let state = train(state, &corpus.sequences(Partition::Train), &[], &cfg)?.state;

    let prompt = &corpus.partition(Partition::Test)[0].tokens[..1 + 3 * 2];
    for strategy in [
        Strategy::Greedy,
        Strategy::TopK { k: 5, temperature: 1.0 },
        Strategy::Contrastive { k: 5, alpha: 0.6 },
    ] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let tokens = generate_rows(&state, prompt, 4, &strategy, &mut rng)?;
        let names: Vec<String> = decode_tokens(&tokens, &corpus.vocab)?
            .rows
            .into_iter()
            .map(|r| r.metric_name)
            .collect();
        println!("{strategy:?}: {}", names.join(" > "));
    }
    Ok(())
}
