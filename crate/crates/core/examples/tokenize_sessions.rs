//! Builds the global vocabulary and round-trips sessions through token ids.
use auditlm::sessionize::{preprocess_streams, PreprocessConfig};
use auditlm::synth::{generate_logs, ProcessSpec};
use auditlm::vocab::{build_vocab, decode_tokenized, encode_session, Field};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logs = generate_logs(&ProcessSpec::reference_workflow(), 2, 60, 1)?;
    let sessions = preprocess_streams(&logs.streams, &PreprocessConfig::default());
    let vocab = build_vocab(&sessions)?;
    let layout = vocab.layout();
    for f in Field::ALL {
        println!("{:<12} block {:?}", f.name(), layout.block(f));
    }
    let ts = encode_session(&sessions[0], &vocab);
    let shown: Vec<String> = ts.tokens.iter().take(10).map(|&t| vocab.token_text(t)).collect();
    println!("{} tokens for {} rows: {}", ts.tokens.len(), ts.rows(), shown.join(" "));
    assert_eq!(decode_tokenized(&ts, &vocab)?, sessions[0]);
    println!("vocab hash {:016x}", vocab.hash());
    Ok(())
}
