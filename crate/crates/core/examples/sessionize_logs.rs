//! Raw audit CSV to shifts, sessions and quantized time deltas.
use auditlm::ingest::parse_audit_csv;
use auditlm::sessionize::{preprocess_streams, write_session_dump, PreprocessConfig, QuantizerSpec};

const LOG: &str = "\
USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT
nurse1,Patient List,,1000,0
nurse1,Chart Review,P17,1004,1
nurse1,Flowsheet,P17,1050,2
nurse1,Chart Review,P22,1300,3
nurse1,Patient List,,1700,4
nurse1,Chart Review,P22,30000,5
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let streams = parse_audit_csv(LOG.as_bytes())?;
    let sessions = preprocess_streams(&streams, &PreprocessConfig::default());
    println!("{} sessions; bin labels {:?}", sessions.len(), QuantizerSpec::default().labels());
    write_session_dump(std::io::stdout().lock(), &sessions)?;
    Ok(())
}
