//! Raw streams to split, tokenized chunks with a training-only vocabulary.

use serde::{Deserialize, Serialize};

use crate::ingest::ClinicianStream;
use crate::sessionize::{preprocess_streams, PreprocessConfig, Session};
use crate::trainer::{stratified_split, Sequence, Split, SplitSpec, TokenDataset, TrainError};
use crate::vocab::{build_vocab, encode_session, GlobalVocab, TokenizedSession, VocabError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Split(#[from] TrainError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub vocab: GlobalVocab,
    /// Sorted clinician ids; dataset clinician indices point here.
    pub clinicians: Vec<String>,
    pub split: Split<String>,
    pub train: Vec<TokenizedSession>,
    pub val: Vec<TokenizedSession>,
    pub test: Vec<TokenizedSession>,
}

impl PreparedCorpus {
    pub fn partition(&self, p: Partition) -> &[TokenizedSession] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Token sequences of one partition.
    pub fn sequences(&self, p: Partition) -> Vec<Vec<u32>> {
        self.partition(p).iter().map(|s| s.tokens.clone()).collect()
    }

    /// All chunks in one dataset file, tagged by clinician index.
    pub fn dataset(&self) -> TokenDataset {
        let index = |user: &str| self.clinicians.binary_search_by(|c| c.as_str().cmp(user)).expect("known clinician") as u32;
        let sequences = [&self.train, &self.val, &self.test]
            .into_iter()
            .flatten()
            .map(|s| Sequence {
                clinician: index(&s.provenance.user_id),
                tokens: s.tokens.clone(),
            })
            .collect();
        TokenDataset {
            vocab_hash: self.vocab.hash(),
            sequences,
        }
    }

    /// Clinician indices of one partition, sorted.
    pub fn clinician_indices(&self, p: Partition) -> Vec<u32> {
        let ids = match p {
            Partition::Train => &self.split.train,
            Partition::Val => &self.split.val,
            Partition::Test => &self.split.test,
        };
        let mut out: Vec<u32> = ids
            .iter()
            .map(|id| self.clinicians.binary_search(id).expect("known clinician") as u32)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Sessionizes and chunks every stream, splits clinicians, builds the
/// vocabulary from training sessions only, and encodes all partitions.
pub fn prepare_corpus(
    streams: &[ClinicianStream],
    preprocess: &PreprocessConfig,
    split: &SplitSpec,
) -> Result<PreparedCorpus, PipelineError> {
    let mut clinicians: Vec<String> = streams.iter().map(|s| s.user_id.clone()).collect();
    clinicians.sort();
    clinicians.dedup();
    let split = stratified_split(&clinicians, split)?;
    let sessions = preprocess_streams(streams, preprocess);
    let member = |ids: &[String], s: &Session| ids.binary_search(&s.provenance.user_id).is_ok();
    let vocab = build_vocab(sessions.iter().filter(|s| member(&split.train, s)))?;
    let encode = |ids: &[String]| -> Vec<TokenizedSession> {
        sessions
            .iter()
            .filter(|s| member(ids, s))
            .map(|s| encode_session(s, &vocab))
            .collect()
    };
    let (train, val, test) = (encode(&split.train), encode(&split.val), encode(&split.test));
    Ok(PreparedCorpus {
        vocab,
        clinicians,
        split,
        train,
        val,
        test,
    })
}
