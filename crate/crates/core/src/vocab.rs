//! Field vocabularies and the global token space.
//!
//! Global ids are laid out as
//!
//! ```text
//! [0, 4)                 PAD, BOS, UNK_MN, PAT_OOV
//! [4, 4 + n)             METRIC_NAME tokens (sorted action names)
//! [4 + n, 4 + n + 129)   PAT_ID tokens: -1, 0, 1, ..., 127
//! [.., .. + 5)           AT_BIN tokens: one per time-delta bin
//! ```
//!
//! A tokenized session is `[BOS, (mn, pid, at) x rows]`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sessionize::{PatientIndex, Provenance, QuantizerSpec, Session, SessionRow, NUM_BINS};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const UNK_MN: u32 = 2;
pub const PAT_OOV: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[BOS]", "[UNK_MN]", "[PAT_OOV]"];

/// Patient tokens: `-1` plus indices below the cap.
pub const NUM_PATIENT_TOKENS: usize = 129;
pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Metric name produced when decoding [`UNK_MN`].
pub const UNKNOWN_METRIC: &str = "[UNK_MN]";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token {token} at position {position} is not a valid {expected} token")]
    Layout {
        position: usize,
        token: u32,
        expected: &'static str,
    },
    #[error("token sequence must start with BOS")]
    MissingBos,
    #[error("token sequence ends mid-row (length {0})")]
    PartialRow(usize),
    #[error("vocab file: {0}")]
    Format(String),
    #[error("vocab hash mismatch: file says {stored:016x}, content hashes to {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    #[serde(rename = "METRIC_NAME")]
    MetricName,
    #[serde(rename = "PAT_ID")]
    PatId,
    #[serde(rename = "AT_BIN")]
    AtBin,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::MetricName, Field::PatId, Field::AtBin];

    pub fn name(self) -> &'static str {
        match self {
            Field::MetricName => "METRIC_NAME",
            Field::PatId => "PAT_ID",
            Field::AtBin => "AT_BIN",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Field of the token at `position` in a tokenized session; `None` for BOS.
pub fn field_of(position: usize) -> Option<Field> {
    if position == 0 {
        return None;
    }
    Some(Field::ALL[(position - 1) % 3])
}

/// Block boundaries of the global id space. Fully determined by the number of
/// metric-name tokens, so a model only needs its vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldLayout {
    pub metric_count: usize,
}

impl FieldLayout {
    pub fn new(metric_count: usize) -> Self {
        Self { metric_count }
    }

    pub fn from_vocab_size(vocab_size: usize) -> Option<Self> {
        vocab_size
            .checked_sub(NUM_SPECIALS + NUM_PATIENT_TOKENS + NUM_BINS)
            .map(Self::new)
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.metric_count + NUM_PATIENT_TOKENS + NUM_BINS
    }

    pub fn offset(&self, field: Field) -> usize {
        match field {
            Field::MetricName => NUM_SPECIALS,
            Field::PatId => NUM_SPECIALS + self.metric_count,
            Field::AtBin => NUM_SPECIALS + self.metric_count + NUM_PATIENT_TOKENS,
        }
    }

    pub fn block_len(&self, field: Field) -> usize {
        match field {
            Field::MetricName => self.metric_count,
            Field::PatId => NUM_PATIENT_TOKENS,
            Field::AtBin => NUM_BINS,
        }
    }

    pub fn block(&self, field: Field) -> std::ops::Range<usize> {
        let o = self.offset(field);
        o..o + self.block_len(field)
    }

    /// Special token allowed at positions of `field`.
    pub fn permitted_special(field: Field) -> Option<u32> {
        match field {
            Field::MetricName => Some(UNK_MN),
            Field::PatId => Some(PAT_OOV),
            Field::AtBin => None,
        }
    }

    /// Every global id the model may emit at a position of `field`: the
    /// permitted special (if any) followed by the field block.
    pub fn support(&self, field: Field) -> Vec<u32> {
        Self::permitted_special(field)
            .into_iter()
            .chain(self.block(field).map(|i| i as u32))
            .collect()
    }

    pub fn in_support(&self, field: Field, token: u32) -> bool {
        Self::permitted_special(field) == Some(token) || self.block(field).contains(&(token as usize))
    }

    /// `(field, local id)` of a non-special global id.
    pub fn local(&self, token: u32) -> Option<(Field, usize)> {
        let t = token as usize;
        Field::ALL
            .iter()
            .find(|f| self.block(**f).contains(&t))
            .map(|&f| (f, t - self.offset(f)))
    }

    pub fn global(&self, field: Field, local: usize) -> Option<u32> {
        (local < self.block_len(field)).then(|| (self.offset(field) + local) as u32)
    }
}

/// Concatenation of the specials and the three field vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalVocab {
    metric_names: Vec<String>,
    hash: u64,
}

#[derive(Serialize, Deserialize)]
struct FieldTokens {
    name: Field,
    tokens: Vec<String>,
}

#[derive(Serialize)]
struct CanonicalVocab<'a> {
    version: u32,
    specials: Vec<&'a str>,
    fields: Vec<FieldTokens>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    fields: Vec<FieldTokens>,
    hash: String,
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn patient_tokens() -> Vec<String> {
    std::iter::once("-1".to_string())
        .chain((0..NUM_PATIENT_TOKENS - 1).map(|i| i.to_string()))
        .collect()
}

impl GlobalVocab {
    pub fn from_metric_names<I, S>(names: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut vocab = Self {
            metric_names: set.into_iter().collect(),
            hash: 0,
        };
        vocab.hash = fnv1a64(vocab.canonical_json().as_bytes());
        Ok(vocab)
    }

    pub fn layout(&self) -> FieldLayout {
        FieldLayout::new(self.metric_names.len())
    }

    pub fn len(&self) -> usize {
        self.layout().vocab_size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn metric_names(&self) -> &[String] {
        &self.metric_names
    }

    pub fn metric_id(&self, name: &str) -> Option<u32> {
        self.metric_names
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(|i| (NUM_SPECIALS + i) as u32)
    }

    fn field_tokens(&self) -> Vec<FieldTokens> {
        let at = QuantizerSpec::default().labels();
        vec![
            FieldTokens {
                name: Field::MetricName,
                tokens: self.metric_names.clone(),
            },
            FieldTokens {
                name: Field::PatId,
                tokens: patient_tokens(),
            },
            FieldTokens {
                name: Field::AtBin,
                tokens: at,
            },
        ]
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(&CanonicalVocab {
            version: VOCAB_FORMAT_VERSION,
            specials: SPECIAL_NAMES.to_vec(),
            fields: self.field_tokens(),
        })
        .expect("vocab serializes")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            fields: self.field_tokens(),
            hash: format!("{:016x}", self.hash),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    /// Parses a vocab file and verifies its stored hash.
    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(VocabError::Format(format!("unsupported version {}", file.version)));
        }
        if file.specials != SPECIAL_NAMES {
            return Err(VocabError::Format("unexpected special tokens".into()));
        }
        let names: Vec<Field> = file.fields.iter().map(|f| f.name).collect();
        if names != Field::ALL {
            return Err(VocabError::Format("fields must be METRIC_NAME, PAT_ID, AT_BIN".into()));
        }
        let mut fields = file.fields.into_iter();
        let metric = fields.next().expect("checked").tokens;
        if !metric.windows(2).all(|w| w[0] < w[1]) {
            return Err(VocabError::Format("METRIC_NAME tokens must be sorted and unique".into()));
        }
        let vocab = Self::from_metric_names(metric)?;
        if fields.next().expect("checked").tokens != patient_tokens() {
            return Err(VocabError::Format("unexpected PAT_ID tokens".into()));
        }
        if fields.next().expect("checked").tokens != QuantizerSpec::default().labels() {
            return Err(VocabError::Format("unexpected AT_BIN tokens".into()));
        }
        let stored = u64::from_str_radix(file.hash.trim_start_matches("0x"), 16)
            .map_err(|_| VocabError::Format(format!("bad hash `{}`", file.hash)))?;
        if stored != vocab.hash {
            return Err(VocabError::HashMismatch {
                stored,
                computed: vocab.hash,
            });
        }
        Ok(vocab)
    }

    fn patient_token(&self, p: PatientIndex) -> u32 {
        let off = self.layout().offset(Field::PatId) as u32;
        match p {
            PatientIndex::Absent => off,
            PatientIndex::Index(i) => off + 1 + i as u32,
            PatientIndex::Oov => PAT_OOV,
        }
    }

    fn row_tokens(&self, row: &SessionRow) -> [u32; 3] {
        let at_off = self.layout().offset(Field::AtBin) as u32;
        [
            self.metric_id(&row.metric_name).unwrap_or(UNK_MN),
            self.patient_token(row.patient),
            at_off + row.delta_bin as u32,
        ]
    }

    /// Decodes the token at a position of `field` into its row value.
    fn decode_token(&self, field: Field, token: u32, position: usize) -> Result<DecodedToken, VocabError> {
        let layout = self.layout();
        let bad = || VocabError::Layout {
            position,
            token,
            expected: field.name(),
        };
        if !layout.in_support(field, token) {
            return Err(bad());
        }
        Ok(match field {
            Field::MetricName if token == UNK_MN => DecodedToken::Metric(UNKNOWN_METRIC.into()),
            Field::MetricName => {
                DecodedToken::Metric(self.metric_names[token as usize - NUM_SPECIALS].clone())
            }
            Field::PatId if token == PAT_OOV => DecodedToken::Patient(PatientIndex::Oov),
            Field::PatId => {
                let local = token as usize - layout.offset(Field::PatId);
                DecodedToken::Patient(if local == 0 {
                    PatientIndex::Absent
                } else {
                    PatientIndex::Index((local - 1) as u8)
                })
            }
            Field::AtBin => DecodedToken::Bin((token as usize - layout.offset(Field::AtBin)) as u8),
        })
    }

    /// Human-readable rendering of a single token.
    pub fn token_text(&self, token: u32) -> String {
        if (token as usize) < NUM_SPECIALS {
            return SPECIAL_NAMES[token as usize].to_string();
        }
        match self.layout().local(token) {
            Some((Field::MetricName, i)) => self.metric_names[i].clone(),
            Some((Field::PatId, 0)) => "-1".into(),
            Some((Field::PatId, i)) => (i - 1).to_string(),
            Some((Field::AtBin, i)) => QuantizerSpec::default().label(i as u8),
            None => format!("<{token}>"),
        }
    }
}

enum DecodedToken {
    Metric(String),
    Patient(PatientIndex),
    Bin(u8),
}

/// Builds the vocabulary from training sessions. Metric names are sorted
/// lexicographically; the patient and bin blocks are fixed.
pub fn build_vocab<'a, I>(training_sessions: I) -> Result<GlobalVocab, VocabError>
where
    I: IntoIterator<Item = &'a Session>,
{
    GlobalVocab::from_metric_names(
        training_sessions
            .into_iter()
            .flat_map(|s| s.rows.iter().map(|r| r.metric_name.as_str())),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSession {
    pub tokens: Vec<u32>,
    pub provenance: Provenance,
}

impl TokenizedSession {
    pub fn rows(&self) -> usize {
        self.tokens.len().saturating_sub(1) / 3
    }
}

pub fn encode_session(session: &Session, vocab: &GlobalVocab) -> TokenizedSession {
    let mut tokens = Vec::with_capacity(1 + 3 * session.rows.len());
    tokens.push(BOS);
    for row in &session.rows {
        tokens.extend_from_slice(&vocab.row_tokens(row));
    }
    TokenizedSession {
        tokens,
        provenance: session.provenance.clone(),
    }
}

/// Checks that every token sits in its position's field block.
pub fn validate_layout(tokens: &[u32], layout: &FieldLayout) -> Result<(), VocabError> {
    match tokens.first() {
        Some(&BOS) => {}
        _ => return Err(VocabError::MissingBos),
    }
    for (p, &t) in tokens.iter().enumerate().skip(1) {
        let field = field_of(p).expect("p >= 1");
        if !layout.in_support(field, t) {
            return Err(VocabError::Layout {
                position: p,
                token: t,
                expected: field.name(),
            });
        }
    }
    Ok(())
}

pub fn decode_tokens(ids: &[u32], vocab: &GlobalVocab) -> Result<Session, VocabError> {
    decode_with_provenance(ids, vocab, Provenance::default())
}

pub fn decode_tokenized(ts: &TokenizedSession, vocab: &GlobalVocab) -> Result<Session, VocabError> {
    decode_with_provenance(&ts.tokens, vocab, ts.provenance.clone())
}

fn decode_with_provenance(
    ids: &[u32],
    vocab: &GlobalVocab,
    provenance: Provenance,
) -> Result<Session, VocabError> {
    if ids.first() != Some(&BOS) {
        return Err(VocabError::MissingBos);
    }
    if !(ids.len() - 1).is_multiple_of(3) {
        return Err(VocabError::PartialRow(ids.len()));
    }
    let mut rows = Vec::with_capacity((ids.len() - 1) / 3);
    for (r, chunk) in ids[1..].chunks_exact(3).enumerate() {
        let base = 1 + 3 * r;
        let metric_name = match vocab.decode_token(Field::MetricName, chunk[0], base)? {
            DecodedToken::Metric(m) => m,
            _ => unreachable!(),
        };
        let patient = match vocab.decode_token(Field::PatId, chunk[1], base + 1)? {
            DecodedToken::Patient(p) => p,
            _ => unreachable!(),
        };
        let delta_bin = match vocab.decode_token(Field::AtBin, chunk[2], base + 2)? {
            DecodedToken::Bin(b) => b,
            _ => unreachable!(),
        };
        rows.push(SessionRow {
            metric_name,
            patient,
            delta_bin,
        });
    }
    Ok(Session { rows, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(m: &str, p: PatientIndex, b: u8) -> SessionRow {
        SessionRow {
            metric_name: m.into(),
            patient: p,
            delta_bin: b,
        }
    }

    fn session(rows: Vec<SessionRow>) -> Session {
        Session {
            rows,
            provenance: Provenance::default(),
        }
    }

    fn small_vocab() -> GlobalVocab {
        build_vocab(&[session(vec![
            row("Notes viewed", PatientIndex::Index(0), 1),
            row("Results Review accessed", PatientIndex::Absent, 0),
            row("Haiku login", PatientIndex::Absent, 2),
            row("Notes viewed", PatientIndex::Index(1), 0),
        ])])
        .unwrap()
    }

    #[test]
    fn block_sizes() {
        let v = small_vocab();
        assert_eq!(v.len(), 4 + 3 + 129 + 5);
        let l = v.layout();
        assert_eq!(l.block(Field::MetricName), 4..7);
        assert_eq!(l.block(Field::PatId), 7..136);
        assert_eq!(l.block(Field::AtBin), 136..141);
        assert_eq!(v.metric_names(), ["Haiku login", "Notes viewed", "Results Review accessed"]);
    }

    #[test]
    fn empty_corpus_errors() {
        let none: Vec<Session> = vec![];
        assert!(matches!(build_vocab(&none), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn hash_is_deterministic_and_content_sensitive() {
        assert_eq!(small_vocab().hash(), small_vocab().hash());
        let other = GlobalVocab::from_metric_names(["Haiku login", "Notes viewed"]).unwrap();
        assert_ne!(other.hash(), small_vocab().hash());
        // FNV-1a reference vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn encode_lengths_and_unknowns() {
        let v = small_vocab();
        let s = session(vec![
            row("Notes viewed", PatientIndex::Index(0), 1),
            row("Never seen", PatientIndex::Oov, 4),
        ]);
        let t = encode_session(&s, &v);
        assert_eq!(t.tokens.len(), 7);
        assert_eq!(t.tokens[0], BOS);
        assert_eq!(t.tokens[4], UNK_MN);
        assert_eq!(t.tokens[5], PAT_OOV);
        validate_layout(&t.tokens, &v.layout()).unwrap();

        let long = session((0..341).map(|_| row("Haiku login", PatientIndex::Absent, 0)).collect());
        assert_eq!(encode_session(&long, &v).tokens.len(), 1024);
    }

    #[test]
    fn decode_examples() {
        let v = small_vocab();
        assert!(decode_tokens(&[BOS], &v).unwrap().rows.is_empty());
        let pid = v.layout().offset(Field::PatId) as u32;
        match decode_tokens(&[BOS, pid, pid, 136], &v) {
            Err(VocabError::Layout { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected layout error, got {other:?}"),
        }
        assert!(matches!(decode_tokens(&[BOS, 4, pid], &v), Err(VocabError::PartialRow(3))));
    }

    #[test]
    fn field_cycle() {
        assert_eq!(field_of(0), None);
        assert_eq!(field_of(1), Some(Field::MetricName));
        assert_eq!(field_of(2), Some(Field::PatId));
        assert_eq!(field_of(6), Some(Field::AtBin));
        assert_eq!(field_of(7), Some(Field::MetricName));
    }

    #[test]
    fn global_local_bijection() {
        let l = FieldLayout::new(11);
        for t in NUM_SPECIALS as u32..l.vocab_size() as u32 {
            let (f, i) = l.local(t).unwrap();
            assert_eq!(l.global(f, i), Some(t));
        }
        for t in 0..NUM_SPECIALS as u32 {
            assert_eq!(l.local(t), None);
        }
        assert_eq!(FieldLayout::from_vocab_size(l.vocab_size()), Some(l));
    }

    #[test]
    fn json_round_trip_and_tamper_detection() {
        let v = small_vocab();
        let text = v.to_json();
        assert_eq!(GlobalVocab::from_json(&text).unwrap(), v);
        let tampered = text.replace("Haiku login", "Haiku logout");
        assert!(matches!(
            GlobalVocab::from_json(&tampered),
            Err(VocabError::HashMismatch { .. })
        ));
    }

    fn arb_session() -> impl Strategy<Value = Session> {
        let names = ["Haiku login", "Notes viewed", "Results Review accessed"];
        let patient = prop_oneof![
            Just(PatientIndex::Absent),
            Just(PatientIndex::Oov),
            (0u8..128).prop_map(PatientIndex::Index),
        ];
        proptest::collection::vec((0usize..3, patient, 0u8..5), 0..40).prop_map(move |rows| {
            session(rows.into_iter().map(|(m, p, b)| row(names[m], p, b)).collect())
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in arb_session()) {
            let v = small_vocab();
            let t = encode_session(&s, &v);
            prop_assert_eq!(t.tokens.len(), 1 + 3 * s.len());
            prop_assert_eq!(decode_tokens(&t.tokens, &v).unwrap(), s);
        }
    }
}
