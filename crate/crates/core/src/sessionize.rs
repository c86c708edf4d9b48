//! Shift and session segmentation of clinician streams.
//!
//! A stream is cut into shifts at long gaps of inactivity, patients are
//! renumbered by first appearance within each shift, shifts are cut into
//! sessions at short gaps, and time-deltas are quantized into five
//! logarithmic bins. Sessions longer than the model can see are chunked.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ClinicianStream;

pub const DEFAULT_SHIFT_GAP_S: i64 = 21_600;
pub const DEFAULT_SESSION_GAP_S: i64 = 300;
pub const DEFAULT_PATIENT_CAP: usize = 128;
pub const NUM_BINS: usize = 5;

#[derive(Debug, Error)]
pub enum SessionizeError {
    #[error("time-delta must be nonnegative, got {0}")]
    NegativeDelta(f64),
    #[error("session dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Patient reference after per-shift renumbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatientIndex {
    /// No patient on the event; rendered `-1`.
    Absent,
    /// First-appearance index within the shift, below the patient cap.
    Index(u8),
    /// A patient beyond the cap.
    Oov,
}

impl PatientIndex {
    pub fn as_i32(self) -> Option<i32> {
        match self {
            PatientIndex::Absent => Some(-1),
            PatientIndex::Index(i) => Some(i as i32),
            PatientIndex::Oov => None,
        }
    }
}

impl fmt::Display for PatientIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatientIndex::Absent => f.write_str("-1"),
            PatientIndex::Index(i) => write!(f, "{i}"),
            PatientIndex::Oov => f.write_str("OOV"),
        }
    }
}

impl std::str::FromStr for PatientIndex {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "-1" => Ok(PatientIndex::Absent),
            "OOV" => Ok(PatientIndex::Oov),
            other => other
                .parse::<u8>()
                .ok()
                .filter(|i| (*i as usize) < DEFAULT_PATIENT_CAP)
                .map(PatientIndex::Index)
                .ok_or_else(|| format!("invalid patient index `{other}`")),
        }
    }
}

/// Five logarithmic time-delta bins over 0..=240 s.
///
/// Upper edges are `240^(k/4)` for `k = 0..=4`; a delta falls in the first bin
/// whose edge it does not exceed, and anything above 240 s lands in the top bin.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    edges: [f64; NUM_BINS],
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self::logarithmic(240.0)
    }
}

impl QuantizerSpec {
    pub fn logarithmic(max_seconds: f64) -> Self {
        let mut edges = [0.0; NUM_BINS];
        for (k, e) in edges.iter_mut().enumerate() {
            *e = max_seconds.powf(k as f64 / (NUM_BINS - 1) as f64);
        }
        Self { edges }
    }

    pub fn edges(&self) -> &[f64; NUM_BINS] {
        &self.edges
    }

    pub fn quantize(&self, delta_s: f64) -> Result<u8, SessionizeError> {
        if delta_s.is_nan() || delta_s < 0.0 {
            return Err(SessionizeError::NegativeDelta(delta_s));
        }
        Ok(self
            .edges
            .iter()
            .position(|&e| delta_s <= e)
            .unwrap_or(NUM_BINS - 1) as u8)
    }

    /// Display label: upper edge to three decimals, trailing zeros trimmed;
    /// the first bin renders as `≤ 1`.
    pub fn label(&self, bin: u8) -> String {
        let bin = bin as usize;
        assert!(bin < NUM_BINS, "bin {bin} out of range");
        if bin == 0 {
            return format!("≤ {}", trim_decimals(self.edges[0]));
        }
        trim_decimals(self.edges[bin])
    }

    pub fn labels(&self) -> Vec<String> {
        (0..NUM_BINS as u8).map(|b| self.label(b)).collect()
    }

    /// Closed interval of deltas mapping to `bin` (the top bin is unbounded).
    pub fn interval(&self, bin: u8) -> (f64, f64) {
        let bin = bin as usize;
        let lo = if bin == 0 { 0.0 } else { self.edges[bin - 1] };
        let hi = if bin == NUM_BINS - 1 {
            f64::INFINITY
        } else {
            self.edges[bin]
        };
        (lo, hi)
    }
}

fn trim_decimals(x: f64) -> String {
    let s = format!("{x:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Free-function form of [`QuantizerSpec::quantize`].
pub fn quantize_delta(delta_s: f64, spec: &QuantizerSpec) -> Result<u8, SessionizeError> {
    spec.quantize(delta_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRow {
    pub metric_name: String,
    pub pat_id: Option<String>,
    pub patient: PatientIndex,
    /// Raw epoch seconds, kept so later splits see the true gaps.
    pub access_time: i64,
    /// Seconds since the previous event in the shift; 0 for the first.
    pub delta_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub user_id: String,
    pub index: usize,
    pub rows: Vec<ShiftRow>,
    /// Patient ids in first-appearance order, up to the cap.
    pub patient_map: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionRow {
    pub metric_name: String,
    pub patient: PatientIndex,
    pub delta_bin: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub user_id: String,
    pub shift: usize,
    pub session: usize,
    pub chunk: usize,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}.{}.{}", self.user_id, self.shift, self.session, self.chunk)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Session {
    pub rows: Vec<SessionRow>,
    pub provenance: Provenance,
}

impl Session {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Cuts a sorted stream into shifts wherever the gap to the previous event is
/// at least `gap_s`. Patients are numbered with the default cap.
pub fn split_shifts(stream: &ClinicianStream, gap_s: i64) -> Vec<Shift> {
    let mut shifts: Vec<Shift> = Vec::new();
    let mut prev_time: Option<i64> = None;
    for event in &stream.events {
        let gap = prev_time.map(|p| event.access_time - p);
        let starts_shift = match gap {
            None => true,
            Some(g) => g >= gap_s,
        };
        if starts_shift {
            shifts.push(Shift {
                user_id: stream.user_id.clone(),
                index: shifts.len(),
                rows: Vec::new(),
                patient_map: Vec::new(),
            });
        }
        let delta = if starts_shift { 0.0 } else { gap.unwrap_or(0).max(0) as f64 };
        shifts
            .last_mut()
            .expect("shift pushed above")
            .rows
            .push(ShiftRow {
                metric_name: event.metric_name.clone(),
                pat_id: event.pat_id.clone(),
                patient: PatientIndex::Absent,
                access_time: event.access_time,
                delta_seconds: delta,
            });
        prev_time = Some(event.access_time);
    }
    shifts
        .into_iter()
        .map(|s| remap_patients(s, DEFAULT_PATIENT_CAP))
        .collect()
}

/// Renumbers patients by first appearance. The first `cap` distinct patients
/// get indices `0..cap`; later ones map to [`PatientIndex::Oov`].
pub fn remap_patients(mut shift: Shift, cap: usize) -> Shift {
    let cap = cap.min(DEFAULT_PATIENT_CAP);
    let mut seen: HashMap<String, PatientIndex> = HashMap::new();
    let mut map = Vec::new();
    for row in &mut shift.rows {
        row.patient = match &row.pat_id {
            None => PatientIndex::Absent,
            Some(p) => *seen.entry(p.clone()).or_insert_with(|| {
                if map.len() < cap {
                    map.push(p.clone());
                    PatientIndex::Index((map.len() - 1) as u8)
                } else {
                    PatientIndex::Oov
                }
            }),
        };
    }
    shift.patient_map = map;
    shift
}

/// Cuts a shift into sessions wherever the raw gap exceeds `gap_s`; the first
/// row of every session gets delta 0. Deltas are quantized with `quantizer`.
pub fn split_sessions(shift: &Shift, gap_s: i64, quantizer: &QuantizerSpec) -> Vec<Session> {
    let mut sessions: Vec<Session> = Vec::new();
    let mut prev_time: Option<i64> = None;
    for row in &shift.rows {
        let starts_session = match prev_time {
            None => true,
            Some(p) => row.access_time - p > gap_s,
        };
        if starts_session {
            sessions.push(Session {
                rows: Vec::new(),
                provenance: Provenance {
                    user_id: shift.user_id.clone(),
                    shift: shift.index,
                    session: sessions.len(),
                    chunk: 0,
                },
            });
        }
        let delta = if starts_session { 0.0 } else { row.delta_seconds };
        let delta_bin = quantizer
            .quantize(delta)
            .expect("shift deltas are nonnegative");
        sessions
            .last_mut()
            .expect("session pushed above")
            .rows
            .push(SessionRow {
                metric_name: row.metric_name.clone(),
                patient: row.patient,
                delta_bin,
            });
        prev_time = Some(row.access_time);
    }
    sessions
}

/// Splits a session into consecutive chunks of at most `max_rows` rows.
pub fn chunk_session(session: &Session, max_rows: usize) -> Vec<Session> {
    assert!(max_rows >= 1, "max_rows must be at least 1");
    session
        .rows
        .chunks(max_rows)
        .enumerate()
        .map(|(i, rows)| Session {
            rows: rows.to_vec(),
            provenance: Provenance {
                chunk: i,
                ..session.provenance.clone()
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub shift_gap_s: i64,
    pub session_gap_s: i64,
    pub patient_cap: usize,
    pub quantizer_max_s: f64,
    /// Rows per chunk; `(context_len - 1) / 3` for a given model.
    pub max_rows: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            shift_gap_s: DEFAULT_SHIFT_GAP_S,
            session_gap_s: DEFAULT_SESSION_GAP_S,
            patient_cap: DEFAULT_PATIENT_CAP,
            quantizer_max_s: 240.0,
            max_rows: 341,
        }
    }
}

/// Full preprocessing of one stream: shifts, patient renumbering, sessions and chunks.
pub fn preprocess_stream(stream: &ClinicianStream, config: &PreprocessConfig) -> Vec<Session> {
    let quantizer = QuantizerSpec::logarithmic(config.quantizer_max_s);
    split_shifts(stream, config.shift_gap_s)
        .into_iter()
        .map(|s| remap_patients(s, config.patient_cap))
        .flat_map(|s| split_sessions(&s, config.session_gap_s, &quantizer))
        .flat_map(|s| chunk_session(&s, config.max_rows))
        .collect()
}

pub fn preprocess_streams(streams: &[ClinicianStream], config: &PreprocessConfig) -> Vec<Session> {
    use rayon::prelude::*;
    streams
        .par_iter()
        .map(|s| preprocess_stream(s, config))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

// Session dump: one record per session.
//
//   @session<TAB>user_id<TAB>shift<TAB>session<TAB>chunk<TAB>row_count
//   metric_name<TAB>patient_index<TAB>delta_bin      (row_count lines)
//
// Tabs, newlines and backslashes inside text are backslash-escaped.

const DUMP_HEADER: &str = "@session";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            out.push(match chars.next()? {
                '\\' => '\\',
                't' => '\t',
                'n' => '\n',
                'r' => '\r',
                _ => return None,
            });
        } else {
            out.push(c);
        }
    }
    Some(out)
}

pub fn write_session_dump<W: Write>(mut sink: W, sessions: &[Session]) -> std::io::Result<()> {
    for s in sessions {
        let p = &s.provenance;
        writeln!(
            sink,
            "{DUMP_HEADER}\t{}\t{}\t{}\t{}\t{}",
            escape(&p.user_id),
            p.shift,
            p.session,
            p.chunk,
            s.rows.len()
        )?;
        for r in &s.rows {
            writeln!(sink, "{}\t{}\t{}", escape(&r.metric_name), r.patient, r.delta_bin)?;
        }
    }
    Ok(())
}

pub fn read_session_dump<R: BufRead>(source: R) -> Result<Vec<Session>, SessionizeError> {
    let mut sessions = Vec::new();
    let mut pending = 0usize;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |message: &str| SessionizeError::Dump {
            line: lineno,
            message: message.to_string(),
        };
        let parts: Vec<&str> = line.split('\t').collect();
        if pending == 0 {
            if parts.len() != 6 || parts[0] != DUMP_HEADER {
                return Err(err("expected session header"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            let provenance = Provenance {
                user_id: unescape(parts[1]).ok_or_else(|| err("bad escape"))?,
                shift: num(parts[2])?,
                session: num(parts[3])?,
                chunk: num(parts[4])?,
            };
            pending = num(parts[5])?;
            sessions.push(Session {
                rows: Vec::with_capacity(pending),
                provenance,
            });
        } else {
            if parts.len() != 3 {
                return Err(err("expected 3 tab-separated fields"));
            }
            let delta_bin = parts[2]
                .parse::<u8>()
                .ok()
                .filter(|b| (*b as usize) < NUM_BINS)
                .ok_or_else(|| err("bad delta bin"))?;
            let row = SessionRow {
                metric_name: unescape(parts[0]).ok_or_else(|| err("bad escape"))?,
                patient: parts[1].parse().map_err(|e: String| err(&e))?,
                delta_bin,
            };
            sessions.last_mut().expect("header seen").rows.push(row);
            pending -= 1;
        }
    }
    if pending != 0 {
        return Err(SessionizeError::Dump {
            line: 0,
            message: "truncated session".into(),
        });
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RawAuditEvent;
    use proptest::prelude::*;

    fn stream(times: &[i64], patients: &[Option<&str>]) -> ClinicianStream {
        ClinicianStream {
            user_id: "u".into(),
            events: times
                .iter()
                .enumerate()
                .map(|(i, &t)| RawAuditEvent {
                    user_id: "u".into(),
                    metric_name: format!("a{i}"),
                    pat_id: patients.get(i).copied().flatten().map(String::from),
                    access_time: t,
                    access_instant: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn shift_boundary_is_inclusive_at_six_hours() {
        assert_eq!(split_shifts(&stream(&[0, 21_599], &[]), DEFAULT_SHIFT_GAP_S).len(), 1);
        let shifts = split_shifts(&stream(&[0, 21_600], &[]), DEFAULT_SHIFT_GAP_S);
        assert_eq!(shifts.len(), 2);
        assert_eq!(shifts[1].rows[0].delta_seconds, 0.0);
    }

    #[test]
    fn single_event_is_one_shift() {
        let shifts = split_shifts(&stream(&[42], &[]), DEFAULT_SHIFT_GAP_S);
        assert_eq!(shifts.len(), 1);
        assert_eq!(shifts[0].rows.len(), 1);
        assert_eq!(shifts[0].rows[0].delta_seconds, 0.0);
    }

    #[test]
    fn patients_numbered_by_first_appearance() {
        let s = stream(&[0, 1, 2, 3], &[Some("p9"), Some("p3"), Some("p9"), None]);
        let shift = &split_shifts(&s, DEFAULT_SHIFT_GAP_S)[0];
        let idx: Vec<_> = shift.rows.iter().map(|r| r.patient).collect();
        use PatientIndex::*;
        assert_eq!(idx, vec![Index(0), Index(1), Index(0), Absent]);
        assert_eq!(shift.patient_map, vec!["p9", "p3"]);
    }

    #[test]
    fn patients_beyond_cap_are_oov() {
        let names: Vec<String> = (0..130).map(|i| format!("p{i}")).collect();
        let pats: Vec<Option<&str>> = names.iter().map(|s| Some(s.as_str())).collect();
        let times: Vec<i64> = (0..130).collect();
        let shift = &split_shifts(&stream(&times, &pats), DEFAULT_SHIFT_GAP_S)[0];
        assert_eq!(shift.rows[127].patient, PatientIndex::Index(127));
        assert_eq!(shift.rows[128].patient, PatientIndex::Oov);
        assert_eq!(shift.rows[129].patient, PatientIndex::Oov);
        assert_eq!(shift.patient_map.len(), 128);

        let capped = remap_patients(shift.clone(), 2);
        assert_eq!(capped.rows[2].patient, PatientIndex::Oov);
    }

    #[test]
    fn patient_free_shift_is_all_absent() {
        let shift = &split_shifts(&stream(&[0, 5, 9], &[]), DEFAULT_SHIFT_GAP_S)[0];
        assert!(shift.rows.iter().all(|r| r.patient == PatientIndex::Absent));
    }

    #[test]
    fn session_gaps() {
        let q = QuantizerSpec::default();
        let shift = &split_shifts(&stream(&[0, 200, 501], &[]), DEFAULT_SHIFT_GAP_S)[0];
        let sessions = split_sessions(shift, DEFAULT_SESSION_GAP_S, &q);
        let sizes: Vec<_> = sessions.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert_eq!(sessions[1].rows[0].delta_bin, 0);

        let shift = &split_shifts(&stream(&[0, 300], &[]), DEFAULT_SHIFT_GAP_S)[0];
        assert_eq!(split_sessions(shift, DEFAULT_SESSION_GAP_S, &q).len(), 1);

        let empty = Shift {
            user_id: "u".into(),
            index: 0,
            rows: vec![],
            patient_map: vec![],
        };
        assert!(split_sessions(&empty, DEFAULT_SESSION_GAP_S, &q).is_empty());
    }

    #[test]
    fn quantizer_examples() {
        let q = QuantizerSpec::default();
        assert_eq!(q.quantize(0.0).unwrap(), 0);
        assert_eq!(q.label(0), "≤ 1");
        assert_eq!(q.quantize(2.0).unwrap(), 1);
        assert_eq!(q.label(1), "3.936");
        assert_eq!(q.quantize(10.0).unwrap(), 2);
        assert_eq!(q.label(2), "15.492");
        assert_eq!(q.quantize(400.0).unwrap(), 4);
        assert_eq!(q.label(4), "240");
        assert_eq!(q.label(3), format!("{:.3}", 240f64.powf(0.75)));
        assert_eq!(q.label(3), "60.976");
        assert!(q.quantize(-1.0).is_err());
    }

    #[test]
    fn quantizer_edges_match_closed_form() {
        let q = QuantizerSpec::default();
        for (k, e) in q.edges().iter().enumerate() {
            let want = 240f64.powf(k as f64 / 4.0);
            assert!(((e - want) / want).abs() < 1e-9);
        }
        assert!(q.edges().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn chunk_sizes() {
        let s = Session {
            rows: (0..700)
                .map(|i| SessionRow {
                    metric_name: format!("m{i}"),
                    patient: PatientIndex::Absent,
                    delta_bin: 0,
                })
                .collect(),
            provenance: Provenance::default(),
        };
        let chunks = chunk_session(&s, 341);
        let sizes: Vec<_> = chunks.iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![341, 341, 18]);
        assert_eq!(chunks[2].provenance.chunk, 2);
        let joined: Vec<_> = chunks.iter().flat_map(|c| c.rows.clone()).collect();
        assert_eq!(joined, s.rows);

        let small = Session {
            rows: s.rows[..341].to_vec(),
            provenance: Provenance::default(),
        };
        assert_eq!(chunk_session(&small, 341).len(), 1);
        let one = Session {
            rows: s.rows[..1].to_vec(),
            provenance: Provenance::default(),
        };
        assert_eq!(chunk_session(&one, 341).len(), 1);
    }

    #[test]
    fn dump_round_trip_with_escapes() {
        let sessions = vec![Session {
            rows: vec![
                SessionRow {
                    metric_name: "tab\there\\n".into(),
                    patient: PatientIndex::Index(3),
                    delta_bin: 2,
                },
                SessionRow {
                    metric_name: "plain".into(),
                    patient: PatientIndex::Oov,
                    delta_bin: 4,
                },
            ],
            provenance: Provenance {
                user_id: "doc\t1".into(),
                shift: 2,
                session: 1,
                chunk: 0,
            },
        }];
        let mut buf = Vec::new();
        write_session_dump(&mut buf, &sessions).unwrap();
        let back = read_session_dump(buf.as_slice()).unwrap();
        assert_eq!(back, sessions);
        assert!(read_session_dump(&buf[..buf.len() - 10]).is_err());
    }

    proptest! {
        #[test]
        fn sessions_concatenate_to_shift(gaps in proptest::collection::vec(0i64..700, 1..60)) {
            let mut t = 0;
            let times: Vec<i64> = gaps.iter().map(|g| { t += g; t }).collect();
            let shift = &split_shifts(&stream(&times, &[]), DEFAULT_SHIFT_GAP_S)[0];
            let q = QuantizerSpec::default();
            let sessions = split_sessions(shift, DEFAULT_SESSION_GAP_S, &q);
            let names: Vec<_> = sessions.iter().flat_map(|s| s.rows.iter().map(|r| r.metric_name.clone())).collect();
            let expect: Vec<_> = shift.rows.iter().map(|r| r.metric_name.clone()).collect();
            prop_assert_eq!(names, expect);
            for s in &sessions {
                prop_assert!(!s.is_empty());
                prop_assert_eq!(s.rows[0].delta_bin, 0);
            }
        }

        #[test]
        fn label_interval_contains_delta(d in 0.0f64..1000.0) {
            let q = QuantizerSpec::default();
            let bin = q.quantize(d).unwrap();
            let (lo, hi) = q.interval(bin);
            prop_assert!(d <= hi);
            prop_assert!(bin == 0 || d > lo);
        }

        #[test]
        fn reversing_preserves_distinct_patient_count(pats in proptest::collection::vec(proptest::option::of(0u8..20), 1..60)) {
            let names: Vec<Option<String>> = pats.iter().map(|p| p.map(|v| format!("p{v}"))).collect();
            let refs: Vec<Option<&str>> = names.iter().map(|p| p.as_deref()).collect();
            let times: Vec<i64> = (0..refs.len() as i64).collect();
            let fwd = &split_shifts(&stream(&times, &refs), DEFAULT_SHIFT_GAP_S)[0];
            let mut rev = fwd.clone();
            rev.rows.reverse();
            let rev = remap_patients(rev, DEFAULT_PATIENT_CAP);
            prop_assert_eq!(fwd.patient_map.len(), rev.patient_map.len());
        }
    }
}
