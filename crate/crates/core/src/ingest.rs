//! Audit-log CSV ingestion.
//!
//! Input files carry one row per audit event with the header
//! `USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT` (any column order,
//! extra columns ignored). Rows are grouped into one [`ClinicianStream`] per
//! user, in order of first appearance, and each stream is stably sorted by
//! `(access_time, access_instant)`.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COL_USER_ID: &str = "USER_ID";
pub const COL_METRIC_NAME: &str = "METRIC_NAME";
pub const COL_PAT_ID: &str = "PAT_ID";
pub const COL_ACCESS_TIME: &str = "ACCESS_TIME";
pub const COL_ACCESS_INSTANT: &str = "ACCESS_INSTANT";

pub const HEADER: [&str; 5] = [
    COL_USER_ID,
    COL_METRIC_NAME,
    COL_PAT_ID,
    COL_ACCESS_TIME,
    COL_ACCESS_INSTANT,
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One audit-log row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAuditEvent {
    pub user_id: String,
    pub metric_name: String,
    pub pat_id: Option<String>,
    /// Epoch seconds.
    pub access_time: i64,
    /// Sub-second ordinal used to break ties within a second.
    pub access_instant: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicianStream {
    pub user_id: String,
    pub events: Vec<RawAuditEvent>,
}

impl ClinicianStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Stable sort by `(access_time, access_instant)`. Equal keys keep input order.
pub fn sort_events(mut stream: ClinicianStream) -> ClinicianStream {
    stream
        .events
        .sort_by_key(|e| (e.access_time, e.access_instant));
    stream
}

/// Parses `ACCESS_TIME` as integer epoch seconds or an ISO-8601 datetime.
/// Datetimes without an offset are taken as UTC.
pub fn parse_access_time(cell: &str) -> Option<i64> {
    let cell = cell.trim();
    if let Ok(secs) = cell.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Some(dt.timestamp());
    }
    const NAIVE_FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
    ];
    NAIVE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(cell, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

struct ColumnIndex {
    user_id: usize,
    metric_name: usize,
    pat_id: usize,
    access_time: usize,
    access_instant: usize,
}

impl ColumnIndex {
    fn from_header(header: &csv::StringRecord) -> Result<Self, IngestError> {
        let find = |name: &'static str| {
            header
                .iter()
                .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
                .ok_or(IngestError::MissingColumn(name))
        };
        Ok(Self {
            user_id: find(COL_USER_ID)?,
            metric_name: find(COL_METRIC_NAME)?,
            pat_id: find(COL_PAT_ID)?,
            access_time: find(COL_ACCESS_TIME)?,
            access_instant: find(COL_ACCESS_INSTANT)?,
        })
    }
}

/// Reads an audit-log CSV and returns one sorted stream per distinct user,
/// ordered by the user's first appearance in the file.
pub fn parse_audit_csv<R: Read>(source: R) -> Result<Vec<ClinicianStream>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .comment(Some(b'#'))
        .from_reader(source);
    let columns = ColumnIndex::from_header(reader.headers()?)?;

    let mut streams: Vec<ClinicianStream> = Vec::new();
    let mut by_user: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| IngestError::Row { line, message };
        let cell = |i: usize| record.get(i).unwrap_or("");

        let user_id = cell(columns.user_id).to_string();
        if user_id.is_empty() {
            return Err(row_err("empty USER_ID".into()));
        }
        let metric_name = cell(columns.metric_name).to_string();
        if metric_name.is_empty() {
            return Err(row_err("empty METRIC_NAME".into()));
        }
        let pat_id = match cell(columns.pat_id) {
            "" => None,
            p => Some(p.to_string()),
        };
        let raw_time = cell(columns.access_time);
        let access_time = parse_access_time(raw_time).ok_or_else(|| {
            row_err(format!(
                "ACCESS_TIME `{raw_time}` is neither epoch seconds nor ISO-8601"
            ))
        })?;
        if access_time < 0 {
            return Err(row_err(format!("negative ACCESS_TIME {access_time}")));
        }
        let raw_instant = cell(columns.access_instant).trim();
        let access_instant = raw_instant
            .parse::<i64>()
            .ok()
            .filter(|v| *v >= 0)
            .ok_or_else(|| {
                row_err(format!(
                    "ACCESS_INSTANT `{raw_instant}` is not a nonnegative integer"
                ))
            })?;

        let slot = *by_user.entry(user_id.clone()).or_insert_with(|| {
            streams.push(ClinicianStream {
                user_id: user_id.clone(),
                events: Vec::new(),
            });
            streams.len() - 1
        });
        streams[slot].events.push(RawAuditEvent {
            user_id,
            metric_name,
            pat_id,
            access_time,
            access_instant,
        });
    }

    Ok(streams.into_iter().map(sort_events).collect())
}

/// Parses several independent files concurrently.
pub fn parse_audit_files<P: AsRef<std::path::Path> + Sync>(
    paths: &[P],
) -> Result<Vec<ClinicianStream>, IngestError> {
    use rayon::prelude::*;
    let parsed: Vec<Result<Vec<ClinicianStream>, IngestError>> = paths
        .par_iter()
        .map(|p| {
            let file = std::fs::File::open(p.as_ref())?;
            parse_audit_csv(std::io::BufReader::new(file))
        })
        .collect();
    let mut merged: Vec<ClinicianStream> = Vec::new();
    let mut by_user: HashMap<String, usize> = HashMap::new();
    for streams in parsed {
        for stream in streams? {
            match by_user.get(&stream.user_id) {
                Some(&i) => merged[i].events.extend(stream.events),
                None => {
                    by_user.insert(stream.user_id.clone(), merged.len());
                    merged.push(stream);
                }
            }
        }
    }
    Ok(merged.into_iter().map(sort_events).collect())
}

/// Writes streams back out in the canonical input format (epoch-second times).
pub fn write_audit_csv<W: Write>(sink: W, streams: &[ClinicianStream]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(HEADER)?;
    for stream in streams {
        for e in &stream.events {
            writer.write_record([
                e.user_id.as_str(),
                e.metric_name.as_str(),
                e.pat_id.as_deref().unwrap_or(""),
                &e.access_time.to_string(),
                &e.access_instant.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: i64, i: i64, name: &str) -> RawAuditEvent {
        RawAuditEvent {
            user_id: "u".into(),
            metric_name: name.into(),
            pat_id: None,
            access_time: t,
            access_instant: i,
        }
    }

    #[test]
    fn groups_rows_by_user() {
        let csv = "USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT\n\
                   a,Notes viewed,p1,10,0\n\
                   b,Notes viewed,,11,0\n\
                   a,Results Review accessed,p1,12,0\n";
        let streams = parse_audit_csv(csv.as_bytes()).unwrap();
        assert_eq!(streams.len(), 2);
        assert_eq!(streams[0].user_id, "a");
        assert_eq!(streams[0].len(), 2);
        assert_eq!(streams[1].len(), 1);
        assert_eq!(streams[1].events[0].pat_id, None);
    }

    #[test]
    fn missing_pat_id_column_is_a_schema_error() {
        let csv = "USER_ID,METRIC_NAME,ACCESS_TIME,ACCESS_INSTANT\na,x,1,0\n";
        match parse_audit_csv(csv.as_bytes()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "PAT_ID"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_time_reports_line_number() {
        let csv = "USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT\n\
                   a,x,,1,0\n\
                   a,x,,yesterday,0\n";
        match parse_audit_csv(csv.as_bytes()) {
            Err(IngestError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn empty_metric_name_is_rejected() {
        let csv = "USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT\na,,,1,0\n";
        assert!(matches!(
            parse_audit_csv(csv.as_bytes()),
            Err(IngestError::Row { line: 2, .. })
        ));
    }

    #[test]
    fn iso_times_are_converted() {
        assert_eq!(parse_access_time("1970-01-01T00:01:40Z"), Some(100));
        assert_eq!(parse_access_time("1970-01-01 00:01:40"), Some(100));
        assert_eq!(parse_access_time("2019-03-01T08:00:00+01:00"), Some(1551423600));
        assert_eq!(parse_access_time("noon"), None);
    }

    #[test]
    fn quoted_fields_and_column_order() {
        let csv = "ACCESS_INSTANT,PAT_ID,METRIC_NAME,USER_ID,ACCESS_TIME,EXTRA\n\
                   0,p,\"Results, flowsheet\",u1,5,z\n";
        let s = parse_audit_csv(csv.as_bytes()).unwrap();
        assert_eq!(s[0].events[0].metric_name, "Results, flowsheet");
        assert_eq!(s[0].events[0].access_time, 5);
    }

    #[test]
    fn sort_is_lexicographic_and_stable() {
        let stream = ClinicianStream {
            user_id: "u".into(),
            events: vec![ev(10, 1, "a"), ev(5, 2, "b"), ev(5, 1, "c")],
        };
        let sorted = sort_events(stream);
        let keys: Vec<_> = sorted
            .events
            .iter()
            .map(|e| (e.access_time, e.access_instant))
            .collect();
        assert_eq!(keys, vec![(5, 1), (5, 2), (10, 1)]);

        let ties = ClinicianStream {
            user_id: "u".into(),
            events: vec![ev(1, 0, "first"), ev(1, 0, "second")],
        };
        let names: Vec<_> = sort_events(ties)
            .events
            .into_iter()
            .map(|e| e.metric_name)
            .collect();
        assert_eq!(names, ["first", "second"]);
    }

    fn arb_stream() -> impl Strategy<Value = ClinicianStream> {
        let event = (
            "[A-Za-z ,\"]{1,12}",
            proptest::option::of("[a-z0-9]{1,4}"),
            0i64..50,
            0i64..3,
        );
        proptest::collection::vec(event, 1..30).prop_map(|rows| ClinicianStream {
            user_id: "clin".into(),
            events: rows
                .into_iter()
                .map(|(m, p, t, i)| RawAuditEvent {
                    user_id: "clin".into(),
                    metric_name: m,
                    pat_id: p,
                    access_time: t,
                    access_instant: i,
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn sort_is_idempotent_permutation(stream in arb_stream()) {
            let once = sort_events(stream.clone());
            let twice = sort_events(once.clone());
            prop_assert_eq!(&once, &twice);
            let mut a: Vec<_> = stream.events.iter().map(|e| format!("{e:?}")).collect();
            let mut b: Vec<_> = once.events.iter().map(|e| format!("{e:?}")).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn write_then_parse_round_trips(stream in arb_stream()) {
            let sorted = sort_events(stream);
            let mut buf = Vec::new();
            write_audit_csv(&mut buf, std::slice::from_ref(&sorted)).unwrap();
            let back = parse_audit_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![sorted]);
        }
    }
}
