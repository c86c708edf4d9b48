//! Synthetic audit logs from first-order Markov workflow processes whose
//! entropy rate is known in closed form.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{write_audit_csv, ClinicianStream, IngestError, RawAuditEvent};
use crate::sessionize::{QuantizerSpec, DEFAULT_PATIENT_CAP, DEFAULT_SESSION_GAP_S, DEFAULT_SHIFT_GAP_S, NUM_BINS};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid process: {0}")]
    Invalid(String),
    #[error("transition matrix is reducible")]
    Reducible,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProcess {
    /// Distinct patients available in each shift.
    pub pool_size: usize,
    /// Chance that a patient-bearing event moves to a different patient.
    pub switch_prob: f64,
    /// Actions that never reference a patient (PAT_ID empty).
    #[serde(default)]
    pub patient_free: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cadence {
    pub session_rows_min: usize,
    pub session_rows_max: usize,
    pub sessions_per_shift: usize,
    /// Gap between sessions of one shift (seconds).
    pub session_gap_s: i64,
    /// Gap between shifts (seconds).
    pub shift_gap_s: i64,
}

impl Default for Cadence {
    fn default() -> Self {
        Self {
            session_rows_min: 10,
            session_rows_max: 40,
            sessions_per_shift: 4,
            session_gap_s: 600,
            shift_gap_s: 12 * 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub actions: Vec<String>,
    /// Distribution of each session's first action.
    pub initial: Vec<f64>,
    /// Row-stochastic `transitions[i][j] = P(next = j | current = i)`.
    pub transitions: Vec<Vec<f64>>,
    /// `delta_bins[j]`: distribution over the 5 time-delta bins of an event with action `j`.
    pub delta_bins: Vec<Vec<f64>>,
    pub patients: PatientProcess,
    #[serde(default)]
    pub cadence: Cadence,
    #[serde(default)]
    pub seed: u64,
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<(), SynthError> {
    if p.len() != len {
        return Err(SynthError::Invalid(format!("{name} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(SynthError::Invalid(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(SynthError::Invalid(format!("{name} sums to {s}")));
    }
    Ok(())
}

impl ProcessSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.actions.len();
        if n == 0 {
            return Err(SynthError::Invalid("no actions".into()));
        }
        let mut names = self.actions.clone();
        names.sort();
        names.dedup();
        if names.len() != n || self.actions.iter().any(|a| a.is_empty()) {
            return Err(SynthError::Invalid("action names must be distinct and nonempty".into()));
        }
        check_distribution("initial", &self.initial, n)?;
        if self.transitions.len() != n || self.delta_bins.len() != n {
            return Err(SynthError::Invalid("need one transition row and one delta row per action".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            check_distribution(&format!("transitions[{i}]"), row, n)?;
        }
        for (i, row) in self.delta_bins.iter().enumerate() {
            check_distribution(&format!("delta_bins[{i}]"), row, NUM_BINS)?;
        }
        let p = &self.patients;
        if p.pool_size == 0 || p.pool_size > DEFAULT_PATIENT_CAP {
            return Err(SynthError::Invalid(format!("pool_size {} outside 1..=128", p.pool_size)));
        }
        if !(0.0..=1.0).contains(&p.switch_prob) {
            return Err(SynthError::Invalid("switch_prob outside [0, 1]".into()));
        }
        if !p.patient_free.is_empty() && p.patient_free.len() != n {
            return Err(SynthError::Invalid("patient_free needs one flag per action".into()));
        }
        let c = &self.cadence;
        if c.session_rows_min == 0 || c.session_rows_min > c.session_rows_max || c.sessions_per_shift == 0 {
            return Err(SynthError::Invalid("bad session cadence".into()));
        }
        if c.session_gap_s <= DEFAULT_SESSION_GAP_S || c.session_gap_s >= DEFAULT_SHIFT_GAP_S {
            return Err(SynthError::Invalid("session gap must lie strictly between 300 s and 6 h".into()));
        }
        if c.shift_gap_s < DEFAULT_SHIFT_GAP_S {
            return Err(SynthError::Invalid("shift gap must be at least 6 h".into()));
        }
        Ok(())
    }

    fn patient_free(&self, action: usize) -> bool {
        self.patients.patient_free.get(action).copied().unwrap_or(false)
    }

    /// Uniform process over `n` actions with uniform time bins.
    pub fn uniform(n: usize) -> Self {
        let u = vec![1.0 / n as f64; n];
        Self {
            actions: (0..n).map(|i| format!("action {i:02}")).collect(),
            initial: u.clone(),
            transitions: vec![u; n],
            delta_bins: vec![vec![1.0 / NUM_BINS as f64; NUM_BINS]; n],
            patients: PatientProcess {
                pool_size: 4,
                switch_prob: 0.2,
                patient_free: vec![false; n],
            },
            cadence: Cadence::default(),
            seed: 0,
        }
    }

    /// Deterministic cycle `0 -> 1 -> ... -> n-1 -> 0` with a fixed bin per
    /// action and no patients.
    pub fn cycle(n: usize) -> Self {
        let mut spec = Self::uniform(n);
        spec.transitions = (0..n)
            .map(|i| (0..n).map(|j| if j == (i + 1) % n { 1.0 } else { 0.0 }).collect())
            .collect();
        spec.delta_bins = (0..n)
            .map(|i| (0..NUM_BINS).map(|b| if b == i % 4 { 1.0 } else { 0.0 }).collect())
            .collect();
        spec.patients.patient_free = vec![true; n];
        spec
    }
}

/// Layout of [`ProcessSpec::reference_workflow`].
pub mod reference {
    pub const REGULAR: usize = 14;
    pub const LEADER: usize = 14;
    pub const FOLLOWER: usize = 15;
    pub const INTERRUPTS: [usize; 4] = [16, 17, 18, 19];
    pub const INTERRUPT_PROB: f64 = 0.02;
    pub const LEADER_PROB: f64 = 0.1;
    /// Successor offsets and weights among regular actions.
    pub const SUCCESSORS: [(usize, f64); 4] = [(1, 0.4), (2, 0.3), (5, 0.2), (7, 0.1)];
}

impl ProcessSpec {
    /// Twenty-action workflow: 14 regular actions with four likely successors
    /// each, a leader always followed by a patient-free follower in a fixed
    /// time bin, and four interrupts entered uniformly with total probability
    /// 0.02 from any regular action. Sessions start from the stationary
    /// distribution, so every transition has the chain's entropy rate.
    pub fn reference_workflow() -> Self {
        use reference::*;
        let n = 20;
        let mut t = vec![vec![0.0; n]; n];
        let regular_mass = 1.0 - INTERRUPT_PROB - LEADER_PROB;
        for (i, row) in t.iter_mut().enumerate().take(REGULAR) {
            for &(off, w) in &SUCCESSORS {
                row[(i + off) % REGULAR] += regular_mass * w;
            }
            row[LEADER] = LEADER_PROB;
            for &k in &INTERRUPTS {
                row[k] = INTERRUPT_PROB / INTERRUPTS.len() as f64;
            }
        }
        t[LEADER][FOLLOWER] = 1.0;
        for &from in std::iter::once(&FOLLOWER).chain(INTERRUPTS.iter()) {
            for j in 0..REGULAR {
                t[from][j] = 1.0 / REGULAR as f64;
            }
        }
        let mut names: Vec<String> = (0..REGULAR).map(|i| format!("Workflow step {i:02}")).collect();
        names.push("Order entry opened".into());
        names.push("Order entry signed".into());
        names.extend(INTERRUPTS.iter().map(|k| format!("Interrupt {}", k - INTERRUPTS[0])));
        let mut delta_bins = vec![vec![0.3, 0.3, 0.2, 0.15, 0.05]; n];
        delta_bins[LEADER] = vec![0.2, 0.4, 0.3, 0.1, 0.0];
        delta_bins[FOLLOWER] = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        for &k in &INTERRUPTS {
            delta_bins[k] = vec![0.2; NUM_BINS];
        }
        let mut patient_free = vec![false; n];
        patient_free[FOLLOWER] = true;
        let initial = stationary_distribution(&t).expect("irreducible by construction");
        Self {
            actions: names,
            initial,
            transitions: t,
            delta_bins,
            patients: PatientProcess {
                pool_size: 6,
                switch_prob: 0.1,
                patient_free,
            },
            cadence: Cadence::default(),
            seed: 0,
        }
    }
}

/// Integer seconds falling in each quantizer bin, capped at the top edge.
fn bin_seconds(quantizer: &QuantizerSpec) -> Vec<Vec<i64>> {
    let top = quantizer.edges()[NUM_BINS - 1].floor() as i64;
    let mut bins = vec![Vec::new(); NUM_BINS];
    for s in 0..=top {
        let b = quantizer.quantize(s as f64).expect("nonnegative") as usize;
        bins[b].push(s);
    }
    bins
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLogs {
    pub streams: Vec<ClinicianStream>,
    pub shifts: usize,
    pub sessions: usize,
    pub events: usize,
}

impl GeneratedLogs {
    pub fn to_csv(&self) -> Result<String, SynthError> {
        let mut buf = Vec::new();
        write_audit_csv(&mut buf, &self.streams)?;
        Ok(String::from_utf8(buf).expect("CSV writer emits UTF-8"))
    }
}

struct Samplers {
    initial: WeightedIndex<f64>,
    transitions: Vec<WeightedIndex<f64>>,
    bins: Vec<WeightedIndex<f64>>,
    seconds: Vec<Vec<i64>>,
}

fn weighted(p: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(p).expect("validated distribution")
}

const EPOCH_START: i64 = 1_600_000_000;

fn generate_clinician(
    spec: &ProcessSpec,
    s: &Samplers,
    clinician: usize,
    n_events: usize,
    seed: u64,
) -> (ClinicianStream, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (clinician as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let user_id = format!("clin{clinician:04}");
    let c = &spec.cadence;
    let mut events = Vec::with_capacity(n_events);
    let mut t = EPOCH_START + rng.random_range(0..3600);
    let (mut shifts, mut sessions) = (0, 0);
    while events.len() < n_events {
        shifts += 1;
        let pool: Vec<String> = (0..spec.patients.pool_size)
            .map(|k| format!("{user_id}-s{shifts}-p{k}"))
            .collect();
        let mut patient = rng.random_range(0..pool.len());
        for sess in 0..c.sessions_per_shift {
            if events.len() >= n_events {
                break;
            }
            if sess > 0 {
                t += c.session_gap_s;
            }
            sessions += 1;
            let rows = rng
                .random_range(c.session_rows_min..=c.session_rows_max)
                .min(n_events - events.len());
            let mut action = s.initial.sample(&mut rng);
            for r in 0..rows {
                if r > 0 {
                    action = s.transitions[action].sample(&mut rng);
                    let bin = s.bins[action].sample(&mut rng);
                    let choices = &s.seconds[bin];
                    t += choices[rng.random_range(0..choices.len())];
                }
                let pat_id = if spec.patient_free(action) {
                    None
                } else {
                    if pool.len() > 1 && rng.random::<f64>() < spec.patients.switch_prob {
                        let other = rng.random_range(0..pool.len() - 1);
                        patient = if other >= patient { other + 1 } else { other };
                    }
                    Some(pool[patient].clone())
                };
                events.push(RawAuditEvent {
                    user_id: user_id.clone(),
                    metric_name: spec.actions[action].clone(),
                    pat_id,
                    access_time: t,
                    access_instant: events.len() as i64,
                });
            }
        }
        t += c.shift_gap_s;
    }
    (ClinicianStream { user_id, events }, shifts, sessions)
}

/// Generates `n_events_per_clinician` events for each clinician. Every
/// session starts from the initial distribution; consecutive events within a
/// session are separated by deltas drawn from the action's bin distribution.
pub fn generate_logs(
    spec: &ProcessSpec,
    n_clinicians: usize,
    n_events_per_clinician: usize,
    seed: u64,
) -> Result<GeneratedLogs, SynthError> {
    spec.validate()?;
    let quantizer = QuantizerSpec::default();
    let samplers = Samplers {
        initial: weighted(&spec.initial),
        transitions: spec.transitions.iter().map(|r| weighted(r)).collect(),
        bins: spec.delta_bins.iter().map(|r| weighted(r)).collect(),
        seconds: bin_seconds(&quantizer),
    };
    let parts: Vec<(ClinicianStream, usize, usize)> = (0..n_clinicians)
        .into_par_iter()
        .map(|c| generate_clinician(spec, &samplers, c, n_events_per_clinician, seed))
        .collect();
    let mut out = GeneratedLogs {
        streams: Vec::with_capacity(n_clinicians),
        shifts: 0,
        sessions: 0,
        events: 0,
    };
    for (stream, shifts, sessions) in parts {
        out.shifts += shifts;
        out.sessions += sessions;
        out.events += stream.events.len();
        out.streams.push(stream);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Weight each row's entropy by the stationary distribution.
    Stationary,
    /// Weight by the initial distribution (one step from a session start).
    Initial,
}

fn strongly_connected(p: &[Vec<f64>]) -> bool {
    let n = p.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { p[i][j] } else { p[j][i] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Stationary distribution by power iteration on the lazy chain `(P + I) / 2`,
/// which shares `P`'s stationary vector and converges for periodic chains.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>, SynthError> {
    if !strongly_connected(p) {
        return Err(SynthError::Reducible);
    }
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let half = 0.5 * pi[i];
            next[i] += half;
            for j in 0..n {
                next[j] += half * p[i][j];
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-12 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|x| x / s).collect())
}

fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Per-step entropy of the action chain in nats.
pub fn true_entropy_rate(spec: &ProcessSpec, mode: EntropyMode) -> Result<f64, SynthError> {
    spec.validate()?;
    let weights = match mode {
        EntropyMode::Stationary => stationary_distribution(&spec.transitions)?,
        EntropyMode::Initial => spec.initial.clone(),
    };
    Ok(weights
        .iter()
        .zip(&spec.transitions)
        .map(|(w, row)| w * row_entropy(row))
        .sum())
}

/// Empirical transition frequencies between consecutive events of each
/// session (rows with no observations stay zero).
pub fn empirical_transitions(spec: &ProcessSpec, sessions: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n = spec.n_actions();
    let mut counts = vec![vec![0usize; n]; n];
    for s in sessions {
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.into_iter()
                .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> ProcessSpec {
        let mut s = ProcessSpec::uniform(2);
        s.transitions = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        s
    }

    #[test]
    fn entropy_rate_examples() {
        let det = ProcessSpec::cycle(5);
        assert!(true_entropy_rate(&det, EntropyMode::Stationary).unwrap().abs() < 1e-15);
        let u = ProcessSpec::uniform(8);
        assert!((true_entropy_rate(&u, EntropyMode::Stationary).unwrap() - 8f64.ln()).abs() < 1e-12);
        let pi = stationary_distribution(&two_state().transitions).unwrap();
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-10 && (pi[1] - 1.0 / 6.0).abs() < 1e-10);
        let h = true_entropy_rate(&two_state(), EntropyMode::Stationary).unwrap();
        let hand = 5.0 / 6.0 * (-(0.9f64 * 0.9f64.ln()) - 0.1 * 0.1f64.ln()) + 1.0 / 6.0 * 2f64.ln();
        assert!((h - hand).abs() < 1e-10);
        assert!((h - 0.3864).abs() < 5e-5);
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let mut s = ProcessSpec::uniform(2);
        s.transitions = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert!(matches!(
            true_entropy_rate(&s, EntropyMode::Stationary),
            Err(SynthError::Reducible)
        ));
        assert!(true_entropy_rate(&s, EntropyMode::Initial).is_ok());
    }

    #[test]
    fn validation_catches_bad_rows() {
        let mut s = ProcessSpec::uniform(3);
        s.transitions[1][0] += 1e-6;
        assert!(s.validate().is_err());
        let mut s = ProcessSpec::uniform(3);
        s.patients.pool_size = 129;
        assert!(s.validate().is_err());
    }

    #[test]
    fn bin_seconds_quantize_back() {
        let q = QuantizerSpec::default();
        for (b, secs) in bin_seconds(&q).iter().enumerate() {
            assert!(!secs.is_empty());
            for &s in secs {
                assert_eq!(q.quantize(s as f64).unwrap() as usize, b);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let s = two_state();
        assert_eq!(ProcessSpec::from_json(&s.to_json()).unwrap(), s);
    }
}
