//! Perplexity, next-action accuracy, ROUGE-1 and per-row entropy reports.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{decode_row, per_row_entropy, FieldLosses, ModelError, ModelState, Real, Strategy};
use crate::sessionize::QuantizerSpec;
use crate::vocab::{decode_tokenized, field_of, Field, GlobalVocab, TokenizedSession, VocabError, BOS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn perplexity(cross_entropy: f64) -> f64 {
    cross_entropy.exp()
}

/// Per-field NLL sums over every predicted position whose row index is at
/// least `min_row`.
pub fn field_cross_entropy<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sequences: &[S],
    min_row: usize,
) -> Result<FieldLosses, EvalError> {
    let parts: Vec<FieldLosses> = sequences
        .par_iter()
        .map(|s| {
            let s = s.as_ref();
            let mut f = FieldLosses::default();
            if s.len() < 2 {
                return Ok(f);
            }
            for (p, nll) in state.token_nlls(s)?.into_iter().enumerate() {
                if p / 3 >= min_row {
                    f.add(field_of(p + 1).expect("p + 1 >= 1"), nll);
                }
            }
            Ok(f)
        })
        .collect::<Result<_, ModelError>>()?;
    let mut total = FieldLosses::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldPerplexity {
    pub metric_name: f64,
    pub pat_id: f64,
    pub at_bin: f64,
    /// Scored positions per field.
    pub counts: [usize; 3],
}

impl FieldPerplexity {
    pub fn from_losses(losses: &FieldLosses) -> Result<Self, EvalError> {
        let ppl = |f| losses.mean(f).map(perplexity).ok_or(EvalError::Empty);
        Ok(Self {
            metric_name: ppl(Field::MetricName)?,
            pat_id: ppl(Field::PatId)?,
            at_bin: ppl(Field::AtBin)?,
            counts: losses.count,
        })
    }

    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::MetricName => self.metric_name,
            Field::PatId => self.pat_id,
            Field::AtBin => self.at_bin,
        }
    }
}

/// `exp(mean NLL)` per field over all predicted positions.
pub fn per_field_perplexity<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sequences: &[S],
) -> Result<FieldPerplexity, EvalError> {
    FieldPerplexity::from_losses(&field_cross_entropy(state, sequences, 0)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub metric_name: f64,
    pub pat_id: f64,
    pub at_bin: f64,
    pub all: f64,
    pub events: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Hits {
    field: [usize; 3],
    all: usize,
    events: usize,
}

impl Hits {
    fn add(&mut self, pred: [u32; 3], truth: &[u32]) {
        let m = [pred[0] == truth[0], pred[1] == truth[1], pred[2] == truth[2]];
        for i in 0..3 {
            self.field[i] += usize::from(m[i]);
        }
        self.all += usize::from(m.iter().all(|&x| x));
        self.events += 1;
    }

    fn merge(&mut self, o: &Hits) {
        for i in 0..3 {
            self.field[i] += o.field[i];
        }
        self.all += o.all;
        self.events += o.events;
    }

    fn accuracy(&self) -> Accuracy {
        let n = self.events.max(1) as f64;
        Accuracy {
            metric_name: self.field[0] as f64 / n,
            pat_id: self.field[1] as f64 / n,
            at_bin: self.field[2] as f64 / n,
            all: self.all as f64 / n,
            events: self.events,
        }
    }
}

fn argmax_in<T: Real>(row: &[T], support: &[u32]) -> u32 {
    let mut best = support[0];
    for &t in &support[1..] {
        if row[t as usize] > row[best as usize] {
            best = t;
        }
    }
    best
}

/// Greedy prediction of every row after the first from one teacher-forced
/// pass; a row whose earlier field was mispredicted is finished by decoding
/// from its own prefix, so the result equals row-by-row greedy decoding.
fn greedy_session_hits<T: Real>(state: &ModelState<T>, tokens: &[u32]) -> Result<Hits, ModelError> {
    let mut hits = Hits::default();
    let rows = (tokens.len() - 1) / 3;
    if rows < 2 {
        return Ok(hits);
    }
    let out = state.forward(tokens)?;
    let layout = state.layout();
    let supports = Field::ALL.map(|f| layout.support(f));
    for r in 1..rows {
        let start = 1 + 3 * r;
        let truth = &tokens[start..start + 3];
        let mut pred = [0u32; 3];
        let mut diverged = false;
        for i in 0..3 {
            if diverged {
                let mut ctx = tokens[..start].to_vec();
                ctx.extend_from_slice(&pred[..i]);
                let dist = crate::model::next_field_distribution(state, &ctx)?;
                let mut best = 0;
                for j in 1..dist.probs.len() {
                    if dist.probs[j] > dist.probs[best] {
                        best = j;
                    }
                }
                pred[i] = dist.support[best];
            } else {
                pred[i] = argmax_in(out.logits_at(start + i - 1), &supports[i]);
                diverged = pred[i] != truth[i];
            }
        }
        hits.add(pred, truth);
    }
    Ok(hits)
}

fn decoded_session_hits<T: Real>(
    state: &ModelState<T>,
    tokens: &[u32],
    strategy: &Strategy,
    seed: u64,
) -> Result<Hits, ModelError> {
    let mut hits = Hits::default();
    let rows = (tokens.len() - 1) / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 1..rows {
        let start = 1 + 3 * r;
        let pred = decode_row(state, &tokens[..start], strategy, &mut rng)?;
        hits.add(pred, &tokens[start..start + 3]);
    }
    Ok(hits)
}

/// Decodes one row per event after each session's first, conditioned on the
/// true preceding rows, and reports per-field and joint exact-match rates.
pub fn next_action_accuracy<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sessions: &[S],
    strategy: &Strategy,
    seed: u64,
) -> Result<Accuracy, EvalError> {
    let parts: Vec<Hits> = sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let s = s.as_ref();
            if s.first() != Some(&BOS) || (s.len() - 1) % 3 != 0 {
                return Err(ModelError::Misaligned(s.len()));
            }
            if matches!(strategy, Strategy::Greedy) && s.len() <= state.config.context_len {
                greedy_session_hits(state, s)
            } else {
                decoded_session_hits(state, s, strategy, seed.wrapping_add(i as u64))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut total = Hits::default();
    for p in &parts {
        total.merge(p);
    }
    if total.events == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total.accuracy())
}

/// Row-by-row decoding path of [`next_action_accuracy`] for any strategy.
pub fn next_action_accuracy_decoded<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sessions: &[S],
    strategy: &Strategy,
    seed: u64,
) -> Result<Accuracy, EvalError> {
    let parts: Vec<Hits> = sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| decoded_session_hits(state, s.as_ref(), strategy, seed.wrapping_add(i as u64)))
        .collect::<Result<_, _>>()?;
    let mut total = Hits::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.accuracy())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Clipped unigram overlap between a candidate and a reference.
pub fn rouge1<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Rouge {
    if candidate.is_empty() || reference.is_empty() {
        return Rouge::default();
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut matches = 0usize;
    for t in candidate {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                matches += 1;
            }
        }
    }
    let recall = matches as f64 / reference.len() as f64;
    let precision = matches as f64 / candidate.len() as f64;
    let f1 = if matches == 0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    Rouge { recall, precision, f1 }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub metric_name: Rouge,
    pub pat_id: Rouge,
    pub at_bin: Rouge,
    pub all: Rouge,
    pub sessions: usize,
}

fn field_tokens(rows: &[u32], field: usize) -> Vec<u32> {
    rows.iter().skip(field).step_by(3).copied().collect()
}

/// Scores generated continuation rows against the reference rows.
pub fn rouge_rows(generated: &[u32], reference: &[u32]) -> [Rouge; 4] {
    [
        rouge1(&field_tokens(generated, 0), &field_tokens(reference, 0)),
        rouge1(&field_tokens(generated, 1), &field_tokens(reference, 1)),
        rouge1(&field_tokens(generated, 2), &field_tokens(reference, 2)),
        rouge1(generated, reference),
    ]
}

/// Number of prompt rows for a session of `rows` rows.
pub fn prompt_rows(rows: usize, prompt_fraction: f64) -> usize {
    ((rows as f64 * prompt_fraction).ceil() as usize).clamp(1, rows.saturating_sub(1).max(1))
}

/// Prompts with the first `ceil(R * prompt_fraction)` rows, generates the rest,
/// and averages per-field and joint ROUGE-1 over sessions with at least 2 rows.
pub fn rouge_eval<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sessions: &[S],
    prompt_fraction: f64,
    strategy: &Strategy,
    seed: u64,
) -> Result<RougeReport, EvalError> {
    let scores: Vec<Option<[Rouge; 4]>> = sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let s = s.as_ref();
            let rows = (s.len().saturating_sub(1)) / 3;
            if rows < 2 {
                return Ok(None);
            }
            let prompt = prompt_rows(rows, prompt_fraction);
            let mut ctx = s[..1 + 3 * prompt].to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            for _ in prompt..rows {
                let row = decode_row(state, &ctx, strategy, &mut rng)?;
                ctx.extend_from_slice(&row);
            }
            Ok(Some(rouge_rows(&ctx[1 + 3 * prompt..], &s[1 + 3 * prompt..])))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut sum = [Rouge::default(); 4];
    let mut n = 0usize;
    for s in scores.into_iter().flatten() {
        for i in 0..4 {
            sum[i].recall += s[i].recall;
            sum[i].precision += s[i].precision;
            sum[i].f1 += s[i].f1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let mean = |r: Rouge| Rouge {
        recall: r.recall / n as f64,
        precision: r.precision / n as f64,
        f1: r.f1 / n as f64,
    };
    Ok(RougeReport {
        metric_name: mean(sum[0]),
        pat_id: mean(sum[1]),
        at_bin: mean(sum[2]),
        all: mean(sum[3]),
        sessions: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub strategy: Strategy,
    pub perplexity: FieldPerplexity,
    pub accuracy: Accuracy,
    pub rouge: Option<RougeReport>,
    pub sequences: usize,
}

/// Perplexity, teacher-forced next-action accuracy and (optionally) ROUGE-1.
pub fn evaluate<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sequences: &[S],
    strategy: &Strategy,
    seed: u64,
    with_rouge: bool,
) -> Result<EvalReport, EvalError> {
    if sequences.is_empty() {
        return Err(EvalError::Empty);
    }
    let rouge = if with_rouge {
        Some(rouge_eval(state, sequences, 0.5, strategy, seed)?)
    } else {
        None
    };
    Ok(EvalReport {
        seed,
        strategy: *strategy,
        perplexity: per_field_perplexity(state, sequences)?,
        accuracy: next_action_accuracy(state, sequences, strategy, seed)?,
        rouge,
        sequences: sequences.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub metric_name: String,
    pub pat_index: String,
    pub at_label: String,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySession {
    pub session_id: String,
    pub rows: Vec<EntropyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub sessions: Vec<EntropySession>,
}

/// Scores every row of every session (row 0 unscored) and attaches display labels.
pub fn entropy_report<T: Real>(
    state: &ModelState<T>,
    vocab: &GlobalVocab,
    quantizer: &QuantizerSpec,
    sessions: &[TokenizedSession],
) -> Result<EntropyReport, EvalError> {
    state.check_vocab(vocab)?;
    let sessions = sessions
        .par_iter()
        .map(|ts| {
            let entropies = per_row_entropy(state, &ts.tokens)?;
            let decoded = decode_tokenized(ts, vocab)?;
            let rows = decoded
                .rows
                .iter()
                .zip(entropies)
                .map(|(r, e)| EntropyRow {
                    metric_name: r.metric_name.clone(),
                    pat_index: r.patient.to_string(),
                    at_label: quantizer.label(r.delta_bin),
                    entropy: e,
                })
                .collect();
            Ok(EntropySession {
                session_id: ts.provenance.to_string(),
                rows,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(EntropyReport { sessions })
}

impl EntropyReport {
    /// `session_id,row_index,metric_name,pat_index,at_label,entropy_nats`;
    /// the first row of each session has an empty entropy cell.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["session_id", "row_index", "metric_name", "pat_index", "at_label", "entropy_nats"])?;
        for s in &self.sessions {
            for (i, r) in s.rows.iter().enumerate() {
                w.write_record([
                    s.session_id.as_str(),
                    &i.to_string(),
                    &r.metric_name,
                    &r.pat_index,
                    &r.at_label,
                    &r.entropy.map_or(String::new(), |e| format!("{e:.6}")),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table per session; unscored rows show `-`.
    pub fn render_table(&self) -> String {
        let header = ["METRIC_NAME", "PAT_ID", "AT", "Row Entropy"];
        let mut out = String::new();
        for s in &self.sessions {
            let cells: Vec<[String; 4]> = s
                .rows
                .iter()
                .map(|r| {
                    [
                        r.metric_name.clone(),
                        r.pat_index.clone(),
                        r.at_label.clone(),
                        r.entropy.map_or("-".to_string(), |e| format!("{e:.3}")),
                    ]
                })
                .collect();
            let mut width = header.map(|h| h.chars().count());
            for row in &cells {
                for i in 0..4 {
                    width[i] = width[i].max(row[i].chars().count());
                }
            }
            let line = |cols: [&str; 4]| {
                let mut l = String::new();
                for i in 0..4 {
                    let pad = width[i] - cols[i].chars().count();
                    l.push_str(cols[i]);
                    if i < 3 {
                        l.push_str(&" ".repeat(pad + 2));
                    }
                }
                l.push('\n');
                l
            };
            out.push_str(&format!("session {}\n", s.session_id));
            out.push_str(&line(header));
            for row in &cells {
                out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_hand_cases() {
        let r = rouge1(&["a", "b", "b"], &["a", "b", "c"]);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let id = rouge1(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!((id.recall, id.precision, id.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge1(&[1, 2], &[3, 4]), Rouge::default());
        assert_eq!(rouge1::<u32>(&[], &[]), Rouge::default());
    }

    #[test]
    fn perplexity_examples() {
        // Both figures are rounded to 4 decimals; some CE within half a unit
        // of 1.4640 must map to within half a unit of 4.3230.
        assert!(perplexity(1.46395) < 4.32305 && perplexity(1.46405) >= 4.32295);
        assert!((perplexity(1.4640) - 4.3230).abs() < 2.5e-4);
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(4037f64.ln()) - 4037.0).abs() < 1e-9);
    }

    #[test]
    fn prompt_split_arithmetic() {
        assert_eq!(prompt_rows(2, 0.5), 1);
        assert_eq!(prompt_rows(5, 0.5), 3);
        assert_eq!(prompt_rows(10, 0.5), 5);
    }

    #[test]
    fn all_accuracy_counts_joint_matches() {
        let mut h = Hits::default();
        h.add([1, 2, 3], &[1, 2, 3]);
        h.add([9, 2, 3], &[1, 2, 3]);
        let a = h.accuracy();
        assert_eq!((a.metric_name, a.pat_id, a.at_bin, a.all), (0.5, 1.0, 1.0, 0.5));
    }
}
