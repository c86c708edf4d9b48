//! Per-row entropy: mean of a row's three field NLLs given all preceding context.

use rayon::prelude::*;

use super::real::Real;
use super::transformer::ModelState;
use super::ModelError;

fn row_mean(nlls: &[f64], row: usize) -> f64 {
    // nlls[p] scores token p + 1; row r occupies tokens 1 + 3r ..= 3 + 3r.
    (nlls[3 * row] + nlls[3 * row + 1] + nlls[3 * row + 2]) / 3.0
}

/// Entropy (nats) of every row of a BOS-prefixed session; row 0 has no value.
/// Rows beyond the context window are scored against the most recent rows
/// that fit.
pub fn per_row_entropy<T: Real>(state: &ModelState<T>, tokens: &[u32]) -> Result<Vec<Option<f64>>, ModelError> {
    if tokens.is_empty() || !(tokens.len() - 1).is_multiple_of(3) {
        return Err(ModelError::Misaligned(tokens.len()));
    }
    let rows = (tokens.len() - 1) / 3;
    let max_rows = state.config.max_rows();
    let mut out = Vec::with_capacity(rows);
    let head = rows.min(max_rows);
    let nlls = state.token_nlls(&tokens[..1 + 3 * head])?;
    for r in 0..head {
        out.push((r > 0).then(|| row_mean(&nlls, r)));
    }
    let mut window = Vec::with_capacity(1 + 3 * max_rows);
    for r in head..rows {
        let start = r + 1 - max_rows;
        window.clear();
        window.push(tokens[0]);
        window.extend_from_slice(&tokens[1 + 3 * start..1 + 3 * (r + 1)]);
        let nlls = state.token_nlls(&window)?;
        out.push(Some(row_mean(&nlls, max_rows - 1)));
    }
    Ok(out)
}

/// [`per_row_entropy`] over many sessions in parallel; output order follows input.
pub fn row_entropies_batch<T: Real, S: AsRef<[u32]> + Sync>(
    state: &ModelState<T>,
    sessions: &[S],
) -> Result<Vec<Vec<Option<f64>>>, ModelError> {
    sessions
        .par_iter()
        .map(|s| per_row_entropy(state, s.as_ref()))
        .collect()
}
