//! The M-step objective: per-cluster Cox partial log-likelihoods plus the
//! soft-count gating cross-entropy, with exact gradients.
//!
//! Risk sets are formed within whatever rows are passed in (a minibatch during
//! training). Tied event times share a common denominator (Breslow).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::neural::{log_softmax_rows, softmax_rows};

/// Rows sorted by descending time, grouped by equal time.
#[derive(Debug, Clone)]
pub struct RiskSetIndex {
    /// Row indices, times non-increasing.
    pub order: Vec<usize>,
    /// `[start, end)` ranges into `order` sharing one time, in descending time order.
    pub tie_groups: Vec<(usize, usize)>,
}

impl RiskSetIndex {
    pub fn new(times: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
        let mut tie_groups = Vec::new();
        let mut start = 0;
        for i in 1..=order.len() {
            if i == order.len() || times[order[i]] != times[order[start]] {
                tie_groups.push((start, i));
                start = i;
            }
        }
        Self { order, tie_groups }
    }
}

/// Log partial likelihood `sum_{events i} [f_i - ln sum_{t_j >= t_i} exp(f_j)]` and its
/// gradient. Zero with a zero gradient when there are no events.
///
/// The gradient entry for row `i` is `delta_i - exp(f_i) * sum_{event times t_j <= t_i} d_j / W_j`,
/// with `W_j` the risk-set sum at `t_j`.
pub fn partial_log_likelihood(log_hazards: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = log_hazards.len();
    if times.len() != n || events.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: times.len().min(events.len()),
        });
    }
    if log_hazards.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("partial likelihood inputs".into()));
    }
    if !events.iter().any(|&e| e) {
        return Ok((0.0, vec![0.0; n]));
    }
    let shift = log_hazards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_hazards.iter().map(|f| (f - shift).exp()).collect();
    let idx = RiskSetIndex::new(times);

    let mut value = 0.0;
    let mut risk = 0.0;
    // d_g / W_g per tie group, descending time order.
    let mut ratio = vec![0.0; idx.tie_groups.len()];
    for (g, &(s, e)) in idx.tie_groups.iter().enumerate() {
        let rows = &idx.order[s..e];
        risk += rows.iter().map(|&i| w[i]).sum::<f64>();
        let d = rows.iter().filter(|&&i| events[i]).count();
        if d > 0 {
            value += rows.iter().filter(|&&i| events[i]).map(|&i| log_hazards[i]).sum::<f64>();
            value -= d as f64 * (risk.ln() + shift);
            ratio[g] = d as f64 / risk;
        }
    }
    let mut grad = vec![0.0; n];
    let mut cum = 0.0;
    for (g, &(s, e)) in idx.tie_groups.iter().enumerate().rev() {
        cum += ratio[g];
        for &i in &idx.order[s..e] {
            grad[i] = f64::from(u8::from(events[i])) - w[i] * cum;
        }
    }
    Ok((value, grad))
}

/// `sum_i sum_k gamma_ik * ln softmax_k(logits_i)` and its gradient `gamma - softmax(logits)`.
pub fn gating_cross_entropy(gamma: &Array2<f64>, logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if gamma.dim() != logits.dim() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            found: gamma.len(),
        });
    }
    for (i, row) in gamma.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|g| *g < -1e-12) {
            return Err(Error::invalid(format!("posterior row {i} is not on the simplex")));
        }
    }
    let value = (gamma * &log_softmax_rows(logits)).sum();
    Ok((value, gamma - &softmax_rows(logits)))
}

/// Loss and gradients returned by [`q_hat`].
#[derive(Debug, Clone)]
pub struct QHat {
    /// Negated objective (to minimize).
    pub loss: f64,
    pub gating_term: f64,
    /// Per-cluster log partial likelihood (0 for starved clusters).
    pub cluster_terms: Vec<f64>,
    /// Gradient of `loss` wrt log-hazards.
    pub d_log_hazards: Array2<f64>,
    /// Gradient of `loss` wrt gating logits.
    pub d_gating: Array2<f64>,
}

/// `-(sum_ik gamma_ik ln softmax_k(g_i) + sum_k ln PL(rows with zeta_i = k; column k))`.
///
/// `zeta` holds 0-based cluster indices. A cluster with fewer than two rows or no events
/// contributes nothing.
pub fn q_hat(
    times: &[f64],
    events: &[bool],
    gamma: &Array2<f64>,
    zeta: &[usize],
    log_hazards: &Array2<f64>,
    gating_logits: &Array2<f64>,
) -> Result<QHat> {
    let (n, k) = log_hazards.dim();
    if times.len() != n || events.len() != n || zeta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: times.len().min(events.len()).min(zeta.len()),
        });
    }
    if let Some(&z) = zeta.iter().find(|&&z| z >= k) {
        return Err(Error::invalid(format!("assignment {z} out of range for K = {k}")));
    }
    let (gating_term, d_gate) = gating_cross_entropy(gamma, gating_logits)?;
    let mut d_log_hazards = Array2::zeros((n, k));
    let mut cluster_terms = vec![0.0; k];
    for (c, term) in cluster_terms.iter_mut().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| zeta[i] == c).collect();
        if rows.len() < 2 || !rows.iter().any(|&i| events[i]) {
            continue;
        }
        let f: Vec<f64> = rows.iter().map(|&i| log_hazards[[i, c]]).collect();
        let t: Vec<f64> = rows.iter().map(|&i| times[i]).collect();
        let e: Vec<bool> = rows.iter().map(|&i| events[i]).collect();
        let (value, grad) = partial_log_likelihood(&f, &t, &e)?;
        *term = value;
        for (&i, g) in rows.iter().zip(grad) {
            d_log_hazards[[i, c]] = -g;
        }
    }
    let loss = -(gating_term + cluster_terms.iter().sum::<f64>());
    if !loss.is_finite() {
        return Err(Error::NonFinite("M-step objective".into()));
    }
    Ok(QHat {
        loss,
        gating_term,
        cluster_terms,
        d_log_hazards,
        d_gating: -d_gate,
    })
}
