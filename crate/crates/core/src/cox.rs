//! Reference linear Cox model fitted by full-batch Newton-Raphson.
//!
//! Serves as the classical baseline that a one-component linear mixture should
//! reproduce.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::estimators::{breslow, StepSurvivalCurve};
use crate::objective::{partial_log_likelihood, RiskSetIndex};

#[derive(Debug, Clone)]
pub struct LinearCox {
    pub coefficients: Vec<f64>,
    pub baseline: StepSurvivalCurve,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl LinearCox {
    pub fn log_hazard(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    /// `S_0(t)^exp(x'beta)` with the Breslow step baseline.
    pub fn predict_survival(&self, x: &[f64], t: f64) -> f64 {
        self.baseline.eval(t).powf(self.log_hazard(x).exp())
    }
}

/// Score vector and negative Hessian of the Breslow-ties log partial likelihood.
fn score_and_information(x: &Array2<f64>, times: &[f64], events: &[bool], beta: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = x.ncols();
    let eta = x.dot(beta);
    let shift = eta.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w = eta.mapv(|e| (e - shift).exp());
    let idx = RiskSetIndex::new(times);
    let mut s0 = 0.0;
    let mut s1 = Array1::<f64>::zeros(d);
    let mut s2 = Array2::<f64>::zeros((d, d));
    let mut score = Array1::<f64>::zeros(d);
    let mut info = Array2::<f64>::zeros((d, d));
    for &(start, end) in &idx.tie_groups {
        let rows = &idx.order[start..end];
        for &i in rows {
            let xi = x.row(i);
            s0 += w[i];
            s1.scaled_add(w[i], &xi);
            for a in 0..d {
                for b in 0..d {
                    s2[[a, b]] += w[i] * xi[a] * xi[b];
                }
            }
        }
        let n_events = rows.iter().filter(|&&i| events[i]).count() as f64;
        if n_events == 0.0 {
            continue;
        }
        for &i in rows.iter().filter(|&&i| events[i]) {
            score += &x.row(i);
        }
        let mean = &s1 / s0;
        score.scaled_add(-n_events, &mean);
        for a in 0..d {
            for b in 0..d {
                info[[a, b]] += n_events * (s2[[a, b]] / s0 - mean[a] * mean[b]);
            }
        }
    }
    (score, info)
}

/// Solves `A z = b` for symmetric positive-definite `A` by Cholesky.
fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = a[[i, i]] - s;
                if v <= 0.0 {
                    return None;
                }
                l[[i, i]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[[i, k]] * y[k]).sum::<f64>()) / l[[i, i]];
    }
    let mut z = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        z[i] = (y[i] - (i + 1..n).map(|k| l[[k, i]] * z[k]).sum::<f64>()) / l[[i, i]];
    }
    Some(z)
}

/// Maximizes the partial likelihood of `exp(x'beta)` with step-halving Newton iterations.
pub fn fit_linear_cox(x: &Array2<f64>, times: &[f64], events: &[bool], max_iter: usize, tol: f64) -> Result<LinearCox> {
    if x.nrows() != times.len() || times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: times.len(),
        });
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents("linear Cox fit".into()));
    }
    let loglik = |beta: &Array1<f64>| -> Result<f64> {
        Ok(partial_log_likelihood(x.dot(beta).as_slice().unwrap(), times, events)?.0)
    };
    let mut beta = Array1::<f64>::zeros(x.ncols());
    let mut ll = loglik(&beta)?;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let (score, info) = score_and_information(x, times, events, &beta);
        let step = cholesky_solve(&info, &score)
            .ok_or_else(|| Error::Diverged("Cox information matrix is not positive definite".into()))?;
        let mut scale = 1.0;
        let (next, next_ll) = loop {
            let cand = &beta + &(&step * scale);
            let cand_ll = loglik(&cand)?;
            if cand_ll >= ll - 1e-12 || scale < 1e-6 {
                break (cand, cand_ll);
            }
            scale *= 0.5;
        };
        let converged = (next_ll - ll).abs() < tol;
        beta = next;
        ll = next_ll;
        if converged {
            break;
        }
    }
    let eta = x.dot(&beta);
    let baseline = breslow(times, events, eta.as_slice().unwrap())?;
    Ok(LinearCox {
        coefficients: beta.to_vec(),
        baseline,
        log_likelihood: ll,
        iterations,
    })
}
