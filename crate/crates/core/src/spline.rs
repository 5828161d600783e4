//! Cubic-spline smoothing of step baseline survival curves.
//!
//! The E-step needs an event density, which a step function does not have. A
//! not-a-knot cubic spline through the step curve's knots supplies a
//! differentiable surrogate `S~(t)` whose derivative gives the density.

use serde::{Deserialize, Serialize};

use crate::estimators::StepSurvivalCurve;

/// Lower clamp on spline survival values.
pub const EPS_SURVIVAL: f64 = 1e-10;
/// Lower clamp on implied densities (`-dS/dt`).
pub const EPS_DENSITY: f64 = 1e-10;
/// Default cap on interpolation knots.
pub const DEFAULT_MAX_KNOTS: usize = 100;

/// Piecewise cubic survival curve on `[knots[0], knots[last]]` with an exponential tail.
///
/// On interval `j`, `S(t) = a + b*u + c*u^2 + d*u^3` with `u = t - knots[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSurvivalCurve {
    pub knots: Vec<f64>,
    /// Per-interval `[a, b, c, d]`; one fewer entry than `knots`.
    pub coefficients: Vec<[f64; 4]>,
    /// Value at the last knot.
    pub last_value: f64,
    /// Constant hazard used past the last knot.
    pub tail_hazard: f64,
    /// Set when the source curve had fewer than two knots.
    pub fallback: bool,
}

/// Keeps at most `max_knots` points, picked at evenly spaced ranks; first and last always kept.
fn thin(points: Vec<(f64, f64)>, max_knots: usize) -> Vec<(f64, f64)> {
    let m = points.len();
    let max_knots = max_knots.max(2);
    if m <= max_knots {
        return points;
    }
    let mut idx: Vec<usize> = (0..max_knots)
        .map(|i| ((i as f64) * (m - 1) as f64 / (max_knots - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Second derivatives of the not-a-knot cubic spline through `(x, y)`: the third
/// derivative is continuous across the second and the second-to-last knots.
fn not_a_knot_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    match n {
        0..=2 => return vec![0.0; n],
        // Three points: the single parabola through them.
        3 => return vec![2.0 * (slope[1] - slope[0]) / (h[0] + h[1]); 3],
        _ => {}
    }
    // Interior rows i = 1..n-2 of the usual tridiagonal system, with M_0 and M_{n-1}
    // eliminated through the not-a-knot relations.
    let inner = n - 2;
    let mut sub = vec![0.0; inner];
    let mut diag = vec![0.0; inner];
    let mut sup = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for r in 0..inner {
        let i = r + 1;
        sub[r] = h[i - 1];
        diag[r] = 2.0 * (h[i - 1] + h[i]);
        sup[r] = h[i];
        rhs[r] = 6.0 * (slope[i] - slope[i - 1]);
    }
    let (h0, h1) = (h[0], h[1]);
    diag[0] = (h0 + h1) * (h0 + 2.0 * h1) / h1;
    sup[0] = (h1 * h1 - h0 * h0) / h1;
    let (ha, hb) = (h[n - 3], h[n - 2]);
    diag[inner - 1] = (ha + hb) * (2.0 * ha + hb) / ha;
    sub[inner - 1] = (ha * ha - hb * hb) / ha;
    // Thomas algorithm.
    for r in 1..inner {
        let w = sub[r] / diag[r - 1];
        diag[r] -= w * sup[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    let mut m = vec![0.0; n];
    m[inner] = rhs[inner - 1] / diag[inner - 1];
    for r in (0..inner - 1).rev() {
        m[r + 1] = (rhs[r] - sup[r] * m[r + 2]) / diag[r];
    }
    m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
    m[n - 1] = ((ha + hb) * m[n - 2] - hb * m[n - 3]) / ha;
    m
}

/// Fits a not-a-knot cubic spline through the knots of `curve`.
///
/// The point `(0, 1)` is prepended when the first knot is later than 0, so the
/// spline starts from certain survival. Curves with fewer than two knots get an
/// exponential fallback matching the single knot (or a flat curve) and are flagged.
pub fn fit_spline(curve: &StepSurvivalCurve, max_knots: usize) -> SplineSurvivalCurve {
    let values = curve.survival_values();
    let clamp = |s: f64| s.clamp(EPS_SURVIVAL, 1.0);
    if curve.len() < 2 {
        let tail_hazard = match (curve.knots().first(), values.first()) {
            (Some(&t), Some(&s)) if t > 0.0 => -clamp(s).ln() / t,
            _ => 0.0,
        };
        return SplineSurvivalCurve {
            knots: vec![0.0],
            coefficients: Vec::new(),
            last_value: 1.0,
            tail_hazard,
            fallback: true,
        };
    }

    let mut points: Vec<(f64, f64)> = curve
        .knots()
        .iter()
        .zip(&values)
        .map(|(&t, &s)| (t, clamp(s)))
        .collect();
    if points[0].0 > 0.0 {
        points.insert(0, (0.0, 1.0));
    }
    let points = thin(points, max_knots);
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let m = not_a_knot_second_derivatives(&x, &y);

    let coefficients = (0..x.len() - 1)
        .map(|j| {
            let h = x[j + 1] - x[j];
            let b = (y[j + 1] - y[j]) / h - h * (2.0 * m[j] + m[j + 1]) / 6.0;
            [y[j], b, m[j] / 2.0, (m[j + 1] - m[j]) / (6.0 * h)]
        })
        .collect();
    let n = x.len();
    let span = x[n - 1] - x[n - 2];
    let tail_hazard = ((y[n - 2].ln() - y[n - 1].ln()) / span).max(0.0);
    SplineSurvivalCurve {
        knots: x,
        coefficients,
        last_value: y[n - 1],
        tail_hazard,
        fallback: false,
    }
}

enum Region {
    Before,
    Inside { j: usize, u: f64 },
    Tail { dt: f64 },
}

impl SplineSurvivalCurve {
    fn region(&self, t: f64) -> Region {
        let first = self.knots[0];
        let last = *self.knots.last().expect("spline has at least one knot");
        if t < first {
            Region::Before
        } else if t > last || self.coefficients.is_empty() {
            Region::Tail { dt: t - last }
        } else {
            let j = self.knots.partition_point(|&k| k <= t).saturating_sub(1).min(self.coefficients.len() - 1);
            Region::Inside { j, u: t - self.knots[j] }
        }
    }

    /// Value at the start of interval `j`.
    fn knot_value(&self, j: usize) -> f64 {
        self.coefficients.get(j).map_or(self.last_value, |c| c[0])
    }

    fn raw(&self, j: usize, u: f64) -> f64 {
        let [a, b, c, d] = self.coefficients[j];
        a + u * (b + u * (c + u * d))
    }

    fn raw_derivative(&self, j: usize, u: f64) -> f64 {
        let [_, b, c, d] = self.coefficients[j];
        b + u * (2.0 * c + 3.0 * d * u)
    }

    /// Bounds the cubic on interval `j` to the values at its two end knots.
    fn band(&self, j: usize) -> (f64, f64) {
        let lo = self.knot_value(j + 1).min(self.knot_value(j));
        let hi = self.knot_value(j).max(self.knot_value(j + 1));
        (lo, hi)
    }

    /// Minimum of the cubic on `[0, u]` of interval `j`.
    fn running_min(&self, j: usize, u: f64) -> f64 {
        let [_, b, c, d] = self.coefficients[j];
        let mut best = self.raw(j, 0.0).min(self.raw(j, u));
        // Critical points solve b + 2c s + 3d s^2 = 0.
        let mut consider = |s: f64| {
            if s > 0.0 && s < u {
                best = best.min(self.raw(j, s));
            }
        };
        if d.abs() > 1e-300 {
            let disc = c * c - 3.0 * b * d;
            if disc >= 0.0 {
                let r = disc.sqrt();
                consider((-c + r) / (3.0 * d));
                consider((-c - r) / (3.0 * d));
            }
        } else if c.abs() > 1e-300 {
            consider(-b / (2.0 * c));
        }
        best
    }

    /// Value of interval `j` at offset `u` and whether the clamps left the cubic untouched.
    fn clamped(&self, j: usize, u: f64) -> (f64, bool) {
        let (lo, hi) = self.band(j);
        let raw = self.raw(j, u);
        let v = self.running_min(j, u).clamp(lo, hi).clamp(EPS_SURVIVAL, 1.0);
        (v, v == raw)
    }

    /// Spline survival. Within each interval the cubic is replaced by its running
    /// minimum and bounded by the end-knot values, so evaluation never increases in
    /// `t`; the result is clamped to `[EPS_SURVIVAL, 1]`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.region(t) {
            Region::Before => 1.0,
            Region::Tail { dt } => (self.last_value * (-self.tail_hazard * dt).exp()).clamp(EPS_SURVIVAL, 1.0),
            Region::Inside { j, u } => self.clamped(j, u).0,
        }
    }

    /// Derivative of [`eval`](Self::eval), capped at `-EPS_DENSITY`. Where a clamp is
    /// active the evaluated curve is flat and the cap applies.
    pub fn derivative(&self, t: f64) -> f64 {
        let d = match self.region(t) {
            Region::Before => 0.0,
            Region::Tail { .. } => -self.tail_hazard * self.eval(t),
            Region::Inside { j, u } => match self.clamped(j, u) {
                (_, true) => self.raw_derivative(j, u),
                (_, false) => 0.0,
            },
        };
        d.min(-EPS_DENSITY)
    }

    /// Density `-exp(f) * S~(t)^exp(f) / S~(t) * dS~/dt` of an individual with
    /// log-hazard `f`, floored at `EPS_DENSITY`.
    pub fn density_given_cluster(&self, log_hazard: f64, t: f64) -> f64 {
        let s = self.eval(t);
        let risk = log_hazard.exp();
        let surv = s.powf(risk);
        (-risk * surv / s * self.derivative(t)).max(EPS_DENSITY)
    }

    /// Natural log of [`density_given_cluster`](Self::density_given_cluster), computed
    /// without forming the (possibly underflowing) power.
    pub fn log_density_given_cluster(&self, log_hazard: f64, t: f64) -> f64 {
        let s = self.eval(t);
        let risk = log_hazard.exp();
        let log = log_hazard + (risk - 1.0) * s.ln() + (-self.derivative(t)).ln();
        log.max(EPS_DENSITY.ln())
    }

    /// `ln P(T > t | f) = exp(f) * ln S~(t)`.
    pub fn log_survival_given_cluster(&self, log_hazard: f64, t: f64) -> f64 {
        log_hazard.exp() * self.eval(t).ln()
    }
}
