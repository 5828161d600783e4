//! Nonparametric survival estimators: Kaplan-Meier, the censoring distribution
//! and the Breslow baseline.
//!
//! Tie conventions: events at a time `t` share the risk set `{j : t_j >= t}`,
//! and an individual censored at `t` is still in the risk set at `t`.

use std::io::Write;

use crate::error::{Error, Result};

/// Right-continuous, non-increasing step survival function.
///
/// Stored as the cumulative hazard at each knot; survival is `exp(-cum_hazard)`, so a
/// curve that reaches zero holds `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSurvivalCurve {
    knots: Vec<f64>,
    cum_hazard: Vec<f64>,
}

impl StepSurvivalCurve {
    /// Curve with S = 1 everywhere.
    pub fn flat() -> Self {
        Self {
            knots: Vec::new(),
            cum_hazard: Vec::new(),
        }
    }

    pub fn from_cum_hazard(knots: Vec<f64>, cum_hazard: Vec<f64>) -> Result<Self> {
        if knots.len() != cum_hazard.len() {
            return Err(Error::invalid("knots and cumulative hazard differ in length"));
        }
        if knots.windows(2).any(|w| w[0] >= w[1] || w[0].is_nan() || w[1].is_nan()) {
            return Err(Error::invalid("knots must be strictly increasing"));
        }
        if cum_hazard.iter().any(|h| h.is_nan() || *h < 0.0) || cum_hazard.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("cumulative hazard must be non-negative and non-decreasing"));
        }
        Ok(Self { knots, cum_hazard })
    }

    /// Builds a curve from survival values in `[0, 1]`.
    pub fn from_survival(knots: Vec<f64>, survival: &[f64]) -> Result<Self> {
        if survival.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("survival values must lie in [0, 1]"));
        }
        Self::from_cum_hazard(knots, survival.iter().map(|s| -s.ln()).collect())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn cum_hazard(&self) -> &[f64] {
        &self.cum_hazard
    }

    pub fn survival_values(&self) -> Vec<f64> {
        self.cum_hazard.iter().map(|h| (-h).exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// S(t): value at the largest knot `<= t`, 1 before the first knot.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k <= t);
        if idx == 0 {
            1.0
        } else {
            (-self.cum_hazard[idx - 1]).exp()
        }
    }

    /// Left limit S(t-).
    pub fn eval_left(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k < t);
        if idx == 0 {
            1.0
        } else {
            (-self.cum_hazard[idx - 1]).exp()
        }
    }

    /// Two-column CSV dump `time,survival`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,survival")?;
        for (t, s) in self.knots.iter().zip(self.survival_values()) {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    }
}

fn check_inputs(times: &[f64], events: &[bool]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    if times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            found: events.len(),
        });
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("times must be finite and non-negative"));
    }
    Ok(())
}

/// Indices sorted by ascending time.
fn ascending_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    order
}

/// Walks distinct times in ascending order, calling `step(t, d, weights_at_risk_from_here)`
/// for every time carrying at least one event. `suffix[i]` is the sum of `weight` over
/// `order[i..]`.
fn for_each_event_time(
    times: &[f64],
    events: &[bool],
    weight: impl Fn(usize) -> f64,
    mut step: impl FnMut(f64, usize, f64),
) {
    let order = ascending_order(times);
    let n = order.len();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + weight(order[i]);
    }
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < n && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            step(t, d, suffix[i]);
        }
        i = j;
    }
}

/// Product-limit estimate with knots at the distinct event times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepSurvivalCurve> {
    check_inputs(times, events)?;
    let mut knots = Vec::new();
    let mut cum = Vec::new();
    let mut h = 0.0;
    for_each_event_time(times, events, |_| 1.0, |t, d, at_risk| {
        let n = at_risk.round();
        h += if (d as f64) < n { -(1.0 - d as f64 / n).ln() } else { f64::INFINITY };
        knots.push(t);
        cum.push(h);
    });
    Ok(StepSurvivalCurve {
        knots,
        cum_hazard: cum,
    })
}

/// Kaplan-Meier estimate of the censoring distribution G, using `1 - event` as the indicator.
pub fn censoring_km(times: &[f64], events: &[bool]) -> Result<StepSurvivalCurve> {
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    kaplan_meier(times, &flipped)
}

/// Breslow estimate of the baseline survival `exp(-Lambda_0(t))` given log-hazards `f(x_i)`.
///
/// `Lambda_0` jumps by `d_j / sum_{t_i >= t_j} exp(f_i)` at each distinct event time.
pub fn breslow(times: &[f64], events: &[bool], log_hazards: &[f64]) -> Result<StepSurvivalCurve> {
    check_inputs(times, events)?;
    if log_hazards.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            found: log_hazards.len(),
        });
    }
    if log_hazards.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("Breslow log-hazards".into()));
    }
    let shift = log_hazards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = (-shift).exp();
    let mut knots = Vec::new();
    let mut cum = Vec::new();
    let mut h = 0.0;
    for_each_event_time(
        times,
        events,
        |i| (log_hazards[i] - shift).exp(),
        |t, d, risk| {
            h += d as f64 / risk * scale;
            knots.push(t);
            cum.push(h);
        },
    );
    Ok(StepSurvivalCurve {
        knots,
        cum_hazard: cum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TIMES: [f64; 3] = [1.0, 2.0, 3.0];
    const EVENTS: [bool; 3] = [true, true, false];

    #[test]
    fn km_hand_example() {
        let s = kaplan_meier(&TIMES, &EVENTS).unwrap();
        assert!((s.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.eval(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.eval(3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.eval(0.5), 1.0);
    }

    #[test]
    fn km_degenerate_cases() {
        let s = kaplan_meier(&TIMES, &[false; 3]).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.eval(100.0), 1.0);
        let s = kaplan_meier(&[5.0], &[true]).unwrap();
        assert_eq!(s.eval(4.9), 1.0);
        assert_eq!(s.eval(5.0), 0.0);
        assert_eq!(s.eval(50.0), 0.0);
        assert!(kaplan_meier(&[], &[]).is_err());
    }

    #[test]
    fn censoring_distribution() {
        let g = censoring_km(&TIMES, &EVENTS).unwrap();
        assert_eq!(g.knots(), &[3.0]);
        assert_eq!(g.eval(2.9), 1.0);
        assert_eq!(g.eval(3.0), 0.0);
        let g = censoring_km(&TIMES, &[true; 3]).unwrap();
        assert_eq!(g.eval(10.0), 1.0);
    }

    #[test]
    fn km_and_censoring_km_swap() {
        let flipped: Vec<bool> = EVENTS.iter().map(|e| !e).collect();
        assert_eq!(kaplan_meier(&TIMES, &EVENTS).unwrap(), censoring_km(&TIMES, &flipped).unwrap());
        assert_eq!(censoring_km(&TIMES, &EVENTS).unwrap(), kaplan_meier(&TIMES, &flipped).unwrap());
    }

    #[test]
    fn left_and_right_limits() {
        let s = StepSurvivalCurve::from_survival(vec![1.0, 3.0], &[1.0 / 3.0, 0.0]).unwrap();
        assert_eq!(s.eval(3.0), 0.0);
        assert!((s.eval_left(3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.eval_left(0.5), 1.0);
        assert_eq!(s.eval_left(1.0), 1.0);
        assert!((s.eval_left(7.0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn breslow_unit_weights() {
        let s = breslow(&TIMES, &[true; 3], &[0.0; 3]).unwrap();
        let expected = [1.0 / 3.0, 5.0 / 6.0, 11.0 / 6.0];
        for (h, e) in s.cum_hazard().iter().zip(expected) {
            assert!((h - e).abs() < 1e-15);
        }
        assert!((s.eval(2.5) - (-5.0f64 / 6.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn breslow_rejects_non_finite() {
        assert!(matches!(
            breslow(&TIMES, &[true; 3], &[0.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn breslow_shift_scales_increments() {
        let times = [0.5, 1.5, 1.5, 2.0, 4.0];
        let events = [true, true, false, true, true];
        let f = [0.3, -1.2, 0.8, 0.0, 2.1];
        let c = 0.7;
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let a = breslow(&times, &events, &f).unwrap();
        let b = breslow(&times, &events, &shifted).unwrap();
        for (x, y) in a.cum_hazard().iter().zip(b.cum_hazard()) {
            assert!((x * (-c).exp() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_dump() {
        let mut buf = Vec::new();
        kaplan_meier(&TIMES, &EVENTS).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,survival\n1,0.66666666666666"));
    }

    proptest! {
        #[test]
        fn km_without_ties_or_censoring_drops_by_one_over_n(
            mut times in prop::collection::vec(0.0f64..100.0, 1..40)
        ) {
            times.sort_by(f64::total_cmp);
            times.dedup();
            let n = times.len();
            let s = kaplan_meier(&times, &vec![true; n]).unwrap();
            for (i, &t) in times.iter().enumerate() {
                prop_assert!((s.eval_left(t) - s.eval(t) - 1.0 / n as f64).abs() < 1e-12);
                prop_assert!((s.eval(t) - (n - i - 1) as f64 / n as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn curves_are_non_increasing(
            data in prop::collection::vec((0u8..20, any::<bool>(), -3.0f64..3.0), 1..50)
        ) {
            let times: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
            let events: Vec<bool> = data.iter().map(|d| d.1).collect();
            let f: Vec<f64> = data.iter().map(|d| d.2).collect();
            for s in [kaplan_meier(&times, &events).unwrap(), breslow(&times, &events, &f).unwrap()] {
                let v = s.survival_values();
                prop_assert!(v.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
