//! Censoring-adjusted evaluation: time-dependent concordance, IPCW AUC,
//! expected calibration error and IPCW Brier score, with bootstrap standard
//! errors and per-group breakdowns.
//!
//! Every metric takes one column of survival predictions `pi_i(t)` at a
//! horizon `t`. Lower predicted survival means higher risk. The censoring
//! survival curve `G` is a Kaplan-Meier fit to the flipped event indicator of
//! the evaluated records; `G(T_i-)` is its left limit.

use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{censoring_km, kaplan_meier, StepSurvivalCurve};
use crate::par::{map_range, Parallelism};

/// Records whose censoring-survival weight falls below this are left out of IPCW sums.
pub const MIN_CENSORING_WEIGHT: f64 = 1e-4;
pub const DEFAULT_ECE_BINS: usize = 20;
/// Strata smaller than this are reported as insufficient.
pub const MIN_GROUP_SIZE: usize = 20;
/// Label of the all-records stratum in reports.
pub const POPULATION: &str = "population";

/// Survival predictions for `N` records at `H` horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMatrix {
    pub horizons: Vec<f64>,
    /// `N x H`, entries in `[0, 1]`.
    pub values: Array2<f64>,
}

impl RiskMatrix {
    /// Wraps predictions whose columns correspond to `horizons`. Panics on a shape mismatch.
    pub fn new(horizons: Vec<f64>, values: Array2<f64>) -> Self {
        assert_eq!(horizons.len(), values.ncols(), "one column per horizon");
        Self { horizons, values }
    }

    /// Checked constructor for externally supplied predictions.
    pub fn try_new(horizons: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        if horizons.len() != values.ncols() {
            return Err(Error::DimensionMismatch {
                expected: horizons.len(),
                found: values.ncols(),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("survival predictions must lie in [0, 1]"));
        }
        Ok(Self { horizons, values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn column(&self, h: usize) -> Vec<f64> {
        self.values.column(h).to_vec()
    }
}

fn check_inputs(pred: &[f64], times: &[f64], events: &[bool]) -> Result<()> {
    if pred.len() != times.len() || times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            found: pred.len().min(events.len()),
        });
    }
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("survival predictions".into()));
    }
    Ok(())
}

/// `G(t-)`, or `None` when it is below [`MIN_CENSORING_WEIGHT`].
fn censoring_weight(g: &StepSurvivalCurve, t: f64) -> Option<f64> {
    let v = g.eval_left(t);
    (v >= MIN_CENSORING_WEIGHT).then_some(v)
}

fn warn_excluded(metric: &str, excluded: usize) {
    if excluded > 0 {
        warn!("{metric}: {excluded} record(s) with censoring weight below {MIN_CENSORING_WEIGHT} excluded");
    }
}

/// Per-case pair counts: later records with higher predicted survival, equal
/// predicted survival, and all later records.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PairCounts {
    greater: u64,
    equal: u64,
    comparable: u64,
}

/// Rows that can anchor a comparable pair, with their `1 / G(T_i-)^2` weights.
fn concordance_cases(times: &[f64], events: &[bool], horizon: f64, g: &StepSurvivalCurve) -> Vec<Option<f64>> {
    let mut excluded = 0;
    let cases = (0..times.len())
        .map(|i| {
            if !events[i] || times[i] > horizon {
                return None;
            }
            let w = censoring_weight(g, times[i]);
            if w.is_none() {
                excluded += 1;
            }
            w.map(|g| 1.0 / (g * g))
        })
        .collect();
    warn_excluded("concordance_td", excluded);
    cases
}

fn concordance_from_counts(weights: &[Option<f64>], counts: &[PairCounts]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (w, c) in weights.iter().zip(counts) {
        if let Some(w) = w {
            num += w * (c.greater as f64 + 0.5 * c.equal as f64);
            den += w * c.comparable as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::MetricUndefined("concordance_td has no comparable pairs".into()));
    }
    Ok(num / den)
}

/// Fenwick tree of counts over prediction ranks.
struct RankCounts {
    tree: Vec<u64>,
}

impl RankCounts {
    fn new(m: usize) -> Self {
        Self { tree: vec![0; m + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Time-dependent concordance at `horizon` with inverse-censoring weights.
///
/// A pair `(i, j)` is comparable when `i` has an observed event, `T_i < T_j` and
/// `T_i <= horizon`; it is concordant when `pi_i < pi_j`. Pairs tied in predicted
/// survival count one half; pairs tied in time are not comparable. Each pair is
/// weighted by `1 / G(T_i-)^2`. Runs in `O(n log n)`.
pub fn concordance_td(pred: &[f64], times: &[f64], events: &[bool], horizon: f64, g: &StepSurvivalCurve) -> Result<f64> {
    check_inputs(pred, times, events)?;
    let n = pred.len();
    let weights = concordance_cases(times, events, horizon, g);

    let mut levels = pred.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let rank = |p: f64| levels.partition_point(|&v| v < p);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = RankCounts::new(levels.len());
    let mut counts = vec![PairCounts::default(); n];
    let mut inserted = 0u64;
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let end = start + order[start..].iter().take_while(|&&i| times[i] == t).count();
        for &i in &order[start..end] {
            if weights[i].is_some() {
                let r = rank(pred[i]);
                let below_or_equal = tree.below(r + 1);
                counts[i] = PairCounts {
                    greater: inserted - below_or_equal,
                    equal: below_or_equal - tree.below(r),
                    comparable: inserted,
                };
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(pred[i]));
        }
        inserted += (end - start) as u64;
        start = end;
    }
    concordance_from_counts(&weights, &counts)
}

/// Same estimator as [`concordance_td`] by exhaustive enumeration of all pairs,
/// split across cases with `par`. Returns bit-identical results.
pub fn concordance_td_pairwise(
    pred: &[f64],
    times: &[f64],
    events: &[bool],
    horizon: f64,
    g: &StepSurvivalCurve,
    par: Parallelism,
) -> Result<f64> {
    check_inputs(pred, times, events)?;
    let weights = concordance_cases(times, events, horizon, g);
    let counts = map_range(pred.len(), par, |i| {
        let mut c = PairCounts::default();
        if weights[i].is_none() {
            return c;
        }
        for j in 0..pred.len() {
            if times[j] > times[i] {
                c.comparable += 1;
                if pred[j] > pred[i] {
                    c.greater += 1;
                } else if pred[j] == pred[i] {
                    c.equal += 1;
                }
            }
        }
        c
    });
    concordance_from_counts(&weights, &counts)
}

/// Area under the time-dependent ROC curve at `horizon`.
///
/// Cases are observed events with `T_i <= horizon`, weighted by `1 / G(T_i-)`;
/// controls are all records with `T_j > horizon`, unweighted. The risk score is
/// `1 - pi`. Trapezoidal integration over the thresholds at the distinct scores
/// equals the weighted Mann-Whitney statistic with ties counted one half, which
/// is how it is computed.
pub fn auc_ipcw(pred: &[f64], times: &[f64], events: &[bool], horizon: f64, g: &StepSurvivalCurve) -> Result<f64> {
    check_inputs(pred, times, events)?;
    let mut controls: Vec<f64> = (0..pred.len())
        .filter(|&j| times[j] > horizon)
        .map(|j| pred[j])
        .collect();
    controls.sort_by(f64::total_cmp);
    let mut excluded = 0;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pred.len() {
        if !events[i] || times[i] > horizon {
            continue;
        }
        let Some(gi) = censoring_weight(g, times[i]) else {
            excluded += 1;
            continue;
        };
        let w = 1.0 / gi;
        let below = controls.partition_point(|&p| p < pred[i]);
        let not_above = controls.partition_point(|&p| p <= pred[i]);
        let greater = controls.len() - not_above;
        let equal = not_above - below;
        num += w * (greater as f64 + 0.5 * equal as f64);
        den += w;
    }
    warn_excluded("auc_ipcw", excluded);
    if den == 0.0 {
        return Err(Error::MetricUndefined(format!("auc_ipcw has no cases at t = {horizon}")));
    }
    if controls.is_empty() {
        return Err(Error::MetricUndefined(format!("auc_ipcw has no controls at t = {horizon}")));
    }
    Ok(num / (den * controls.len() as f64))
}

/// One equal-mass bin of the calibration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin: usize,
    pub n: usize,
    pub mean_pred: f64,
    /// Within-bin Kaplan-Meier survival at the horizon; `None` when undefined.
    pub km_observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceResult {
    pub value: f64,
    pub bins: Vec<CalibrationBin>,
    /// Bins left out because their Kaplan-Meier curve is undefined at the horizon.
    pub skipped: usize,
}

/// Kaplan-Meier survival at `t`, or `None` when follow-up ends before `t` on a
/// censored record.
fn km_at(times: &[f64], events: &[bool], t: f64) -> Result<Option<f64>> {
    let km = kaplan_meier(times, events)?;
    let s = km.eval(t);
    let last = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((t <= last || s == 0.0).then_some(s))
}

/// Expected calibration error with `q` equal-mass bins of the predicted survival.
///
/// Records are ordered by `pi` and cut into `q` contiguous equal-mass bins,
/// except that tied predictions always share a bin; bins emptied that way
/// disappear. Each bin contributes `|KM_bin(t) - mean pi_bin|` and the value is
/// the average over bins. Bins with undefined Kaplan-Meier values are skipped and
/// the divisor shrinks accordingly.
pub fn ece(pred: &[f64], times: &[f64], events: &[bool], horizon: f64, q: usize) -> Result<EceResult> {
    check_inputs(pred, times, events)?;
    let n = pred.len();
    if q == 0 || n < q {
        return Err(Error::invalid(format!("ece needs at least {q} records (and q >= 1), got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // A tie group starting at sorted position s joins bin s * q / n, so tied
    // predictions never straddle a bin boundary.
    let mut assignment = vec![0; n];
    let mut start = 0;
    while start < n {
        let p = pred[order[start]];
        let end = start + order[start..].iter().take_while(|&&i| pred[i] == p).count();
        assignment[start..end].fill(start * q / n);
        start = end;
    }
    let mut bins = Vec::with_capacity(q);
    let mut total = 0.0;
    let mut used = 0;
    let mut start = 0;
    while start < n {
        let b = assignment[start];
        let end = start + assignment[start..].iter().take_while(|&&a| a == b).count();
        let rows = &order[start..end];
        start = end;
        let bt: Vec<f64> = rows.iter().map(|&i| times[i]).collect();
        let be: Vec<bool> = rows.iter().map(|&i| events[i]).collect();
        let mean_pred = rows.iter().map(|&i| pred[i]).sum::<f64>() / rows.len() as f64;
        let km_observed = km_at(&bt, &be, horizon)?;
        if let Some(km) = km_observed {
            total += (km - mean_pred).abs();
            used += 1;
        }
        bins.push(CalibrationBin {
            bin: b,
            n: rows.len(),
            mean_pred,
            km_observed,
        });
    }
    let skipped = bins.len() - used;
    if skipped > 0 {
        warn!("ece: {skipped} bin(s) with undefined Kaplan-Meier survival at t = {horizon} skipped");
    }
    if used == 0 {
        return Err(Error::MetricUndefined(format!("ece: every bin is undefined at t = {horizon}")));
    }
    Ok(EceResult {
        value: total / used as f64,
        bins,
        skipped,
    })
}

/// IPCW Brier score at `horizon`:
/// `mean_i [ pi_i^2 1{T_i <= t, event} / G(T_i-) + (1 - pi_i)^2 1{T_i > t} / G(t) ]`.
///
/// Records with `G(T_i-)` below [`MIN_CENSORING_WEIGHT`] leave both the sum and
/// the record count.
pub fn brier_ipcw(pred: &[f64], times: &[f64], events: &[bool], horizon: f64, g: &StepSurvivalCurve) -> Result<f64> {
    check_inputs(pred, times, events)?;
    let g_t = g.eval(horizon);
    if g_t < MIN_CENSORING_WEIGHT {
        return Err(Error::MetricUndefined(format!(
            "brier_ipcw: censoring survival G({horizon}) = {g_t} is below {MIN_CENSORING_WEIGHT}; horizon beyond follow-up"
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut excluded = 0;
    for i in 0..pred.len() {
        let p = pred[i];
        if times[i] > horizon {
            total += (1.0 - p) * (1.0 - p) / g_t;
        } else if events[i] {
            match censoring_weight(g, times[i]) {
                Some(gi) => total += p * p / gi,
                None => {
                    excluded += 1;
                    continue;
                }
            }
        }
        count += 1;
    }
    warn_excluded("brier_ipcw", excluded);
    if count == 0 {
        return Err(Error::MetricUndefined("brier_ipcw has no usable records".into()));
    }
    Ok(total / count as f64)
}

/// The four reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ctd,
    Auc,
    Ece,
    Brier,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ctd, Metric::Auc, Metric::Ece, Metric::Brier];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ctd => "ctd",
            Metric::Auc => "auc",
            Metric::Ece => "ece",
            Metric::Brier => "brier",
        }
    }

    /// Evaluates the metric, fitting `G` on the supplied records.
    pub fn evaluate(self, pred: &[f64], times: &[f64], events: &[bool], horizon: f64, ece_bins: usize) -> Result<f64> {
        if self == Metric::Ece {
            return ece(pred, times, events, horizon, ece_bins).map(|r| r.value);
        }
        let g = censoring_km(times, events)?;
        self.evaluate_with(pred, times, events, horizon, &g, ece_bins)
    }

    fn evaluate_with(
        self,
        pred: &[f64],
        times: &[f64],
        events: &[bool],
        horizon: f64,
        g: &StepSurvivalCurve,
        ece_bins: usize,
    ) -> Result<f64> {
        match self {
            Metric::Ctd => concordance_td(pred, times, events, horizon, g),
            Metric::Auc => auc_ipcw(pred, times, events, horizon, g),
            Metric::Ece => ece(pred, times, events, horizon, ece_bins).map(|r| r.value),
            Metric::Brier => brier_ipcw(pred, times, events, horizon, g),
        }
    }
}

/// Replicate mean and standard deviation of a bootstrapped statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    /// `None` when every replicate failed.
    pub mean: Option<f64>,
    /// Sample standard deviation (N-1) of the successful replicates; 0 with fewer than two.
    pub se: Option<f64>,
    /// Replicates that produced a value.
    pub replicates: usize,
    /// Replicates whose evaluation failed.
    pub dropped: usize,
}

impl BootstrapEstimate {
    fn from_values(values: &[f64], dropped: usize) -> Self {
        let m = values.len();
        if m == 0 {
            return Self {
                mean: None,
                se: None,
                replicates: 0,
                dropped,
            };
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        let se = if m > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            se: Some(se),
            replicates: m,
            dropped,
        }
    }
}

/// Row indices of bootstrap replicate `replicate`: `n` draws with replacement
/// from a ChaCha stream selected by the replicate index.
pub fn bootstrap_indices(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstraps a vector of `width` statistics at once. `metric` receives the
/// resampled row indices; each entry that errors is dropped for that replicate.
pub fn bootstrap_many<F>(
    n: usize,
    replicates: usize,
    seed: u64,
    width: usize,
    par: Parallelism,
    metric: F,
) -> Result<Vec<BootstrapEstimate>>
where
    F: Fn(&[usize]) -> Vec<Result<f64>> + Sync + Send,
{
    if n < 2 {
        return Err(Error::invalid("bootstrap needs at least two records"));
    }
    let draws = map_range(replicates, par, |r| {
        let values = metric(&bootstrap_indices(n, seed, r));
        assert_eq!(values.len(), width, "metric closure must return `width` values");
        values.into_iter().map(|v| v.ok().filter(|x| x.is_finite())).collect::<Vec<_>>()
    });
    Ok((0..width)
        .map(|k| {
            let ok: Vec<f64> = draws.iter().filter_map(|d| d[k]).collect();
            BootstrapEstimate::from_values(&ok, replicates - ok.len())
        })
        .collect())
}

/// Bootstraps a single statistic.
pub fn bootstrap_se<F>(n: usize, replicates: usize, seed: u64, par: Parallelism, metric: F) -> Result<BootstrapEstimate>
where
    F: Fn(&[usize]) -> Result<f64> + Sync + Send,
{
    let mut v = bootstrap_many(n, replicates, seed, 1, par, |idx| vec![metric(idx)])?;
    Ok(v.remove(0))
}

/// Options for [`evaluate_by_group`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bootstrap: usize,
    pub seed: u64,
    pub ece_bins: usize,
    pub parallelism: Parallelism,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bootstrap: 100,
            seed: 0,
            ece_bins: DEFAULT_ECE_BINS,
            parallelism: Parallelism::default(),
        }
    }
}

/// Outcome of one (metric, horizon, stratum) evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Stratum smaller than [`MIN_GROUP_SIZE`].
    Insufficient,
    /// The metric is undefined on the full stratum.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub horizon: f64,
    pub group: String,
    /// Point estimate on all records of the stratum.
    pub estimate: Option<f64>,
    /// Bootstrap standard error.
    pub se: Option<f64>,
    /// Records in the stratum.
    pub n: usize,
    pub bootstrap_mean: Option<f64>,
    pub replicates: usize,
    pub dropped_replicates: usize,
    pub status: RowStatus,
}

/// Calibration-bin table entry for reliability plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub horizon: f64,
    pub group: String,
    #[serde(flatten)]
    pub bin: CalibrationBin,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub calibration: Vec<CalibrationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsReport {
    pub fn get(&self, metric: Metric, horizon_index: usize, group: &str) -> Option<&ReportRow> {
        let mut horizons: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !horizons.contains(&r.horizon) {
                horizons.push(r.horizon);
            }
        }
        let h = *horizons.get(horizon_index)?;
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.horizon == h && r.group == group)
    }

    /// CSV with columns `metric,horizon,group,estimate,se,n`; missing values are `NA`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "horizon", "group", "estimate", "se", "n"])?;
        for r in &self.rows {
            out.write_record([
                r.metric.name().to_string(),
                r.horizon.to_string(),
                r.group.clone(),
                fmt_opt(r.estimate),
                fmt_opt(r.se),
                r.n.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// CSV with columns `horizon,group,bin,n,mean_pred,km_observed`.
    pub fn write_calibration_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["horizon", "group", "bin", "n", "mean_pred", "km_observed"])?;
        for r in &self.calibration {
            out.write_record([
                r.horizon.to_string(),
                r.group.clone(),
                r.bin.bin.to_string(),
                r.bin.n.to_string(),
                r.bin.mean_pred.to_string(),
                fmt_opt(r.bin.km_observed),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.csv`, `report.json` and `calibration.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        self.write_calibration_csv(std::fs::File::create(dir.join("calibration.csv"))?)?;
        Ok(())
    }
}

/// Evaluates one stratum: point estimates, bootstrap SEs and the calibration table.
fn evaluate_stratum(risk: &RiskMatrix, times: &[f64], events: &[bool], rows: &[usize], group: &str, opts: &EvalOptions, report: &mut MetricsReport) -> Result<()> {
    let n = rows.len();
    let n_h = risk.horizons.len();
    if n < MIN_GROUP_SIZE {
        warn!("group '{group}' has {n} records (< {MIN_GROUP_SIZE}); reported as insufficient");
        for &h in &risk.horizons {
            for m in Metric::ALL {
                report.rows.push(ReportRow {
                    metric: m,
                    horizon: h,
                    group: group.to_string(),
                    estimate: None,
                    se: None,
                    n,
                    bootstrap_mean: None,
                    replicates: 0,
                    dropped_replicates: 0,
                    status: RowStatus::Insufficient,
                });
            }
        }
        return Ok(());
    }
    let t: Vec<f64> = rows.iter().map(|&i| times[i]).collect();
    let e: Vec<bool> = rows.iter().map(|&i| events[i]).collect();
    let cols: Vec<Vec<f64>> = (0..n_h)
        .map(|h| rows.iter().map(|&i| risk.values[[i, h]]).collect())
        .collect();

    let all_metrics = |idx: Option<&[usize]>| -> Vec<Result<f64>> {
        let pick_f = |v: &[f64]| idx.map_or_else(|| v.to_vec(), |ix| ix.iter().map(|&i| v[i]).collect());
        let tt = pick_f(&t);
        let ee: Vec<bool> = idx.map_or_else(|| e.clone(), |ix| ix.iter().map(|&i| e[i]).collect());
        let g = censoring_km(&tt, &ee);
        let mut out = Vec::with_capacity(n_h * Metric::ALL.len());
        for (h, &horizon) in risk.horizons.iter().enumerate() {
            let p = pick_f(&cols[h]);
            for m in Metric::ALL {
                out.push(match &g {
                    Ok(g) => m.evaluate_with(&p, &tt, &ee, horizon, g, opts.ece_bins),
                    Err(_) => Err(Error::MetricUndefined("censoring curve".into())),
                });
            }
        }
        out
    };

    let points = all_metrics(None);
    let boot = if opts.bootstrap > 0 {
        bootstrap_many(n, opts.bootstrap, opts.seed, points.len(), opts.parallelism, |idx| all_metrics(Some(idx)))?
    } else {
        vec![BootstrapEstimate::from_values(&[], 0); points.len()]
    };
    let mut k = 0;
    for (h, &horizon) in risk.horizons.iter().enumerate() {
        for m in Metric::ALL {
            let point = points[k].as_ref().ok().copied();
            if let Err(err) = &points[k] {
                warn!("{} at t = {horizon} for group '{group}': {err}", m.name());
            }
            let b = boot[k];
            report.rows.push(ReportRow {
                metric: m,
                horizon,
                group: group.to_string(),
                estimate: point,
                se: point.and(b.se),
                n,
                bootstrap_mean: b.mean,
                replicates: b.replicates,
                dropped_replicates: b.dropped,
                status: if point.is_some() { RowStatus::Ok } else { RowStatus::Undefined },
            });
            k += 1;
        }
        if let Ok(res) = ece(&cols[h], &t, &e, horizon, opts.ece_bins) {
            report.calibration.extend(res.bins.into_iter().map(|bin| CalibrationRow {
                horizon,
                group: group.to_string(),
                bin,
            }));
        }
    }
    Ok(())
}

/// Computes every metric at every horizon for the full population and for each
/// group label (sorted), with the censoring curve re-estimated within each
/// stratum and each bootstrap replicate. Records without a label only enter the
/// population stratum.
pub fn evaluate_by_group(
    risk: &RiskMatrix,
    times: &[f64],
    events: &[bool],
    groups: Option<&[Option<String>]>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let n = risk.len();
    if times.len() != n || events.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: times.len(),
        });
    }
    let mut report = MetricsReport::default();
    let all: Vec<usize> = (0..n).collect();
    evaluate_stratum(risk, times, events, &all, POPULATION, opts, &mut report)?;
    if let Some(groups) = groups {
        if groups.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: groups.len(),
            });
        }
        let mut labels: Vec<&String> = groups.iter().flatten().collect();
        labels.sort();
        labels.dedup();
        for label in labels {
            let rows: Vec<usize> = (0..n).filter(|&i| groups[i].as_ref() == Some(label)).collect();
            evaluate_stratum(risk, times, events, &rows, label, opts, &mut report)?;
        }
    }
    Ok(report)
}
