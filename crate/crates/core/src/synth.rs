//! Synthetic survival cohorts with known latent clusters.
//!
//! Covariates are standard normal. A latent cluster `z` is drawn from
//! `softmax(w_k . x + b_k)`; the event time follows cluster `z`'s baseline with
//! its hazard multiplied by `exp(beta_z . x)` (plus an optional group shift).
//! Censoring is independent exponential with a rate calibrated by bisection to
//! hit a target censored fraction.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{SurvivalDataset, SurvivalRecord};
use crate::error::{Error, Result};

/// Maximum number of bisection steps when calibrating the censoring rate.
pub const CALIBRATION_STEPS: usize = 60;
/// Accepted absolute gap between realized and target censored fraction.
pub const CENSORING_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Baseline {
    /// `S_0(t) = exp(-rate t)`.
    Exponential { rate: f64 },
    /// `S_0(t) = exp(-(t / scale)^shape)`.
    Weibull { shape: f64, scale: f64 },
}

impl Baseline {
    pub fn cum_hazard(&self, t: f64) -> f64 {
        match *self {
            Baseline::Exponential { rate } => rate * t,
            Baseline::Weibull { shape, scale } => (t / scale).powf(shape),
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.cum_hazard(t)).exp()
    }

    /// Time at which the cumulative hazard reaches `h`.
    fn inverse_cum_hazard(&self, h: f64) -> f64 {
        match *self {
            Baseline::Exponential { rate } => h / rate,
            Baseline::Weibull { shape, scale } => scale * h.powf(1.0 / shape),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Baseline::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Baseline::Weibull { shape, scale } => shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("baseline parameters must be positive and finite: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub baseline: Baseline,
    /// Log-hazard coefficients, length `d`.
    pub beta: Vec<f64>,
    /// Gating coefficients, length `d`.
    pub gate: Vec<f64>,
    #[serde(default)]
    pub gate_bias: f64,
}

/// Optional binary group label. Members of group `"1"` get `hazard_shift` added
/// to their log-hazard; the label is written as a numeric `group` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Probability of belonging to group `"1"`.
    pub prevalence: f64,
    #[serde(default)]
    pub hazard_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub clusters: Vec<ClusterSpec>,
    /// Target censored fraction in `[0, 0.95]`.
    pub censoring_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub group: Option<GroupSpec>,
}

impl SynthConfig {
    pub fn k_true(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("at least one cluster is required"));
        }
        if !(0.0..=0.95).contains(&self.censoring_fraction) {
            return Err(Error::invalid("censoring fraction must lie in [0, 0.95]"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        for (k, c) in self.clusters.iter().enumerate() {
            c.baseline.validate()?;
            if c.beta.len() != self.d || c.gate.len() != self.d {
                return Err(Error::invalid(format!("cluster {k}: beta and gate need {} entries", self.d)));
            }
        }
        if let Some(g) = &self.group {
            if !(0.0..=1.0).contains(&g.prevalence) {
                return Err(Error::invalid("group prevalence must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Mixture weights `softmax(w_k . x + b_k)`.
    pub fn gate_probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .clusters
            .iter()
            .map(|c| dot(&c.gate, x) + c.gate_bias)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn log_hazard(&self, k: usize, x: &[f64], in_group: bool) -> f64 {
        let shift = match (&self.group, in_group) {
            (Some(g), true) => g.hazard_shift,
            _ => 0.0,
        };
        dot(&self.clusters[k].beta, x) + shift
    }

    /// Survival of cluster `k` at `t` for covariates `x`.
    pub fn cluster_survival(&self, k: usize, x: &[f64], in_group: bool, t: f64) -> f64 {
        (-self.clusters[k].baseline.cum_hazard(t) * self.log_hazard(k, x, in_group).exp()).exp()
    }

    /// True marginal survival `sum_k P(z = k | x) S_k(t | x)`.
    pub fn true_survival(&self, x: &[f64], in_group: bool, t: f64) -> f64 {
        self.gate_probabilities(x)
            .iter()
            .enumerate()
            .map(|(k, p)| p * self.cluster_survival(k, x, in_group, t))
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A generated cohort plus the ground truth a model must not see.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub features: Vec<Vec<f64>>,
    /// Membership in group `"1"`, when a group is configured.
    pub in_group: Vec<bool>,
    pub latent: Vec<usize>,
    pub event_times: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// Calibrated exponential censoring rate; 0 when no censoring.
    pub censoring_rate: f64,
}

/// Ground-truth sidecar written next to the cohort CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: SynthConfig,
    pub latent: Vec<usize>,
    pub censoring_rate: f64,
    pub realized_censoring_fraction: f64,
}

impl SynthCohort {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.events.iter().filter(|e| !**e).count() as f64 / self.len() as f64
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.config.d).map(|j| format!("x{j}")).collect();
        if self.config.group.is_some() {
            names.push("group".into());
        }
        names
    }

    /// Feature rows as written to CSV: covariates, then the 0/1 group column if configured.
    fn csv_features(&self, i: usize) -> Vec<f64> {
        let mut f = self.features[i].clone();
        if self.config.group.is_some() {
            f.push(if self.in_group[i] { 1.0 } else { 0.0 });
        }
        f
    }

    /// The cohort as a dataset; the group column (if any) is both a feature and the label.
    pub fn dataset(&self) -> Result<SurvivalDataset> {
        let records = (0..self.len())
            .map(|i| SurvivalRecord {
                features: self.csv_features(i),
                time: self.times[i],
                event: self.events[i],
                group: self
                    .config
                    .group
                    .as_ref()
                    .map(|_| if self.in_group[i] { "1" } else { "0" }.to_string()),
            })
            .collect();
        SurvivalDataset::new(records, self.feature_names())
    }

    /// True survival of record `i` at `t`.
    pub fn true_survival(&self, i: usize, t: f64) -> f64 {
        self.config.true_survival(&self.features[i], self.in_group[i], t)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            config: self.config.clone(),
            latent: self.latent.clone(),
            censoring_rate: self.censoring_rate,
            realized_censoring_fraction: self.censored_fraction(),
        }
    }

    /// CSV with columns `x1..xd[,group],time,event`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.feature_names();
        header.push("time".into());
        header.push("event".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.csv_features(i).iter().map(f64::to_string).collect();
            row.push(self.times[i].to_string());
            row.push(u8::from(self.events[i]).to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the cohort CSV and its JSON sidecar.
    pub fn save(&self, csv_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }
}

fn censored_fraction_at(rate: f64, event_times: &[f64], unit_draws: &[f64]) -> f64 {
    let censored = event_times
        .iter()
        .zip(unit_draws)
        .filter(|(t, e)| *e / rate < **t)
        .count();
    censored as f64 / event_times.len() as f64
}

/// Finds an exponential censoring rate whose realized censored fraction is within
/// [`CENSORING_TOLERANCE`] of `target`, bisecting on the log rate with the
/// unit-exponential draws held fixed.
fn calibrate_censoring(target: f64, event_times: &[f64], unit_draws: &[f64]) -> Result<f64> {
    let mut sorted = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2].max(f64::MIN_POSITIVE);
    let (mut lo, mut hi) = ((1e-8 / median).ln(), (1e8 / median).ln());
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        let frac = censored_fraction_at(mid.exp(), event_times, unit_draws);
        let gap = (frac - target).abs();
        if gap < best.0 {
            best = (gap, mid.exp());
        }
        if gap <= CENSORING_TOLERANCE / 4.0 {
            break;
        }
        if frac < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CENSORING_TOLERANCE {
        return Err(Error::Calibration(format!(
            "closest censored fraction is {:.4} away from the target {target} after {CALIBRATION_STEPS} steps",
            best.0
        )));
    }
    Ok(best.1)
}

/// Draws a cohort. Each record consumes, in order: `d` normals, one uniform for
/// the group, one for the cluster, one for the event time and one unit
/// exponential for censoring.
pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;
    let mut features = Vec::with_capacity(n);
    let mut in_group = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut event_times = Vec::with_capacity(n);
    let mut unit_draws = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..config.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u_group: f64 = rng.random();
        let g = config.group.as_ref().is_some_and(|spec| u_group < spec.prevalence);
        let probs = config.gate_probabilities(&x);
        let u_cluster: f64 = rng.random();
        let mut acc = 0.0;
        let z = probs
            .iter()
            .position(|p| {
                acc += p;
                u_cluster < acc
            })
            .unwrap_or(probs.len() - 1);
        let e: f64 = Exp1.sample(&mut rng);
        let t = config.clusters[z].baseline.inverse_cum_hazard(e / config.log_hazard(z, &x, g).exp());
        unit_draws.push(Exp1.sample(&mut rng));
        features.push(x);
        in_group.push(g);
        latent.push(z);
        event_times.push(t);
    }
    let censoring_rate = if config.censoring_fraction > 0.0 {
        calibrate_censoring(config.censoring_fraction, &event_times, &unit_draws)?
    } else {
        0.0
    };
    let (times, events) = event_times
        .iter()
        .zip(&unit_draws)
        .map(|(&t, &u)| {
            let c = if censoring_rate > 0.0 { u / censoring_rate } else { f64::INFINITY };
            (t.min(c), t <= c)
        })
        .unzip();
    Ok(SynthCohort {
        config: config.clone(),
        features,
        in_group,
        latent,
        event_times,
        times,
        events,
        censoring_rate,
    })
}

fn padded(d: usize, head: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[..head.len()].copy_from_slice(head);
    v
}

/// Single-cluster proportional-hazards cohort: unit exponential baseline,
/// coefficients `beta`, no gating.
pub fn ph_config(n: usize, beta: &[f64], censoring_fraction: f64, seed: u64) -> SynthConfig {
    let d = beta.len();
    SynthConfig {
        n,
        d,
        clusters: vec![ClusterSpec {
            baseline: Baseline::Exponential { rate: 1.0 },
            beta: beta.to_vec(),
            gate: vec![0.0; d],
            gate_bias: 0.0,
        }],
        censoring_fraction,
        seed,
        group: None,
    }
}

/// Two clusters whose survival curves cross: an early-failure Weibull (shape
/// 0.5) and a wear-out Weibull (shape 4), gated by `x1` and with opposite
/// effects of `x2`. No single proportional-hazards model fits it.
pub fn crossing_config(n: usize, censoring_fraction: f64, seed: u64) -> SynthConfig {
    let d = 4;
    SynthConfig {
        n,
        d,
        clusters: vec![
            ClusterSpec {
                baseline: Baseline::Weibull { shape: 0.5, scale: 2.0 },
                beta: padded(d, &[0.0, 1.5]),
                gate: padded(d, &[2.5]),
                gate_bias: 0.0,
            },
            ClusterSpec {
                baseline: Baseline::Weibull { shape: 4.0, scale: 1.5 },
                beta: padded(d, &[0.0, -1.5]),
                gate: padded(d, &[-2.5]),
                gate_bias: 0.0,
            },
        ],
        censoring_fraction,
        seed,
        group: None,
    }
}

/// Two clusters far apart in time: an early exponential-like cluster (Weibull
/// shape 1, scale 0.3) and a late wear-out cluster (shape 6, scale 3), gated by
/// `x1` and with opposite effects of `x2`.
pub fn separated_config(n: usize, censoring_fraction: f64, seed: u64) -> SynthConfig {
    let d = 3;
    SynthConfig {
        n,
        d,
        clusters: vec![
            ClusterSpec {
                baseline: Baseline::Weibull { shape: 1.0, scale: 0.3 },
                beta: padded(d, &[0.0, 1.0]),
                gate: padded(d, &[3.0]),
                gate_bias: 0.0,
            },
            ClusterSpec {
                baseline: Baseline::Weibull { shape: 6.0, scale: 3.0 },
                beta: padded(d, &[0.0, -1.0]),
                gate: padded(d, &[-3.0]),
                gate_bias: 0.0,
            },
        ],
        censoring_fraction,
        seed,
        group: None,
    }
}
