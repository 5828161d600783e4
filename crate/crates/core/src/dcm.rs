//! Deep Cox mixture model and its Monte Carlo EM training loop.
//!
//! Each epoch visits shuffled minibatches. For every minibatch the E-step
//! computes posterior cluster probabilities `gamma` from the spline baselines,
//! hard assignments `zeta ~ Categorical(gamma)` are drawn, and one Adam step is
//! taken on the objective in [`crate::objective::q_hat`]. After the minibatch
//! pass a full-data E-step assigns every training record and the per-cluster
//! Breslow baselines are refitted and re-splined.
//!
//! The first epoch has no informative baselines yet: its minibatches use uniform
//! `gamma` and uniformly drawn `zeta`, and every cluster starts from the pooled
//! Kaplan-Meier curve.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{event_time_quantiles, Standardization, SurvivalDataset};
use crate::error::{Error, Result};
use crate::estimators::{breslow, kaplan_meier};
use crate::metrics::RiskMatrix;
use crate::neural::{
    adam_step, clip_grad_norm, init_params, log_softmax_rows, softmax_rows, Activation, AdamState, DenseLayer,
    HeadParams, MlpParams, Network,
};
use crate::objective::q_hat;
use crate::par::{map_range, Parallelism};
use crate::spline::{fit_spline, SplineSurvivalCurve, DEFAULT_MAX_KNOTS};

/// When per-cluster baselines are refitted on the full training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRefresh {
    #[default]
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcmConfig {
    /// Number of mixture components.
    pub k: usize,
    /// Hidden layer widths of the encoder; empty means the heads see raw features.
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub max_knots: usize,
    pub refresh: BaselineRefresh,
    /// Multiply E-step likelihoods by the gating prior `softmax(g(x))`.
    pub use_prior_in_estep: bool,
    /// Share of training records held out for early stopping.
    pub validation_fraction: f64,
    pub grad_clip: f64,
}

impl Default for DcmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            hidden: vec![50],
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            max_knots: DEFAULT_MAX_KNOTS,
            refresh: BaselineRefresh::PerEpoch,
            use_prior_in_estep: true,
            validation_fraction: 0.1,
            grad_clip: 10.0,
        }
    }
}

impl DcmConfig {
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim).chain(self.hidden.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.batch_size < 2 * self.k {
            return Err(Error::invalid(format!(
                "batch size {} is smaller than 2K = {}",
                self.batch_size,
                2 * self.k
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log. Losses are the negated objective per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    /// E-step rows whose weights all vanished and were replaced by a uniform posterior.
    pub uniform_posterior_rows: usize,
    /// Baseline refreshes skipped because a cluster had fewer than two events.
    pub starved_refreshes: usize,
}

/// Posterior table for a set of rows: soft counts and sampled hard counts (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub gamma: Array2<f64>,
    pub zeta: Vec<usize>,
}

/// Feature matrix and outcomes for a subset of rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl Batch {
    pub fn from_dataset(ds: &SurvivalDataset, rows: &[usize]) -> Self {
        let d = ds.dim();
        Self {
            x: Array2::from_shape_fn((rows.len(), d), |(i, j)| ds.records[rows[i]].features[j]),
            times: rows.iter().map(|&i| ds.records[i].time).collect(),
            events: rows.iter().map(|&i| ds.records[i].event).collect(),
        }
    }

    pub fn all(ds: &SurvivalDataset) -> Self {
        Self::from_dataset(ds, &(0..ds.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Posterior cluster probabilities for `batch`.
///
/// Row weights are `density^delta * survival^(1 - delta)` per cluster (times the gating
/// prior when `use_prior`), combined in log space. Densities are floored at
/// `EPS_DENSITY` and spline survival at `EPS_SURVIVAL`; rows whose normalizer is still
/// not finite get a uniform posterior and are counted in the second return value.
pub fn e_step(
    network: &Network,
    baselines: &[SplineSurvivalCurve],
    batch: &Batch,
    use_prior: bool,
) -> Result<(Array2<f64>, usize)> {
    let k = network.k();
    if baselines.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: baselines.len(),
        });
    }
    let pass = network.forward(&batch.x)?;
    let log_prior = log_softmax_rows(&pass.gating_logits);
    let mut gamma = Array2::zeros((batch.len(), k));
    let mut degenerate = 0;
    for i in 0..batch.len() {
        let t = batch.times[i];
        let logw: Vec<f64> = (0..k)
            .map(|c| {
                let f = pass.log_hazards[[i, c]];
                let ll = if batch.events[i] {
                    baselines[c].log_density_given_cluster(f, t)
                } else {
                    baselines[c].log_survival_given_cluster(f, t)
                };
                if use_prior {
                    ll + log_prior[[i, c]]
                } else {
                    ll
                }
            })
            .collect();
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logw.iter().map(|l| (l - m).exp()).sum();
        if !(m.is_finite() && total.is_finite() && total > 0.0) {
            degenerate += 1;
            gamma.row_mut(i).fill(1.0 / k as f64);
            continue;
        }
        for c in 0..k {
            gamma[[i, c]] = (logw[c] - m).exp() / total;
        }
    }
    Ok((gamma, degenerate))
}

/// Independent categorical draws, one per row of `gamma`.
pub fn sample_assignments<R: Rng + ?Sized>(gamma: &Array2<f64>, rng: &mut R) -> Vec<usize> {
    let k = gamma.ncols();
    gamma
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c;
                }
            }
            // Rounding left u above the final cumulative sum: last cluster with mass.
            row.iter().rposition(|p| *p > 0.0).unwrap_or(k - 1)
        })
        .collect()
}

/// One Adam step on the minibatch objective. Returns the loss before the update.
pub fn m_step(
    network: &mut Network,
    adam: &mut AdamState,
    batch: &Batch,
    posterior: &PosteriorTable,
    grad_clip: f64,
) -> Result<f64> {
    let pass = network.forward(&batch.x)?;
    let q = q_hat(
        &batch.times,
        &batch.events,
        &posterior.gamma,
        &posterior.zeta,
        &pass.log_hazards,
        &pass.gating_logits,
    )?;
    let mut grads = network.backward(&pass, &q.d_log_hazards, &q.d_gating)?.to_flat();
    clip_grad_norm(&mut grads, grad_clip);
    adam_step(network, &grads, adam)?;
    Ok(q.loss)
}

/// Refits each cluster's baseline on the records assigned to it: Breslow with the
/// cluster's log-hazards, then a spline. Clusters with fewer than two events keep
/// their previous baseline; the second return value counts them.
pub fn update_baselines(
    network: &Network,
    batch: &Batch,
    zeta: &[usize],
    previous: &[SplineSurvivalCurve],
    max_knots: usize,
) -> Result<(Vec<SplineSurvivalCurve>, usize)> {
    let pass = network.forward(&batch.x)?;
    let mut starved = 0;
    let mut out = Vec::with_capacity(previous.len());
    for (c, prev) in previous.iter().enumerate() {
        let rows: Vec<usize> = (0..batch.len()).filter(|&i| zeta[i] == c).collect();
        let n_events = rows.iter().filter(|&&i| batch.events[i]).count();
        if n_events < 2 {
            starved += 1;
            out.push(prev.clone());
            continue;
        }
        let t: Vec<f64> = rows.iter().map(|&i| batch.times[i]).collect();
        let e: Vec<bool> = rows.iter().map(|&i| batch.events[i]).collect();
        let f: Vec<f64> = rows.iter().map(|&i| pass.log_hazards[[i, c]]).collect();
        out.push(fit_spline(&breslow(&t, &e, &f)?, max_knots));
    }
    Ok((out, starved))
}

/// Mean per-record loss on `batch`, drawing `zeta` with a caller-supplied RNG.
fn evaluation_loss(
    network: &Network,
    baselines: &[SplineSurvivalCurve],
    batch: &Batch,
    use_prior: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (gamma, _) = e_step(network, baselines, batch, use_prior)?;
    let pass = network.forward(&batch.x)?;
    let mut total = 0.0;
    for _ in 0..EVALUATION_DRAWS {
        let zeta = sample_assignments(&gamma, rng);
        total += q_hat(&batch.times, &batch.events, &gamma, &zeta, &pass.log_hazards, &pass.gating_logits)?.loss;
    }
    Ok(total / (EVALUATION_DRAWS * batch.len()) as f64)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_VALID: u64 = 4;
/// Assignment draws averaged into each evaluation of the objective.
const EVALUATION_DRAWS: usize = 16;

/// Trained model: network, per-cluster baselines and the preprocessing it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct DcmModel {
    pub network: Network,
    pub baselines: Vec<SplineSurvivalCurve>,
    /// Applied to raw features before the network; `None` means features are used as given.
    pub standardization: Option<Standardization>,
    pub feature_names: Vec<String>,
    pub config: DcmConfig,
    pub training_log: Vec<EpochLog>,
    /// Uncensored training event-time percentiles 1..=99 (nearest rank).
    pub event_time_percentiles: Vec<f64>,
    pub diagnostics: TrainingDiagnostics,
}

/// Trains a model on `ds`. Features are used as they are; standardize beforehand and
/// the statistics recorded on `ds` travel with the model.
pub fn fit(ds: &SurvivalDataset, config: &DcmConfig) -> Result<DcmModel> {
    config.validate()?;
    if ds.n_events() == 0 {
        return Err(Error::NoEvents("training data".into()));
    }
    let k = config.k;
    let n = ds.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_stream(config.seed, STREAM_SPLIT));
    let n_valid = (n as f64 * config.validation_fraction).round() as usize;
    let (train_rows, valid_rows) = if n_valid >= 2 && n - n_valid >= 2 * k {
        let (v, t) = order.split_at(n_valid);
        let mut t = t.to_vec();
        let mut v = v.to_vec();
        t.sort_unstable();
        v.sort_unstable();
        (t, v)
    } else {
        ((0..n).collect(), (0..n).collect())
    };
    let train = Batch::from_dataset(ds, &train_rows);
    let valid = Batch::from_dataset(ds, &valid_rows);
    if !train.events.iter().any(|&e| e) {
        return Err(Error::NoEvents("training split".into()));
    }

    let mut network = init_params(&config.layer_dims(ds.dim()), k, config.seed)?;
    let mut adam = AdamState::new(network.num_params(), config.lr);
    let pooled = fit_spline(&kaplan_meier(&train.times, &train.events)?, config.max_knots);
    let mut baselines = vec![pooled; k];
    let mut diagnostics = TrainingDiagnostics::default();
    let mut shuffle_rng = rng_stream(config.seed, STREAM_SHUFFLE);
    let mut sample_rng = rng_stream(config.seed, STREAM_SAMPLE);
    let valid_loss = |net: &Network, b: &[SplineSurvivalCurve]| {
        evaluation_loss(net, b, &valid, config.use_prior_in_estep, &mut rng_stream(config.seed, STREAM_VALID))
    };

    let initial = valid_loss(&network, &baselines)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: evaluation_loss(&network, &baselines, &train, config.use_prior_in_estep, &mut rng_stream(config.seed, STREAM_VALID))?,
        valid_loss: initial,
    }];
    let mut best = (initial, network.clone(), baselines.clone());
    let mut since_best = 0;
    let mut positions: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        positions.shuffle(&mut shuffle_rng);
        let batches = minibatches(&positions, config.batch_size);
        let mut epoch_loss = 0.0;
        for rows in &batches {
            let batch = Batch {
                x: train.x.select(Axis(0), rows),
                times: rows.iter().map(|&i| train.times[i]).collect(),
                events: rows.iter().map(|&i| train.events[i]).collect(),
            };
            let gamma = if epoch == 1 {
                Array2::from_elem((batch.len(), k), 1.0 / k as f64)
            } else {
                let (g, bad) = e_step(&network, &baselines, &batch, config.use_prior_in_estep)?;
                diagnostics.uniform_posterior_rows += bad;
                g
            };
            let zeta = sample_assignments(&gamma, &mut sample_rng);
            let loss = m_step(&mut network, &mut adam, &batch, &PosteriorTable { gamma, zeta }, config.grad_clip)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            epoch_loss += loss;
            if config.refresh == BaselineRefresh::PerBatch {
                refresh(&network, &mut baselines, &train, config, &mut sample_rng, &mut diagnostics)?;
            }
        }
        if config.refresh == BaselineRefresh::PerEpoch {
            refresh(&network, &mut baselines, &train, config, &mut sample_rng, &mut diagnostics)?;
        }
        let v = valid_loss(&network, &baselines)?;
        if !v.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss in epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {:.6} valid {v:.6}", epoch_loss / train.len() as f64);
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_loss: v,
        });
        if v < best.0 {
            best = (v, network.clone(), baselines.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let probs: Vec<f64> = (1..=99).map(|p| p as f64 / 100.0).collect();
    let event_time_percentiles = event_time_quantiles(&train.times, &train.events, &probs)?;
    Ok(DcmModel {
        network: best.1,
        baselines: best.2,
        standardization: ds.standardization.clone(),
        feature_names: ds.feature_names.clone(),
        config: config.clone(),
        training_log: log,
        event_time_percentiles,
        diagnostics,
    })
}

/// Full-data E-step, assignment draw and baseline refit.
fn refresh(
    network: &Network,
    baselines: &mut Vec<SplineSurvivalCurve>,
    train: &Batch,
    config: &DcmConfig,
    rng: &mut ChaCha8Rng,
    diagnostics: &mut TrainingDiagnostics,
) -> Result<()> {
    let (gamma, bad) = e_step(network, baselines, train, config.use_prior_in_estep)?;
    diagnostics.uniform_posterior_rows += bad;
    let zeta = sample_assignments(&gamma, rng);
    let (fresh, starved) = update_baselines(network, train, &zeta, baselines, config.max_knots)?;
    diagnostics.starved_refreshes += starved;
    *baselines = fresh;
    Ok(())
}

/// Consecutive chunks of `batch_size`; a trailing chunk of fewer than two rows is merged
/// into the previous one.
fn minibatches(positions: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = positions.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

impl DcmModel {
    pub fn k(&self) -> usize {
        self.network.k()
    }

    /// Applies the stored standardization to raw feature rows.
    pub fn prepare(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_names.len(),
                found: x.ncols(),
            });
        }
        Ok(match &self.standardization {
            Some(s) => {
                let mut out = x.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - s.means[j]) / s.stds[j];
                    }
                }
                out
            }
            None => x.clone(),
        })
    }

    /// Errors with both name lists when `ds` does not carry exactly the training features.
    pub fn check_features(&self, ds: &SurvivalDataset) -> Result<()> {
        if ds.feature_names != self.feature_names {
            return Err(Error::FeatureMismatch {
                expected: self.feature_names.clone(),
                found: ds.feature_names.clone(),
            });
        }
        Ok(())
    }

    /// Mixture survival `sum_k S~_k(t)^exp(f_k(x)) * softmax_k(g(x))` for one raw feature row.
    pub fn predict_survival(&self, x: &[f64], t: f64) -> Result<f64> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.predict_matrix(&row, &[t], Parallelism::Sequential)?[[0, 0]])
    }

    /// Survival probabilities for every raw feature row (N) at every horizon (H): N x H.
    pub fn predict_matrix(&self, x: &Array2<f64>, horizons: &[f64], par: Parallelism) -> Result<Array2<f64>> {
        if horizons.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::invalid("horizons must be finite and non-negative"));
        }
        let pass = self.network.forward(&self.prepare(x)?)?;
        let weights = softmax_rows(&pass.gating_logits);
        let k = self.k();
        let rows = map_range(x.nrows(), par, |i| {
            horizons
                .iter()
                .map(|&t| {
                    let s: f64 = (0..k)
                        .map(|c| self.baselines[c].eval(t).powf(pass.log_hazards[[i, c]].exp()) * weights[[i, c]])
                        .sum();
                    // Dividing by the weight sum keeps S(0) exactly 1 under rounding.
                    let total: f64 = (0..k).map(|c| weights[[i, c]]).sum();
                    (s / total).clamp(0.0, 1.0)
                })
                .collect::<Vec<f64>>()
        });
        let h = horizons.len();
        Ok(Array2::from_shape_fn((x.nrows(), h), |(i, j)| rows[i][j]))
    }

    /// Survival predictions for a raw dataset whose feature names must match the model.
    pub fn predict_dataset(&self, ds: &SurvivalDataset, horizons: &[f64], par: Parallelism) -> Result<RiskMatrix> {
        self.check_features(ds)?;
        let values = self.predict_matrix(&ds.feature_matrix(), horizons, par)?;
        Ok(RiskMatrix::new(horizons.to_vec(), values))
    }

    /// Gating probabilities `softmax(g(x))` for raw feature rows.
    pub fn gating_probabilities(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.network.forward(&self.prepare(x)?)?.gating_logits))
    }

    /// E-step posteriors for a raw dataset (uses the observed times and events).
    pub fn posterior(&self, ds: &SurvivalDataset) -> Result<Array2<f64>> {
        self.check_features(ds)?;
        let mut batch = Batch::all(ds);
        batch.x = self.prepare(&batch.x)?;
        Ok(e_step(&self.network, &self.baselines, &batch, self.config.use_prior_in_estep)?.0)
    }

    /// Per-record mean of the objective on a raw dataset with assignments drawn from `seed`.
    pub fn objective(&self, ds: &SurvivalDataset, seed: u64) -> Result<f64> {
        self.check_features(ds)?;
        let mut batch = Batch::all(ds);
        batch.x = self.prepare(&batch.x)?;
        evaluation_loss(
            &self.network,
            &self.baselines,
            &batch,
            self.config.use_prior_in_estep,
            &mut rng_stream(seed, STREAM_VALID),
        )
    }

    /// Event-time quantile from the training split, for `p` in whole percent (1..=99).
    pub fn training_event_quantile(&self, percent: usize) -> Option<f64> {
        (1..=99)
            .contains(&percent)
            .then(|| self.event_time_percentiles.get(percent - 1).copied())
            .flatten()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("cannot parse model file: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::ModelFormat("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::ModelFormat(e.to_string()))?;
        file.into_model()
    }
}

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// `fan_in` rows of `fan_out` weights.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<&DenseLayer> for LayerFile {
    fn from(l: &DenseLayer) -> Self {
        Self {
            weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.to_vec(),
        }
    }
}

impl LayerFile {
    fn into_layer(self, fan_in: usize, fan_out: usize) -> Result<DenseLayer> {
        if self.weights.len() != fan_in
            || self.weights.iter().any(|r| r.len() != fan_out)
            || self.bias.len() != fan_out
        {
            return Err(Error::ModelFormat(format!("layer shape does not match {fan_in} x {fan_out}")));
        }
        let flat: Vec<f64> = self.weights.into_iter().flatten().collect();
        if flat.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(DenseLayer {
            weights: Array2::from_shape_vec((fan_in, fan_out), flat).map_err(|e| Error::ModelFormat(e.to_string()))?,
            bias: self.bias.into(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    layer_dims: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct HeadsFile {
    hazard: LayerFile,
    gating: LayerFile,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u64,
    config: DcmConfig,
    feature_names: Vec<String>,
    standardization: Option<Standardization>,
    mlp: MlpFile,
    heads: HeadsFile,
    splines: Vec<SplineSurvivalCurve>,
    training_log: Vec<EpochLog>,
    event_time_percentiles: Vec<f64>,
    diagnostics: TrainingDiagnostics,
}

impl From<&DcmModel> for ModelFile {
    fn from(m: &DcmModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: m.config.clone(),
            feature_names: m.feature_names.clone(),
            standardization: m.standardization.clone(),
            mlp: MlpFile {
                layer_dims: m.network.encoder.layer_dims.clone(),
                activation: m.network.encoder.activation,
                layers: m.network.encoder.layers.iter().map(LayerFile::from).collect(),
            },
            heads: HeadsFile {
                hazard: (&m.network.heads.hazard).into(),
                gating: (&m.network.heads.gating).into(),
            },
            splines: m.baselines.clone(),
            training_log: m.training_log.clone(),
            event_time_percentiles: m.event_time_percentiles.clone(),
            diagnostics: m.diagnostics.clone(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<DcmModel> {
        let dims = self.mlp.layer_dims;
        if dims.is_empty() || self.mlp.layers.len() + 1 != dims.len() {
            return Err(Error::ModelFormat("layer_dims inconsistent with layers".into()));
        }
        let layers = self
            .mlp
            .layers
            .into_iter()
            .zip(dims.windows(2))
            .map(|(l, w)| l.into_layer(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let h = *dims.last().unwrap();
        let k = self.splines.len();
        if k == 0 {
            return Err(Error::ModelFormat("model has no baselines".into()));
        }
        if self.splines.iter().any(|s| s.knots.is_empty() || s.coefficients.len() + 1 != s.knots.len().max(1) && !s.coefficients.is_empty()) {
            return Err(Error::ModelFormat("spline knots and coefficients disagree".into()));
        }
        let network = Network {
            encoder: MlpParams {
                layer_dims: dims.clone(),
                layers,
                activation: self.mlp.activation,
            },
            heads: HeadParams {
                hazard: self.heads.hazard.into_layer(h, k)?,
                gating: self.heads.gating.into_layer(h, k)?,
            },
        };
        if dims[0] != self.feature_names.len() {
            return Err(Error::ModelFormat("input dimension differs from feature list".into()));
        }
        Ok(DcmModel {
            network,
            baselines: self.splines,
            standardization: self.standardization,
            feature_names: self.feature_names,
            config: self.config,
            training_log: self.training_log,
            event_time_percentiles: self.event_time_percentiles,
            diagnostics: self.diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::StepSurvivalCurve;
    use crate::objective::partial_log_likelihood;
    use ndarray::array;

    fn exp_spline(rate: f64) -> SplineSurvivalCurve {
        let knots: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let values: Vec<f64> = knots.iter().map(|t| (-rate * t).exp()).collect();
        fit_spline(&StepSurvivalCurve::from_survival(knots, &values).unwrap(), 100)
    }

    /// Linear network with zero hazard head and the given gating biases.
    fn hand_network(d: usize, gating_bias: &[f64]) -> Network {
        let k = gating_bias.len();
        let mut net = init_params(&[d], k, 0).unwrap();
        net.heads.hazard.weights.fill(0.0);
        net.heads.gating.weights.fill(0.0);
        net.heads.gating.bias = gating_bias.to_vec().into();
        net
    }

    fn hand_model(gating_bias: &[f64]) -> DcmModel {
        DcmModel {
            network: hand_network(1, gating_bias),
            baselines: vec![exp_spline(1.0), exp_spline(2.0)],
            standardization: None,
            feature_names: vec!["x1".into()],
            config: DcmConfig { k: 2, hidden: vec![], ..DcmConfig::default() },
            training_log: vec![],
            event_time_percentiles: vec![1.0; 99],
            diagnostics: TrainingDiagnostics::default(),
        }
    }

    #[test]
    fn e_step_hand_instance() {
        let net = hand_network(1, &[0.0, 0.0]);
        let batch = Batch {
            x: array![[0.3]],
            times: vec![1.0],
            events: vec![false],
        };
        let (g, _) = e_step(&net, &[exp_spline(1.0), exp_spline(2.0)], &batch, true).unwrap();
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        assert!((g[[0, 0]] - e1 / (e1 + e2)).abs() < 1e-6);
        assert!((g[[0, 0]] - 0.7311).abs() < 1e-4 && (g[[0, 1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn e_step_symmetry_and_single_cluster() {
        let net = hand_network(2, &[0.4, -0.1, 1.0]);
        let s = exp_spline(0.7);
        let batch = Batch {
            x: array![[0.1, 0.2], [1.0, -1.0], [0.0, 3.0]],
            times: vec![0.5, 1.2, 3.3],
            events: vec![true, false, true],
        };
        let (g, _) = e_step(&net, &[s.clone(), s.clone(), s.clone()], &batch, false).unwrap();
        assert!(g.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let one = hand_network(2, &[0.0]);
        let (g, _) = e_step(&one, &[s], &batch, true).unwrap();
        assert!(g.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one_hot = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        for _ in 0..100 {
            assert_eq!(sample_assignments(&one_hot, &mut rng), vec![1, 0]);
        }
        let uniform = Array2::from_elem((10_000, 4), 0.25);
        let z = sample_assignments(&uniform, &mut rng);
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in 0..4 {
            let count = z.iter().filter(|&&v| v == c).count() as f64;
            assert!((count - 2500.0).abs() < 3.0 * sigma, "class {c}: {count}");
        }
        let a = sample_assignments(&uniform, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_assignments(&uniform, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn predict_hand_mixture() {
        let model = hand_model(&[3f64.ln(), 0.0]);
        let expected = 0.75 * (-1.0f64).exp() + 0.25 * (-2.0f64).exp();
        let got = model.predict_survival(&[0.0], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        assert!((got - 0.30968).abs() < 1e-4);
        assert!((model.predict_survival(&[0.0], 0.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_cluster_prediction_is_baseline() {
        let mut model = hand_model(&[0.0]);
        model.baselines = vec![exp_spline(1.3)];
        for t in [0.2, 1.0, 2.7] {
            assert_eq!(model.predict_survival(&[0.5], t).unwrap(), model.baselines[0].eval(t));
        }
    }

    #[test]
    fn m_step_matches_plain_cox_trainer() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batches: Vec<Batch> = (0..5)
            .map(|_| {
                let n = 16;
                Batch {
                    x: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
                    times: (0..n).map(|_| rng.random_range(0.0..5.0)).collect(),
                    events: (0..n).map(|_| rng.random_bool(0.8)).collect(),
                }
            })
            .collect();
        let mut net = init_params(&[3], 1, 4).unwrap();
        let mut adam = AdamState::new(net.num_params(), 1e-2);

        // Plain linear Cox trainer: beta = hazard weights, b = hazard bias.
        let mut beta: Vec<f64> = net.heads.hazard.weights.column(0).to_vec();
        let mut plain_flat = net.to_flat();
        let mut plain_adam = AdamState::new(plain_flat.len(), 1e-2);

        for b in &batches {
            let post = PosteriorTable {
                gamma: Array2::ones((b.len(), 1)),
                zeta: vec![0; b.len()],
            };
            m_step(&mut net, &mut adam, b, &post, 10.0).unwrap();

            let eta: Vec<f64> = (0..b.len())
                .map(|i| (0..3).map(|j| b.x[[i, j]] * beta[j]).sum::<f64>() + plain_flat[3])
                .collect();
            let (_, g) = partial_log_likelihood(&eta, &b.times, &b.events).unwrap();
            let mut grad = vec![0.0; plain_flat.len()];
            for (j, gj) in grad.iter_mut().enumerate().take(3) {
                *gj = -(0..b.len()).map(|i| g[i] * b.x[[i, j]]).sum::<f64>();
            }
            grad[3] = -g.iter().sum::<f64>();
            clip_grad_norm(&mut grad, 10.0);
            plain_adam.step(&mut plain_flat, &grad).unwrap();
            beta = plain_flat[..3].to_vec();
        }
        // Index 3 is the hazard bias: the partial likelihood is shift invariant, so its
        // gradient is rounding noise that Adam normalizes into arbitrary tiny steps.
        let got = net.to_flat();
        for (j, (a, b)) in got.iter().zip(&plain_flat).enumerate() {
            if j != 3 {
                assert!((a - b).abs() < 1e-12, "{j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn m_step_stationary_point() {
        // Zero features and a batch where every row sits in its own tie group with no
        // events: all gradients vanish, gating posterior equals the prior.
        let mut net = hand_network(1, &[0.2, -0.3]);
        let before = net.to_flat();
        let batch = Batch {
            x: Array2::zeros((4, 1)),
            times: vec![1.0, 2.0, 3.0, 4.0],
            events: vec![false; 4],
        };
        let gamma = softmax_rows(&net.forward(&batch.x).unwrap().gating_logits);
        let mut adam = AdamState::new(net.num_params(), 1e-3);
        m_step(&mut net, &mut adam, &batch, &PosteriorTable { gamma, zeta: vec![0, 1, 0, 1] }, 10.0).unwrap();
        for (a, b) in net.to_flat().iter().zip(&before) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn update_baselines_single_cluster_and_starvation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 60;
        let batch = Batch {
            x: Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0)),
            times: (0..n).map(|_| rng.random_range(0.1..4.0)).collect(),
            events: (0..n).map(|_| rng.random_bool(0.7)).collect(),
        };
        let net = init_params(&[2], 1, 3).unwrap();
        let prev = vec![exp_spline(1.0)];
        let (fresh, starved) = update_baselines(&net, &batch, &vec![0; n], &prev, 100).unwrap();
        assert_eq!(starved, 0);
        let f = net.forward(&batch.x).unwrap().log_hazards.column(0).to_vec();
        let expected = fit_spline(&breslow(&batch.times, &batch.events, &f).unwrap(), 100);
        assert_eq!(fresh[0], expected);

        let net2 = init_params(&[2], 2, 3).unwrap();
        let prev2 = vec![exp_spline(1.0), exp_spline(2.0)];
        let (fresh, starved) = update_baselines(&net2, &batch, &vec![0; n], &prev2, 100).unwrap();
        assert_eq!(starved, 1);
        assert_eq!(fresh[1], prev2[1]);
    }

    #[test]
    fn minibatch_tail_is_merged() {
        let pos: Vec<usize> = (0..9).collect();
        let b = minibatches(&pos, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = minibatches(&pos, 3);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(DcmConfig { k: 0, ..DcmConfig::default() }.validate().is_err());
        assert!(DcmConfig { k: 4, batch_size: 7, ..DcmConfig::default() }.validate().is_err());
        assert!(DcmConfig::default().validate().is_ok());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let mut model = hand_model(&[0.3, -0.2]);
        model.network = init_params(&[1, 4], 2, 8).unwrap();
        model.standardization = Some(Standardization { means: vec![0.5], stds: vec![2.0] });
        let text = model.to_json().unwrap();
        let back = DcmModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = rng.random_range(-3.0..3.0);
            let t = rng.random_range(0.0..5.0);
            assert_eq!(model.predict_survival(&[x], t).unwrap(), back.predict_survival(&[x], t).unwrap());
        }
        let truncated = &text[..text.len() / 2];
        assert!(matches!(DcmModel::from_json(truncated), Err(Error::ModelFormat(_))));
        let future = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        assert!(matches!(DcmModel::from_json(&future), Err(Error::ModelVersion { found: 99, .. })));
    }

    #[test]
    fn fit_rejects_event_free_data() {
        let ds = SurvivalDataset::from_columns(vec![vec![0.0]; 10], &[1.0; 10], &[false; 10]).unwrap();
        assert!(matches!(fit(&ds, &DcmConfig::default()), Err(Error::NoEvents(_))));
    }
}
