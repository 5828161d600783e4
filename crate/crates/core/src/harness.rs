//! Reproducible runs behind the command-line tool: synthetic cohort generation,
//! training, evaluation, cross-validation and prediction.
//!
//! Every run computes its outputs in memory and only then writes them into the
//! output directory. If a write fails, the files written so far are removed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{event_time_quantiles, k_fold_split, load_csv, standardize, MissingPolicy, Schema, SurvivalDataset};
use crate::dcm::{fit, DcmConfig, DcmModel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_by_group, EvalOptions, Metric, MetricsReport, RiskMatrix, DEFAULT_ECE_BINS, POPULATION};
use crate::par::{map_range, Parallelism};
use crate::synth::{generate, SynthCohort, SynthConfig};

pub const DEFAULT_HORIZONS: &str = "q25,q50,q75";

/// Hyperparameter grid swept by `cv --grid`.
pub const GRID_K: [usize; 3] = [3, 4, 6];
pub const GRID_LAYERS: [usize; 2] = [1, 2];
pub const GRID_WIDTH: [usize; 2] = [50, 100];

/// One evaluation time: a whole-percent event-time quantile or an explicit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Quantile(usize),
    Time(f64),
}

/// Comma-separated horizons such as `q25,q50,q75` or `1.5,3`. Quantiles use
/// the lower nearest rank of the uncensored event times.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSpec(pub Vec<Horizon>);

impl FromStr for HorizonSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                if let Some(p) = t.strip_prefix(['q', 'Q']) {
                    match p.parse::<usize>() {
                        Ok(p) if (1..=99).contains(&p) => Ok(Horizon::Quantile(p)),
                        _ => Err(Error::invalid(format!("horizon '{t}': quantiles are q1 to q99"))),
                    }
                } else {
                    match t.parse::<f64>() {
                        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Horizon::Time(v)),
                        _ => Err(Error::invalid(format!("horizon '{t}' is neither qNN nor a non-negative time"))),
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::invalid("no horizons given"));
        }
        Ok(Self(items))
    }
}

impl fmt::Display for HorizonSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|h| match h {
                Horizon::Quantile(p) => format!("q{p}"),
                Horizon::Time(t) => t.to_string(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl HorizonSpec {
    /// Resolves quantiles against the training split stored in `model`.
    pub fn resolve_for_model(&self, model: &DcmModel) -> Result<Vec<f64>> {
        self.0
            .iter()
            .map(|h| match *h {
                Horizon::Time(t) => Ok(t),
                Horizon::Quantile(p) => model
                    .training_event_quantile(p)
                    .ok_or_else(|| Error::invalid(format!("model carries no event-time quantile q{p}"))),
            })
            .collect()
    }

    /// Resolves quantiles against the event times of `ds`.
    pub fn resolve_for_data(&self, ds: &SurvivalDataset) -> Result<Vec<f64>> {
        let (times, events) = (ds.times(), ds.events());
        self.0
            .iter()
            .map(|h| match *h {
                Horizon::Time(t) => Ok(t),
                Horizon::Quantile(p) => Ok(event_time_quantiles(&times, &events, &[p as f64 / 100.0])?[0]),
            })
            .collect()
    }
}

/// Everything a run needs. Missing fields in a config file take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Schema,
    pub dcm: DcmConfig,
    pub horizons: String,
    pub folds: usize,
    pub bootstrap: usize,
    pub ece_bins: usize,
    /// Seeds training, fold assignment and bootstrap resampling.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub grid: bool,
    pub parallelism: Parallelism,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: Schema::default(),
            dcm: DcmConfig::default(),
            horizons: DEFAULT_HORIZONS.to_string(),
            folds: 5,
            bootstrap: 100,
            ece_bins: DEFAULT_ECE_BINS,
            seed: 0,
            out: None,
            model: None,
            grid: false,
            parallelism: Parallelism::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn horizon_spec(&self) -> Result<HorizonSpec> {
        self.horizons.parse()
    }

    /// Training configuration with the run seed applied.
    pub fn dcm_config(&self) -> DcmConfig {
        DcmConfig {
            seed: self.seed,
            ..self.dcm.clone()
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            bootstrap: self.bootstrap,
            seed: self.seed,
            ece_bins: self.ece_bins,
            parallelism: self.parallelism,
        }
    }

    fn data_path(&self) -> Result<&Path> {
        let p = self.data.as_deref().ok_or_else(|| Error::invalid("no dataset path given"))?;
        if !p.is_file() {
            return Err(Error::invalid(format!("dataset '{}' does not exist", p.display())));
        }
        Ok(p)
    }

    fn model_path(&self) -> Result<&Path> {
        let p = self.model.as_deref().ok_or_else(|| Error::invalid("no model path given"))?;
        if !p.is_file() {
            return Err(Error::invalid(format!("model '{}' does not exist", p.display())));
        }
        Ok(p)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::invalid("no output directory given"))
    }

    fn load_data(&self) -> Result<SurvivalDataset> {
        let ds = load_csv(self.data_path()?, &self.schema)?;
        info!("loaded {} records, {} features, {} events", ds.len(), ds.dim(), ds.n_events());
        Ok(ds)
    }

    fn echo(&self, command: &str) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Echo<'a> {
            command: &'a str,
            version: &'a str,
            config: RunConfig,
        }
        let config = RunConfig {
            dcm: self.dcm_config(),
            ..self.clone()
        };
        let mut text = serde_json::to_string_pretty(&Echo {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
        })?;
        text.push('\n');
        Ok(text.into_bytes())
    }
}

/// Files staged in memory and written together.
struct Outputs {
    dir: PathBuf,
    files: Vec<(&'static str, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    fn add_with(&mut self, name: &'static str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    /// Writes every file, or none: on failure the written files (and the
    /// directory, if this call created it) are removed.
    fn commit(self) -> Result<Vec<PathBuf>> {
        let created = !self.dir.exists();
        std::fs::create_dir_all(&self.dir)?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            if let Err(e) = std::fs::write(&path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                let _ = std::fs::remove_file(&path);
                if created {
                    let _ = std::fs::remove_dir(&self.dir);
                }
                return Err(e.into());
            }
            written.push(path);
        }
        Ok(written)
    }
}

fn risk_csv(risk: &RiskMatrix, extra: Option<(&str, &[usize])>, buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    let mut header: Vec<String> = extra.iter().map(|(name, _)| name.to_string()).collect();
    header.extend(risk.horizons.iter().map(|h| format!("t={h}")));
    w.write_record(&header)?;
    for i in 0..risk.len() {
        let mut row: Vec<String> = extra.iter().map(|(_, v)| v[i].to_string()).collect();
        row.extend(risk.values.row(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn report_files(report: &MetricsReport, out: &mut Outputs) -> Result<()> {
    out.add_with("report.csv", |b| report.write_csv(b))?;
    let mut json = report.to_json()?;
    json.push('\n');
    out.add("report.json", json.into_bytes());
    out.add_with("calibration.csv", |b| report.write_calibration_csv(b))
}

fn group_labels_of(ds: &SurvivalDataset, schema: &Schema) -> Option<Vec<Option<String>>> {
    schema.group_col.as_ref().map(|_| ds.groups())
}

/// Generates a cohort and writes `cohort.csv` plus the ground-truth sidecar `truth.json`.
pub fn run_synth(config: &SynthConfig, out: &Path) -> Result<SynthCohort> {
    let cohort = generate(config)?;
    info!(
        "generated {} records, censored fraction {:.3}",
        cohort.len(),
        cohort.censored_fraction()
    );
    let mut files = Outputs::new(out);
    files.add_with("cohort.csv", |b| cohort.write_csv(b))?;
    let mut sidecar = serde_json::to_string_pretty(&cohort.sidecar())?;
    sidecar.push('\n');
    files.add("truth.json", sidecar.into_bytes());
    files.commit()?;
    Ok(cohort)
}

/// Standardizes, fits and writes `model.json`, `training_log.csv` and `config.json`.
pub fn run_train(run: &RunConfig) -> Result<DcmModel> {
    let out = run.out_dir()?;
    let ds = run.load_data()?;
    let (train, _) = standardize(&ds)?;
    let model = fit(&train, &run.dcm_config())?;
    if let Some(last) = model.training_log.last() {
        info!("trained {} epochs, final validation loss {:.6}", last.epoch, last.valid_loss);
    }
    let mut files = Outputs::new(out);
    let mut json = model.to_json()?;
    json.push('\n');
    files.add("model.json", json.into_bytes());
    files.add_with("training_log.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["epoch", "train_loss", "valid_loss"])?;
        for e in &model.training_log {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.valid_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    files.add("config.json", run.echo("train")?);
    files.commit()?;
    Ok(model)
}

/// Evaluates a saved model on a dataset, overall and per group, and writes
/// `report.csv`, `report.json`, `calibration.csv` and `config.json`.
pub fn run_eval(run: &RunConfig) -> Result<MetricsReport> {
    let out = run.out_dir()?;
    let model = DcmModel::load(run.model_path()?)?;
    let ds = run.load_data()?;
    model.check_features(&ds)?;
    let horizons = run.horizon_spec()?.resolve_for_model(&model)?;
    let risk = model.predict_dataset(&ds, &horizons, run.parallelism)?;
    let groups = group_labels_of(&ds, &run.schema);
    let report = evaluate_by_group(&risk, &ds.times(), &ds.events(), groups.as_deref(), &run.eval_options())?;
    let mut files = Outputs::new(out);
    report_files(&report, &mut files)?;
    files.add("config.json", run.echo("eval")?);
    files.commit()?;
    Ok(report)
}

/// Feature rows of a prediction input. Time and event columns are ignored when present.
fn load_features(path: &Path, schema: &Schema) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols: Vec<usize> = (0..headers.len())
        .filter(|&j| {
            let h = &headers[j];
            *h != schema.time_col && *h != schema.event_col && !schema.drop_columns.contains(h)
        })
        .collect();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let parsed: Option<Vec<f64>> = cols
            .iter()
            .map(|&j| row.get(j).and_then(|c| c.parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(v) => {
                values.extend(v);
                n += 1;
            }
            None if schema.missing == MissingPolicy::Drop => continue,
            None => {
                return Err(Error::Load {
                    row: i + 1,
                    message: "missing or non-numeric feature value".into(),
                })
            }
        }
    }
    let x = Array2::from_shape_vec((n, cols.len()), values).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((x, cols.into_iter().map(|j| headers[j].clone()).collect()))
}

/// Survival probabilities at the requested horizons, written to `predictions.csv`
/// with one row per input record in file order.
pub fn run_predict(run: &RunConfig) -> Result<RiskMatrix> {
    let out = run.out_dir()?;
    let model = DcmModel::load(run.model_path()?)?;
    let (x, names) = load_features(run.data_path()?, &run.schema)?;
    if names != model.feature_names {
        return Err(Error::FeatureMismatch {
            expected: model.feature_names.clone(),
            found: names,
        });
    }
    let horizons = run.horizon_spec()?.resolve_for_model(&model)?;
    let risk = RiskMatrix::new(horizons.clone(), model.predict_matrix(&x, &horizons, run.parallelism)?);
    let mut files = Outputs::new(out);
    files.add_with("predictions.csv", |b| risk_csv(&risk, None, b))?;
    files.add("config.json", run.echo("predict")?);
    files.commit()?;
    Ok(risk)
}

/// Point estimate of one metric on one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetric {
    pub fold: usize,
    pub metric: Metric,
    pub horizon: f64,
    pub estimate: Option<f64>,
}

/// Held-out predictions pooled over folds, in record order.
#[derive(Debug, Clone)]
pub struct PooledPredictions {
    pub risk: RiskMatrix,
    pub fold_of: Vec<usize>,
    pub fold_metrics: Vec<FoldMetric>,
}

/// Trains one model per fold on the other folds and predicts the held-out fold.
/// Folds run concurrently under `par`; the first failing fold (by index) aborts.
pub fn cross_validate(ds: &SurvivalDataset, config: &DcmConfig, folds: usize, horizons: &[f64], ece_bins: usize, seed: u64, par: Parallelism) -> Result<PooledPredictions> {
    let split = k_fold_split(ds.len(), folds, seed)?;
    let results = map_range(folds, par, |f| -> Result<(Vec<usize>, Array2<f64>)> {
        let test_idx = split.test_indices(f);
        let (train, _) = standardize(&ds.subset(&split.train_indices(f)))?;
        let cfg = DcmConfig {
            seed: config.seed.wrapping_add(f as u64),
            ..config.clone()
        };
        let model = fit(&train, &cfg)?;
        let test = ds.subset(&test_idx);
        Ok((test_idx, model.predict_dataset(&test, horizons, Parallelism::Sequential)?.values))
    });
    let mut values = Array2::<f64>::zeros((ds.len(), horizons.len()));
    let mut fold_of = vec![0; ds.len()];
    let mut fold_metrics = Vec::new();
    let (times, events) = (ds.times(), ds.events());
    for (f, res) in results.into_iter().enumerate() {
        let (idx, pred) = res.map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?;
        for (r, &i) in idx.iter().enumerate() {
            values.row_mut(i).assign(&pred.row(r));
            fold_of[i] = f;
        }
        let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
        for (h, &horizon) in horizons.iter().enumerate() {
            let p = pred.column(h).to_vec();
            for m in Metric::ALL {
                fold_metrics.push(FoldMetric {
                    fold: f,
                    metric: m,
                    horizon,
                    estimate: m.evaluate(&p, &t, &e, horizon, ece_bins).ok(),
                });
            }
        }
    }
    Ok(PooledPredictions {
        risk: RiskMatrix::new(horizons.to_vec(), values),
        fold_of,
        fold_metrics,
    })
}

/// Mean pooled Brier score over the horizons, used to rank grid points.
fn pooled_brier(pooled: &PooledPredictions, ds: &SurvivalDataset, ece_bins: usize) -> Option<f64> {
    let (times, events) = (ds.times(), ds.events());
    let scores: Option<Vec<f64>> = pooled
        .risk
        .horizons
        .iter()
        .enumerate()
        .map(|(h, &t)| Metric::Brier.evaluate(&pooled.risk.column(h), &times, &events, t, ece_bins).ok())
        .collect();
    scores.map(|s| s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub k: usize,
    pub layers: usize,
    pub width: usize,
    pub brier: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub pooled: PooledPredictions,
    pub config: DcmConfig,
    pub grid: Vec<GridPoint>,
}

/// Cross-validation with a single bootstrap over the pooled held-out predictions.
/// Horizon quantiles come from the full dataset so every fold shares them.
/// Writes `report.csv`, `report.json`, `calibration.csv`, `fold_metrics.csv`,
/// `predictions.csv`, `config.json` and, with the grid, `grid.csv`.
pub fn run_cv(run: &RunConfig) -> Result<CvOutcome> {
    let out = run.out_dir()?;
    if run.folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {}", run.folds)));
    }
    let ds = run.load_data()?;
    let horizons = run.horizon_spec()?.resolve_for_data(&ds)?;
    let base = run.dcm_config();
    let cv = |cfg: &DcmConfig| cross_validate(&ds, cfg, run.folds, &horizons, run.ece_bins, run.seed, run.parallelism);

    let mut grid = Vec::new();
    let (config, pooled) = if run.grid {
        let mut best: Option<(f64, DcmConfig, PooledPredictions)> = None;
        for k in GRID_K {
            for layers in GRID_LAYERS {
                for width in GRID_WIDTH {
                    let cfg = DcmConfig {
                        k,
                        hidden: vec![width; layers],
                        ..base.clone()
                    };
                    let pooled = cv(&cfg)?;
                    let brier = pooled_brier(&pooled, &ds, run.ece_bins);
                    info!("grid k={k} layers={layers} width={width}: pooled Brier {brier:?}");
                    grid.push(GridPoint { k, layers, width, brier });
                    if let Some(b) = brier {
                        if best.as_ref().is_none_or(|(bb, _, _)| b < *bb) {
                            best = Some((b, cfg, pooled));
                        }
                    }
                }
            }
        }
        let (_, cfg, pooled) = best.ok_or_else(|| Error::MetricUndefined("pooled Brier score for every grid point".into()))?;
        (cfg, pooled)
    } else {
        let pooled = cv(&base)?;
        (base, pooled)
    };

    let groups = group_labels_of(&ds, &run.schema);
    let report = evaluate_by_group(&pooled.risk, &ds.times(), &ds.events(), groups.as_deref(), &run.eval_options())?;
    if let Some(r) = report.get(Metric::Ctd, horizons.len() - 1, POPULATION) {
        info!("pooled C-td at t = {}: {:?}", r.horizon, r.estimate);
    }

    let mut files = Outputs::new(out);
    report_files(&report, &mut files)?;
    files.add_with("fold_metrics.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["fold", "metric", "horizon", "estimate"])?;
        for m in &pooled.fold_metrics {
            w.write_record([
                m.fold.to_string(),
                m.metric.name().to_string(),
                m.horizon.to_string(),
                m.estimate.map_or_else(|| "NA".to_string(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    files.add_with("predictions.csv", |b| risk_csv(&pooled.risk, Some(("fold", &pooled.fold_of)), b))?;
    if run.grid {
        files.add_with("grid.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["k", "layers", "width", "pooled_brier", "selected"])?;
            for g in &grid {
                let selected = g.k == config.k && g.layers == config.hidden.len() && config.hidden.first() == Some(&g.width);
                w.write_record([
                    g.k.to_string(),
                    g.layers.to_string(),
                    g.width.to_string(),
                    g.brier.map_or_else(|| "NA".to_string(), |v| v.to_string()),
                    selected.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    let echoed = RunConfig {
        dcm: config.clone(),
        ..run.clone()
    };
    files.add("config.json", echoed.echo("cv")?);
    files.commit()?;
    Ok(CvOutcome {
        report,
        pooled,
        config,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_spec_parsing() {
        let s: HorizonSpec = "q25, q50,q75".parse().unwrap();
        assert_eq!(s.0, vec![Horizon::Quantile(25), Horizon::Quantile(50), Horizon::Quantile(75)]);
        assert_eq!(s.to_string(), "q25,q50,q75");
        let s: HorizonSpec = "0,1.5,q90".parse().unwrap();
        assert_eq!(s.0, vec![Horizon::Time(0.0), Horizon::Time(1.5), Horizon::Quantile(90)]);
        for bad in ["", "q0", "q100", "-1", "abc", "qx"] {
            assert!(bad.parse::<HorizonSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_file_defaults_fill_missing_fields() {
        let run: RunConfig = serde_json::from_str(r#"{"folds": 3, "dcm": {"k": 2}, "schema": {"time_col": "T"}}"#).unwrap();
        assert_eq!(run.folds, 3);
        assert_eq!(run.dcm.k, 2);
        assert_eq!(run.dcm.hidden, DcmConfig::default().hidden);
        assert_eq!(run.schema.time_col, "T");
        assert_eq!(run.schema.event_col, "event");
        assert_eq!(run.bootstrap, 100);
    }

    #[test]
    fn failed_commit_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut files = Outputs::new(&out);
        files.add("a.csv", b"x\n".to_vec());
        files.add("missing/b.csv", b"y\n".to_vec());
        assert!(files.commit().is_err());
        assert!(!out.exists());
    }
}
