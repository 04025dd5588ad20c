//! Experiment orchestration: simulate datasets over a confounding grid,
//! tune and train the autoencoder, fit every requested outcome-model arm and
//! score τ-step counterfactual predictions on held-out patients.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array1, Array3, Axis};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::dta::{embed_dataset, evaluate, train, DtaHyper, DtaModel, LossWeights, PenaltyConfig};
use crate::error::{Error, Result};
use crate::outcome::{
    fit_msm, fit_rmsn, predict_msm_batch, predict_rmsn_batch, rmse, CovariateSource, MsmConfig, RmsnHyper,
    RmsnModel, SourceKind,
};
use crate::simgen::{simulate_with_counterfactuals, SimConfig};

/// Stable 64-bit mix of a sequence of words.
pub fn stable_hash(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_DTA: u64 = 3;
const TAG_METHOD: u64 = 4;

fn unit_seed(master: u64, gamma: f64, rep: usize, tag: u64) -> u64 {
    stable_hash(&[master, gamma.to_bits(), rep as u64, tag])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::Config(format!("split fractions {parts:?} must all be positive")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must sum to 1")));
        }
        Ok(())
    }
}

/// Patient-level train/validation/test partition. Sizes are
/// `round(N·train)`, `round(N·val)` and the remainder.
pub fn split_dataset(
    dataset: &TrajectoryDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(TrajectoryDataset, TrajectoryDataset, TrajectoryDataset)> {
    fractions.validate()?;
    let n = dataset.n_patients();
    let n_train = (n as f64 * fractions.train).round() as usize;
    let n_val = (n as f64 * fractions.val).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!("{n} patients cannot be split into nonempty parts by {fractions:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val), dataset.subset(&test)))
}

/// Fails if any patient id appears in more than one split.
pub fn audit_split(train: &TrajectoryDataset, val: &TrajectoryDataset, test: &TrajectoryDataset) -> Result<()> {
    let mut seen = HashSet::new();
    for id in train.ids.iter().chain(&val.ids).chain(&test.ids) {
        if !seen.insert(*id) {
            return Err(Error::Precondition(format!("patient {id} appears in more than one split")));
        }
    }
    Ok(())
}

/// Search space for the autoencoder and, through `batch_size` and
/// `learning_rate`, for the recurrent outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout_rate: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub embed_dim: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            batch_size: vec![64, 128, 256],
            learning_rate: vec![0.01, 0.005, 0.001],
            dropout_rate: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            theta: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            alpha: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            embed_dim: vec![5],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size.len()),
            ("learning_rate", self.learning_rate.len()),
            ("dropout_rate", self.dropout_rate.len()),
            ("theta", self.theta.len()),
            ("alpha", self.alpha.len()),
            ("embed_dim", self.embed_dim.len()),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("hyperparameter grid `{name}` is empty")));
        }
        Ok(())
    }

    /// Every autoencoder configuration in the grid, built on `template`.
    pub fn dta_points(&self, template: &DtaHyper) -> Vec<DtaHyper> {
        let mut out = Vec::new();
        for &embed_dim in &self.embed_dim {
            for &batch_size in &self.batch_size {
                for &learning_rate in &self.learning_rate {
                    for &dropout_rate in &self.dropout_rate {
                        for &theta in &self.theta {
                            for &alpha in &self.alpha {
                                out.push(DtaHyper {
                                    embed_dim,
                                    batch_size,
                                    learning_rate,
                                    dropout_rate,
                                    theta,
                                    alpha,
                                    ..*template
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Recurrent outcome-model configurations built on `template`.
    pub fn rmsn_points(&self, template: &RmsnHyper) -> Vec<RmsnHyper> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_size {
            for &learning_rate in &self.learning_rate {
                out.push(RmsnHyper { batch_size, learning_rate, ..*template });
            }
        }
        out
    }
}

/// Indices of `iterations` grid points: without replacement when the grid
/// is large enough, otherwise with replacement.
pub fn sample_points(grid_size: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if iterations <= grid_size {
        index::sample(&mut rng, grid_size, iterations).into_vec()
    } else {
        let all: Vec<usize> = (0..grid_size).collect();
        (0..iterations).map(|_| *all.choose(&mut rng).expect("nonempty grid")).collect()
    }
}

/// One evaluated search candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial<P> {
    pub point: P,
    pub score: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<P, M> {
    pub best: P,
    pub model: M,
    pub score: f64,
    pub trials: Vec<Trial<P>>,
}

/// Stochastic grid search. `objective(point, trial_seed)` trains a
/// candidate and returns it with its validation score; the lowest finite
/// score wins, ties going to the earlier trial.
pub fn hyper_search<P: Clone, M>(
    points: &[P],
    iterations: usize,
    seed: u64,
    mut objective: impl FnMut(&P, u64) -> Result<(M, f64)>,
) -> Result<SearchOutcome<P, M>> {
    if iterations == 0 {
        return Err(Error::Config("search_iterations must be >= 1".into()));
    }
    if points.is_empty() {
        return Err(Error::Config("empty search grid".into()));
    }
    let picks = sample_points(points.len(), iterations, seed);
    let mut best: Option<(P, M, f64)> = None;
    let mut trials = Vec::with_capacity(picks.len());
    for (i, &pi) in picks.iter().enumerate() {
        let point = &points[pi];
        let trial_seed = stable_hash(&[seed, i as u64]);
        let score = match objective(point, trial_seed) {
            Ok((model, score)) if score.is_finite() => {
                if best.as_ref().is_none_or(|b| score < b.2) {
                    best = Some((point.clone(), model, score));
                }
                Ok(score)
            }
            Ok((_, score)) => Err(format!("non-finite validation score {score}")),
            Err(e) => Err(e.to_string()),
        };
        if let Err(msg) = &score {
            log::warn!("search trial {} failed: {msg}", i + 1);
        }
        trials.push(Trial { point: point.clone(), score });
    }
    match best {
        Some((best, model, score)) => Ok(SearchOutcome { best, model, score, trials }),
        None => {
            let first = trials.iter().find_map(|t| t.score.clone().err()).unwrap_or_default();
            Err(Error::Search(format!("all {} candidates failed (first: {first})", trials.len())))
        }
    }
}

/// Autoencoder search scored by the validation objective with unit loss
/// weights, so candidates with different `theta`/`alpha` are comparable.
pub fn search_dta(
    train_set: &TrajectoryDataset,
    val_set: &TrajectoryDataset,
    grid: &HyperGrid,
    template: &DtaHyper,
    iterations: usize,
    seed: u64,
) -> Result<SearchOutcome<DtaHyper, DtaModel>> {
    grid.validate()?;
    let points = grid.dta_points(template);
    let penalty = PenaltyConfig::default();
    hyper_search(&points, iterations, seed, |h, s| {
        let h = DtaHyper { seed: s, ..*h };
        let (model, _) = train(train_set, &h)?;
        let (loss, _) = evaluate(&model, val_set, LossWeights::default(), &penalty)?;
        Ok((model, loss.total))
    })
}

/// Factual RMSE of the τ-th predicted step over every anchor.
pub fn rmsn_validation_rmse(model: &RmsnModel, dataset: &TrajectoryDataset, source: &CovariateSource) -> Result<f64> {
    let tau = model.tau;
    let t_len = dataset.n_steps();
    if tau > t_len {
        return Err(Error::Config(format!("horizon {tau} does not fit {t_len} steps")));
    }
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for t in 0..=t_len - tau {
        let plan = dataset.a.slice(s![.., t..t + tau, ..]);
        let p = predict_rmsn_batch(model, source.covariates.view(), dataset.a.view(), t, plan)?;
        pred.extend(p.column(tau - 1).iter().copied());
        target.extend(dataset.y.column(t + tau - 1).iter().copied());
    }
    rmse(&pred, &target)
}

/// RMSE between predicted outcomes `τ` steps after the dataset's anchor and
/// the simulated counterfactual outcomes at that step.
pub fn evaluate_counterfactual_rmse(predictions: &[f64], dataset: &TrajectoryDataset, tau: usize) -> Result<f64> {
    let cf_y = dataset
        .cf_y
        .as_ref()
        .ok_or_else(|| Error::Usage("dataset carries no counterfactual outcomes".into()))?;
    if tau == 0 || tau > cf_y.ncols() {
        return Err(Error::Config(format!("horizon {tau} exceeds counterfactual horizon {}", cf_y.ncols())));
    }
    let target: Vec<f64> = cf_y.column(tau - 1).to_vec();
    rmse(predictions, &target)
}

/// Outcome-model arm of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ConfMsm,
    DeconfMsm,
    OracleMsm,
    ConfRmsn,
    DeconfRmsn,
    OracleRmsn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Msm,
    Rmsn,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::ConfMsm, Method::DeconfMsm, Method::OracleMsm, Method::ConfRmsn, Method::DeconfRmsn, Method::OracleRmsn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ConfMsm => "conf_msm",
            Method::DeconfMsm => "deconf_msm",
            Method::OracleMsm => "oracle_msm",
            Method::ConfRmsn => "conf_rmsn",
            Method::DeconfRmsn => "deconf_rmsn",
            Method::OracleRmsn => "oracle_rmsn",
        }
    }

    pub fn source(self) -> SourceKind {
        match self {
            Method::ConfMsm | Method::ConfRmsn => SourceKind::Proxies,
            Method::DeconfMsm | Method::DeconfRmsn => SourceKind::Embedding,
            Method::OracleMsm | Method::OracleRmsn => SourceKind::Oracle,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::ConfMsm | Method::DeconfMsm | Method::OracleMsm => Family::Msm,
            _ => Family::Rmsn,
        }
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|m| *m == self).expect("listed") as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub gamma_grid: Vec<f64>,
    pub n_datasets: usize,
    pub sim: SimConfig,
    pub tau: usize,
    pub methods: Vec<Method>,
    pub search_iterations: usize,
    /// Search iterations for the recurrent outcome model.
    pub rmsn_search_iterations: usize,
    pub split: SplitFractions,
    pub master_seed: u64,
    pub grid: HyperGrid,
    /// Fixed autoencoder settings (epochs, hidden size); searched fields
    /// are overwritten per candidate.
    pub dta: DtaHyper,
    pub rmsn: RmsnHyper,
    pub msm: MsmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    /// Full-scale protocol: 5000 patients, ten datasets per γ, five γ
    /// values, 50 search iterations, 200 epochs.
    pub fn full() -> Self {
        Self {
            gamma_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            n_datasets: 10,
            sim: SimConfig::default(),
            tau: 5,
            methods: Method::ALL.to_vec(),
            search_iterations: 50,
            rmsn_search_iterations: 9,
            split: SplitFractions::default(),
            master_seed: 0,
            grid: HyperGrid::default(),
            dta: DtaHyper::default(),
            rmsn: RmsnHyper::default(),
            msm: MsmConfig::default(),
        }
    }

    /// Reduced protocol for a single workstation: 1000 patients, three
    /// datasets per γ ∈ {0, 0.4, 0.8}, short searches and training runs.
    pub fn desk() -> Self {
        Self {
            gamma_grid: vec![0.0, 0.4, 0.8],
            n_datasets: 3,
            sim: SimConfig { n: 1000, ..SimConfig::default() },
            search_iterations: 2,
            rmsn_search_iterations: 2,
            dta: DtaHyper { epochs: 40, ..DtaHyper::default() },
            rmsn: RmsnHyper { propensity_epochs: 5, outcome_epochs: 15, ..RmsnHyper::default() },
            ..Self::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Usage(format!("unknown profile `{name}` (desk, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config(format!("gamma_grid {:?} must lie in [0, 1]", self.gamma_grid)));
        }
        if self.n_datasets == 0 {
            return Err(Error::Config("n_datasets must be >= 1".into()));
        }
        if self.search_iterations == 0 || self.rmsn_search_iterations == 0 {
            return Err(Error::Config("search iterations must be >= 1".into()));
        }
        if self.tau == 0 || self.tau >= self.sim.t {
            return Err(Error::Config(format!("tau {} must lie in 1..T ({})", self.tau, self.sim.t)));
        }
        self.split.validate()?;
        self.grid.validate()?;
        SimConfig { tau_cf: self.tau, ..self.sim }.validate()?;
        self.rmsn.validate()?;
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let words: Vec<u64> = json.chunks(8).map(|c| c.iter().fold(0u64, |h, b| (h << 8) | *b as u64)).collect();
        stable_hash(&words)
    }
}

/// Outcome of one arm on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub gamma: f64,
    pub method: Method,
    pub run: usize,
    pub rmse: Option<f64>,
    pub error: Option<String>,
    /// Selected hyperparameters as compact JSON.
    pub hyperparameters: String,
    pub runtime_s: f64,
}

/// Everything computed for one (γ, repetition) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub fingerprint: u64,
    pub gamma: f64,
    pub run: usize,
    /// Counterfactual RMSE of predicting the training-set mean outcome.
    pub baseline_rmse: Option<f64>,
    pub runs: Vec<RunRecord>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub gamma: f64,
    pub method: Method,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub units: Vec<UnitRecord>,
    pub summary: Vec<CellSummary>,
}

impl ExperimentResult {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.units.iter().flat_map(|u| u.runs.iter())
    }

    pub fn cell(&self, gamma: f64, method: Method) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.gamma == gamma && c.method == method)
    }

    /// RMSE of `method` on repetition `run` at `gamma`.
    pub fn rmse(&self, gamma: f64, method: Method, run: usize) -> Option<f64> {
        self.records().find(|r| r.gamma == gamma && r.method == method && r.run == run).and_then(|r| r.rmse)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(units: &[UnitRecord], cfg: &ExperimentConfig) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(usize, Method), (Vec<f64>, usize)> = BTreeMap::new();
    for u in units {
        let gi = cfg.gamma_grid.iter().position(|g| *g == u.gamma).expect("gamma from grid");
        for r in &u.runs {
            let e = cells.entry((gi, r.method)).or_default();
            match r.rmse {
                Some(v) => e.0.push(v),
                None => e.1 += 1,
            }
        }
    }
    cells
        .into_iter()
        .map(|((gi, method), (vals, failed))| {
            let (rmse_mean, rmse_sd) = if vals.is_empty() { (f64::NAN, f64::NAN) } else { mean_sd(&vals) };
            CellSummary { gamma: cfg.gamma_grid[gi], method, rmse_mean, rmse_sd, n_runs: vals.len(), n_failed: failed }
        })
        .collect()
}

struct Splits {
    train: TrajectoryDataset,
    val: TrajectoryDataset,
    test: TrajectoryDataset,
}

struct Sources {
    train: CovariateSource,
    val: CovariateSource,
    test: CovariateSource,
}

fn sources_for(kind: SourceKind, s: &Splits, model: Option<&DtaModel>) -> Result<Sources> {
    let pick = |ds: &TrajectoryDataset| -> Result<CovariateSource> {
        let emb = match (kind, model) {
            (SourceKind::Embedding, Some(m)) => Some(embed_dataset(m, ds)?),
            _ => None,
        };
        CovariateSource::from_dataset(kind, ds, emb.as_ref())
    };
    Ok(Sources { train: pick(&s.train)?, val: pick(&s.val)?, test: pick(&s.test)? })
}

fn test_plan(test: &TrajectoryDataset, tau: usize) -> Result<(usize, Array3<f64>)> {
    let anchor = test.anchor_t.ok_or_else(|| Error::Usage("test split carries no counterfactual anchor".into()))?;
    let cf_a = test.cf_a.as_ref().ok_or_else(|| Error::Usage("test split carries no counterfactual plan".into()))?;
    Ok((anchor, cf_a.slice(s![.., ..tau, ..]).to_owned()))
}

fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    splits: &Splits,
    src: &Sources,
    seed: u64,
) -> Result<(f64, String)> {
    let tau = cfg.tau;
    let (anchor, plan) = test_plan(&splits.test, tau)?;
    match method.family() {
        Family::Msm => {
            let mcfg = MsmConfig { tau, ..cfg.msm };
            let model = fit_msm(&splits.train, &src.train, &mcfg)?;
            let pred = predict_msm_batch(&model, src.test.covariates.view(), splits.test.a.view(), anchor, plan.view())?;
            let score = evaluate_counterfactual_rmse(pred.as_slice().expect("contiguous"), &splits.test, tau)?;
            Ok((score, serde_json::to_string(&mcfg)?))
        }
        Family::Rmsn => {
            let points = cfg.grid.rmsn_points(&cfg.rmsn);
            let found = hyper_search(&points, cfg.rmsn_search_iterations, seed, |h, s| {
                let h = RmsnHyper { seed: s, ..*h };
                let (model, _) = fit_rmsn(&splits.train, &src.train, tau, &h)?;
                let score = rmsn_validation_rmse(&model, &splits.val, &src.val)?;
                Ok((model, score))
            })?;
            let pred = predict_rmsn_batch(&found.model, src.test.covariates.view(), splits.test.a.view(), anchor, plan.view())?;
            let last: Vec<f64> = pred.column(tau - 1).to_vec();
            let score = evaluate_counterfactual_rmse(&last, &splits.test, tau)?;
            Ok((score, serde_json::to_string(&found.model.hyper)?))
        }
    }
}

fn run_unit(cfg: &ExperimentConfig, gamma: f64, rep: usize) -> UnitRecord {
    let master = cfg.master_seed;
    let mut timings = Vec::new();
    let fail_all = |msg: String, timings: Vec<(String, f64)>| UnitRecord {
        fingerprint: cfg.fingerprint(),
        gamma,
        run: rep,
        baseline_rmse: None,
        runs: cfg
            .methods
            .iter()
            .map(|&method| RunRecord {
                gamma,
                method,
                run: rep,
                rmse: None,
                error: Some(msg.clone()),
                hyperparameters: String::new(),
                runtime_s: 0.0,
            })
            .collect(),
        timings,
    };

    let clock = Instant::now();
    let sim = SimConfig { seed: unit_seed(master, gamma, rep, TAG_DATA), tau_cf: cfg.tau, ..cfg.sim }.with_gamma(gamma);
    let splits = match simulate_with_counterfactuals(&sim).and_then(|(ds, _)| {
        let (train, val, test) = split_dataset(&ds, cfg.split, unit_seed(master, gamma, rep, TAG_SPLIT))?;
        audit_split(&train, &val, &test)?;
        Ok(Splits { train, val, test })
    }) {
        Ok(s) => s,
        Err(e) => return fail_all(format!("simulation: {e}"), timings),
    };
    timings.push(("simulate".to_string(), clock.elapsed().as_secs_f64()));

    let mean_y = splits.train.y.mean().unwrap_or(0.0);
    let baseline_rmse = evaluate_counterfactual_rmse(&vec![mean_y; splits.test.n_patients()], &splits.test, cfg.tau).ok();

    let needs_dta = cfg.methods.iter().any(|m| m.source() == SourceKind::Embedding);
    let mut dta: Option<std::result::Result<(DtaModel, DtaHyper), String>> = None;
    if needs_dta {
        let clock = Instant::now();
        let found = search_dta(
            &splits.train,
            &splits.val,
            &cfg.grid,
            &cfg.dta,
            cfg.search_iterations,
            unit_seed(master, gamma, rep, TAG_DTA),
        );
        timings.push(("dta_search".to_string(), clock.elapsed().as_secs_f64()));
        dta = Some(found.map(|f| (f.model, f.best)).map_err(|e| format!("autoencoder search: {e}")));
    }

    let mut sources: BTreeMap<&'static str, std::result::Result<Sources, String>> = BTreeMap::new();
    let mut runs = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let clock = Instant::now();
        let kind = method.source();
        let src = sources.entry(kind.as_str()).or_insert_with(|| match kind {
            SourceKind::Embedding => match dta.as_ref().expect("searched when needed") {
                Ok((m, _)) => sources_for(kind, &splits, Some(m)).map_err(|e| e.to_string()),
                Err(msg) => Err(msg.clone()),
            },
            _ => sources_for(kind, &splits, None).map_err(|e| e.to_string()),
        });
        let seed = stable_hash(&[master, gamma.to_bits(), rep as u64, TAG_METHOD, method.index()]);
        let outcome = match src {
            Ok(src) => run_method(cfg, method, &splits, src, seed).map_err(|e| e.to_string()),
            Err(msg) => Err(msg.clone()),
        };
        let mut hyperparameters = String::new();
        let (rmse, error) = match outcome {
            Ok((score, hp)) => {
                hyperparameters = hp;
                (Some(score), None)
            }
            Err(msg) => {
                log::warn!("γ={gamma} run {rep} {method}: {msg}");
                (None, Some(msg))
            }
        };
        if kind == SourceKind::Embedding {
            if let Some(Ok((_, h))) = &dta {
                let dta_json = serde_json::to_string(h).expect("hyper serializes");
                hyperparameters = format!("{{\"dta\":{dta_json},\"outcome\":{}}}", if hyperparameters.is_empty() { "null" } else { &hyperparameters });
            }
        }
        let runtime_s = clock.elapsed().as_secs_f64();
        timings.push((method.as_str().to_string(), runtime_s));
        runs.push(RunRecord { gamma, method, run: rep, rmse, error, hyperparameters, runtime_s });
    }
    log::info!("finished γ={gamma} run {rep}");
    UnitRecord { fingerprint: cfg.fingerprint(), gamma, run: rep, baseline_rmse, runs, timings }
}

fn unit_path(dir: &Path, gamma: f64, rep: usize) -> std::path::PathBuf {
    dir.join(format!("unit_g{gamma}_r{rep}.json"))
}

/// Runs the full experiment without completion records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_in(cfg, None)
}

/// Runs the experiment; with `records` set, each finished (γ, repetition)
/// is saved there and reused on the next call with an identical config.
pub fn run_experiment_in(cfg: &ExperimentConfig, records: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    if cfg.methods.is_empty() {
        return Ok(ExperimentResult::default());
    }
    if let Some(dir) = records {
        std::fs::create_dir_all(dir)?;
    }
    let fingerprint = cfg.fingerprint();
    let jobs: Vec<(f64, usize)> =
        cfg.gamma_grid.iter().flat_map(|&g| (0..cfg.n_datasets).map(move |r| (g, r))).collect();
    let units: Vec<UnitRecord> = jobs
        .par_iter()
        .map(|&(gamma, rep)| -> Result<UnitRecord> {
            if let Some(dir) = records {
                let path = unit_path(dir, gamma, rep);
                if let Ok(text) = std::fs::read_to_string(&path) {
                    match serde_json::from_str::<UnitRecord>(&text) {
                        Ok(u) if u.fingerprint == fingerprint => {
                            log::info!("reusing completed γ={gamma} run {rep}");
                            return Ok(u);
                        }
                        _ => log::info!("ignoring stale record {}", path.display()),
                    }
                }
            }
            let unit = run_unit(cfg, gamma, rep);
            if let Some(dir) = records {
                crate::io::write_atomic(&unit_path(dir, gamma, rep), serde_json::to_string(&unit)?.as_bytes())?;
            }
            Ok(unit)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&units, cfg);
    if let Some(cell) = summary.iter().find(|c| c.n_runs == 0) {
        let first = units
            .iter()
            .flat_map(|u| &u.runs)
            .find(|r| r.gamma == cell.gamma && r.method == cell.method)
            .and_then(|r| r.error.clone())
            .unwrap_or_default();
        return Err(Error::Search(format!("every run of {} at γ={} failed: {first}", cell.method, cell.gamma)));
    }
    Ok(ExperimentResult { units, summary })
}

/// Counterfactual target at step `τ` for a test split, as a plain vector.
pub fn counterfactual_target(dataset: &TrajectoryDataset, tau: usize) -> Result<Array1<f64>> {
    let cf_y = dataset.cf_y.as_ref().ok_or_else(|| Error::Usage("dataset carries no counterfactual outcomes".into()))?;
    Ok(cf_y.index_axis(Axis(1), tau - 1).to_owned())
}
