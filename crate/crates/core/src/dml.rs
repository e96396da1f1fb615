//! Standard double machine learning: sample splitting, residualization and
//! the orthogonalized estimator.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cdml::{fit_joint, LossWeights};
use crate::datagen::{Dataset, Oracle, OracleTarget};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestConfig};
use crate::grad::pairwise_sum;
use crate::model::Regressor;
use crate::nets::{build_mlp_with_keep, train_mse, MlpVariant, TrainConfig, DEFAULT_KEEP_PROB};
use crate::rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Seed streams derived from a run seed.
pub(crate) mod streams {
    pub const INIT_M: u64 = 1;
    pub const INIT_L: u64 = 2;
    pub const TRAIN_M: u64 = 3;
    pub const TRAIN_L: u64 = 4;
    pub const FOREST_M: u64 = 5;
    pub const FOREST_L: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub i1: Vec<usize>,
    pub i21: Vec<usize>,
    pub i22: Vec<usize>,
}

impl SplitIndices {
    /// `I2 = I21 ∪ I22`, in that order.
    pub fn i2(&self) -> Vec<usize> {
        self.i21.iter().chain(&self.i22).copied().collect()
    }

    pub fn n(&self) -> usize {
        self.i1.len() + self.i21.len() + self.i22.len()
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.5, 0.25, 0.25];

/// Seeded uniformly random partition of `0..n` into `(I1, I21, I22)` with
/// sizes `round(f1 n)`, `round(f2 n)` and the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n1 = (fractions[0] * n as f64).round() as usize;
    let n21 = (fractions[1] * n as f64).round() as usize;
    if n1 == 0 || n21 == 0 || n1 + n21 >= n {
        return Err(Error::Split(format!(
            "{n} rows cannot be split into three non-empty parts with fractions {fractions:?}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed));
    let i22 = perm.split_off(n1 + n21);
    let i21 = perm.split_off(n1);
    Ok(SplitIndices { i1: perm, i21, i22 })
}

/// Learner provenance recorded in reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerMeta {
    pub learner: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch_m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch_l: Option<usize>,
}

/// Fitted `m̂(X) ≈ E[D|X]` and `ℓ̂(X) ≈ E[Y|X]`.
#[derive(Debug, Clone)]
pub struct NuisancePair {
    pub m: Arc<dyn Regressor>,
    pub l: Arc<dyn Regressor>,
    /// Rows the pair was fitted on, if known.
    pub fit_indices: Option<Vec<usize>>,
    pub meta: LearnerMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub idx: Vec<usize>,
}

impl ResidualSet {
    pub fn new(u_hat: Vec<f64>, v_hat: Vec<f64>) -> Result<Self> {
        if u_hat.len() != v_hat.len() {
            return Err(Error::Config(format!(
                "residual lengths differ: {} vs {}",
                u_hat.len(),
                v_hat.len()
            )));
        }
        if u_hat.iter().chain(&v_hat).any(|v| !v.is_finite()) {
            return Err(Error::Config("residuals must be finite".into()));
        }
        let idx = (0..u_hat.len()).collect();
        Ok(Self { u_hat, v_hat, idx })
    }

    pub fn len(&self) -> usize {
        self.u_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_hat.is_empty()
    }

    /// Rows `pos` (positions within this set).
    pub fn select(&self, pos: &[usize]) -> ResidualSet {
        ResidualSet {
            u_hat: pos.iter().map(|&p| self.u_hat[p]).collect(),
            v_hat: pos.iter().map(|&p| self.v_hat[p]).collect(),
            idx: pos.iter().map(|&p| self.idx[p]).collect(),
        }
    }
}

/// `Û = Y − ℓ̂(X)`, `V̂ = D − m̂(X)` on rows `idx`.
pub fn residuals(data: &Dataset, idx: &[usize], pair: &NuisancePair) -> Result<ResidualSet> {
    if idx.is_empty() {
        return Err(Error::Empty("no evaluation rows".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.n()) {
        return Err(Error::Config(format!("row index {bad} out of range for {} rows", data.n())));
    }
    if let Some(fit) = &pair.fit_indices {
        let fit: HashSet<usize> = fit.iter().copied().collect();
        let overlap: Vec<usize> = idx.iter().copied().filter(|i| fit.contains(i)).collect();
        if let Some(&example) = overlap.first() {
            return Err(Error::FitEvalOverlap {
                count: overlap.len(),
                example,
            });
        }
    }
    let x = data.x.select(Axis(0), idx);
    let m = pair.m.predict(x.view())?;
    let l = pair.l.predict(x.view())?;
    let u_hat = idx.iter().zip(&l).map(|(&i, li)| data.y[i] - li).collect();
    let v_hat = idx.iter().zip(&m).map(|(&i, mi)| data.d[i] - mi).collect();
    let mut res = ResidualSet::new(u_hat, v_hat)?;
    res.idx = idx.to_vec();
    Ok(res)
}

/// `θ̂ = Σ V̂Û / Σ V̂²`.
pub fn estimate_theta(res: &ResidualSet) -> Result<f64> {
    let (num, den) = theta_parts(&res.v_hat, &res.u_hat);
    if !(den > 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    Ok(num / den)
}

pub(crate) fn theta_parts(v: &[f64], u: &[f64]) -> (f64, f64) {
    let vu: Vec<f64> = v.iter().zip(u).map(|(a, b)| a * b).collect();
    let vv: Vec<f64> = v.iter().map(|a| a * a).collect();
    (pairwise_sum(&vu), pairwise_sum(&vv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// Each network trained alone on its own MSE.
    #[default]
    Separate,
    /// Both networks trained together on the unweighted sum of MSEs with one
    /// step schedule and one stopping rule.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub variant: MlpVariant,
    pub keep_prob: f64,
    pub train: TrainConfig,
    pub stopping: Stopping,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: MlpVariant::ThreeLayer,
            keep_prob: DEFAULT_KEEP_PROB,
            train: TrainConfig::default(),
            stopping: Stopping::Separate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerConfig {
    Mlp(NetConfig),
    Forest(ForestConfig),
    /// True nuisance functions from the dataset's ground truth.
    Oracle,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::Mlp(NetConfig::default())
    }
}

/// Oracle `m` and `ℓ = g + θ m` for a simulated dataset.
pub fn oracle_pair(data: &Dataset) -> Result<NuisancePair> {
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| Error::NoOracle("dataset carries no ground truth".into()))?;
    let spec = truth
        .oracle
        .ok_or_else(|| Error::NoOracle("dataset has no closed-form nuisance functions".into()))?;
    let d = data.dim();
    Ok(NuisancePair {
        m: Arc::new(Oracle { spec, target: OracleTarget::M, n_features: d }),
        l: Arc::new(Oracle { spec, target: OracleTarget::L { theta: truth.theta }, n_features: d }),
        fit_indices: None,
        meta: LearnerMeta { learner: "oracle".into(), ..Default::default() },
    })
}

/// Fits `m̂`, `ℓ̂` on `train_idx`; networks early-stop on `holdout_idx`.
pub fn fit_nuisances(
    data: &Dataset,
    train_idx: &[usize],
    holdout_idx: &[usize],
    learner: &LearnerConfig,
    seed: u64,
) -> Result<NuisancePair> {
    match learner {
        LearnerConfig::Oracle => oracle_pair(data),
        LearnerConfig::Forest(fc) => {
            let x = data.x.select(Axis(0), train_idx);
            let fit = |target: &Array1<f64>, stream| {
                let y = target.select(Axis(0), train_idx);
                let cfg = ForestConfig { seed: rng::derive_seed(seed, stream), ..fc.clone() };
                fit_forest(x.view(), y.view(), &cfg)
            };
            let m = fit(&data.d, streams::FOREST_M)?;
            let l = fit(&data.y, streams::FOREST_L)?;
            Ok(NuisancePair {
                m: Arc::new(m),
                l: Arc::new(l),
                fit_indices: Some(train_idx.to_vec()),
                meta: LearnerMeta { learner: "forest".into(), ..Default::default() },
            })
        }
        LearnerConfig::Mlp(nc) => match nc.stopping {
            Stopping::Shared => fit_joint(data, train_idx, holdout_idx, &LossWeights::unit_l0(), nc, seed),
            Stopping::Separate => {
                let x = data.x.select(Axis(0), train_idx);
                let hx = data.x.select(Axis(0), holdout_idx);
                let fit = |target: &Array1<f64>, init, train| {
                    let y = target.select(Axis(0), train_idx);
                    let hy = target.select(Axis(0), holdout_idx);
                    let mlp = build_mlp_with_keep(data.dim(), nc.variant, nc.keep_prob, rng::derive_seed(seed, init))?;
                    let cfg = TrainConfig { seed: rng::derive_seed(seed, train), ..nc.train.clone() };
                    train_mse(mlp, x.view(), y.view(), hx.view(), hy.view(), &cfg)
                };
                let m = fit(&data.d, streams::INIT_M, streams::TRAIN_M)?;
                let l = fit(&data.y, streams::INIT_L, streams::TRAIN_L)?;
                let meta = LearnerMeta {
                    learner: "mlp".into(),
                    best_epoch_m: Some(m.best_epoch),
                    best_epoch_l: Some(l.best_epoch),
                };
                Ok(NuisancePair {
                    m: Arc::new(m),
                    l: Arc::new(l),
                    fit_indices: Some(train_idx.to_vec()),
                    meta,
                })
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub theta_hat: f64,
    pub n_estimation: usize,
    pub sum_vhat_sq: f64,
    pub mean_u_hat: f64,
    pub mean_v_hat: f64,
    pub var_u_hat: f64,
    pub var_v_hat: f64,
    pub learner: LearnerMeta,
}

impl EstimateReport {
    pub fn from_residuals(res: &ResidualSet, learner: LearnerMeta) -> Result<Self> {
        let theta_hat = estimate_theta(res)?;
        let (_, sum_vhat_sq) = theta_parts(&res.v_hat, &res.u_hat);
        let (mean_u_hat, var_u_hat) = mean_var(&res.u_hat);
        let (mean_v_hat, var_v_hat) = mean_var(&res.v_hat);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            theta_hat,
            n_estimation: res.len(),
            sum_vhat_sq,
            mean_u_hat,
            mean_v_hat,
            var_u_hat,
            var_v_hat,
            learner,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Population mean and variance, with pairwise summation.
pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&sq) / n)
}

#[derive(Debug, Clone)]
pub struct DmlRun {
    pub report: EstimateReport,
    pub pair: NuisancePair,
    pub residuals: ResidualSet,
}

/// Fits the nuisances on `I1` (early stopping on `I21`) and estimates `θ` on `I2`.
pub fn run_dml(data: &Dataset, splits: &SplitIndices, learner: &LearnerConfig, seed: u64) -> Result<DmlRun> {
    let pair = fit_nuisances(data, &splits.i1, &splits.i21, learner, seed)?;
    let res = residuals(data, &splits.i2(), &pair)?;
    let report = EstimateReport::from_residuals(&res, pair.meta.clone())?;
    Ok(DmlRun { report, pair, residuals: res })
}
