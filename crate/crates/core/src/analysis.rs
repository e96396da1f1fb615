//! Theoretical DML bias, replication metrics, and bootstrap intervals.

use std::sync::Arc;

use ndarray::{Array1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_ar1, Dataset, DgpConfig};
use crate::dml::{estimate_theta, mean_var, oracle_pair, residuals, theta_parts, NuisancePair, REPORT_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::grad::pairwise_sum;
use crate::model::Regressor;
use crate::rng;

pub const DEFAULT_MC_N: usize = 100_000;
pub const MIN_MC_N: usize = 10_000;
pub const DEFAULT_RESAMPLES: usize = 200;
pub const DEFAULT_LEVEL: f64 = 0.95;
const MAX_RESAMPLE_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    Truth,
    /// Sample variance of `V̂`; this overstates `Var(V)` by `E[Δm²]`.
    EstimatedFromResiduals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub b_dml: f64,
    pub e_dm_dl: f64,
    pub e_dm_sq: f64,
    pub var_v: f64,
    pub var_v_source: VarianceSource,
    pub theta_used: f64,
    pub mc_n: usize,
    pub se_e_dm_dl: f64,
    pub se_e_dm_sq: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let (m, var) = mean_var(v);
    let n = v.len() as f64;
    (m, (var * n / (n - 1.0).max(1.0)).sqrt() / n.sqrt())
}

/// `B = (E[Δm Δℓ] − θ E[Δm²]) / (Var V + E[Δm²])`, with the expectations
/// taken over `mc_n` fresh covariate draws and `Var V = σ_V²` from the DGP.
pub fn theoretical_bias(pair: &NuisancePair, dgp: &DgpConfig, theta: f64, mc_n: usize, seed: u64) -> Result<BiasReport> {
    if mc_n < MIN_MC_N {
        return Err(Error::Config(format!("mc_n must be at least {MIN_MC_N}, got {mc_n}")));
    }
    dgp.validate()?;
    let x = sample_ar1(mc_n, dgp.d, dgp.rho, seed);
    let truth = Dataset {
        x,
        d: Array1::zeros(mc_n),
        y: Array1::zeros(mc_n),
        truth: Some(crate::datagen::Truth {
            theta,
            theta_i: None,
            var_v: Some(dgp.sigma_v * dgp.sigma_v),
            sigma_u: dgp.sigma_u,
            oracle: Some(dgp.oracle_spec()),
            surrogate_g: None,
        }),
    };
    let oracle = oracle_pair(&truth)?;
    let (dm, dl) = errors_on(truth.x.view(), &oracle, pair)?;
    let prod: Vec<f64> = dm.iter().zip(&dl).map(|(a, b)| a * b).collect();
    let sq: Vec<f64> = dm.iter().map(|a| a * a).collect();
    let (e_dm_dl, se_e_dm_dl) = mean_se(&prod);
    let (e_dm_sq, se_e_dm_sq) = mean_se(&sq);
    let var_v = dgp.sigma_v * dgp.sigma_v;
    let den = var_v + e_dm_sq;
    if !(den > 0.0) {
        return Err(Error::Config("Var(V) + E[dm^2] must be positive".into()));
    }
    Ok(BiasReport {
        b_dml: (e_dm_dl - theta * e_dm_sq) / den,
        e_dm_dl,
        e_dm_sq,
        var_v,
        var_v_source: VarianceSource::Truth,
        theta_used: theta,
        mc_n,
        se_e_dm_dl,
        se_e_dm_sq,
    })
}

/// [`theoretical_bias`] using the DGP recorded in a simulated dataset's truth.
pub fn theoretical_bias_for(data: &Dataset, pair: &NuisancePair, mc_n: usize, seed: u64) -> Result<BiasReport> {
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| Error::NoOracle("theoretical bias needs simulated data".into()))?;
    let spec = truth
        .oracle
        .ok_or_else(|| Error::NoOracle("theoretical bias needs closed-form nuisance functions".into()))?;
    let dgp = DgpConfig {
        d: data.dim(),
        rho: spec.rho,
        nuisance: spec.nuisance,
        theta: truth.theta,
        sigma_u: truth.sigma_u,
        sigma_v: spec.sigma_v,
        majority_threshold: spec.threshold,
        ..Default::default()
    };
    theoretical_bias(pair, &dgp, truth.theta, mc_n, seed)
}

/// `(Δm, Δℓ) = (m − m̂, ℓ − ℓ̂)` at the rows of `x`.
fn errors_on(x: ArrayView2<'_, f64>, oracle: &NuisancePair, pair: &NuisancePair) -> Result<(Vec<f64>, Vec<f64>)> {
    let dm = oracle.m.predict(x)? - pair.m.predict(x)?;
    let dl = oracle.l.predict(x)? - pair.l.predict(x)?;
    Ok((dm.to_vec(), dl.to_vec()))
}

/// Sample moments of the nuisance errors on rows `idx` of a simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceErrors {
    pub mean_dm_dl: f64,
    pub mse_m: f64,
    pub mse_l: f64,
}

pub fn nuisance_errors(data: &Dataset, idx: &[usize], pair: &NuisancePair) -> Result<NuisanceErrors> {
    let oracle = oracle_pair(data)?;
    let x = data.x.select(Axis(0), idx);
    let (dm, dl) = errors_on(x.view(), &oracle, pair)?;
    let n = idx.len() as f64;
    let f = |v: Vec<f64>| pairwise_sum(&v) / n;
    Ok(NuisanceErrors {
        mean_dm_dl: f(dm.iter().zip(&dl).map(|(a, b)| a * b).collect()),
        mse_m: f(dm.iter().map(|a| a * a).collect()),
        mse_l: f(dl.iter().map(|a| a * a).collect()),
    })
}

/// `ℓ̂` plus a Gaussian draw that is a fixed function of the input row.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub inner: Arc<dyn Regressor>,
    pub sigma: f64,
    pub seed: u64,
}

impl Regressor for Perturbed {
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let mut out = self.inner.predict(x)?;
        if self.sigma > 0.0 {
            for (o, row) in out.iter_mut().zip(x.rows()) {
                let mut r = rng::StreamRng::seed_from_u64(rng::hash_row(row.iter().copied(), self.seed));
                let z: f64 = StandardNormal.sample(&mut r);
                *o += self.sigma * z;
            }
        }
        Ok(out)
    }
}

pub fn perturb_lhat(pair: &NuisancePair, sigma_l: f64, seed: u64) -> Result<NuisancePair> {
    if !(sigma_l >= 0.0 && sigma_l.is_finite()) {
        return Err(Error::Config(format!("sigma_l must be finite and nonnegative, got {sigma_l}")));
    }
    let mut out = pair.clone();
    out.l = Arc::new(Perturbed { inner: pair.l.clone(), sigma: sigma_l, seed });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub theta: f64,
    pub theta_hat: f64,
    /// Nuisance error moments on the estimation rows.
    pub errors: NuisanceErrors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n_replications: usize,
    pub bias: Estimate,
    pub mse: Estimate,
    pub abs_cov_dm_dl: Estimate,
    pub mse_m: Estimate,
    pub mse_l: Estimate,
}

fn estimate(v: &[f64]) -> Estimate {
    let (value, se) = mean_se(v);
    Estimate { value, se: if v.len() > 1 { se } else { f64::NAN } }
}

/// Means over replications of `θ̂ − θ`, `(θ̂ − θ)²`, `|mean(Δm Δℓ)|`, and the
/// two nuisance mean squared errors, each with its Monte Carlo standard error.
pub fn replication_metrics(records: &[ReplicationRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty("no replication records".into()));
    }
    let col = |f: &dyn Fn(&ReplicationRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_replications: records.len(),
        bias: estimate(&col(&|r| r.theta_hat - r.theta)),
        mse: estimate(&col(&|r| (r.theta_hat - r.theta).powi(2))),
        abs_cov_dm_dl: estimate(&col(&|r| r.errors.mean_dm_dl.abs())),
        mse_m: estimate(&col(&|r| r.errors.mse_m)),
        mse_l: estimate(&col(&|r| r.errors.mse_l)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Nuisances frozen; only the estimation rows are resampled.
    EstimationStage,
    /// Every resample reruns the whole estimator.
    FullPipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub schema_version: u32,
    pub mode: BootstrapMode,
    pub level: f64,
    pub n_resamples: usize,
    pub theta_hat: f64,
    pub lower: f64,
    pub upper: f64,
}

/// 1-based order-statistic ranks of a two-sided percentile interval:
/// `max(1, ceil(B a/2))` and `min(B, floor(B (1 − a/2)))` with `a = 1 − level`.
pub fn percentile_ranks(n_resamples: usize, level: f64) -> (usize, usize) {
    let b = n_resamples as f64;
    let a = 1.0 - level;
    // guard the products against representation error, e.g. 200 * 0.025
    let lo = ((b * a / 2.0) - 1e-9).ceil().max(1.0) as usize;
    let hi = ((b * (1.0 - a / 2.0)) + 1e-9).floor().min(b) as usize;
    (lo, hi.max(lo))
}

fn percentile_interval(mut draws: Vec<f64>, level: f64) -> (f64, f64) {
    draws.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_ranks(draws.len(), level);
    (draws[lo - 1], draws[hi - 1])
}

fn check_level(n_resamples: usize, level: f64) -> Result<()> {
    if n_resamples < 1 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Bootstrap(format!(
            "need at least one resample and a level in (0,1); got {n_resamples}, {level}"
        )));
    }
    Ok(())
}

/// Percentile interval for `θ` from resampling rows of `I2` with the
/// nuisance pair held fixed.
pub fn bootstrap_ci(
    data: &Dataset,
    i2: &[usize],
    pair: &NuisancePair,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    check_level(n_resamples, level)?;
    if i2.len() < 10 {
        return Err(Error::Bootstrap(format!("need at least 10 estimation rows, got {}", i2.len())));
    }
    let res = residuals(data, i2, pair)?;
    let theta_hat = estimate_theta(&res)?;
    let n = res.len();
    let draws = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            for _ in 0..MAX_RESAMPLE_RETRIES {
                let pos: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
                let sub = res.select(&pos);
                let (num, den) = theta_parts(&sub.v_hat, &sub.u_hat);
                if den > 0.0 {
                    return Ok(num / den);
                }
            }
            Err(Error::Bootstrap(format!(
                "resample {b}: treatment residuals degenerate after {MAX_RESAMPLE_RETRIES} redraws"
            )))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (lower, upper) = percentile_interval(draws, level);
    Ok(BootstrapCi {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: BootstrapMode::EstimationStage,
        level,
        n_resamples,
        theta_hat,
        lower,
        upper,
    })
}

/// Percentile interval from rerunning `estimator(resampled data, seed)` on
/// row resamples of the whole dataset. Duplicated rows may land on both sides
/// of the estimator's internal split.
pub fn bootstrap_full<F>(data: &Dataset, n_resamples: usize, level: f64, seed: u64, estimator: F) -> Result<BootstrapCi>
where
    F: Fn(&Dataset, u64) -> Result<f64> + Sync,
{
    check_level(n_resamples, level)?;
    let theta_hat = estimator(data, rng::derive_seed(seed, u64::MAX))?;
    let n = data.n();
    let draws = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let mut last = None;
            for attempt in 0..MAX_RESAMPLE_RETRIES {
                let pos: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
                match estimator(&data.select(&pos), rng::derive_seed(seed, (b * MAX_RESAMPLE_RETRIES + attempt) as u64)) {
                    Ok(t) => return Ok(t),
                    Err(e @ Error::DegenerateTreatment) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.unwrap_or(Error::DegenerateTreatment))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (lower, upper) = percentile_interval(draws, level);
    Ok(BootstrapCi {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: BootstrapMode::FullPipeline,
        level,
        n_resamples,
        theta_hat,
        lower,
        upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Simple least squares of `y` on `x` with intercept.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("ols needs two or more paired points".into()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    if !(vx > 0.0) {
        return Err(Error::Config("ols regressor has zero variance".into()));
    }
    let n = x.len() as f64;
    let cxy = pairwise_sum(&x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect::<Vec<_>>()) / n;
    let slope = cxy / vx;
    let r2 = if vy > 0.0 { cxy * cxy / (vx * vy) } else { 1.0 };
    Ok(OlsFit { slope, intercept: my - slope * mx, r2 })
}
