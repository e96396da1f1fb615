//! Method dispatch and single-replication runs shared by the command-line
//! driver and the statistical test suites.

use serde::{Deserialize, Serialize};

use crate::analysis::{nuisance_errors, NuisanceErrors, ReplicationRecord};
use crate::cdml::{tune_and_run, CdmlConfig, CdmlReport};
use crate::datagen::{sample_plr, Dataset, DgpConfig};
use crate::dml::{run_dml, split_indices, EstimateReport, LearnerConfig, NetConfig, NuisancePair, ResidualSet, SplitIndices};
use crate::error::Result;
use crate::forest::ForestConfig;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DmlNn,
    DmlRf,
    Cdml,
    /// DML with the true nuisance functions.
    DmlOracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DmlNn => "dml_nn",
            Method::DmlRf => "dml_rf",
            Method::Cdml => "cdml",
            Method::DmlOracle => "dml_oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dml_nn" => Ok(Method::DmlNn),
            "dml_rf" => Ok(Method::DmlRf),
            "cdml" => Ok(Method::Cdml),
            "dml_oracle" => Ok(Method::DmlOracle),
            other => Err(format!("unknown method `{other}` (expected dml_nn, dml_rf, cdml or dml_oracle)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub net: NetConfig,
    pub forest: ForestConfig,
    pub cdml: CdmlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Dml(EstimateReport),
    Cdml(CdmlReport),
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub theta_hat: f64,
    pub pair: NuisancePair,
    pub residuals: ResidualSet,
    pub report: Report,
}

pub fn run_method(data: &Dataset, splits: &SplitIndices, method: Method, cfg: &MethodConfig, seed: u64) -> Result<MethodRun> {
    let dml = |learner: LearnerConfig| -> Result<MethodRun> {
        let run = run_dml(data, splits, &learner, seed)?;
        Ok(MethodRun { theta_hat: run.report.theta_hat, pair: run.pair, residuals: run.residuals, report: Report::Dml(run.report) })
    };
    match method {
        Method::DmlNn => dml(LearnerConfig::Mlp(cfg.net.clone())),
        Method::DmlRf => dml(LearnerConfig::Forest(cfg.forest.clone())),
        Method::DmlOracle => dml(LearnerConfig::Oracle),
        Method::Cdml => {
            let cd = CdmlConfig { net: cfg.net.clone(), ..cfg.cdml.clone() };
            let run = tune_and_run(data, splits, &cd, seed)?;
            Ok(MethodRun {
                theta_hat: run.report.theta_hat_final,
                pair: run.pair,
                residuals: run.residuals,
                report: Report::Cdml(run.report),
            })
        }
    }
}

/// Seeds of one replication, derived from the base seed and its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationSeeds {
    pub replication: u64,
    pub data: u64,
    pub split: u64,
    pub method: u64,
    pub analysis: u64,
}

impl ReplicationSeeds {
    pub fn new(base: u64, replication: usize) -> Self {
        let r = rng::derive_seed(base, replication as u64);
        Self {
            replication: r,
            data: rng::derive_seed(r, 1),
            split: rng::derive_seed(r, 2),
            method: rng::derive_seed(r, 3),
            analysis: rng::derive_seed(r, 4),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub data: Dataset,
    pub splits: SplitIndices,
    pub seeds: ReplicationSeeds,
}

/// Simulates replication `replication` of `dgp` and splits it.
pub fn simulate_replication(dgp: &DgpConfig, fractions: [f64; 3], base_seed: u64, replication: usize) -> Result<Replication> {
    let seeds = ReplicationSeeds::new(base_seed, replication);
    let data = sample_plr(&DgpConfig { seed: seeds.data, ..dgp.clone() })?;
    let splits = split_indices(data.n(), fractions, seeds.split)?;
    Ok(Replication { data, splits, seeds })
}

/// Runs `method` on a replication and records its estimate and nuisance
/// error moments on `I2`.
pub fn record_replication(
    rep: &Replication,
    replication: usize,
    method: Method,
    cfg: &MethodConfig,
) -> Result<(ReplicationRecord, MethodRun)> {
    let run = run_method(&rep.data, &rep.splits, method, cfg, rep.seeds.method)?;
    let theta = rep.data.truth.as_ref().map_or(f64::NAN, |t| t.theta);
    let errors = if rep.data.truth.as_ref().is_some_and(|t| t.oracle.is_some()) {
        nuisance_errors(&rep.data, &rep.splits.i2(), &run.pair)?
    } else {
        NuisanceErrors { mean_dm_dl: f64::NAN, mse_m: f64::NAN, mse_l: f64::NAN }
    };
    let record = ReplicationRecord {
        replication,
        seed: rep.seeds.replication,
        method: method.name().into(),
        theta,
        theta_hat: run.theta_hat,
        errors,
    };
    Ok((record, run))
}
