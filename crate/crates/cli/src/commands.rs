use std::fs;
use std::path::{Path, PathBuf};

use cdml::analysis::{
    bootstrap_ci, bootstrap_full, ols, perturb_lhat, replication_metrics, theoretical_bias_for, BootstrapCi,
    MetricsReport, OlsFit, ReplicationRecord,
};
use cdml::datagen::{build_semisynthetic, load_csv, sample_plr, Dataset, DgpConfig, SemiSynthConfig};
use cdml::dml::{estimate_theta, residuals, split_indices};
use cdml::pipeline::{record_replication, run_method, simulate_replication, Method, Replication, Report};
use cdml::rng::derive_seed;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepParam};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<cdml::Error> for CliError {
    fn from(e: cdml::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    result: T,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn envelope_json<T: Serialize>(command: &str, cfg: &ExperimentConfig, result: T) -> Result<String> {
    let env = Envelope { schema_version: SCHEMA_VERSION, command, seed: cfg.seed, config: cfg, result };
    serde_json::to_string_pretty(&env).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn synthetic(cfg: &ExperimentConfig) -> DgpConfig {
    DgpConfig { seed: cfg.seed, ..cfg.dgp.clone() }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let Some(src) = &cfg.data else {
        return Ok(sample_plr(&synthetic(cfg))?);
    };
    let raw = load_csv(&src.csv, &[&src.treatment, &src.outcome])?;
    if src.semisynthetic {
        let semi = SemiSynthConfig {
            treatment: src.treatment.clone(),
            outcome: src.outcome.clone(),
            forest: cfg.forest.clone(),
            fractions: src.semi.fractions,
            theta: src.semi.theta,
            effect_mode: src.semi.effect_mode,
            sigma_u: src.semi.sigma_u,
            seed: derive_seed(cfg.seed, 20),
        };
        return Ok(build_semisynthetic(&raw, &semi)?.dataset);
    }
    let mut data = Dataset::from_table(&raw, &src.treatment, &src.outcome)?;
    if let Some(t) = &src.truth {
        data.truth = Dataset::read_truth(t)?;
    }
    Ok(data)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<String> {
    if cfg.data.is_some() {
        return Err(CliError::Usage("simulate needs a [dgp] source, not [data]".into()));
    }
    let data = sample_plr(&synthetic(cfg))?;
    ensure_dir(&cfg.out)?;
    let csv = cfg.out.join("data.csv");
    let truth = cfg.out.join("truth.json");
    data.write_csv(&csv)?;
    data.write_truth(&truth)?;
    #[derive(Serialize)]
    struct Written {
        rows: usize,
        columns: usize,
        csv: PathBuf,
        truth: PathBuf,
    }
    let json = envelope_json("simulate", cfg, Written { rows: data.n(), columns: data.dim() + 2, csv, truth })?;
    write_text(&cfg.out.join("simulate.json"), &json)?;
    Ok(json)
}

pub fn estimate(cfg: &ExperimentConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let splits = split_indices(data.n(), cfg.fractions, derive_seed(cfg.seed, 2))?;
    let run = run_method(&data, &splits, cfg.method, &cfg.method_config(), derive_seed(cfg.seed, 3))?;
    ensure_dir(&cfg.out)?;
    if let Report::Cdml(r) = &run.report {
        write_text(&cfg.out.join("gamma_table.csv"), &r.table_csv())?;
    }
    #[derive(Serialize)]
    struct Estimated<'a> {
        method: Method,
        theta_hat: f64,
        n: usize,
        report: &'a Report,
    }
    let json = envelope_json(
        "estimate",
        cfg,
        Estimated { method: cfg.method, theta_hat: run.theta_hat, n: data.n(), report: &run.report },
    )?;
    write_text(&cfg.out.join("estimate.json"), &json)?;
    Ok(json)
}

fn sweep_points(cfg: &ExperimentConfig) -> Vec<(Option<f64>, DgpConfig)> {
    match &cfg.experiment.sweep {
        None => vec![(None, cfg.dgp.clone())],
        Some(s) => s
            .values
            .iter()
            .map(|&v| {
                let mut d = cfg.dgp.clone();
                match s.param {
                    SweepParam::Rho => d.rho = v,
                    SweepParam::SigmaU => d.sigma_u = v,
                }
                (Some(v), d)
            })
            .collect(),
    }
}

#[derive(Debug, Serialize)]
struct MetricRow {
    sweep_param: String,
    sweep_value: Option<f64>,
    dgp: String,
    method: String,
    replication: usize,
    seed: u64,
    theta: f64,
    theta_hat: Option<f64>,
    error: Option<f64>,
    mean_dm_dl: Option<f64>,
    mse_m: Option<f64>,
    mse_l: Option<f64>,
    status: String,
}

#[derive(Debug, Serialize)]
struct Failure {
    sweep_value: Option<f64>,
    replication: usize,
    method: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    sweep_value: Option<f64>,
    method: String,
    metrics: Option<MetricsReport>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Runs every (sweep value, replication, method) cell; failures are recorded
/// and the run continues.
pub fn experiment(cfg: &ExperimentConfig) -> Result<(String, bool)> {
    if cfg.data.is_some() {
        return Err(CliError::Usage("experiment replicates a [dgp]; remove [data]".into()));
    }
    let points = sweep_points(cfg);
    let param = cfg.experiment.sweep.as_ref().map_or("none".to_string(), |s| {
        serde_json::to_value(s.param).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    });
    let mc = cfg.method_config();
    let cells: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..cfg.reps).map(move |r| (p, r))).collect();
    let results: Vec<Vec<(MetricRow, Option<ReplicationRecord>)>> = cells
        .par_iter()
        .map(|&(p, r)| {
            let (value, dgp) = &points[p];
            let rep = simulate_replication(dgp, cfg.fractions, cfg.seed, r);
            cfg.experiment
                .methods
                .iter()
                .map(|&m| {
                    let outcome = rep.as_ref().map_err(|e| e.to_string()).and_then(|rep| {
                        record_replication(rep, r, m, &mc).map(|x| x.0).map_err(|e| e.to_string())
                    });
                    let base = MetricRow {
                        sweep_param: param.clone(),
                        sweep_value: *value,
                        dgp: serde_json::to_value(dgp.nuisance).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                        method: m.name().into(),
                        replication: r,
                        seed: cdml::pipeline::ReplicationSeeds::new(cfg.seed, r).replication,
                        theta: dgp.theta,
                        theta_hat: None,
                        error: None,
                        mean_dm_dl: None,
                        mse_m: None,
                        mse_l: None,
                        status: "ok".into(),
                    };
                    match outcome {
                        Ok(rec) => (
                            MetricRow {
                                theta_hat: Some(rec.theta_hat),
                                error: Some(rec.theta_hat - rec.theta),
                                mean_dm_dl: finite(rec.errors.mean_dm_dl),
                                mse_m: finite(rec.errors.mse_m),
                                mse_l: finite(rec.errors.mse_l),
                                ..base
                            },
                            Some(rec),
                        ),
                        Err(e) => (MetricRow { status: format!("failed: {e}"), ..base }, None),
                    }
                })
                .collect()
        })
        .collect();

    let rows: Vec<&MetricRow> = results.iter().flatten().map(|(row, _)| row).collect();
    let failures: Vec<Failure> = rows
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| Failure {
            sweep_value: r.sweep_value,
            replication: r.replication,
            method: r.method.clone(),
            error: r.status.trim_start_matches("failed: ").to_string(),
        })
        .collect();
    let mut groups = Vec::new();
    for (p, (value, _)) in points.iter().enumerate() {
        for &m in &cfg.experiment.methods {
            let recs: Vec<ReplicationRecord> = results[p * cfg.reps..(p + 1) * cfg.reps]
                .iter()
                .flatten()
                .filter_map(|(_, rec)| rec.clone())
                .filter(|rec| rec.method == m.name())
                .collect();
            groups.push(GroupSummary { sweep_value: *value, method: m.name().into(), metrics: replication_metrics(&recs).ok() });
        }
    }

    ensure_dir(&cfg.out)?;
    write_csv(&cfg.out.join("metrics.csv"), &rows)?;
    #[derive(Serialize)]
    struct Summary {
        n_cells: usize,
        groups: Vec<GroupSummary>,
        failures: Vec<Failure>,
    }
    let any_failed = !failures.is_empty();
    let json = envelope_json("experiment", cfg, Summary { n_cells: rows.len(), groups, failures })?;
    write_text(&cfg.out.join("summary.json"), &json)?;
    Ok((json, any_failed))
}

#[derive(Debug, Serialize)]
struct BiasRow {
    replication: usize,
    seed: u64,
    sigma_l: f64,
    theta: f64,
    theta_hat: f64,
    empirical_error: f64,
    b_dml: f64,
    e_dm_dl: f64,
    e_dm_sq: f64,
    se_e_dm_dl: f64,
    se_e_dm_sq: f64,
}

#[derive(Debug, Serialize)]
struct BiasSummary {
    sigma_l: f64,
    n: usize,
    fit: Option<OlsFit>,
}

fn bias_rows(cfg: &ExperimentConfig, rep: &Replication, r: usize) -> cdml::Result<Vec<BiasRow>> {
    let run = run_method(&rep.data, &rep.splits, cfg.method, &cfg.method_config(), rep.seeds.method)?;
    let theta = rep.data.truth.as_ref().map_or(f64::NAN, |t| t.theta);
    let i2 = rep.splits.i2();
    cfg.bias
        .sigma_l
        .iter()
        .map(|&s| {
            let pair = perturb_lhat(&run.pair, s, derive_seed(rep.seeds.analysis, 1))?;
            let theta_hat = estimate_theta(&residuals(&rep.data, &i2, &pair)?)?;
            let b = theoretical_bias_for(&rep.data, &pair, cfg.bias.mc_n, rep.seeds.analysis)?;
            Ok(BiasRow {
                replication: r,
                seed: rep.seeds.replication,
                sigma_l: s,
                theta,
                theta_hat,
                empirical_error: theta_hat - theta,
                b_dml: b.b_dml,
                e_dm_dl: b.e_dm_dl,
                e_dm_sq: b.e_dm_sq,
                se_e_dm_dl: b.se_e_dm_dl,
                se_e_dm_sq: b.se_e_dm_sq,
            })
        })
        .collect()
}

/// Empirical error against the theoretical bias per replication and per
/// perturbation level.
pub fn bias_verify(cfg: &ExperimentConfig) -> Result<(String, bool)> {
    if cfg.data.is_some() {
        return Err(CliError::Usage("bias-verify needs a synthetic [dgp] source".into()));
    }
    if cfg.method == Method::DmlOracle {
        return Err(CliError::Usage("bias-verify needs a fitted learner, not dml_oracle".into()));
    }
    let results: Vec<(usize, std::result::Result<Vec<BiasRow>, String>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let out = simulate_replication(&cfg.dgp, cfg.fractions, cfg.seed, r)
                .and_then(|rep| bias_rows(cfg, &rep, r))
                .map_err(|e| e.to_string());
            (r, out)
        })
        .collect();
    let rows: Vec<&BiasRow> = results.iter().filter_map(|(_, o)| o.as_ref().ok()).flatten().collect();
    let failures: Vec<Failure> = results
        .iter()
        .filter_map(|(r, o)| {
            o.as_ref().err().map(|e| Failure { sweep_value: None, replication: *r, method: cfg.method.name().into(), error: e.clone() })
        })
        .collect();
    let summaries: Vec<BiasSummary> = cfg
        .bias
        .sigma_l
        .iter()
        .map(|&s| {
            let pts: Vec<&&BiasRow> = rows.iter().filter(|r| r.sigma_l == s).collect();
            let x: Vec<f64> = pts.iter().map(|r| r.b_dml).collect();
            let y: Vec<f64> = pts.iter().map(|r| r.empirical_error).collect();
            BiasSummary { sigma_l: s, n: pts.len(), fit: ols(&x, &y).ok() }
        })
        .collect();
    ensure_dir(&cfg.out)?;
    write_csv(&cfg.out.join("bias_scatter.csv"), &rows)?;
    #[derive(Serialize)]
    struct Summary {
        summaries: Vec<BiasSummary>,
        failures: Vec<Failure>,
    }
    let any_failed = !failures.is_empty();
    let json = envelope_json("bias-verify", cfg, Summary { summaries, failures })?;
    write_text(&cfg.out.join("bias_summary.json"), &json)?;
    Ok((json, any_failed))
}

#[derive(Debug, Serialize)]
struct CiRow {
    subset_size: usize,
    ci: BootstrapCi,
}

/// Bootstrap intervals on nested random subsets of the data.
pub fn bootstrap(cfg: &ExperimentConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let sizes = if cfg.bootstrap.subset_sizes.is_empty() { vec![data.n()] } else { cfg.bootstrap.subset_sizes.clone() };
    if let Some(&s) = sizes.iter().find(|&&s| s > data.n()) {
        return Err(CliError::Usage(format!("subset size {s} exceeds the {} available rows", data.n())));
    }
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut cdml::rng::stream(cfg.seed, 30));
    let mc = cfg.method_config();
    let mut rows = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let sub = data.select(&order[..size]);
        let seed = derive_seed(cfg.seed, 40 + k as u64);
        let ci = if cfg.bootstrap.full_pipeline {
            bootstrap_full(&sub, cfg.bootstrap.n_resamples, cfg.bootstrap.level, seed, |d, s| {
                let splits = split_indices(d.n(), cfg.fractions, derive_seed(s, 2))?;
                Ok(run_method(d, &splits, cfg.method, &mc, derive_seed(s, 3))?.theta_hat)
            })?
        } else {
            let splits = split_indices(sub.n(), cfg.fractions, derive_seed(seed, 2))?;
            let run = run_method(&sub, &splits, cfg.method, &mc, derive_seed(seed, 3))?;
            bootstrap_ci(&sub, &splits.i2(), &run.pair, cfg.bootstrap.n_resamples, cfg.bootstrap.level, derive_seed(seed, 4))?
        };
        rows.push(CiRow { subset_size: size, ci });
    }
    ensure_dir(&cfg.out)?;
    let json = envelope_json("bootstrap", cfg, &rows)?;
    write_text(&cfg.out.join("bootstrap.json"), &json)?;
    Ok(json)
}
