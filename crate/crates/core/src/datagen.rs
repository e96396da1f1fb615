//! Data-generating processes: AR(1) Gaussian covariates, the two built-in
//! majority/minority nuisance pairs, partially linear sampling, and the
//! semi-synthetic builder for real covariate tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, Forest, ForestConfig};
use crate::model::Regressor;
use crate::rng;

/// Standard-normal 80th percentile, giving a ~80/20 majority/minority split.
pub const DEFAULT_MAJORITY_THRESHOLD: f64 = 0.8416;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceId {
    /// Group-dependent linear `m` and `g`.
    LinearGroups,
    /// Group-dependent ReLU `m`, exponential `g`.
    ReluExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nuisance {
    M,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Homogeneous,
    /// Per-row effects drawn from `Normal(theta, 1)`.
    Heterogeneous,
}

/// Ground truth attached to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_i: Option<Vec<f64>>,
    /// `Var(V)`, known for synthetic draws.
    pub var_v: Option<f64>,
    pub sigma_u: f64,
    /// Present when `m` and `g` are known in closed form.
    pub oracle: Option<OracleSpec>,
    /// Surrogate outcome function evaluated on each row (semi-synthetic data).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub surrogate_g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub nuisance: NuisanceId,
    pub threshold: f64,
    pub rho: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub d: Array1<f64>,
    pub y: Array1<f64>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, d: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        if d.len() != x.nrows() || y.len() != x.nrows() {
            return Err(Error::Config(format!(
                "inconsistent dataset: {} rows, {} treatments, {} outcomes",
                x.nrows(),
                d.len(),
                y.len()
            )));
        }
        if x.iter().chain(d.iter()).chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset entries must be finite".into()));
        }
        Ok(Self {
            x,
            d,
            y,
            truth: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new dataset (truth vectors are subset too).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let truth = self.truth.as_ref().map(|t| Truth {
            theta_i: t.theta_i.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            surrogate_g: t.surrogate_g.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            ..t.clone()
        });
        Dataset {
            x: self.x.select(Axis(0), idx),
            d: self.d.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            truth,
        }
    }

    /// CSV with header `x0..x{d-1},D,Y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("D".into());
        header.push("Y".into());
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.n() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            fields.push(format!("{:?}", self.d[i]));
            fields.push(format!("{:?}", self.y[i]));
            writeln!(w, "{}", fields.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// JSON sidecar with the truth record.
    pub fn write_truth(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            schema_version: u32,
            n: usize,
            d: usize,
            truth: &'a Option<Truth>,
        }
        let s = serde_json::to_string_pretty(&Sidecar {
            schema_version: DATASET_SCHEMA_VERSION,
            n: self.n(),
            d: self.dim(),
            truth: &self.truth,
        })?;
        std::fs::write(path, s).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_truth(path: &Path) -> Result<Option<Truth>> {
        #[derive(Deserialize)]
        struct Sidecar {
            truth: Option<Truth>,
        }
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str::<Sidecar>(&s)?.truth)
    }

    /// Reads a table with an outcome and a treatment column; all other
    /// columns become covariates in file order.
    pub fn from_table(table: &RawTable, treatment: &str, outcome: &str) -> Result<Dataset> {
        let ti = table.column_index(treatment)?;
        let yi = table.column_index(outcome)?;
        let xcols: Vec<usize> = (0..table.columns.len()).filter(|&j| j != ti && j != yi).collect();
        Dataset::new(
            table.data.select(Axis(1), &xcols),
            table.data.column(ti).to_owned(),
            table.data.column(yi).to_owned(),
        )
    }

    /// Reads a file written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        Self::from_table(&load_csv(path, &["D", "Y"])?, "D", "Y")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    pub nuisance: NuisanceId,
    pub theta: f64,
    pub effect_mode: EffectMode,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub majority_threshold: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 10,
            rho: 0.8,
            nuisance: NuisanceId::LinearGroups,
            theta: 1.0,
            effect_mode: EffectMode::Homogeneous,
            sigma_u: 1.0,
            sigma_v: 1.0,
            majority_threshold: DEFAULT_MAJORITY_THRESHOLD,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.d < 10 {
            return Err(Error::Config(format!(
                "built-in nuisance functions use x0..x9, so d must be at least 10 (got {})",
                self.d
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!("rho must satisfy |rho| < 1, got {}", self.rho)));
        }
        if !(self.sigma_u >= 0.0 && self.sigma_v >= 0.0) {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        OracleSpec {
            nuisance: self.nuisance,
            threshold: self.majority_threshold,
            rho: self.rho,
            sigma_v: self.sigma_v,
        }
    }
}

/// Rows of a stationary Gaussian AR(1): `x_0 ~ N(0,1)`,
/// `x_j = rho x_{j-1} + sqrt(1 - rho^2) e_j`.
pub fn sample_ar1(n: usize, d: usize, rho: f64, seed: u64) -> Array2<f64> {
    assert!(rho.abs() < 1.0, "AR(1) requires |rho| < 1");
    let mut r = rng::rng(seed);
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = Array2::zeros((n, d));
    for mut row in x.rows_mut() {
        let mut prev: f64 = StandardNormal.sample(&mut r);
        if d > 0 {
            row[0] = prev;
        }
        for j in 1..d {
            let e: f64 = StandardNormal.sample(&mut r);
            prev = rho * prev + innov * e;
            row[j] = prev;
        }
    }
    x
}

/// `true` marks the minority group (`x0 > threshold`).
pub fn assign_groups(x: ArrayView2<'_, f64>, threshold: f64) -> Vec<bool> {
    x.column(0).iter().map(|&v| v > threshold).collect()
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn eval_row(id: NuisanceId, which: Nuisance, x: &[f64], minority: bool) -> f64 {
    match (id, which, minority) {
        (NuisanceId::LinearGroups, Nuisance::M, false) => x[1] + 10.0 * x[3] + 5.0 * x[6],
        (NuisanceId::LinearGroups, Nuisance::M, true) => 10.0 * x[1] + x[3] + 5.0 * x[6],
        (NuisanceId::LinearGroups, Nuisance::G, false) => x[0] + 10.0 * x[2] + 5.0 * x[5],
        (NuisanceId::LinearGroups, Nuisance::G, true) => 10.0 * x[0] + x[2] + 5.0 * x[5],
        (NuisanceId::ReluExp, Nuisance::M, false) => relu(0.5 * x[1] * x[1] + x[3].powi(3) + x[5]),
        (NuisanceId::ReluExp, Nuisance::M, true) => relu(-2.5 * x[1] * x[1] + x[4] + x[9]),
        (NuisanceId::ReluExp, Nuisance::G, _) => x[9] + x[2].abs() + 0.5 * (x[4] + x[5]).exp(),
    }
}

/// Evaluates `m` or `g` of a built-in pair row by row.
pub fn nuisance_eval(
    id: NuisanceId,
    which: Nuisance,
    x: ArrayView2<'_, f64>,
    groups: &[bool],
) -> Result<Array1<f64>> {
    if x.ncols() < 10 {
        return Err(Error::Dimension {
            expected: 10,
            got: x.ncols(),
        });
    }
    if groups.len() != x.nrows() {
        return Err(Error::Config("one group label per row required".into()));
    }
    Ok(x.rows()
        .into_iter()
        .zip(groups)
        .map(|(row, &minority)| {
            let row = row.to_vec();
            eval_row(id, which, &row, minority)
        })
        .collect())
}

/// Draws a partially linear dataset `D = m(X) + V`, `Y = g(X) + D theta_i + U`.
pub fn sample_plr(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let x = sample_ar1(cfg.n, cfg.d, cfg.rho, rng::derive_seed(cfg.seed, 1));
    let groups = assign_groups(x.view(), cfg.majority_threshold);
    let m = nuisance_eval(cfg.nuisance, Nuisance::M, x.view(), &groups)?;
    let g = nuisance_eval(cfg.nuisance, Nuisance::G, x.view(), &groups)?;

    let normal_vec = |stream: u64, scale: f64| -> Array1<f64> {
        let mut r = rng::stream(cfg.seed, stream);
        (0..cfg.n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                scale * z
            })
            .collect()
    };
    let v = normal_vec(2, cfg.sigma_v);
    let u = normal_vec(3, cfg.sigma_u);
    let theta_i = match cfg.effect_mode {
        EffectMode::Homogeneous => None,
        EffectMode::Heterogeneous => Some(normal_vec(4, 1.0).mapv(|z| z + cfg.theta)),
    };

    let d = &m + &v;
    let effect = theta_i.clone().unwrap_or_else(|| Array1::from_elem(cfg.n, cfg.theta));
    let y = &g + &(&d * &effect) + &u;
    let mut data = Dataset::new(x, d, y)?;
    data.truth = Some(Truth {
        theta: cfg.theta,
        theta_i: theta_i.map(|t| t.to_vec()),
        var_v: Some(cfg.sigma_v * cfg.sigma_v),
        sigma_u: cfg.sigma_u,
        oracle: Some(cfg.oracle_spec()),
        surrogate_g: None,
    });
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleTarget {
    M,
    G,
    /// `l(X) = g(X) + theta m(X)`.
    L { theta: f64 },
}

/// The true nuisance functions of a built-in DGP, usable wherever a fitted
/// model is expected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oracle {
    pub spec: OracleSpec,
    pub target: OracleTarget,
    pub n_features: usize,
}

impl Regressor for Oracle {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(&x)?;
        let groups = assign_groups(x, self.spec.threshold);
        let id = self.spec.nuisance;
        Ok(match self.target {
            OracleTarget::M => nuisance_eval(id, Nuisance::M, x, &groups)?,
            OracleTarget::G => nuisance_eval(id, Nuisance::G, x, &groups)?,
            OracleTarget::L { theta } => {
                nuisance_eval(id, Nuisance::G, x, &groups)?
                    + nuisance_eval(id, Nuisance::M, x, &groups)? * theta
            }
        })
    }
}

/// Numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub data: Array2<f64>,
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Ingest(format!("missing column `{name}`")))
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }
}

/// Loads a headed numeric CSV, requiring each of `required` columns.
pub fn load_csv(path: &Path, required: &[&str]) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    for name in required {
        if !columns.iter().any(|c| c == name) {
            return Err(Error::Ingest(format!("{}: missing column `{name}`", path.display())));
        }
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record.map_err(|e| Error::Ingest(format!("{}: line {line}: {e}", path.display())))?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Ingest(format!(
                    "{}: line {line}, column `{}`: cannot parse `{field}` as a number",
                    path.display(),
                    columns[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest(format!(
                    "{}: line {line}, column `{}`: non-finite value",
                    path.display(),
                    columns[j]
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    let data = Array2::from_shape_vec((rows, columns.len()), values)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    Ok(RawTable { columns, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSynthConfig {
    pub treatment: String,
    pub outcome: String,
    pub forest: ForestConfig,
    /// Fractions of rows used to fit the surrogate and to emit data.
    pub fractions: (f64, f64),
    pub theta: f64,
    pub effect_mode: EffectMode,
    pub sigma_u: f64,
    pub seed: u64,
}

impl Default for SemiSynthConfig {
    fn default() -> Self {
        Self {
            treatment: "D".into(),
            outcome: "Y".into(),
            forest: ForestConfig::default(),
            fractions: (0.5, 0.5),
            theta: 0.0,
            effect_mode: EffectMode::Homogeneous,
            sigma_u: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiSynthetic {
    pub dataset: Dataset,
    /// The fitted surrogate `g_RF`.
    pub surrogate: Forest,
    /// Rows of the raw table used to fit the surrogate and emitted, in order.
    pub fit_rows: Vec<usize>,
    pub emit_rows: Vec<usize>,
}

/// Real covariates and treatment with a simulated outcome
/// `Y = g_RF(X) + D theta_i + U`, where `g_RF` is a random forest fitted to the
/// real outcome on a disjoint subset of rows.
pub fn build_semisynthetic(raw: &RawTable, cfg: &SemiSynthConfig) -> Result<SemiSynthetic> {
    let ti = raw.column_index(&cfg.treatment)?;
    let yi = raw.column_index(&cfg.outcome)?;
    if ti == yi {
        return Err(Error::Config("treatment and outcome columns must differ".into()));
    }
    if raw.columns.len() < 3 {
        return Err(Error::Ingest(
            "need the outcome plus at least two further columns (treatment and one covariate)".into(),
        ));
    }
    let (f_fit, f_emit) = cfg.fractions;
    if !(f_fit > 0.0 && f_emit > 0.0 && (f_fit + f_emit - 1.0).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({f_fit}, {f_emit})"
        )));
    }
    if cfg.sigma_u < 0.0 {
        return Err(Error::Config("sigma_u must be nonnegative".into()));
    }
    let n = raw.n_rows();
    let n_fit = (f_fit * n as f64).round() as usize;
    if n_fit < 2 || n_fit >= n {
        return Err(Error::Split(format!("cannot split {n} rows with fractions ({f_fit}, {f_emit})")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(cfg.seed, 10));
    let (fit_rows, emit_rows) = (perm[..n_fit].to_vec(), perm[n_fit..].to_vec());

    let xcols: Vec<usize> = (0..raw.columns.len()).filter(|&j| j != ti && j != yi).collect();
    let x_all = raw.data.select(Axis(1), &xcols);
    let x_fit = x_all.select(Axis(0), &fit_rows);
    let y_fit = raw.data.column(yi).select(Axis(0), &fit_rows);
    let forest_cfg = ForestConfig {
        seed: rng::derive_seed(cfg.seed, 11),
        ..cfg.forest.clone()
    };
    let surrogate = fit_forest(x_fit.view(), y_fit.view(), &forest_cfg)?;

    let x = x_all.select(Axis(0), &emit_rows);
    let d = raw.data.column(ti).select(Axis(0), &emit_rows);
    let g = surrogate.predict(x.view())?;
    let m = emit_rows.len();
    let mut ur = rng::stream(cfg.seed, 12);
    let u: Array1<f64> = (0..m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut ur);
            cfg.sigma_u * z
        })
        .collect();
    let theta_i = match cfg.effect_mode {
        EffectMode::Homogeneous => None,
        EffectMode::Heterogeneous => {
            let dist = Normal::new(cfg.theta, 1.0).expect("unit variance");
            let mut tr = rng::stream(cfg.seed, 13);
            Some((0..m).map(|_| dist.sample(&mut tr)).collect::<Array1<f64>>())
        }
    };
    let effect = theta_i.clone().unwrap_or_else(|| Array1::from_elem(m, cfg.theta));
    let y = &g + &(&d * &effect) + &u;
    let mut dataset = Dataset::new(x, d, y)?;
    dataset.truth = Some(Truth {
        theta: cfg.theta,
        theta_i: theta_i.map(|t| t.to_vec()),
        var_v: None,
        sigma_u: cfg.sigma_u,
        oracle: None,
        surrogate_g: Some(g.to_vec()),
    });
    Ok(SemiSynthetic {
        dataset,
        surrogate,
        fit_rows,
        emit_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn corr(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn ar1_independent_columns_at_zero_rho() {
        let n = 100_000;
        let x = sample_ar1(n, 4, 0.0, 1);
        let tol = 4.0 / (n as f64).sqrt();
        for j in 1..4 {
            assert!(corr(x.column(0), x.column(j)).abs() < tol);
        }
    }

    #[test]
    fn ar1_correlation_structure() {
        let x = sample_ar1(100_000, 10, 0.8, 2);
        assert!((corr(x.column(0), x.column(1)) - 0.8).abs() < 0.02);
        assert!((corr(x.column(0), x.column(2)) - 0.64).abs() < 0.02);
    }

    #[test]
    fn ar1_unit_marginal_variance() {
        for rho in [0.0, 0.5, 0.9] {
            let x = sample_ar1(100_000, 10, rho, 3);
            for col in x.columns() {
                let var = col.var(0.0);
                assert!((var - 1.0).abs() < 0.02, "rho {rho}: var {var}");
            }
        }
    }

    #[test]
    fn groups_threshold_rules() {
        let x = sample_ar1(100_000, 1, 0.0, 4);
        assert!(assign_groups(x.view(), f64::NEG_INFINITY).iter().all(|&g| g));
        let frac = assign_groups(x.view(), DEFAULT_MAJORITY_THRESHOLD).iter().filter(|&&g| g).count() as f64 / 1e5;
        assert!((frac - 0.20).abs() < 0.01, "{frac}");
        let edge = array![[DEFAULT_MAJORITY_THRESHOLD]];
        assert_eq!(assign_groups(edge.view(), DEFAULT_MAJORITY_THRESHOLD), vec![false]);
    }

    fn unit_row(ones: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((1, 10));
        for &j in ones {
            x[[0, j]] = 1.0;
        }
        x
    }

    #[test]
    fn nuisance_formulas() {
        let x = unit_row(&[1, 3, 6]);
        let m = |x: &Array2<f64>, minority| nuisance_eval(NuisanceId::LinearGroups, Nuisance::M, x.view(), &[minority]).unwrap()[0];
        assert_eq!(m(&x, false), 16.0);
        assert_eq!(m(&x, true), 16.0);
        let x1 = unit_row(&[1]);
        assert_eq!((m(&x1, false), m(&x1, true)), (1.0, 10.0));
        let g = nuisance_eval(NuisanceId::ReluExp, Nuisance::G, Array2::zeros((1, 10)).view(), &[false]).unwrap();
        assert_eq!(g[0], 0.5);
        let gl = nuisance_eval(NuisanceId::LinearGroups, Nuisance::G, unit_row(&[0]).view(), &[true]).unwrap();
        assert_eq!(gl[0], 10.0);
        // minority ReLU branch: -2.5 * 1 + 1 + 1 < 0
        let r = nuisance_eval(NuisanceId::ReluExp, Nuisance::M, unit_row(&[1, 4, 9]).view(), &[true]).unwrap();
        assert_eq!(r[0], 0.0);
        assert!(nuisance_eval(NuisanceId::ReluExp, Nuisance::M, Array2::zeros((1, 9)).view(), &[false]).is_err());
    }

    #[test]
    fn noiseless_identity() {
        let cfg = DgpConfig { n: 500, sigma_u: 0.0, sigma_v: 0.0, theta: 2.0, ..Default::default() };
        let data = sample_plr(&cfg).unwrap();
        let groups = assign_groups(data.x.view(), cfg.majority_threshold);
        let m = nuisance_eval(cfg.nuisance, Nuisance::M, data.x.view(), &groups).unwrap();
        let g = nuisance_eval(cfg.nuisance, Nuisance::G, data.x.view(), &groups).unwrap();
        let resid = &data.y - &g - &(m * 2.0);
        assert!(resid.iter().all(|r| *r == 0.0 || r.abs() < 1e-12));
    }

    #[test]
    fn defaults_match_demonstration_setup() {
        let c = DgpConfig::default();
        assert_eq!((c.sigma_u, c.sigma_v, c.theta, c.d, c.rho), (1.0, 1.0, 1.0, 10, 0.8));
    }

    #[test]
    fn heterogeneous_effects_moments() {
        let cfg = DgpConfig { n: 100_000, theta: 10.0, effect_mode: EffectMode::Heterogeneous, seed: 5, ..Default::default() };
        let data = sample_plr(&cfg).unwrap();
        let t = Array1::from(data.truth.unwrap().theta_i.unwrap());
        assert!((t.mean().unwrap() - 10.0).abs() < 0.02);
        assert!((t.var(0.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn oracle_residual_is_noise() {
        for nuisance in [NuisanceId::LinearGroups, NuisanceId::ReluExp] {
            let cfg = DgpConfig { n: 20_000, nuisance, sigma_u: 2.0, seed: 6, ..Default::default() };
            let data = sample_plr(&cfg).unwrap();
            let spec = cfg.oracle_spec();
            let g = Oracle { spec, target: OracleTarget::G, n_features: 10 }.predict(data.x.view()).unwrap();
            let resid = &data.y - &g - &(&data.d * cfg.theta);
            let tol = 4.0 * cfg.sigma_u / (cfg.n as f64).sqrt();
            assert!(resid.mean().unwrap().abs() < tol);
        }
    }

    #[test]
    fn seeded_determinism() {
        let cfg = DgpConfig { n: 50, seed: 42, ..Default::default() };
        assert_eq!(sample_plr(&cfg).unwrap(), sample_plr(&cfg).unwrap());
        assert_ne!(sample_plr(&cfg).unwrap(), sample_plr(&DgpConfig { seed: 43, ..cfg.clone() }).unwrap());
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,b,c\n1,2,3\n4.5,-1,0\n7,8e2,9\n");
        let t = load_csv(&p, &["a", "c"]).unwrap();
        assert_eq!(t.columns, vec!["a", "b", "c"]);
        assert_eq!(t.data, array![[1.0, 2.0, 3.0], [4.5, -1.0, 0.0], [7.0, 800.0, 9.0]]);
        let err = load_csv(&p, &["zzz"]).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
        let bad = write(dir.path(), "b.csv", "a,b\n1,2\n3,oops\n");
        let err = load_csv(&bad, &[]).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("`b`"), "{err}");
        let inf = write(dir.path(), "c.csv", "a\ninf\n");
        assert!(load_csv(&inf, &[]).is_err());
    }

    #[test]
    fn large_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let data = sample_plr(&DgpConfig { n: 100_000, seed: 1, ..Default::default() }).unwrap();
        let p = dir.path().join("big.csv");
        data.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p).unwrap();
        assert_eq!(back.n(), 100_000);
        assert_eq!(back.x, data.x);
        assert_eq!(back.y, data.y);
    }

    fn raw_table(n: usize, seed: u64) -> RawTable {
        let x = sample_ar1(n, 4, 0.5, seed);
        let y = x.column(1).mapv(|v| 3.0 * v) + x.column(2).mapv(|v| v * v);
        let mut data = Array2::zeros((n, 5));
        data.slice_mut(ndarray::s![.., 0..4]).assign(&x);
        data.column_mut(4).assign(&y);
        RawTable { columns: vec!["elig".into(), "a".into(), "b".into(), "c".into(), "assets".into()], data }
    }

    #[test]
    fn semisynthetic_noiseless_identity() {
        let raw = raw_table(400, 7);
        let cfg = SemiSynthConfig { treatment: "elig".into(), outcome: "assets".into(), theta: 0.0, sigma_u: 0.0, seed: 3, ..Default::default() };
        let s = build_semisynthetic(&raw, &cfg).unwrap();
        let g = s.surrogate.predict(s.dataset.x.view()).unwrap();
        assert_eq!(s.dataset.y, g);
        assert_eq!(s.dataset.dim(), 3);
        assert!(s.fit_rows.iter().all(|r| !s.emit_rows.contains(r)));
    }

    #[test]
    fn semisynthetic_effect_identity() {
        let raw = raw_table(4000, 8);
        let cfg = SemiSynthConfig { treatment: "elig".into(), outcome: "assets".into(), theta: 10.0, sigma_u: 1.0, seed: 4, ..Default::default() };
        let s = build_semisynthetic(&raw, &cfg).unwrap();
        let g = Array1::from(s.dataset.truth.as_ref().unwrap().surrogate_g.clone().unwrap());
        let r = &s.dataset.y - &g - &(&s.dataset.d * 10.0);
        let n = s.dataset.n() as f64;
        assert!(r.mean().unwrap().abs() <= 4.0 / n.sqrt());
    }

    #[test]
    fn semisynthetic_rejects_missing_column() {
        let raw = raw_table(50, 9);
        let cfg = SemiSynthConfig { treatment: "nope".into(), outcome: "assets".into(), ..Default::default() };
        assert!(build_semisynthetic(&raw, &cfg).unwrap_err().to_string().contains("nope"));
    }
}
