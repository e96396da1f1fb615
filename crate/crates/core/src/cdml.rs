//! Coordinated DML: joint training of `m̂` and `ℓ̂` under a loss that adds a
//! residual-covariance penalty to the two mean squared errors, and the
//! hold-out tuning of the penalty weight.

use std::sync::Arc;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dml::{
    estimate_theta, fit_nuisances, residuals, streams, LearnerConfig, LearnerMeta, NetConfig, NuisancePair,
    ResidualSet, SplitIndices, REPORT_SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::grad::{pairwise_sum, Graph, NodeId};
use crate::nets::{build_mlp_with_keep, train, Batch, Objective, TrainConfig};
use crate::rng;

pub const DEFAULT_RAW_GRID: [f64; 7] = [0.0, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0];

const PILOT_STREAM: u64 = 0x1000;
const GAMMA_STREAM: u64 = 0x2000;

/// Weights of `α·mean(V²) + β·mean(U²) + γ·|mean(VU)|`. `gamma` is already
/// scaled; `gamma_scale` records the factor applied to the raw grid value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_scale: f64,
}

impl LossWeights {
    /// Plain sum of the two mean squared errors.
    pub fn unit_l0() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.0, gamma_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma_scale) && self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// The joint loss on residual vectors `V = D − m̂(X)`, `U = Y − ℓ̂(X)`.
pub fn joint_loss(v: &[f64], u: &[f64], w: &LossWeights) -> f64 {
    assert_eq!(v.len(), u.len(), "residual vectors must have equal length");
    assert!(!v.is_empty(), "joint loss of an empty batch");
    let n = v.len() as f64;
    let vv: Vec<f64> = v.iter().map(|a| a * a).collect();
    let uu: Vec<f64> = u.iter().map(|a| a * a).collect();
    let vu: Vec<f64> = v.iter().zip(u).map(|(a, b)| a * b).collect();
    w.alpha * pairwise_sum(&vv) / n + w.beta * pairwise_sum(&uu) / n + w.gamma * (pairwise_sum(&vu) / n).abs()
}

/// Graph form of [`joint_loss`]; predictions `[m̂, ℓ̂]`, targets `[D, Y]`.
#[derive(Debug, Clone, Copy)]
pub struct JointObjective(pub LossWeights);

impl Objective for JointObjective {
    fn n_targets(&self) -> usize {
        2
    }

    fn build(&self, g: &mut Graph, preds: &[NodeId], targets: &[NodeId]) -> NodeId {
        let w = self.0;
        let v = g.sub(targets[0], preds[0]);
        let u = g.sub(targets[1], preds[1]);
        let v2 = g.square(v);
        let mv = g.mean(v2);
        let u2 = g.square(u);
        let mu = g.mean(u2);
        let vu = g.mul(v, u);
        let cov = g.mean(vu);
        let acov = g.abs(cov);
        let a = g.scale(mv, w.alpha);
        let b = g.scale(mu, w.beta);
        let c = g.scale(acov, w.gamma);
        let ab = g.add(a, b);
        g.add(ab, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_scale: f64,
}

/// `α = 1/mean(V̂²)`, `β = 1/mean(Û²)`, `gamma_scale = 1/|mean(V̂Û)|` from
/// pilot residuals.
pub fn compute_scales(res: &ResidualSet) -> Result<Scales> {
    if res.is_empty() {
        return Err(Error::Empty("no pilot residuals".into()));
    }
    let n = res.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| pairwise_sum(&(0..res.len()).map(f).collect::<Vec<_>>()) / n;
    let vv = mean(&|i| res.v_hat[i] * res.v_hat[i]);
    let uu = mean(&|i| res.u_hat[i] * res.u_hat[i]);
    let vu = mean(&|i| res.v_hat[i] * res.u_hat[i]).abs();
    let guidance = "pilot residuals are degenerate; check the treatment varies given X and the pilot learner is not interpolating";
    for (name, value) in [("mean(V^2)", vv), ("mean(U^2)", uu), ("|mean(VU)|", vu)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::DegenerateScales(format!("{name} = {value}: {guidance}")));
        }
    }
    Ok(Scales { alpha: 1.0 / vv, beta: 1.0 / uu, gamma_scale: 1.0 / vu })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
}

impl GammaGrid {
    /// Sorted, deduplicated raw grid scaled by `gamma_scale`.
    pub fn new(raw: &[f64], gamma_scale: f64) -> Result<Self> {
        let raw = validate_raw_grid(raw)?;
        let scaled = raw.iter().map(|g| g * gamma_scale).collect();
        Ok(Self { raw, scaled })
    }
}

pub fn validate_raw_grid(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::Config(format!("gamma grid values must be finite and nonnegative: {raw:?}")));
    }
    if !raw.contains(&0.0) {
        return Err(Error::Config("gamma grid must contain 0".into()));
    }
    let mut raw = raw.to_vec();
    raw.sort_by(f64::total_cmp);
    raw.dedup();
    Ok(raw)
}

/// Trains `m̂` and `ℓ̂` jointly on `train_idx` with one step schedule,
/// early-stopping on the joint loss over `holdout_idx`.
pub fn fit_joint(
    data: &Dataset,
    train_idx: &[usize],
    holdout_idx: &[usize],
    w: &LossWeights,
    nc: &NetConfig,
    seed: u64,
) -> Result<NuisancePair> {
    w.validate()?;
    let sub = |idx: &[usize]| {
        (
            data.x.select(Axis(0), idx),
            data.d.select(Axis(0), idx),
            data.y.select(Axis(0), idx),
        )
    };
    let (x, d, y) = sub(train_idx);
    let (hx, hd, hy) = sub(holdout_idx);
    let models = vec![
        build_mlp_with_keep(data.dim(), nc.variant, nc.keep_prob, rng::derive_seed(seed, streams::INIT_M))?,
        build_mlp_with_keep(data.dim(), nc.variant, nc.keep_prob, rng::derive_seed(seed, streams::INIT_L))?,
    ];
    let cfg = TrainConfig { seed: rng::derive_seed(seed, streams::TRAIN_M), ..nc.train.clone() };
    let tr = Batch { x: x.view(), targets: vec![d.view(), y.view()] };
    let ho = Batch { x: hx.view(), targets: vec![hd.view(), hy.view()] };
    let mut fitted = train(models, &JointObjective(*w), &tr, &ho, &cfg)?;
    let l = fitted.pop().expect("two models");
    let m = fitted.pop().expect("two models");
    let meta = LearnerMeta { learner: "mlp_joint".into(), best_epoch_m: Some(m.best_epoch), best_epoch_l: Some(l.best_epoch) };
    Ok(NuisancePair { m: Arc::new(m), l: Arc::new(l), fit_indices: Some(train_idx.to_vec()), meta })
}

#[derive(Debug, Clone)]
pub struct CdmlFit {
    pub theta_hat: f64,
    pub pair: NuisancePair,
    pub residuals: ResidualSet,
}

/// Joint training on `train_idx` (stopping on `holdout_idx`), then `θ̂` on
/// `eval_idx`.
pub fn run_cdml_fixed(
    data: &Dataset,
    train_idx: &[usize],
    holdout_idx: &[usize],
    eval_idx: &[usize],
    w: &LossWeights,
    nc: &NetConfig,
    seed: u64,
) -> Result<CdmlFit> {
    let pair = fit_joint(data, train_idx, holdout_idx, w, nc, seed)?;
    let res = residuals(data, eval_idx, &pair)?;
    let theta_hat = estimate_theta(&res)?;
    Ok(CdmlFit { theta_hat, pair, residuals: res })
}

/// `mean((Y − ĝ0 − D θ)²)`.
pub fn phi(y: &[f64], d: &[f64], g0: &[f64], theta: f64) -> f64 {
    let sq: Vec<f64> = y
        .iter()
        .zip(d)
        .zip(g0)
        .map(|((y, d), g)| (y - g - d * theta).powi(2))
        .collect();
    pairwise_sum(&sq) / y.len() as f64
}

/// Index of the smallest `phi`, ties going to the smallest `gamma`.
pub fn select_gamma(rows: &[GammaRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| {
        rows[a]
            .phi
            .total_cmp(&rows[b].phi)
            .then(rows[a].gamma.total_cmp(&rows[b].gamma))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdmlConfig {
    pub raw_grid: Vec<f64>,
    pub net: NetConfig,
    /// Learner of the pilot DML stage.
    pub pilot: LearnerConfig,
    /// When false, `α = β = 1`; the pilot still supplies `gamma_scale`.
    pub scale_l0: bool,
}

impl Default for CdmlConfig {
    fn default() -> Self {
        Self {
            raw_grid: DEFAULT_RAW_GRID.to_vec(),
            net: NetConfig::default(),
            pilot: LearnerConfig::default(),
            scale_l0: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma_raw: f64,
    pub gamma: f64,
    /// `θ̂1(γ)` on `I21`.
    pub theta_hat_1: f64,
    /// Hold-out error on `I22`.
    pub phi: f64,
    /// `θ̂1(γ) − θ` when the truth is known.
    pub bias: Option<f64>,
    /// `|mean(V̂Û)|` on the training rows.
    pub train_abs_cov: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdmlReport {
    pub schema_version: u32,
    pub theta_hat_final: f64,
    pub gamma_hat: f64,
    pub gamma_hat_raw: f64,
    pub theta_hat_0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_scale: f64,
    pub n_estimation: usize,
    pub table: Vec<GammaRow>,
    pub learner: LearnerMeta,
}

impl CdmlReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `gamma_raw,gamma,theta_hat_1,phi,bias,train_abs_cov` rows.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("gamma_raw,gamma,theta_hat_1,phi,bias,train_abs_cov\n");
        for r in &self.table {
            let bias = r.bias.map_or(String::new(), |b| format!("{b:?}"));
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?},{},{:?}\n",
                r.gamma_raw, r.gamma, r.theta_hat_1, r.phi, bias, r.train_abs_cov
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct CdmlRun {
    pub report: CdmlReport,
    pub pair: NuisancePair,
    pub residuals: ResidualSet,
}

pub fn pilot_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, PILOT_STREAM)
}

/// Seed of the `k`-th grid entry's joint training.
pub fn gamma_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, GAMMA_STREAM + k as u64)
}

fn abs_cov_on(data: &Dataset, idx: &[usize], pair: &NuisancePair) -> Result<f64> {
    let x = data.x.select(Axis(0), idx);
    let m = pair.m.predict(x.view())?;
    let l = pair.l.predict(x.view())?;
    let vu: Vec<f64> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| (data.d[i] - m[k]) * (data.y[i] - l[k]))
        .collect();
    Ok((pairwise_sum(&vu) / idx.len() as f64).abs())
}

/// Pilot DML, scale estimation, per-γ joint training scored on `I22`, and a
/// final joint training at the selected γ evaluated on `I2`.
///
/// The final run uses `seed` itself, so a singleton grid `{0}` reproduces
/// `run_cdml_fixed(I1, I21, I2, (α, β, 0), seed)`.
pub fn tune_and_run(data: &Dataset, splits: &SplitIndices, cfg: &CdmlConfig, seed: u64) -> Result<CdmlRun> {
    let raw = validate_raw_grid(&cfg.raw_grid)?;
    let pilot = fit_nuisances(data, &splits.i1, &splits.i21, &cfg.pilot, pilot_seed(seed))?;
    let res0 = residuals(data, &splits.i21, &pilot)?;
    let theta_hat_0 = estimate_theta(&res0)?;
    let scales = compute_scales(&res0)?;
    let grid = GammaGrid::new(&raw, scales.gamma_scale)?;
    let (alpha, beta) = if cfg.scale_l0 { (scales.alpha, scales.beta) } else { (1.0, 1.0) };

    let x22 = data.x.select(Axis(0), &splits.i22);
    let g0 = (pilot.l.predict(x22.view())? - pilot.m.predict(x22.view())? * theta_hat_0).to_vec();
    let y22: Vec<f64> = splits.i22.iter().map(|&i| data.y[i]).collect();
    let d22: Vec<f64> = splits.i22.iter().map(|&i| data.d[i]).collect();
    let theta_true = data.truth.as_ref().map(|t| t.theta);

    let table = (0..grid.raw.len())
        .into_par_iter()
        .map(|k| {
            let w = LossWeights { alpha, beta, gamma: grid.scaled[k], gamma_scale: scales.gamma_scale };
            let fit = run_cdml_fixed(data, &splits.i1, &splits.i21, &splits.i21, &w, &cfg.net, gamma_seed(seed, k))?;
            Ok(GammaRow {
                gamma_raw: grid.raw[k],
                gamma: grid.scaled[k],
                theta_hat_1: fit.theta_hat,
                phi: phi(&y22, &d22, &g0, fit.theta_hat),
                bias: theta_true.map(|t| fit.theta_hat - t),
                train_abs_cov: abs_cov_on(data, &splits.i1, &fit.pair)?,
                best_epoch: fit.pair.meta.best_epoch_m.unwrap_or(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = table.iter().find(|r| !r.phi.is_finite()) {
        return Err(Error::Config(format!("non-finite hold-out error at gamma {}", r.gamma)));
    }
    let k = select_gamma(&table).expect("grid is nonempty");
    let w = LossWeights { alpha, beta, gamma: grid.scaled[k], gamma_scale: scales.gamma_scale };
    let fin = run_cdml_fixed(data, &splits.i1, &splits.i21, &splits.i2(), &w, &cfg.net, seed)?;
    let report = CdmlReport {
        schema_version: REPORT_SCHEMA_VERSION,
        theta_hat_final: fin.theta_hat,
        gamma_hat: grid.scaled[k],
        gamma_hat_raw: grid.raw[k],
        theta_hat_0,
        alpha,
        beta,
        gamma_scale: scales.gamma_scale,
        n_estimation: fin.residuals.len(),
        table,
        learner: fin.pair.meta.clone(),
    };
    Ok(CdmlRun { report, pair: fin.pair, residuals: fin.residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_plr, DgpConfig};
    use crate::dml::{split_indices, DEFAULT_FRACTIONS};
    use crate::grad::Tensor;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn w(alpha: f64, beta: f64, gamma: f64) -> LossWeights {
        LossWeights { alpha, beta, gamma, gamma_scale: 1.0 }
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(&[1.0, 1.0], &[2.0, 2.0], &w(1.0, 1.0, 0.0)), 5.0);
        assert_eq!(joint_loss(&[1.0, -1.0], &[1.0, 1.0], &LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0, gamma_scale: 1.0 }), 0.0);
        assert_eq!(joint_loss(&[1.0, 2.0], &[0.0, 1.0], &w(2.0, 3.0, 4.0)), 10.5);
    }

    #[test]
    fn graph_objective_matches_closed_form() {
        let mut r = rng::rng(3);
        for _ in 0..20 {
            let n = 7;
            let draw = |r: &mut rng::StreamRng| -> Vec<f64> {
                (0..n).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, r)).collect()
            };
            let (m, l, d, y) = (draw(&mut r), draw(&mut r), draw(&mut r), draw(&mut r));
            let wt = w(0.7, 1.3, 2.1);
            let mut g = Graph::new(0);
            let ids: Vec<NodeId> = ["m", "l", "d", "y"].iter().map(|k| g.input(k, vec![None, Some(1)])).collect();
            let loss = JointObjective(wt).build(&mut g, &ids[..2], &ids[2..]);
            g.mark_output("loss", loss);
            let inputs: HashMap<String, Tensor> = [("m", &m), ("l", &l), ("d", &d), ("y", &y)]
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::matrix(n, 1, v.to_vec()).unwrap()))
                .collect();
            let got = g.forward(&inputs).unwrap()["loss"].item();
            let v: Vec<f64> = d.iter().zip(&m).map(|(a, b)| a - b).collect();
            let u: Vec<f64> = y.iter().zip(&l).map(|(a, b)| a - b).collect();
            assert!((got - joint_loss(&v, &u, &wt)).abs() < 1e-12);
        }
    }

    #[test]
    fn scales_examples() {
        let res = ResidualSet::new(vec![2.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(compute_scales(&res).unwrap(), Scales { alpha: 1.0, beta: 0.25, gamma_scale: 0.5 });
        let res = ResidualSet::new(vec![1.0, 1.0], vec![1.0, -1.0]).unwrap();
        assert!(matches!(compute_scales(&res), Err(Error::DegenerateScales(_))));
    }

    #[test]
    fn scales_near_one_for_unit_noise() {
        let mut r = rng::rng(8);
        let n = 100_000;
        let mut draw = || rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
        let v: Vec<f64> = (0..n).map(|_| draw()).collect();
        let u: Vec<f64> = (0..n).map(|_| draw()).collect();
        let s = compute_scales(&ResidualSet::new(u, v).unwrap()).unwrap();
        assert!((s.alpha - 1.0).abs() < 0.02 && (s.beta - 1.0).abs() < 0.02);
    }

    #[test]
    fn grid_validation() {
        assert!(GammaGrid::new(&[0.1, 1.0], 1.0).is_err());
        assert!(GammaGrid::new(&[0.0, -1.0], 1.0).is_err());
        let g = GammaGrid::new(&[1.0, 0.0, 0.5, 1.0], 2.0).unwrap();
        assert_eq!(g.raw, vec![0.0, 0.5, 1.0]);
        assert_eq!(g.scaled, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn phi_four_rows() {
        // θ = 2: residuals Y − ĝ0 − 2D = [1, −1, 0, 2]
        let y = [3.0, 4.0, 2.0, 7.0];
        let d = [1.0, 2.0, 0.5, 1.0];
        let g0 = [0.0, 1.0, 1.0, 3.0];
        assert_eq!(phi(&y, &d, &g0, 2.0), (1.0 + 1.0 + 0.0 + 4.0) / 4.0);
    }

    fn row(gamma: f64, phi: f64) -> GammaRow {
        GammaRow { gamma_raw: gamma, gamma, theta_hat_1: 0.0, phi, bias: None, train_abs_cov: 0.0, best_epoch: 0 }
    }

    #[test]
    fn selection_ties_go_to_smallest_gamma() {
        let rows = [row(5.0, 1.0), row(0.5, 1.0), row(0.0, 2.0)];
        assert_eq!(select_gamma(&rows), Some(1));
        assert_eq!(select_gamma(&[row(0.0, 3.0), row(1.0, 0.5)]), Some(1));
    }

    fn small_net(max_epochs: usize) -> NetConfig {
        NetConfig { train: TrainConfig { max_epochs, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn singleton_grid_reduces_to_fixed_run() {
        let data = sample_plr(&DgpConfig { n: 400, seed: 21, ..Default::default() }).unwrap();
        let splits = split_indices(400, DEFAULT_FRACTIONS, 21).unwrap();
        let cfg = CdmlConfig { raw_grid: vec![0.0], net: small_net(150), pilot: LearnerConfig::Mlp(small_net(150)), scale_l0: true };
        let run = tune_and_run(&data, &splits, &cfg, 5).unwrap();
        let w = LossWeights { alpha: run.report.alpha, beta: run.report.beta, gamma: 0.0, gamma_scale: run.report.gamma_scale };
        let fixed = run_cdml_fixed(&data, &splits.i1, &splits.i21, &splits.i2(), &w, &cfg.net, 5).unwrap();
        assert_eq!(run.report.theta_hat_final, fixed.theta_hat);
        assert_eq!(run.report.gamma_hat, 0.0);
    }

    #[test]
    fn report_is_consistent_and_serializes() {
        let data = sample_plr(&DgpConfig { n: 400, seed: 22, ..Default::default() }).unwrap();
        let splits = split_indices(400, DEFAULT_FRACTIONS, 22).unwrap();
        let cfg = CdmlConfig { raw_grid: vec![0.0, 1.0, 10.0], net: small_net(100), pilot: LearnerConfig::Mlp(small_net(100)), scale_l0: true };
        let run = tune_and_run(&data, &splits, &cfg, 6).unwrap();
        let r = &run.report;
        let min = r.table.iter().map(|row| row.phi).fold(f64::INFINITY, f64::min);
        let chosen = r.table.iter().find(|row| row.gamma == r.gamma_hat).unwrap();
        assert_eq!(chosen.phi, min);
        assert!(r.table.iter().all(|row| row.bias.is_some()));
        assert_eq!(r.table_csv().lines().count(), 4);
        let back: CdmlReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(&back, r);
        let again = tune_and_run(&data, &splits, &cfg, 6).unwrap();
        assert_eq!(&again.report, r);
    }

    #[test]
    fn dml_shared_equals_unscaled_gamma_zero() {
        let data = sample_plr(&DgpConfig { n: 300, seed: 23, ..Default::default() }).unwrap();
        let splits = split_indices(300, DEFAULT_FRACTIONS, 23).unwrap();
        let net = NetConfig { stopping: crate::dml::Stopping::Shared, ..small_net(120) };
        let dml = crate::dml::run_dml(&data, &splits, &LearnerConfig::Mlp(net.clone()), 9).unwrap();
        let cfg = CdmlConfig { raw_grid: vec![0.0], net, pilot: LearnerConfig::Mlp(small_net(120)), scale_l0: false };
        let cd = tune_and_run(&data, &splits, &cfg, 9).unwrap();
        assert_eq!(dml.report.theta_hat, cd.report.theta_hat_final);
    }

    #[test]
    fn noiseless_linear_dgp_recovers_theta() {
        // D = x1 + V, Y = x2 + D, U = 0
        let n = 8000;
        let x = crate::datagen::sample_ar1(n, 10, 0.0, 1);
        let mut r = rng::rng(2);
        let v: ndarray::Array1<f64> =
            (0..n).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r)).collect();
        let d = x.column(1).to_owned() + &v;
        let y = x.column(2).to_owned() + &d;
        let data = Dataset::new(x, d, y).unwrap();
        let splits = split_indices(n, DEFAULT_FRACTIONS, 24).unwrap();
        let net = NetConfig {
            train: TrainConfig { learning_rate: 0.05, max_epochs: 5000, early_stop_patience: 200, ..Default::default() },
            ..Default::default()
        };
        let fit = run_cdml_fixed(&data, &splits.i1, &splits.i21, &splits.i2(), &LossWeights::unit_l0(), &net, 0).unwrap();
        assert!((fit.theta_hat - 1.0).abs() < 0.05, "{}", fit.theta_hat);
    }

    proptest! {
        #[test]
        fn loss_properties(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
                           a in 0.01f64..3.0, b in 0.01f64..3.0, g in 0.0f64..3.0, dg in 0.0f64..3.0, c in -3.0f64..3.0) {
            let v: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let u: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let l = joint_loss(&v, &u, &w(a, b, g));
            prop_assert!(l >= 0.0);
            prop_assert!(joint_loss(&v, &u, &w(a, b, g + dg)) >= l);
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            prop_assert!((joint_loss(&cv, &cu, &w(a, b, g)) - c * c * l).abs() <= 1e-9 * (1.0 + l * c * c));
        }

        #[test]
        fn loss_zero_iff_residuals_vanish(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10)) {
            let v: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let u: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let zero = v.iter().chain(&u).all(|x| *x == 0.0);
            prop_assert_eq!(joint_loss(&v, &u, &w(1.0, 1.0, 1.0)) == 0.0, zero);
        }
    }
}
