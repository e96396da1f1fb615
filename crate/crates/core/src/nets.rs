//! Multilayer perceptron regressors and the full-batch training loop used by
//! both standard and coordinated DML.
//!
//! Training always takes one clipped gradient step over the whole training
//! batch per epoch, evaluates the objective on a hold-out batch, and restores
//! the parameters of the epoch with the lowest hold-out loss.

use std::collections::HashMap;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, clip_global_norm, Graph, Mode, NodeId, Tensor};
use crate::model::Regressor;
use crate::rng;

/// Serialization format version for fitted model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Keep probability written for the five-layer network.
pub const DEFAULT_KEEP_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpVariant {
    /// Widths `(d/2, d/4, 1)`.
    ThreeLayer,
    /// Widths `(d, d, d, d, 1)` with dropout after the second hidden layer.
    FiveLayerDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    /// Dropout keep probability and the index of the hidden layer whose
    /// activations it is applied to.
    pub dropout: Option<(f64, usize)>,
}

impl MlpSpec {
    pub fn new(d: usize, variant: MlpVariant, keep_prob: f64) -> Result<Self> {
        match variant {
            MlpVariant::ThreeLayer => {
                if d < 4 {
                    return Err(Error::Config(format!(
                        "three-layer network needs at least 4 inputs, got {d}"
                    )));
                }
                Ok(Self {
                    input_dim: d,
                    layer_widths: vec![d / 2, d / 4, 1],
                    dropout: None,
                })
            }
            MlpVariant::FiveLayerDropout => {
                if d < 1 {
                    return Err(Error::Config("network needs at least one input".into()));
                }
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(Error::Config(format!(
                        "dropout keep probability must be in (0, 1], got {keep_prob}"
                    )));
                }
                Ok(Self {
                    input_dim: d,
                    layer_widths: vec![d, d, d, d, 1],
                    dropout: Some((keep_prob, 1)),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Builds a network with uniform Glorot weights and zero biases.
pub fn build_mlp(d: usize, variant: MlpVariant, seed: u64) -> Result<Mlp> {
    build_mlp_with_keep(d, variant, DEFAULT_KEEP_PROB, seed)
}

pub fn build_mlp_with_keep(d: usize, variant: MlpVariant, keep_prob: f64, seed: u64) -> Result<Mlp> {
    let spec = MlpSpec::new(d, variant, keep_prob)?;
    Ok(Mlp::init(spec, seed))
}

impl Mlp {
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = rng::rng(seed);
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.layer_widths.len());
        for &fan_out in &spec.layer_widths {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            layers.push(Dense {
                weight: Tensor::matrix(fan_in, fan_out, w).expect("consistent shape"),
                bias: Tensor::zeros(&[fan_out]),
            });
            fan_in = fan_out;
        }
        Self { spec, layers }
    }

    pub fn widths(&self) -> &[usize] {
        &self.spec.layer_widths
    }

    /// Adds the network to `g` and returns its `[n,1]` output node together
    /// with its parameter nodes (weight, bias per layer).
    pub fn attach(&self, g: &mut Graph, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let mut h = x;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.weight.clone());
            let b = g.param(layer.bias.clone());
            params.push(w);
            params.push(b);
            let z = g.matmul(h, w);
            h = g.add(z, b);
            if i < last {
                h = g.relu(h);
                if let Some((keep, at)) = self.spec.dropout {
                    if at == i {
                        h = g.dropout(h, keep);
                    }
                }
            }
        }
        (h, params)
    }

    fn load_params(&mut self, g: &Graph, params: &[NodeId]) -> Result<()> {
        for (layer, ids) in self.layers.iter_mut().zip(params.chunks(2)) {
            layer.weight = g.param_value(ids[0])?.clone();
            layer.bias = g.param_value(ids[1])?.clone();
        }
        Ok(())
    }

    /// Evaluation-mode forward pass on already standardized rows.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut width = self.spec.input_dim;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.bias.len();
            let mut z = grad::matmul(&h, layer.weight.values(), n, width, out);
            let b = layer.bias.values();
            for row in z.chunks_mut(out) {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
                if i < last {
                    row.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            h = z;
            width = out;
        }
        h
    }
}

/// Per-feature affine map to zero mean and unit variance, fitted on the
/// training rows. Constant features are only centred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Row-major standardized copy.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.rows() {
            for (j, v) in row.iter().enumerate() {
                out.push((v - self.mean[j]) / self.scale[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRegressor {
    pub mlp: Mlp,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Last evaluated epoch.
    pub stopped_epoch: usize,
}

impl FittedRegressor {
    /// Wraps an untrained network (identity standardization, empty history).
    pub fn untrained(mlp: Mlp) -> Self {
        let d = mlp.spec.input_dim;
        Self {
            mlp,
            standardizer: Standardizer::identity(d),
            history: Vec::new(),
            best_epoch: 0,
            stopped_epoch: 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: "mlp".into(),
            model: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile<FittedRegressor> = serde_json::from_str(s)?;
        if file.format_version != MODEL_FORMAT_VERSION || file.kind != "mlp" {
            return Err(Error::Config(format!(
                "unsupported model file (kind {}, version {})",
                file.kind, file.format_version
            )));
        }
        Ok(file.model)
    }
}

/// Envelope written around every serialized model.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile<T> {
    pub format_version: u32,
    pub kind: String,
    pub model: T,
}

impl Regressor for FittedRegressor {
    fn n_features(&self) -> usize {
        self.mlp.spec.input_dim
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(&x)?;
        let z = self.standardizer.apply(x);
        Ok(Array1::from(self.mlp.forward_rows(&z, x.nrows())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 2000,
            clip_norm: 3.0,
            early_stop_patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Covariates plus one target column per objective slot.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub targets: Vec<ArrayView1<'a, f64>>,
}

/// A differentiable training objective over network predictions.
pub trait Objective: Sync {
    fn n_targets(&self) -> usize;

    /// Builds the scalar loss node from `[n,1]` prediction and target nodes.
    fn build(&self, g: &mut Graph, preds: &[NodeId], targets: &[NodeId]) -> NodeId;
}

/// Mean squared error of one network against one target.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mse;

impl Objective for Mse {
    fn n_targets(&self) -> usize {
        1
    }

    fn build(&self, g: &mut Graph, preds: &[NodeId], targets: &[NodeId]) -> NodeId {
        let r = g.sub(targets[0], preds[0]);
        let sq = g.square(r);
        g.mean(sq)
    }
}

fn column(v: ArrayView1<'_, f64>) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).expect("column shape")
}

fn batch_inputs(batch: &Batch<'_>, std: &Standardizer) -> HashMap<String, Tensor> {
    let mut inputs = HashMap::with_capacity(1 + batch.targets.len());
    inputs.insert(
        "x".to_string(),
        Tensor::matrix(batch.x.nrows(), batch.x.ncols(), std.apply(batch.x)).expect("x shape"),
    );
    for (k, t) in batch.targets.iter().enumerate() {
        inputs.insert(format!("t{k}"), column(*t));
    }
    inputs
}

fn check_batch(b: &Batch<'_>, d: usize, n_targets: usize, what: &str) -> Result<()> {
    if b.x.nrows() == 0 {
        return Err(Error::Empty(format!("{what} batch has no rows")));
    }
    if b.x.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: b.x.ncols(),
        });
    }
    if b.targets.len() != n_targets || b.targets.iter().any(|t| t.len() != b.x.nrows()) {
        return Err(Error::Config(format!(
            "{what} batch needs {n_targets} target column(s) of length {}",
            b.x.nrows()
        )));
    }
    Ok(())
}

/// Trains `models` jointly on `objective` by full-batch gradient descent with
/// global-norm clipping and early stopping on the hold-out objective.
///
/// Epoch `e` evaluates the parameters after `e` gradient steps; at most
/// `max_epochs` steps are taken. Training stops once `early_stop_patience`
/// epochs pass without a strict hold-out improvement, and the parameters of
/// the earliest best epoch are returned.
pub fn train(
    models: Vec<Mlp>,
    objective: &dyn Objective,
    train_data: &Batch<'_>,
    holdout: &Batch<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<FittedRegressor>> {
    cfg.validate()?;
    let Some(first) = models.first() else {
        return Err(Error::Empty("no models to train".into()));
    };
    let d = first.spec.input_dim;
    if models.iter().any(|m| m.spec.input_dim != d) {
        return Err(Error::Config("jointly trained models must share the input dimension".into()));
    }
    if objective.n_targets() != train_data.targets.len() {
        return Err(Error::Config("objective/target count mismatch".into()));
    }
    check_batch(train_data, d, objective.n_targets(), "training")?;
    check_batch(holdout, d, objective.n_targets(), "hold-out")?;

    let standardizer = Standardizer::fit(train_data.x);
    let mut g = Graph::new(rng::derive_seed(cfg.seed, 0xD80));
    let x = g.input("x", vec![None, Some(d)]);
    let targets: Vec<NodeId> = (0..objective.n_targets())
        .map(|k| g.input(&format!("t{k}"), vec![None, Some(1)]))
        .collect();
    let mut preds = Vec::with_capacity(models.len());
    let mut model_params = Vec::with_capacity(models.len());
    for m in &models {
        let (p, params) = m.attach(&mut g, x);
        preds.push(p);
        model_params.push(params);
    }
    let loss = objective.build(&mut g, &preds, &targets);
    g.mark_output("loss", loss);

    let train_inputs = batch_inputs(train_data, &standardizer);
    let holdout_inputs = batch_inputs(holdout, &standardizer);
    let param_ids: Vec<NodeId> = g.params().to_vec();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let snapshot = |g: &Graph| -> Vec<Tensor> {
        param_ids
            .iter()
            .map(|&p| g.param_value(p).expect("param").clone())
            .collect()
    };

    for epoch in 0..=cfg.max_epochs {
        g.set_mode(Mode::Train);
        let train_loss = g.forward(&train_inputs)?["loss"].item();
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                loss: train_loss,
            });
        }
        let grads = g.backward(loss)?;

        g.set_mode(Mode::Eval);
        let holdout_loss = g.forward(&holdout_inputs)?["loss"].item();
        if !holdout_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                loss: holdout_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            holdout_loss,
        });

        let improved = best.as_ref().map_or(true, |(_, b, _)| holdout_loss < *b);
        if improved {
            best = Some((epoch, holdout_loss, snapshot(&g)));
        }
        let best_epoch = best.as_ref().expect("set on first epoch").0;
        if epoch - best_epoch > cfg.early_stop_patience || epoch == cfg.max_epochs {
            break;
        }

        let grads = clip_global_norm(&grads, cfg.clip_norm);
        for (id, gr) in grads.iter() {
            let p = g.param_mut(*id)?;
            p.values_mut()
                .iter_mut()
                .zip(gr.values())
                .for_each(|(w, dw)| *w -= cfg.learning_rate * dw);
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    for (&id, value) in param_ids.iter().zip(params) {
        *g.param_mut(id)? = value;
    }
    let stopped_epoch = history.last().map_or(0, |r| r.epoch);
    models
        .into_iter()
        .zip(&model_params)
        .map(|(mut mlp, ids)| {
            mlp.load_params(&g, ids)?;
            Ok(FittedRegressor {
                mlp,
                standardizer: standardizer.clone(),
                history: history.clone(),
                best_epoch,
                stopped_epoch,
            })
        })
        .collect()
}

/// Trains one network on mean squared error.
pub fn train_mse<'a>(
    model: Mlp,
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    holdout_x: ArrayView2<'a, f64>,
    holdout_y: ArrayView1<'a, f64>,
    cfg: &TrainConfig,
) -> Result<FittedRegressor> {
    let tr = Batch {
        x,
        targets: vec![y],
    };
    let ho = Batch {
        x: holdout_x,
        targets: vec![holdout_y],
    };
    Ok(train(vec![model], &Mse, &tr, &ho, cfg)?.remove(0))
}
