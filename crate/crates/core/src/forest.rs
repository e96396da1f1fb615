//! Random-forest regression (CART trees on bootstrap resamples, variance
//! reduction splits over all features).

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Regressor;
use crate::nets::{ModelFile, MODEL_FORMAT_VERSION};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 20,
            max_depth: 20,
            min_samples_split: 2,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::Config("min_samples_split must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        n_samples: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub depth: usize,
}

impl Tree {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

struct Builder<'x, 'y> {
    x: ArrayView2<'x, f64>,
    y: ArrayView1<'y, f64>,
    max_depth: usize,
    min_samples_split: usize,
    nodes: Vec<Node>,
    depth: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_, '_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let value = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf {
            value,
            n_samples: rows.len(),
        });
        self.nodes.len() - 1
    }

    /// Best split by `sum_L^2/n_L + sum_R^2/n_R` (equivalently, smallest
    /// child SSE). Ties keep the lowest feature and then the smallest threshold.
    fn best_split(&self, rows: &[usize]) -> Option<BestSplit> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                left_sum += self.y[order[i]];
                let (lo, hi) = (col[order[i]], col[order[i + 1]]);
                if lo >= hi {
                    continue;
                }
                let nl = (i + 1) as f64;
                let nr = (n - i - 1) as f64;
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl + right_sum * right_sum / nr;
                let better = match &best {
                    None => true,
                    Some(b) => score > b.score + 1e-12 * b.score.abs().max(1e-300),
                };
                if better {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best.filter(|b| b.score > parent + 1e-12 * parent.abs())
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        self.depth = self.depth.max(depth);
        if rows.len() < self.min_samples_split || depth >= self.max_depth {
            return self.leaf(&rows);
        }
        let Some(split) = self.best_split(&rows) else {
            return self.leaf(&rows);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.x[[r, split.feature]] <= split.threshold);
        if left.is_empty() || right.is_empty() {
            return self.leaf(&rows);
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        if let Node::Split { left, right, .. } = &mut self.nodes[id] {
            *left = l;
            *right = r;
        }
        id
    }
}

fn fit_tree(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    rows: Vec<usize>,
    cfg: &ForestConfig,
) -> Tree {
    let mut b = Builder {
        x,
        y,
        max_depth: cfg.max_depth,
        min_samples_split: cfg.min_samples_split,
        nodes: Vec::new(),
        depth: 0,
    };
    b.grow(rows, 0);
    Tree {
        nodes: b.nodes,
        depth: b.depth,
    }
}

pub fn fit_forest(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, cfg: &ForestConfig) -> Result<Forest> {
    cfg.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Empty(format!("forest needs at least 2 rows, got {n}")));
    }
    if y.len() != n {
        return Err(Error::Config(format!("{} targets for {n} rows", y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("forest inputs must be finite".into()));
    }
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let rows = if cfg.bootstrap {
                let mut r = rng::stream(cfg.seed, t as u64);
                (0..n).map(|_| r.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(x, y, rows, cfg)
        })
        .collect();
    Ok(Forest {
        n_features: x.ncols(),
        trees,
    })
}

impl Forest {
    pub fn predict_forest(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.predict(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: "forest".into(),
            model: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile<Forest> = serde_json::from_str(s)?;
        if file.format_version != MODEL_FORMAT_VERSION || file.kind != "forest" {
            return Err(Error::Config(format!(
                "unsupported model file (kind {}, version {})",
                file.kind, file.format_version
            )));
        }
        Ok(file.model)
    }
}

impl Regressor for Forest {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(&x)?;
        let k = self.trees.len() as f64;
        Ok(x.rows()
            .into_iter()
            .map(|row| self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / k)
            .collect())
    }
}
