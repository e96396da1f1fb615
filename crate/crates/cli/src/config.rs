//! Experiment configuration: a TOML file with flag overrides.
//!
//! ```toml
//! seed = 7
//! workers = 1
//! out = "runs/demo"
//! method = "cdml"            # dml_nn | dml_rf | cdml | dml_oracle
//! reps = 50
//! fractions = [0.5, 0.25, 0.25]
//!
//! [dgp]                      # synthetic source (used unless [data] is given)
//! n = 2000
//! rho = 0.8
//! nuisance = "linear_groups" # or "relu_exp"
//! theta = 1.0
//!
//! [data]                     # CSV source
//! csv = "data.csv"
//! treatment = "D"
//! outcome = "Y"
//! truth = "truth.json"       # optional sidecar written by `simulate`
//! semisynthetic = false      # replace Y by a forest surrogate plus a known effect
//!
//! [net]
//! variant = "three_layer"    # or "five_layer_dropout"
//! stopping = "separate"      # or "shared"
//! [net.train]
//! learning_rate = 0.01
//!
//! [cdml]
//! raw_grid = [0.0, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0]
//!
//! [experiment]
//! methods = ["dml_nn", "cdml"]
//! sweep = { param = "rho", values = [0.1, 0.5, 0.9] }
//!
//! [bias]
//! sigma_l = [0.0, 1.0, 10.0]
//!
//! [bootstrap]
//! subset_sizes = [1000, 2000]
//! ```

use std::path::{Path, PathBuf};

use cdml::cdml::{validate_raw_grid, CdmlConfig, DEFAULT_RAW_GRID};
use cdml::datagen::{DgpConfig, SemiSynthConfig};
use cdml::dml::{LearnerConfig, NetConfig, Stopping, DEFAULT_FRACTIONS};
use cdml::forest::ForestConfig;
use cdml::pipeline::{Method, MethodConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub method: Method,
    pub reps: usize,
    pub fractions: [f64; 3],
    pub dgp: DgpConfig,
    pub data: Option<DataSource>,
    pub net: NetConfig,
    pub forest: ForestConfig,
    pub cdml: CdmlSection,
    pub experiment: ExperimentSection,
    pub bias: BiasSection,
    pub bootstrap: BootstrapSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            method: Method::Cdml,
            reps: 50,
            fractions: DEFAULT_FRACTIONS,
            dgp: DgpConfig::default(),
            data: None,
            net: NetConfig::default(),
            forest: ForestConfig::default(),
            cdml: CdmlSection::default(),
            experiment: ExperimentSection::default(),
            bias: BiasSection::default(),
            bootstrap: BootstrapSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub csv: PathBuf,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub semisynthetic: bool,
    #[serde(default)]
    pub semi: SemiSection,
}

fn default_treatment() -> String {
    "D".into()
}

fn default_outcome() -> String {
    "Y".into()
}

/// Semi-synthetic outcome settings; columns come from [`DataSource`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSection {
    pub theta: f64,
    pub effect_mode: cdml::datagen::EffectMode,
    pub sigma_u: f64,
    pub fractions: (f64, f64),
}

impl Default for SemiSection {
    fn default() -> Self {
        let d = SemiSynthConfig::default();
        Self { theta: d.theta, effect_mode: d.effect_mode, sigma_u: d.sigma_u, fractions: d.fractions }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdmlSection {
    pub raw_grid: Vec<f64>,
    /// When false, the two squared-error terms keep unit weights.
    pub scale_l0: bool,
    /// Pilot learner; defaults to the `[net]` networks trained separately.
    pub pilot: Option<LearnerConfig>,
}

impl Default for CdmlSection {
    fn default() -> Self {
        Self { raw_grid: DEFAULT_RAW_GRID.to_vec(), scale_l0: true, pilot: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rho,
    SigmaU,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { methods: vec![Method::DmlNn, Method::Cdml], sweep: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    pub mc_n: usize,
    pub sigma_l: Vec<f64>,
}

impl Default for BiasSection {
    fn default() -> Self {
        Self { mc_n: cdml::analysis::DEFAULT_MC_N, sigma_l: vec![0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub n_resamples: usize,
    pub level: f64,
    /// Row counts of the subsamples to analyse; empty means all rows.
    pub subset_sizes: Vec<usize>,
    /// Rerun the whole estimator per resample instead of freezing nuisances.
    pub full_pipeline: bool,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            n_resamples: cdml::analysis::DEFAULT_RESAMPLES,
            level: cdml::analysis::DEFAULT_LEVEL,
            subset_sizes: Vec::new(),
            full_pipeline: false,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub gamma_grid: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub sigma_u: Option<f64>,
    pub reps: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.method {
            self.method = v;
            self.experiment.methods = vec![v];
        }
        if let Some(v) = &o.gamma_grid {
            self.cdml.raw_grid = v.clone();
        }
        if let Some(v) = o.rho {
            self.dgp.rho = v;
        }
        if let Some(v) = o.sigma_u {
            self.dgp.sigma_u = v;
        }
        if let Some(v) = o.reps {
            self.reps = v;
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = |r: cdml::Result<()>| r.map_err(|e| e.to_string());
        if self.data.is_none() {
            e(self.dgp.validate())?;
        }
        e(self.net.train.validate())?;
        e(self.forest.validate())?;
        validate_raw_grid(&self.cdml.raw_grid).map_err(|e| e.to_string())?;
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(format!("fractions must be positive and sum to 1, got {:?}", self.fractions));
        }
        if self.reps < 1 {
            return Err("reps must be at least 1".into());
        }
        if self.experiment.methods.is_empty() {
            return Err("experiment.methods must not be empty".into());
        }
        if let Some(s) = &self.experiment.sweep {
            if s.values.is_empty() {
                return Err("sweep needs at least one value".into());
            }
        }
        if self.bias.sigma_l.iter().any(|s| !(*s >= 0.0)) {
            return Err("bias.sigma_l values must be nonnegative".into());
        }
        if self.bias.mc_n < cdml::analysis::MIN_MC_N {
            return Err(format!("bias.mc_n must be at least {}", cdml::analysis::MIN_MC_N));
        }
        if self.bootstrap.n_resamples < 1 || !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err("bootstrap needs n_resamples >= 1 and level in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.net.keep_prob) || self.net.keep_prob == 0.0 {
            return Err("net.keep_prob must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn method_config(&self) -> MethodConfig {
        let pilot = self
            .cdml
            .pilot
            .clone()
            .unwrap_or_else(|| LearnerConfig::Mlp(NetConfig { stopping: Stopping::Separate, ..self.net.clone() }));
        MethodConfig {
            net: self.net.clone(),
            forest: self.forest.clone(),
            cdml: CdmlConfig { raw_grid: self.cdml.raw_grid.clone(), net: self.net.clone(), pilot, scale_l0: self.cdml.scale_l0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), c);
    }

    #[test]
    fn nested_sections_parse() {
        let c: ExperimentConfig = toml::from_str(
            r#"
            seed = 3
            method = "dml_rf"
            [dgp]
            rho = 0.5
            nuisance = "relu_exp"
            [net]
            variant = "five_layer_dropout"
            [net.train]
            max_epochs = 10
            [experiment]
            sweep = { param = "sigma_u", values = [0.5, 1.0] }
            "#,
        )
        .unwrap();
        assert_eq!(c.method, Method::DmlRf);
        assert_eq!(c.net.train.max_epochs, 10);
        assert_eq!(c.net.train.learning_rate, 0.01);
        assert_eq!(c.experiment.sweep.unwrap().param, SweepParam::SigmaU);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 1").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides { seed: Some(9), method: Some(Method::DmlNn), gamma_grid: Some(vec![0.0]), reps: Some(2), ..Default::default() });
        assert_eq!((c.seed, c.reps), (9, 2));
        assert_eq!(c.experiment.methods, vec![Method::DmlNn]);
        assert_eq!(c.cdml.raw_grid, vec![0.0]);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ExperimentConfig::default();
        c.cdml.raw_grid = vec![1.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.reps = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.dgp.d = 5;
        assert!(c.validate().is_err());
    }
}
