//! Experiment configuration.
//!
//! A TOML file with optional sections; every key has a default and unknown
//! keys are rejected. The schema, with defaults:
//!
//! ```toml
//! [decomposition]
//! trials = 1000
//! dims = [1, 2, 8, 32]
//! large_norm = 30.0
//!
//! [convergence]
//! d_k = 4
//! r_grid = [100, 1000, 10000, 100000]
//! pairs = 200
//! repeats = 5
//! tolerance = 0.02
//! bound_trials = 100
//! bound_epsilon = 0.1
//! bound_target = 0.05
//! bound_grid = 50
//!
//! [sparsity]
//! p_grid = [2.0, 1.0, 0.5, 0.2, 0.1, 0.05]
//! sets = 32
//! queries = 8
//! keys = 8
//! d_k = 8
//!
//! [attention]
//! variant = "dot"
//! heads = 2
//! r = 16
//! d_k = 8
//! p = 2.0
//! c = 0.2
//! hidden = 16
//! copula_rho = 0.0      # initial off-diagonal correlation for mikan
//! # lengthscale = 1.0   # optional
//!
//! [train]
//! epochs = 60
//! lr = 0.05
//! momentum = 0.9
//! batch_size = 16
//! kl_weight = 0.001
//! clip_norm = 10.0
//! # checkpoint = "params.txt"   # optional, rewritten every epoch
//!
//! [task.seq]
//! vocab = 16
//! min_len = 8
//! max_len = 32
//! marker = 7
//! train = 200
//! test = 100
//! d_model = 16
//!
//! [task.graph]
//! nodes = 60
//! p_in = 0.3
//! p_out = 0.02
//! features = 8
//! separation = 0.5
//! noise = 1.0
//! train_fraction = 0.5
//! weight_decay = 0.001
//!
//! [task.regression]
//! train = 60
//! test = 40
//! noise = 0.05
//! d_model = 8
//!
//! [complexity]
//! t_grid = [8, 16, 32, 64]
//! d = 16
//! r = 16
//! heads = 4
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub trials: usize,
    pub dims: Vec<usize>,
    pub large_norm: f64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            dims: vec![1, 2, 8, 32],
            large_norm: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub d_k: usize,
    pub r_grid: Vec<usize>,
    pub pairs: usize,
    /// Independent frequency sets per `R`.
    pub repeats: usize,
    pub tolerance: f64,
    pub bound_trials: usize,
    pub bound_epsilon: f64,
    /// Bound value that picks the sample count of the exceedance check.
    pub bound_target: f64,
    /// Points per axis of the exceedance grid.
    pub bound_grid: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            d_k: 4,
            r_grid: vec![100, 1000, 10_000, 100_000],
            pairs: 200,
            repeats: 5,
            tolerance: 0.02,
            bound_trials: 100,
            bound_epsilon: 0.1,
            bound_target: 0.05,
            bound_grid: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    pub p_grid: Vec<f64>,
    /// Independent query/key sets.
    pub sets: usize,
    pub queries: usize,
    pub keys: usize,
    pub d_k: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            p_grid: vec![2.0, 1.0, 0.5, 0.2, 0.1, 0.05],
            sets: 32,
            queries: 8,
            keys: 8,
            d_k: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub variant: Variant,
    pub heads: usize,
    pub r: usize,
    pub d_k: usize,
    pub p: f64,
    pub c: f64,
    pub hidden: usize,
    pub copula_rho: f64,
    pub lengthscale: Option<f64>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            variant: Variant::Dot,
            heads: 2,
            r: 16,
            d_k: 8,
            p: 2.0,
            c: 0.2,
            hidden: 16,
            copula_rho: 0.0,
            lengthscale: None,
        }
    }
}

impl AttentionSection {
    /// Layer config for `variant`, which overrides the section's own.
    pub fn layer_config(&self, variant: Variant) -> Result<AttentionConfig> {
        let mut c = AttentionConfig::new(variant, self.heads, self.d_k);
        c.r = self.r;
        c.p = if variant.requires_l2() { 2.0 } else { self.p };
        c.c = self.c;
        c.hidden = self.hidden;
        c.lengthscale = self.lengthscale;
        if variant == Variant::Mikan {
            let m = self.heads;
            let rho = self.copula_rho;
            c.copula = Some(Matrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho }));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqTaskConfig {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub marker: usize,
    pub train: usize,
    pub test: usize,
    pub d_model: usize,
}

impl Default for SeqTaskConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            min_len: 8,
            max_len: 32,
            marker: 7,
            train: 200,
            test: 100,
            d_model: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphTaskConfig {
    pub nodes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub features: usize,
    /// Community means are `+separation` and `-separation` in every coordinate.
    pub separation: f64,
    pub noise: f64,
    pub train_fraction: f64,
    /// Coefficient of the squared-parameter penalty added to the loss.
    pub weight_decay: f64,
}

impl Default for GraphTaskConfig {
    fn default() -> Self {
        Self {
            nodes: 60,
            p_in: 0.3,
            p_out: 0.02,
            features: 8,
            separation: 0.5,
            noise: 1.0,
            train_fraction: 0.5,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionTaskConfig {
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub d_model: usize,
}

impl Default for RegressionTaskConfig {
    fn default() -> Self {
        Self {
            train: 60,
            test: 40,
            noise: 0.05,
            d_model: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seq: SeqTaskConfig,
    pub graph: GraphTaskConfig,
    pub regression: RegressionTaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityConfig {
    pub t_grid: Vec<usize>,
    pub d: usize,
    pub r: usize,
    pub heads: usize,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            t_grid: vec![8, 16, 32, 64],
            d: 16,
            r: 16,
            heads: 4,
        }
    }
}

/// All experiment settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub decomposition: DecompositionConfig,
    pub convergence: ConvergenceConfig,
    pub sparsity: SparsityConfig,
    pub attention: AttentionSection,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub complexity: ComplexityConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML of every setting, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::to_toml`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.decomposition;
        if d.trials == 0 || d.dims.contains(&0) {
            return bad("decomposition: trials and dims must be positive");
        }
        let c = &self.convergence;
        if c.r_grid.is_empty() || c.r_grid.windows(2).any(|w| w[1] <= w[0]) || c.r_grid[0] == 0 {
            return bad("convergence: r_grid must be positive and ascending");
        }
        if c.d_k == 0 || c.pairs == 0 || c.repeats == 0 || c.bound_trials == 0 || c.bound_grid < 2 {
            return bad("convergence: sizes must be positive");
        }
        if !(c.bound_epsilon > 0.0 && c.bound_target > 0.0 && c.bound_target < 1.0) {
            return bad("convergence: bound_epsilon > 0 and bound_target in (0, 1)");
        }
        let s = &self.sparsity;
        if s.p_grid.is_empty()
            || s.p_grid.iter().any(|&p| !(p > 0.0))
            || s.p_grid.windows(2).any(|w| w[1] >= w[0])
        {
            return bad("sparsity: p_grid must be positive and descending");
        }
        if s.sets == 0 || s.queries == 0 || s.keys < 2 || s.d_k == 0 {
            return bad("sparsity: sets, queries and d_k positive, keys >= 2");
        }
        self.attention
            .layer_config(self.attention.variant)
            .map_err(|e| Error::Config(format!("attention: {e}")))?;
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let t = &self.task.seq;
        if t.marker >= t.vocab || t.vocab < 2 || t.min_len == 0 || t.min_len > t.max_len {
            return bad("task.seq: need marker < vocab and 0 < min_len <= max_len");
        }
        if t.train < 2 || t.test < 2 || t.d_model == 0 {
            return bad("task.seq: train, test >= 2 and d_model > 0");
        }
        let g = &self.task.graph;
        if g.nodes < 4
            || g.features == 0
            || !(0.0..=1.0).contains(&g.p_in)
            || !(0.0..=1.0).contains(&g.p_out)
        {
            return bad("task.graph: nodes >= 4, features > 0, probabilities in [0, 1]");
        }
        if !(g.train_fraction > 0.0 && g.train_fraction < 1.0)
            || g.noise < 0.0
            || !(g.weight_decay >= 0.0)
        {
            return bad("task.graph: train_fraction in (0, 1), noise and weight_decay >= 0");
        }
        let r = &self.task.regression;
        if r.train < 2 || r.test < 1 || r.d_model == 0 || r.noise < 0.0 {
            return bad("task.regression: train >= 2, test >= 1, d_model > 0, noise >= 0");
        }
        let k = &self.complexity;
        if k.t_grid.len() < 4 || k.t_grid.windows(2).any(|w| w[1] != 2 * w[0]) || k.t_grid[0] == 0 {
            return bad("complexity: t_grid needs at least three successive doublings");
        }
        if k.d == 0 || k.r == 0 || k.heads < 2 {
            return bad("complexity: d, r positive and heads >= 2");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml(
            "[train]\nepochs = 5\n[attention]\nvariant = \"ikan-direct\"\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.attention.variant, Variant::IkanDirect);
        assert_eq!(c.task, TaskConfig::default());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 5\n").is_err());
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
        assert!(ExperimentConfig::from_toml("[attention]\nvariant = \"nope\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[complexity]\nt_grid = [8, 16, 24, 32]\n").is_err());
        assert!(ExperimentConfig::from_toml("[convergence]\nr_grid = [1000, 100]\n").is_err());
    }

    #[test]
    fn mikan_gets_a_uniform_copula() {
        let s = AttentionSection {
            copula_rho: 0.5,
            ..Default::default()
        };
        let c = s.layer_config(Variant::Mikan).unwrap();
        assert_eq!(c.copula.unwrap()[(0, 1)], 0.5);
        assert!(s.layer_config(Variant::Ikan).unwrap().copula.is_none());
    }
}
