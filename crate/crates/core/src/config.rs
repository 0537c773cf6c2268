//! JSON pipeline configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::evaluation::ModelSpec;
use crate::hypergraph::SisheOptions;
use crate::io;
use crate::matching::WafiOptions;
use crate::similarity::RisgfOptions;
use crate::training::{Ablation, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    /// Ratings at or above this value count as interactions.
    pub rating_threshold: f64,
    /// Iterative user/item filter. `None` means 1 for generated data and 10 otherwise.
    pub min_interactions: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synthetic: SyntheticConfig::default(),
            rating_threshold: 4.0,
            min_interactions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub z: usize,
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        let r = RisgfOptions::default();
        GraphSection {
            z: 5,
            mu: r.mu,
            max_iters: r.max_iters,
            tol: r.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub eta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub tol: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let s = SisheOptions::default();
        ClusterSection {
            k: s.num_clusters,
            eta: s.eta,
            outer_iters: s.outer_iters,
            inner_iters: s.inner_iters,
            tol: s.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let w = WafiOptions::default();
        MatchingSection {
            epsilon: w.epsilon,
            max_iters: w.max_iters,
            tol: w.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub neg_samples: usize,
    /// Iteration budget of each per-batch matching solve; `matching.max_iters`
    /// applies to standalone matching only.
    pub matching_max_iters: usize,
    pub ablation: Ablation,
    /// Seeds for `ablate`; empty means five seeds counted up from `--seed`.
    pub seeds: Vec<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            neg_samples: t.neg_samples,
            matching_max_iters: t.matching_max_iters,
            ablation: t.ablation,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub cluster: ClusterSection,
    pub matching: MatchingSection,
    pub model: ModelSpec,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Schema(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.graph.z == 0 {
            return bad("graph.z must be positive");
        }
        if !(self.graph.mu > 0.0) {
            return bad("graph.mu must be positive");
        }
        if self.cluster.k < 2 || !(self.cluster.eta > 0.0) {
            return bad("cluster.k must be at least 2 and cluster.eta positive");
        }
        if !(self.matching.epsilon > 0.0) {
            return bad("matching.epsilon must be positive");
        }
        if self.model.dim == 0 {
            return bad("model.dim must be positive");
        }
        if self.eval.k == 0 {
            return bad("eval.k must be positive");
        }
        self.train_config(0).validate()
    }

    pub fn risgf_options(&self) -> RisgfOptions {
        RisgfOptions {
            mu: self.graph.mu,
            max_iters: self.graph.max_iters,
            tol: self.graph.tol,
        }
    }

    pub fn sishe_options(&self, seed: u64) -> SisheOptions {
        SisheOptions {
            num_clusters: self.cluster.k,
            eta: self.cluster.eta,
            outer_iters: self.cluster.outer_iters,
            inner_iters: self.cluster.inner_iters,
            tol: self.cluster.tol,
            seed,
        }
    }

    pub fn wafi_options(&self) -> WafiOptions {
        WafiOptions {
            epsilon: self.matching.epsilon,
            max_iters: self.matching.max_iters,
            tol: self.matching.tol,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.train.lambda,
            epsilon: self.matching.epsilon,
            matching_max_iters: self.train.matching_max_iters,
            matching_tol: self.matching.tol,
            batch_size: self.train.batch_size,
            neg_samples: self.train.neg_samples,
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epochs: self.train.epochs,
            seed,
            ablation: self.train.ablation,
            eval_k: self.eval.k,
        }
    }

    pub fn ablation_seeds(&self, seed: u64) -> Vec<u64> {
        if self.train.seeds.is_empty() {
            (0..5).map(|i| seed + i).collect()
        } else {
            self.train.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg.graph.z, 5);
        assert_eq!(cfg.graph.mu, 0.1);
        assert_eq!(cfg.cluster.eta, 0.1);
        assert_eq!(cfg.cluster.k, 15);
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.model.dim, 128);
        assert_eq!(cfg.matching.epsilon, 0.01);
        assert_eq!(cfg.train.lambda, 0.6);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.eval.k, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::from_json(r#"{"graf": {}}"#), Err(Error::Schema(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"graph": {"zz": 3}}"#), Err(Error::Schema(_))));
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let cfg = PipelineConfig::from_json(r#"{"train": {"ablation": "O", "epochs": 3}}"#).unwrap();
        let text = cfg.to_canonical_json();
        let again = PipelineConfig::from_json(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical_json(), text);
        assert!(text.contains("\"min_interactions\": null"));
    }

    #[test]
    fn invalid_values_are_reported() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"matching": {"epsilon": 0.0}}"#),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json(r#"{"train": {"batch_size": 0}}"#),
            Err(Error::InvalidParameter(_))
        ));
    }
}
