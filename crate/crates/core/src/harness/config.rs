use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causal::ExplainerTraining;
use crate::dcgcn::DcgcnConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::forest::check_unit_interval;
use crate::model::{ModelConfig, Vocabs};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    SentenceLevel,
    NAry,
}

/// Every knob of a training run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Entity mentions per instance (2 or 3).
    pub entities: usize,
    pub heads: usize,
    pub blocks: usize,
    pub layers: usize,
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
    /// Share of the training set used to build explanation records.
    pub explain_fraction: f64,
    pub folds: usize,
    /// Forces `alpha = 1`.
    pub disable_semantic: bool,
    /// Skips pruning: the encoder sees `row_softmax(F)`.
    pub disable_pruning: bool,
    pub negative_label: String,
    pub explainer: ExplainerTraining,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::SentenceLevel,
            entities: 2,
            heads: 2,
            blocks: 2,
            layers: 2,
            dim: 16,
            alpha: 0.9,
            beta: 1.0,
            kappa: 20,
            embed_dim: 16,
            hidden_dim: 16,
            lr: 0.1,
            epochs: 20,
            batch_size: 8,
            clip: 5.0,
            seed: 7,
            explain_fraction: 0.2,
            folds: 5,
            disable_semantic: false,
            disable_pruning: false,
            negative_label: "None".into(),
            explainer: ExplainerTraining::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph().validate()?;
        check_unit_interval("alpha", self.alpha)?;
        check_unit_interval("beta", self.beta)?;
        if !(2..=3).contains(&self.entities) {
            return Err(Error::config(format!("entities must be 2 or 3, got {}", self.entities)));
        }
        if self.task == Task::SentenceLevel && self.entities != 2 {
            return Err(Error::config("sentence-level task has exactly 2 entities"));
        }
        if self.kappa == 0 {
            return Err(Error::config("kappa must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("embed_dim and hidden_dim must be positive"));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::config("batch_size, lr and clip must be positive"));
        }
        if !(self.explain_fraction > 0.0 && self.explain_fraction <= 1.0) {
            return Err(Error::config(format!("explain_fraction {} outside (0, 1]", self.explain_fraction)));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        if self.explainer.batch_size == 0 || !(self.explainer.lr > 0.0) || self.explainer.hidden_dim == 0 {
            return Err(Error::config("explainer batch_size, lr and hidden_dim must be positive"));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.disable_semantic {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn graph(&self) -> DcgcnConfig {
        DcgcnConfig {
            layers: self.layers,
            heads: self.heads,
            blocks: self.blocks,
            dim: self.dim,
        }
    }

    pub fn model_config(&self, vocabs: &Vocabs) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocabs.words.len(),
                embed_dim: self.embed_dim,
                hidden_dim: self.hidden_dim,
            },
            graph: self.graph(),
            num_types: vocabs.types.len(),
            num_labels: vocabs.labels.len(),
            entities: self.entities,
            alpha: self.effective_alpha(),
        }
    }

    /// The settings that determine a pre-trained base model, with the
    /// pruning-only knobs neutralized.
    pub fn pretrain_view(&self) -> RunConfig {
        RunConfig {
            beta: 0.0,
            kappa: 1,
            explain_fraction: 1.0,
            folds: 2,
            disable_pruning: true,
            explainer: ExplainerTraining::default(),
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Identifies a pre-training run by its effective settings and the ids of the
/// instances it saw.
pub fn pretrain_fingerprint(cfg: &RunConfig, train_ids: &[&str]) -> Result<String> {
    sha256_json(&(cfg.pretrain_view(), train_ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_parse_partially() {
        RunConfig::default().validate().unwrap();
        let cfg: RunConfig = serde_json::from_str(r#"{"heads": 3, "alpha": 0.5}"#).unwrap();
        assert_eq!((cfg.heads, cfg.alpha, cfg.blocks), (3, 0.5, 2));
        assert!(serde_json::from_str::<RunConfig>(r#"{"head": 3}"#).is_err());
        let nary: RunConfig = serde_json::from_str(r#"{"task": "n-ary", "entities": 3}"#).unwrap();
        nary.validate().unwrap();
    }

    #[test]
    fn invalid_settings() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(|c| c.alpha = 1.2);
        bad(|c| c.beta = -0.5);
        bad(|c| c.dim = 15);
        bad(|c| c.entities = 3);
        bad(|c| c.kappa = 0);
        bad(|c| c.explain_fraction = 0.0);
        bad(|c| c.heads = 0);
    }

    #[test]
    fn fingerprint_ignores_pruning_knobs() {
        let a = RunConfig::default();
        let b = RunConfig { beta: 0.3, kappa: 5, ..a.clone() };
        let c = RunConfig { seed: 8, ..a.clone() };
        let ids = ["x", "y"];
        let fa = pretrain_fingerprint(&a, &ids).unwrap();
        assert_eq!(fa.len(), 64);
        assert_eq!(fa, pretrain_fingerprint(&b, &ids).unwrap());
        assert_ne!(fa, pretrain_fingerprint(&c, &ids).unwrap());
        assert_ne!(fa, pretrain_fingerprint(&a, &ids[..1]).unwrap());
    }

    #[test]
    fn disable_semantic_forces_tree_gate() {
        let cfg = RunConfig { disable_semantic: true, alpha: 0.2, ..Default::default() };
        assert_eq!(cfg.effective_alpha(), 1.0);
    }
}
