use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::causal::{Explainer, ExplainerConfig, ExplainerTraining};
use crate::corpus::TypeVocab;
use crate::error::{Error, Result};
use crate::model::{Model, Vocabs};
use crate::params::ParameterStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn snapshot(store: &ParameterStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        })
        .collect()
}

/// Overwrites every parameter of `store` from `tensors`, which must list
/// exactly the same names in the same order.
fn restore(store: &mut ParameterStore, tensors: &[NamedTensor]) -> Result<()> {
    let expected: Vec<String> = store.names().map(str::to_string).collect();
    let found: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != found {
        let missing: Vec<&String> = expected.iter().filter(|n| !found.contains(&n.as_str())).collect();
        let extra: Vec<&&str> = found.iter().filter(|n| !expected.iter().any(|e| e == **n)).collect();
        return Err(Error::Checkpoint(format!(
            "tensor list does not match the model layout (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for t in tensors {
        store.load_values(&t.name, &t.shape, t.values.clone())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: Stage,
    /// Fingerprint of the pre-training run this model descends from.
    pub pretrain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainerCheckpoint {
    pub format_version: u32,
    pub config: ExplainerConfig,
    pub training: ExplainerTraining,
    pub seed: u64,
    /// Fingerprint of the pre-trained model whose attributions it learned.
    pub source_pretrain: String,
    pub epoch_losses: Vec<f64>,
    pub tensors: Vec<NamedTensor>,
}

impl ExplainerCheckpoint {
    pub fn new(
        explainer: &Explainer,
        training: ExplainerTraining,
        seed: u64,
        source_pretrain: String,
        epoch_losses: Vec<f64>,
    ) -> Self {
        ExplainerCheckpoint {
            format_version: FORMAT_VERSION,
            config: explainer.config(),
            training,
            seed,
            source_pretrain,
            epoch_losses,
            tensors: snapshot(explainer.store()),
        }
    }

    pub fn explainer(&self) -> Result<Explainer> {
        check_version(self.format_version)?;
        let mut ex = Explainer::new(self.config, self.seed)?;
        restore(ex.store_mut(), &self.tensors)?;
        Ok(ex)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub vocab: Vocabs,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
    /// The frozen explainer a full model was trained with.
    pub explainer: Option<ExplainerCheckpoint>,
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {v} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        config: RunConfig,
        vocab: Vocabs,
        provenance: Provenance,
        model: &Model,
        explainer: Option<ExplainerCheckpoint>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            vocab,
            provenance,
            tensors: snapshot(model.store()),
            explainer,
        }
    }

    /// Rebuilds the model, checking every tensor against the configured layout.
    pub fn model(&self) -> Result<Model> {
        check_version(self.format_version)?;
        self.config.validate()?;
        TypeVocab::from_list(self.vocab.types.types().to_vec())?;
        let mut model = Model::new(self.config.model_config(&self.vocab), self.config.seed)?;
        restore(model.store_mut(), &self.tensors)?;
        Ok(model)
    }

    pub fn explainer(&self) -> Result<Option<Explainer>> {
        self.explainer.as_ref().map(ExplainerCheckpoint::explainer).transpose()
    }
}

/// Compact JSON with a trailing newline; identical values give identical bytes.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticConfig};

    fn small() -> (Checkpoint, Model) {
        let corpus = gen_synthetic(&SyntheticConfig { num_instances: 4, ..Default::default() }).unwrap();
        let vocab = Vocabs::from_training(&corpus.instances, corpus.labels.clone());
        let cfg = RunConfig { dim: 4, embed_dim: 4, hidden_dim: 3, ..Default::default() };
        let model = Model::new(cfg.model_config(&vocab), cfg.seed).unwrap();
        let prov = Provenance { stage: Stage::Pretrain, pretrain: "abc".into() };
        (Checkpoint::new(cfg, vocab, prov, &model, None), model)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (ckpt, model) = small();
        let bytes = to_json_bytes(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(to_json_bytes(&back).unwrap(), bytes);
        let rebuilt = back.model().unwrap();
        for ((n1, t1), (n2, t2)) in model.store().iter().zip(rebuilt.store().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.values(), t2.values());
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let (mut ckpt, _) = small();
        ckpt.tensors[0].shape = vec![1, 1];
        assert!(matches!(ckpt.model(), Err(Error::Checkpoint(_))));
        let (mut ckpt, _) = small();
        ckpt.tensors.pop();
        let err = ckpt.model().unwrap_err().to_string();
        assert!(err.contains("head.out.b"), "{err}");
        let (mut ckpt, _) = small();
        ckpt.format_version = 99;
        assert!(ckpt.model().is_err());
        let (mut ckpt, _) = small();
        ckpt.config.heads = 3;
        assert!(ckpt.model().is_err());
    }

    #[test]
    fn explainer_round_trip() {
        let ex = Explainer::new(ExplainerConfig { input_dim: 6, hidden_dim: 16 }, 4).unwrap();
        let ck = ExplainerCheckpoint::new(&ex, ExplainerTraining::default(), 4, "p".into(), vec![0.5, 0.25]);
        let bytes = to_json_bytes(&ck).unwrap();
        let back: ExplainerCheckpoint = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, ck);
        let ex2 = back.explainer().unwrap();
        assert_eq!(
            ex.store().by_name("explainer.gcn1.w").unwrap().values(),
            ex2.store().by_name("explainer.gcn1.w").unwrap().values()
        );
    }
}
