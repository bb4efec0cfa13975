//! The two-stage protocol: pre-train without pruning, attribute, fit the
//! explainer, then train the full model with pruning; plus evaluation,
//! cross-validation, grid sweeps and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod study;

pub use checkpoint::{
    read_json, to_json_bytes, Checkpoint, ExplainerCheckpoint, NamedTensor, Provenance, Stage, FORMAT_VERSION,
};
pub use config::{pretrain_fingerprint, sha256_json, RunConfig, Task};
pub use metrics::{BucketMetrics, ClassMetrics, Metrics, Outcome, BUCKETS};
pub use study::{crossval, sweep, sweep_csv, CrossvalReport, SweepGrid, SweepRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::causal::{build_explanation_dataset, train_explainer, Explainer, ExplanationRecord};
use crate::corpus::{Instance, LabelVocab};
use crate::error::{Error, Result};
use crate::head::PredictionOutput;
use crate::model::{Example, ForwardOptions, Model, Pruning, Vocabs};

/// Independent random streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 1;
const SUBSET_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Resolves instances against `vocabs`; an unknown relation label is a
/// configuration error.
pub fn prepare_examples(instances: &[Instance], vocabs: &Vocabs) -> Result<Vec<Example>> {
    instances
        .iter()
        .map(|inst| {
            Example::new(inst, vocabs).map_err(|e| match e {
                Error::Vocab(msg) => Error::config(format!("instance {}: {msg}", inst.id)),
                other => other,
            })
        })
        .collect()
}

fn ids(instances: &[Instance]) -> Vec<&str> {
    instances.iter().map(|i| i.id.as_str()).collect()
}

/// Minibatch SGD with seeded shuffling; returns the mean loss of each epoch.
pub fn fit(model: &mut Model, examples: &[Example], cfg: &RunConfig, pruning: Pruning<'_>) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let opts = ForwardOptions::with_pruning(pruning);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store_mut().zero_grad();
            for &i in batch {
                total += model.accumulate_gradient(&examples[i], opts)?;
            }
            model.store_mut().scale_grad(1.0 / batch.len() as f64);
            model.store_mut().sgd_step(cfg.lr, Some(cfg.clip))?;
        }
        losses.push(total / examples.len() as f64);
    }
    Ok(losses)
}

/// A trained model together with its checkpoint.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

/// Stage one: the model trained without the pruning step.
pub fn pretrain_base(cfg: &RunConfig, train: &[Instance], labels: &LabelVocab) -> Result<RunOutput> {
    cfg.validate()?;
    let cfg = RunConfig { disable_pruning: true, ..cfg.clone() };
    let vocabs = Vocabs::from_training(train, labels.clone());
    let examples = prepare_examples(train, &vocabs)?;
    let mut model = Model::new(cfg.model_config(&vocabs), cfg.seed)?;
    let epoch_losses = fit(&mut model, &examples, &cfg, Pruning::Disabled)?;
    let provenance = Provenance {
        stage: Stage::Pretrain,
        pretrain: pretrain_fingerprint(&cfg, &ids(train))?,
    };
    Ok(RunOutput {
        checkpoint: Checkpoint::new(cfg, vocabs, provenance, &model, None),
        model,
        epoch_losses,
    })
}

/// The seeded subset of `train` used for attribution, in corpus order.
pub fn explanation_subset<'a>(cfg: &RunConfig, train: &'a [Instance]) -> Vec<&'a Instance> {
    let k = ((train.len() as f64 * cfg.explain_fraction).ceil() as usize).max(1).min(train.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut stream(cfg.seed, SUBSET_STREAM));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| &train[i]).collect()
}

/// Attribution records from a pre-trained checkpoint over the explanation
/// subset of `train`.
pub fn explanation_records(base: &Checkpoint, train: &[Instance], jobs: usize) -> Result<Vec<ExplanationRecord>> {
    let model = base.model()?;
    let subset: Vec<Instance> = explanation_subset(&base.config, train).into_iter().cloned().collect();
    let examples = prepare_examples(&subset, &base.vocab)?;
    build_explanation_dataset(&model, &examples, base.config.kappa, jobs)
}

pub fn fit_explainer(base: &Checkpoint, records: &[ExplanationRecord]) -> Result<ExplainerCheckpoint> {
    let cfg = &base.config;
    let trained = train_explainer(records, &cfg.explainer, cfg.seed)?;
    Ok(ExplainerCheckpoint::new(
        &trained.explainer,
        cfg.explainer,
        cfg.seed,
        base.provenance.pretrain.clone(),
        trained.epoch_losses,
    ))
}

/// Stage two: a fresh model seeded like the base, trained with the frozen
/// explainer pruning every forest. The explainer must come from the
/// pre-training run `cfg` and `train` describe unless `allow_mismatch`.
pub fn train_full(
    cfg: &RunConfig,
    train: &[Instance],
    labels: &LabelVocab,
    explainer: &ExplainerCheckpoint,
    allow_mismatch: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    let fingerprint = pretrain_fingerprint(cfg, &ids(train))?;
    if explainer.source_pretrain != fingerprint && !allow_mismatch {
        return Err(Error::config(format!(
            "explainer was trained from pre-training run {} but this configuration and data describe {}",
            explainer.source_pretrain, fingerprint
        )));
    }
    let vocabs = Vocabs::from_training(train, labels.clone());
    let examples = prepare_examples(train, &vocabs)?;
    let frozen = explainer.explainer()?;
    let mut model = Model::new(cfg.model_config(&vocabs), cfg.seed)?;
    let pruning = pruning_for(cfg, Some(&frozen));
    let epoch_losses = fit(&mut model, &examples, cfg, pruning)?;
    let provenance = Provenance {
        stage: Stage::Full,
        pretrain: fingerprint,
    };
    Ok(RunOutput {
        checkpoint: Checkpoint::new(cfg.clone(), vocabs, provenance, &model, Some(explainer.clone())),
        model,
        epoch_losses,
    })
}

fn pruning_for<'a>(cfg: &RunConfig, explainer: Option<&'a Explainer>) -> Pruning<'a> {
    match explainer {
        Some(explainer) if !cfg.disable_pruning => Pruning::Causal {
            explainer,
            beta: cfg.beta,
        },
        _ => Pruning::Disabled,
    }
}

/// Everything the full protocol produces for one training set.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub base: RunOutput,
    pub records: Vec<ExplanationRecord>,
    pub explainer: ExplainerCheckpoint,
    pub full: RunOutput,
}

pub fn run_pipeline(cfg: &RunConfig, train: &[Instance], labels: &LabelVocab, jobs: usize) -> Result<PipelineOutput> {
    let base = pretrain_base(cfg, train, labels)?;
    let records = explanation_records(&base.checkpoint, train, jobs)?;
    let explainer = fit_explainer(&base.checkpoint, &records)?;
    let full = train_full(cfg, train, labels, &explainer, false)?;
    Ok(PipelineOutput {
        base,
        records,
        explainer,
        full,
    })
}

/// A checkpoint ready for inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: RunConfig,
    pub vocabs: Vocabs,
    pub stage: Stage,
    pub model: Model,
    pub explainer: Option<Explainer>,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Predictor {
            config: ckpt.config.clone(),
            vocabs: ckpt.vocab.clone(),
            stage: ckpt.provenance.stage,
            model: ckpt.model()?,
            explainer: ckpt.explainer()?,
        })
    }

    pub fn options(&self) -> ForwardOptions<'_> {
        ForwardOptions::with_pruning(pruning_for(&self.config, self.explainer.as_ref()))
    }

    pub fn example(&self, inst: &Instance) -> Result<Example> {
        Ok(prepare_examples(std::slice::from_ref(inst), &self.vocabs)?.remove(0))
    }

    pub fn predict(&self, inst: &Instance) -> Result<PredictionOutput> {
        self.model.predict(&self.example(inst)?, self.options())
    }

    pub fn evaluate(&self, test: &[Instance]) -> Result<Metrics> {
        if inst_entities_mismatch(test, self.config.entities) {
            return Err(Error::config(format!(
                "checkpoint expects {} entities per instance",
                self.config.entities
            )));
        }
        let examples = prepare_examples(test, &self.vocabs)?;
        let outcomes = examples
            .iter()
            .map(|ex| {
                let out = self.model.predict(ex, self.options())?;
                Ok(Outcome {
                    gold: ex.gold.unwrap_or(usize::MAX),
                    predicted: out.predicted,
                    tokens: ex.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics::compute(&outcomes, &self.vocabs.labels, &self.config.negative_label))
    }
}

fn inst_entities_mismatch(test: &[Instance], entities: usize) -> bool {
    test.iter().any(|i| i.entities.len() != entities)
}

pub fn evaluate(ckpt: &Checkpoint, test: &[Instance]) -> Result<Metrics> {
    Predictor::from_checkpoint(ckpt)?.evaluate(test)
}
