use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExplanationRecord, Explainer, ExplainerConfig, DEFAULT_EXPLAINER_HIDDEN};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// What the explainer is fit to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainerObjective {
    /// Binary cross-entropy against the top-𝒦 edge mask.
    #[default]
    MaskBce,
    /// Squared error of `X` against min-max scaled deltas.
    DeltaRegression,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerTraining {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub objective: ExplainerObjective,
}

impl Default for ExplainerTraining {
    fn default() -> Self {
        ExplainerTraining {
            hidden_dim: DEFAULT_EXPLAINER_HIDDEN,
            epochs: 50,
            lr: 0.1,
            batch_size: 8,
            clip: 5.0,
            objective: ExplainerObjective::MaskBce,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedExplainer {
    pub explainer: Explainer,
    /// Mean per-record loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

fn off_diagonal(n: usize) -> Tensor {
    let mut m = Tensor::filled(n, n, 1.0);
    for i in 0..n {
        m.set(i, i, 0.0);
    }
    m
}

/// Loss of one record averaged over its forests; gradients go to the explainer
/// when `backward` is set. `None` for single-token records, which have no
/// candidate edges.
fn record_loss(ex: &mut Explainer, rec: &ExplanationRecord, objective: ExplainerObjective, backward: bool) -> Result<Option<f64>> {
    let n = rec.n();
    if n < 2 {
        return Ok(None);
    }
    let mask = off_diagonal(n);
    let target = match objective {
        ExplainerObjective::MaskBce => rec.topk_mask(),
        ExplainerObjective::DeltaRegression => rec.normalized_deltas(),
    };
    let mut tape = Tape::new();
    let vars = ex.bind(&mut tape, backward);
    let h0 = tape.constant(rec.node_features.clone());
    let mut losses = Vec::with_capacity(rec.forests.len());
    for f in &rec.forests {
        let fv = tape.constant(f.clone());
        let l = match objective {
            ExplainerObjective::MaskBce => {
                let s = vars.logits(&mut tape, fv, h0)?;
                tape.masked_bce_with_logits(s, target.clone(), mask.clone())?
            }
            ExplainerObjective::DeltaRegression => {
                let x = vars.explain(&mut tape, fv, h0)?;
                tape.masked_squared_error(x, target.clone(), mask.clone())?
            }
        };
        losses.push(l);
    }
    let cat = tape.concat_cols(&losses)?;
    let total = tape.sum(cat);
    let mean = tape.scale(total, 1.0 / losses.len() as f64);
    let value = tape.value(mean).values()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("explainer loss {value} on {}", rec.id)));
    }
    if backward {
        tape.backward(mean, ex.store_mut())?;
    }
    Ok(Some(value))
}

/// Minibatch SGD on the explanation records. Record order is reshuffled each
/// epoch from `seed`; weights are initialized from the same seed.
pub fn train_explainer(records: &[ExplanationRecord], cfg: &ExplainerTraining, seed: u64) -> Result<TrainedExplainer> {
    let first = records.first().ok_or_else(|| Error::config("no explanation records"))?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("explainer batch size and learning rate must be positive"));
    }
    let input_dim = first.node_features.cols();
    if let Some(r) = records.iter().find(|r| r.node_features.cols() != input_dim) {
        return Err(Error::shape(format!("record {} has feature width {}", r.id, r.node_features.cols())));
    }
    let mut explainer = Explainer::new(
        ExplainerConfig {
            input_dim,
            hidden_dim: cfg.hidden_dim,
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            explainer.store_mut().zero_grad();
            let mut used = 0usize;
            for &i in batch {
                if let Some(l) = record_loss(&mut explainer, &records[i], cfg.objective, true)? {
                    sum += l;
                    used += 1;
                }
            }
            if used > 0 {
                explainer.store_mut().scale_grad(1.0 / used as f64);
                explainer.store_mut().sgd_step(cfg.lr, Some(cfg.clip))?;
            }
            count += used;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(TrainedExplainer { explainer, epoch_losses })
}

/// Mean loss of a fixed explainer over the records.
pub fn explainer_loss(explainer: &Explainer, records: &[ExplanationRecord], objective: ExplainerObjective) -> Result<f64> {
    let mut ex = explainer.clone();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in records {
        if let Some(l) = record_loss(&mut ex, r, objective, false)? {
            sum += l;
            count += 1;
        }
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}
