//! Max-pooled sentence and entity representations and the relation classifier.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::argmax;

pub fn pool_sentence(tape: &mut Tape, h: Var) -> Result<Var> {
    let n = tape.value(h).dims2()?.0;
    let rows: Vec<usize> = (0..n).collect();
    tape.max_rows(h, &rows)
}

pub fn pool_entity(tape: &mut Tape, h: Var, mention: &[usize]) -> Result<Var> {
    tape.max_rows(h, mention)
}

/// Two-layer classifier: `[h_S; h_E1; …; h_EQ]` → ReLU hidden layer of width
/// `dim` → `m` logits.
#[derive(Clone, Debug)]
pub struct RelationHead {
    entities: usize,
    ffnn_w: ParamId,
    ffnn_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub loss: Option<f64>,
}

impl RelationHead {
    pub fn register(store: &mut ParameterStore, dim: usize, entities: usize, labels: usize) -> Result<Self> {
        if !(2..=3).contains(&entities) {
            return Err(Error::config(format!("entity count must be 2 or 3, got {entities}")));
        }
        if labels < 1 {
            return Err(Error::config("label vocabulary is empty"));
        }
        Ok(RelationHead {
            entities,
            ffnn_w: store.add_weight("head.ffnn.w", (1 + entities) * dim, dim)?,
            ffnn_b: store.add_bias("head.ffnn.b", dim)?,
            out_w: store.add_weight("head.out.w", dim, labels)?,
            out_b: store.add_bias("head.out.b", labels)?,
        })
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    /// `1 x m` logits from the pooled sentence row and one pooled row per entity
    /// role, in role order.
    pub fn logits(&self, tape: &mut Tape, store: &ParameterStore, h_s: Var, h_e: &[Var]) -> Result<Var> {
        if h_e.len() != self.entities {
            return Err(Error::config(format!(
                "model expects {} entity mentions, got {}",
                self.entities,
                h_e.len()
            )));
        }
        let mut parts = vec![h_s];
        parts.extend_from_slice(h_e);
        let x = tape.concat_cols(&parts)?;
        let w1 = tape.param(store, self.ffnn_w);
        let b1 = tape.param(store, self.ffnn_b);
        let z = tape.matmul(x, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z);
        let w2 = tape.param(store, self.out_w);
        let b2 = tape.param(store, self.out_b);
        let z = tape.matmul(z, w2)?;
        tape.add_row(z, b2)
    }

    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h_s: Var,
        h_e: &[Var],
        gold: Option<usize>,
    ) -> Result<(Var, PredictionOutput)> {
        let logits = self.logits(tape, store, h_s, h_e)?;
        let values = tape.value(logits).values().to_vec();
        let loss = match gold {
            Some(g) => {
                let l = tape.cross_entropy(logits, g)?;
                Some(tape.value(l).values()[0])
            }
            None => None,
        };
        Ok((
            logits,
            PredictionOutput {
                predicted: argmax(&values),
                logits: values,
                loss,
            },
        ))
    }
}
