//! Causal explanations of forest edges: leave-one-edge-out attribution, the
//! graph explainer that learns to predict it, and explainer-guided pruning.

mod attribution;
mod train;

pub use attribution::{
    build_explanation_dataset, edge_contribution, edge_contributions, remove_edge, select_top_k,
    EdgeContribution, ExplanationRecord,
};
pub use train::{explainer_loss, train_explainer, ExplainerObjective, ExplainerTraining, TrainedExplainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::check_unit_interval;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EXPLAINER_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    /// Width of the node features the explainer reads.
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Two graph-convolution layers followed by an inner-product decoder.
#[derive(Clone, Debug)]
pub struct Explainer {
    cfg: ExplainerConfig,
    store: ParameterStore,
    w0: ParamId,
    w1: ParamId,
}

/// Explainer weights bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExplainerVars {
    w0: Var,
    w1: Var,
}

impl Explainer {
    pub fn new(cfg: ExplainerConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden_dim == 0 {
            return Err(Error::config("explainer dimensions must be positive"));
        }
        let mut store = ParameterStore::new(seed);
        let w0 = store.add_weight("explainer.gcn0.w", cfg.input_dim, cfg.hidden_dim)?;
        let w1 = store.add_weight("explainer.gcn1.w", cfg.hidden_dim, cfg.hidden_dim)?;
        Ok(Explainer { cfg, store, w0, w1 })
    }

    pub fn config(&self) -> ExplainerConfig {
        self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Frozen binding records the weights as constants, so nothing upstream of
    /// the explainer can move them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ExplainerVars {
        let mut get = |id: ParamId| {
            if trainable {
                tape.param(&self.store, id)
            } else {
                tape.constant(self.store.get(id).clone())
            }
        };
        ExplainerVars {
            w0: get(self.w0),
            w1: get(self.w1),
        }
    }

    /// `X` for a forest and node-feature matrix given as plain values.
    pub fn explain_values(&self, f: &Tensor, h0: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let (fv, hv) = (tape.constant(f.clone()), tape.constant(h0.clone()));
        let x = vars.explain(&mut tape, fv, hv)?;
        Ok(tape.value(x).clone())
    }
}

impl ExplainerVars {
    /// Node embeddings `Z = relu(F relu(F H0 W0) W1)`.
    pub fn encode(&self, tape: &mut Tape, f: Var, h0: Var) -> Result<Var> {
        let (n, c) = tape.value(f).dims2()?;
        let (hn, hd) = tape.value(h0).dims2()?;
        let wd = tape.value(self.w0).dims2()?.0;
        if n != c || hn != n || hd != wd {
            return Err(Error::shape(format!(
                "explainer got a {n}x{c} forest with {hn}x{hd} features, expects width {wd}"
            )));
        }
        let mut z = h0;
        for w in [self.w0, self.w1] {
            let agg = tape.matmul(f, z)?;
            let lin = tape.matmul(agg, w)?;
            z = tape.relu(lin);
        }
        Ok(z)
    }

    /// Pre-sigmoid scores `Z Zᵀ`.
    pub fn logits(&self, tape: &mut Tape, f: Var, h0: Var) -> Result<Var> {
        let z = self.encode(tape, f, h0)?;
        tape.matmul_nt(z, z)
    }

    /// `X = sigmoid(Z Zᵀ)`.
    pub fn explain(&self, tape: &mut Tape, f: Var, h0: Var) -> Result<Var> {
        let s = self.logits(tape, f, h0)?;
        Ok(tape.sigmoid(s))
    }
}

/// `row_softmax(F ⊙ (1 + beta X))`.
pub fn causal_prune(tape: &mut Tape, f: Var, x: Var, beta: f64) -> Result<Var> {
    check_unit_interval("beta", beta)?;
    if tape.value(f).shape() != tape.value(x).shape() {
        return Err(Error::shape("forest and explanation differ in shape"));
    }
    let bx = tape.scale(x, beta);
    let gate = tape.add_scalar(bx, 1.0);
    let weighted = tape.mul(f, gate)?;
    tape.row_softmax(weighted)
}
