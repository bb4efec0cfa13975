//! Densely-connected graph convolution over a (pruned) forest, and the linear
//! fusion of the per-head outputs of a block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcgcnConfig {
    /// Layers per sub-encoder.
    pub layers: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Block feature width; must be a multiple of `layers`.
    pub dim: usize,
}

impl DcgcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.blocks == 0 || self.dim == 0 {
            return Err(Error::config("layers, heads, blocks and dim must all be positive"));
        }
        if !self.dim.is_multiple_of(self.layers) {
            return Err(Error::config(format!(
                "dim {} is not divisible by the layer count {}",
                self.dim, self.layers
            )));
        }
        Ok(())
    }

    pub fn layer_width(&self) -> usize {
        self.dim / self.layers
    }
}

/// Weights of one densely-connected stack; layer `l` maps
/// `dim + l * dim / layers` inputs to `dim / layers` outputs.
#[derive(Clone, Debug)]
pub struct DenseStack {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl DenseStack {
    pub fn register(store: &mut ParameterStore, prefix: &str, cfg: &DcgcnConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.layer_width();
        let layers = (0..cfg.layers)
            .map(|l| {
                let fan_in = cfg.dim + l * w;
                Ok((
                    store.add_weight(&format!("{prefix}.gcn{l}.w"), fan_in, w)?,
                    store.add_bias(&format!("{prefix}.gcn{l}.b"), w)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(DenseStack { layers })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
            .collect()
    }
}

/// Layer `l` computes `relu(F̂ (g W + b))` where `g` concatenates the block
/// input with every earlier layer's output; the result concatenates all layer
/// outputs back to the input width.
pub fn encode_forest(tape: &mut Tape, f_hat: Var, h_in: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let (n, d) = tape.value(h_in).dims2()?;
    let (fr, fc) = tape.value(f_hat).dims2()?;
    if fr != n || fc != n {
        return Err(Error::shape(format!("forest {fr}x{fc} for {n} nodes")));
    }
    if layers.is_empty() || d % layers.len() != 0 {
        return Err(Error::config(format!("dim {d} not divisible by {} layers", layers.len())));
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(layers.len());
    for &(w, b) in layers {
        let g = if outputs.is_empty() {
            h_in
        } else {
            let mut parts = vec![h_in];
            parts.extend_from_slice(&outputs);
            tape.concat_cols(&parts)?
        };
        let gw = tape.matmul(g, w)?;
        let gw = tape.add_row(gw, b)?;
        let agg = tape.matmul(f_hat, gw)?;
        outputs.push(tape.relu(agg));
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_cols(&outputs)
    }
}

/// `Linear([H^1; …; H^N])`.
pub fn fuse_heads(tape: &mut Tape, head_outputs: &[Var], w: Var, b: Var) -> Result<Var> {
    let first = *head_outputs.first().ok_or_else(|| Error::shape("no head outputs"))?;
    let shape = tape.value(first).shape().to_vec();
    if head_outputs.iter().any(|&h| tape.value(h).shape() != shape.as_slice()) {
        return Err(Error::shape("head outputs differ in shape"));
    }
    let cat = tape.concat_cols(head_outputs)?;
    let z = tape.matmul(cat, w)?;
    tape.add_row(z, b)
}
