use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ForwardOptions, Model, Pruning};
use crate::parallel::par_map;
use crate::tensor::Tensor;

/// Loss increase when the unordered pair `{i, j}` is cut from every forest.
/// Serialized as `[i, j, delta]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct EdgeContribution {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

impl From<(usize, usize, f64)> for EdgeContribution {
    fn from((i, j, delta): (usize, usize, f64)) -> Self {
        EdgeContribution { i, j, delta }
    }
}

impl From<EdgeContribution> for (usize, usize, f64) {
    fn from(e: EdgeContribution) -> Self {
        (e.i, e.j, e.delta)
    }
}

/// One explainer training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordRepr", into = "RecordRepr")]
pub struct ExplanationRecord {
    pub id: String,
    /// Forest snapshots, block-major.
    pub forests: Vec<Tensor>,
    pub node_features: Tensor,
    /// Every unordered pair `i < j`, in lexicographic order.
    pub deltas: Vec<EdgeContribution>,
    /// Highest-delta pairs in rank order.
    pub topk: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordRepr {
    id: String,
    forests: Vec<Vec<Vec<f64>>>,
    node_features: Vec<Vec<f64>>,
    deltas: Vec<EdgeContribution>,
    topk: Vec<(usize, usize)>,
}

impl From<ExplanationRecord> for RecordRepr {
    fn from(r: ExplanationRecord) -> Self {
        RecordRepr {
            id: r.id,
            forests: r.forests.iter().map(Tensor::to_rows).collect(),
            node_features: r.node_features.to_rows(),
            deltas: r.deltas,
            topk: r.topk,
        }
    }
}

impl TryFrom<RecordRepr> for ExplanationRecord {
    type Error = Error;

    fn try_from(r: RecordRepr) -> Result<Self> {
        let rec = ExplanationRecord {
            forests: r.forests.iter().map(|f| Tensor::from_rows(f)).collect::<Result<_>>()?,
            node_features: Tensor::from_rows(&r.node_features)?,
            id: r.id,
            deltas: r.deltas,
            topk: r.topk,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl ExplanationRecord {
    pub fn n(&self) -> usize {
        self.node_features.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let invalid = |msg: String| Error::Invalid { id: self.id.clone(), msg };
        if self.forests.is_empty() {
            return Err(invalid("no forests".into()));
        }
        if let Some(f) = self.forests.iter().find(|f| f.shape() != [n, n]) {
            return Err(invalid(format!("forest shape {:?} for {n} nodes", f.shape())));
        }
        for e in &self.deltas {
            if e.i >= e.j || e.j >= n {
                return Err(invalid(format!("bad edge ({}, {})", e.i, e.j)));
            }
            if !e.delta.is_finite() {
                return Err(invalid(format!("non-finite delta on ({}, {})", e.i, e.j)));
            }
        }
        for &(i, j) in &self.topk {
            if !self.deltas.iter().any(|e| (e.i, e.j) == (i, j)) {
                return Err(invalid(format!("top edge ({i}, {j}) has no delta")));
            }
        }
        Ok(())
    }

    /// Symmetric 0/1 matrix marking the top edges.
    pub fn topk_mask(&self) -> Tensor {
        let n = self.n();
        let mut y = Tensor::zeros(n, n);
        for &(i, j) in &self.topk {
            y.set(i, j, 1.0);
            y.set(j, i, 1.0);
        }
        y
    }

    /// Symmetric matrix of deltas min-max scaled to `[0, 1]`; all zeros when
    /// every delta is equal.
    pub fn normalized_deltas(&self) -> Tensor {
        let n = self.n();
        let lo = self.deltas.iter().map(|e| e.delta).fold(f64::INFINITY, f64::min);
        let hi = self.deltas.iter().map(|e| e.delta).fold(f64::NEG_INFINITY, f64::max);
        let mut y = Tensor::zeros(n, n);
        if hi > lo {
            for e in &self.deltas {
                let v = (e.delta - lo) / (hi - lo);
                y.set(e.i, e.j, v);
                y.set(e.j, e.i, v);
            }
        }
        y
    }
}

/// Copies of `forests` with cells `(i, j)` and `(j, i)` zeroed, rows left
/// unnormalized.
pub fn remove_edge(forests: &[Tensor], i: usize, j: usize) -> Vec<Tensor> {
    forests
        .iter()
        .map(|f| {
            let mut g = f.clone();
            g.set(i, j, 0.0);
            g.set(j, i, 0.0);
            g
        })
        .collect()
}

fn supplied(forests: &[Tensor]) -> ForwardOptions<'_> {
    ForwardOptions {
        pruning: Pruning::Disabled,
        forests: Some(forests),
    }
}

fn check_pair(ex: &Example, i: usize, j: usize) -> Result<()> {
    let n = ex.len();
    if i >= n || j >= n {
        return Err(Error::Index(format!("edge ({i}, {j}) out of range for {n} tokens in {}", ex.id)));
    }
    if i == j {
        return Err(Error::Index(format!("self-loop ({i}, {i}) is not a candidate edge")));
    }
    Ok(())
}

/// `CE(forests without {i, j}) - CE(forests)` under the unpruned model.
pub fn edge_contribution(model: &Model, ex: &Example, forests: &[Tensor], i: usize, j: usize) -> Result<EdgeContribution> {
    check_pair(ex, i, j)?;
    let base = model.loss(ex, supplied(forests))?;
    let cut = model.loss(ex, supplied(&remove_edge(forests, i, j)))?;
    let (i, j) = (i.min(j), i.max(j));
    Ok(EdgeContribution { i, j, delta: cut - base })
}

/// Contributions of every unordered pair `i < j`, in lexicographic order.
pub fn edge_contributions(model: &Model, ex: &Example, forests: &[Tensor], jobs: usize) -> Result<Vec<EdgeContribution>> {
    let n = ex.len();
    let base = model.loss(ex, supplied(forests))?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    par_map(&pairs, jobs, |&(i, j)| {
        let cut = model.loss(ex, supplied(&remove_edge(forests, i, j)))?;
        let delta = cut - base;
        if !delta.is_finite() {
            return Err(Error::Diverged(format!("delta {delta} for ({i}, {j}) on {}", ex.id)));
        }
        Ok(EdgeContribution { i, j, delta })
    })
}

/// The `k` largest deltas, ties broken by ascending `(i, j)`.
pub fn select_top_k(deltas: &[EdgeContribution], k: usize) -> Vec<(usize, usize)> {
    let mut ranked: Vec<&EdgeContribution> = deltas.iter().collect();
    ranked.sort_by(|a, b| match b.delta.total_cmp(&a.delta) {
        Ordering::Equal => (a.i, a.j).cmp(&(b.i, b.j)),
        o => o,
    });
    ranked.into_iter().take(k).map(|e| (e.i, e.j)).collect()
}

/// Attribution records for each example, using the unpruned model's own forests.
pub fn build_explanation_dataset(
    model: &Model,
    examples: &[Example],
    kappa: usize,
    jobs: usize,
) -> Result<Vec<ExplanationRecord>> {
    if examples.is_empty() {
        return Err(Error::config("no instances to explain"));
    }
    if kappa == 0 {
        return Err(Error::config("kappa must be at least 1"));
    }
    examples
        .iter()
        .map(|ex| {
            let (forests, node_features) = model.forests(ex)?;
            let deltas = edge_contributions(model, ex, &forests, jobs)?;
            let topk = select_top_k(&deltas, kappa);
            Ok(ExplanationRecord {
                id: ex.id.clone(),
                forests,
                node_features,
                deltas,
                topk,
            })
        })
        .collect()
}
