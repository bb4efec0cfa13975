use std::fmt::Write;

use cpforest_core::causal::Explainer;
use cpforest_core::corpus::Instance;
use cpforest_core::model::{Example, Model};
use cpforest_core::{Result, Tensor};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceExplanation {
    pub id: String,
    pub tokens: Vec<String>,
    /// Token positions of every entity mention.
    pub entity_tokens: Vec<usize>,
    pub edges: Vec<RankedEdge>,
}

/// Mean of the explanation matrices of every head and block.
pub fn averaged_explanation(model: &Model, explainer: &Explainer, ex: &Example) -> Result<Tensor> {
    let (forests, h0) = model.forests(ex)?;
    let mut sum: Option<Tensor> = None;
    for f in &forests {
        let x = explainer.explain_values(f, &h0)?;
        sum = Some(match sum {
            None => x,
            Some(s) => {
                let mut s = s;
                for (a, b) in s.values_mut().iter_mut().zip(x.values()) {
                    *a += b;
                }
                s
            }
        });
    }
    let k = forests.len() as f64;
    Ok(sum.expect("a model has at least one forest").map(|v| v / k))
}

/// The `top` unordered pairs `i < j` with the largest weight; ties go to the
/// lexicographically smaller pair.
pub fn rank_pairs(x: &Tensor, top: usize) -> Vec<RankedEdge> {
    let n = x.rows();
    let mut edges: Vec<RankedEdge> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| RankedEdge {
            i,
            j,
            weight: 0.5 * (x.get(i, j) + x.get(j, i)),
        })
        .collect();
    edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then((a.i, a.j).cmp(&(b.i, b.j))));
    edges.truncate(top);
    edges
}

pub fn explain_instance(
    model: &Model,
    explainer: &Explainer,
    inst: &Instance,
    ex: &Example,
    top: usize,
) -> Result<InstanceExplanation> {
    let x = averaged_explanation(model, explainer, ex)?;
    let mut entity_tokens: Vec<usize> = inst.entities.iter().flat_map(|e| e.token_indices.iter().copied()).collect();
    entity_tokens.sort_unstable();
    entity_tokens.dedup();
    Ok(InstanceExplanation {
        id: inst.id.clone(),
        tokens: inst.tokens.clone(),
        entity_tokens,
        edges: rank_pairs(&x, top),
    })
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Undirected DOT graph: one node per token, entity tokens filled, one edge
/// per ranked pair with pen width proportional to its weight.
pub fn to_dot(e: &InstanceExplanation) -> String {
    let mut s = String::new();
    writeln!(s, "graph {} {{", quote(&e.id)).unwrap();
    writeln!(s, "  node [shape=box, fontname=\"Helvetica\"];").unwrap();
    for (k, tok) in e.tokens.iter().enumerate() {
        let style = if e.entity_tokens.contains(&k) {
            ", style=filled, fillcolor=\"#f4c542\""
        } else {
            ""
        };
        writeln!(s, "  t{k} [label={}{style}];", quote(&format!("{k}:{tok}"))).unwrap();
    }
    for edge in &e.edges {
        writeln!(
            s,
            "  t{} -- t{} [penwidth={:.4}, label=\"{:.4}\"];",
            edge.i,
            edge.j,
            6.0 * edge.weight,
            edge.weight
        )
        .unwrap();
    }
    s.push_str("}\n");
    s
}
