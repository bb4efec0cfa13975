//! Dependency-forest generation: typed syntactic scores, per-head semantic
//! scores, and the switch gate that fuses them into a row-stochastic forest.

use crate::corpus::{TypedAdjacency, NONE_TYPE};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Score given to cells with no dependency edge.
pub const NO_EDGE_SCORE: f64 = -1e4;

/// `C[i][j]` = learnable score of type `t_ij`, or [`NO_EDGE_SCORE`] where there
/// is no edge. `table` is the `|types| x 1` score column.
pub fn type_scores(tape: &mut Tape, table: Var, adj: &TypedAdjacency) -> Result<Var> {
    let n = adj.n();
    let cells = adj
        .ids()
        .iter()
        .map(|&t| (t != NONE_TYPE).then_some(t))
        .collect();
    tape.lookup(table, n, cells, NO_EDGE_SCORE)
}

/// `A = (H Wq)(H Wk)ᵀ / sqrt(d)` with `d` the projected key width.
pub fn semantic_matrix(tape: &mut Tape, h: Var, wq: Var, wk: Var) -> Result<Var> {
    let d = tape.value(wk).dims2()?.1;
    if tape.value(wq).dims2()? != tape.value(wk).dims2()? {
        return Err(Error::shape("query and key projections differ in shape"));
    }
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let a = tape.matmul_nt(q, k)?;
    Ok(tape.scale(a, 1.0 / (d as f64).sqrt()))
}

pub fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// `F = row_softmax((1 - alpha) A + alpha C)`.
pub fn fuse_gate(tape: &mut Tape, a: Var, c: Var, alpha: f64) -> Result<Var> {
    check_unit_interval("alpha", alpha)?;
    let sa = tape.scale(a, 1.0 - alpha);
    let sc = tape.scale(c, alpha);
    let z = tape.add(sa, sc)?;
    tape.row_softmax(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_typed_adjacency, EntityMention, Instance, TypeVocab};
    use crate::gradcheck::finite_diff_check;
    use crate::params::ParameterStore;
    use crate::tensor::{row_softmax, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> (Instance, TypeVocab) {
        let heads = (0..n as i64).map(|i| i - 1).collect();
        let deprels = (0..n).map(|i| if i == 0 { "root".into() } else { format!("t{}", i % 2) }).collect();
        let inst = Instance {
            id: "c".into(),
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            sentence_breaks: vec![0],
            heads,
            deprels,
            entities: vec![
                EntityMention { role: 1, token_indices: vec![0] },
                EntityMention { role: 2, token_indices: vec![n - 1] },
            ],
            relation: "R".into(),
        };
        let types = TypeVocab::from_instances([&inst]);
        (inst, types)
    }

    #[test]
    fn unlinked_cells_are_masked() {
        let (inst, _) = chain(2);
        let types = TypeVocab::default();
        // two disconnected tokens: each is the root of its own sentence
        let mut two = inst.clone();
        two.heads = vec![-1, -1];
        two.sentence_breaks = vec![0, 1];
        let adj = build_typed_adjacency(&two, &types).unwrap();
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::matrix(2, 1, vec![0.0, 0.3]));
        let c = type_scores(&mut tape, table, &adj).unwrap();
        assert_eq!(tape.value(c).values(), &[0.3, NO_EDGE_SCORE, NO_EDGE_SCORE, 0.3]);
        let f = row_softmax(tape.value(c)).unwrap();
        assert!(f.get(0, 1) < 1e-300 && f.get(0, 0) == 1.0);
    }

    #[test]
    fn identical_adjacency_gives_identical_scores() {
        let (inst, types) = chain(5);
        let a1 = build_typed_adjacency(&inst, &types).unwrap();
        let a2 = build_typed_adjacency(&inst.clone(), &types).unwrap();
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::matrix(types.len(), 1, (1..=types.len()).map(|k| 0.1 * k as f64).collect()));
        let c1 = type_scores(&mut tape, table, &a1).unwrap();
        let c2 = type_scores(&mut tape, table, &a2).unwrap();
        assert_eq!(tape.value(c1), tape.value(c2));
        assert_eq!(tape.value(c1), &tape.value(c1).transpose().unwrap());
    }

    #[test]
    fn type_score_gradient() {
        let (inst, types) = chain(4);
        let adj = build_typed_adjacency(&inst, &types).unwrap();
        let mut store = ParameterStore::new(2);
        store.add_weight("types", types.len(), 1).unwrap();
        let report = finite_diff_check(&mut store, 1e-6, |s, t| {
            let table = t.param_by_name(s, "types")?;
            let c = type_scores(t, table, &adj)?;
            let f = t.row_softmax(c)?;
            let w = t.constant(Tensor::matrix(4, 4, (0..16).map(|i| (i as f64).sin()).collect()));
            let p = t.mul(f, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
        // the "none" row never enters the matrix
        assert_eq!(store.by_name("types").unwrap().grad().unwrap()[0], 0.0);
    }

    #[test]
    fn semantic_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::glorot(3, 4, &mut rng);
        let wq = Tensor::glorot(4, 4, &mut rng);
        let wk = Tensor::glorot(4, 4, &mut rng);
        let mut tape = Tape::new();
        let (hv, qv, kv) = (tape.constant(h.clone()), tape.constant(wq.clone()), tape.constant(wk.clone()));
        let a = semantic_matrix(&mut tape, hv, qv, kv).unwrap();
        let h2 = tape.constant(h.map(|x| 2.0 * x));
        let a2 = semantic_matrix(&mut tape, h2, qv, kv).unwrap();
        let scaled = tape.value(a).map(|x| 4.0 * x);
        assert!(scaled.max_abs_diff(tape.value(a2)) < 1e-14);

        let z = tape.constant(Tensor::zeros(4, 4));
        let a0 = semantic_matrix(&mut tape, hv, z, z).unwrap();
        assert!(tape.value(a0).values().iter().all(|&v| v == 0.0));

        // single node by hand
        let row = Tensor::row_vector(vec![0.5, -1.0, 0.25, 2.0]);
        let hv1 = tape.constant(row.clone());
        let a1 = semantic_matrix(&mut tape, hv1, qv, kv).unwrap();
        let q: Vec<f64> = (0..4).map(|c| (0..4).map(|r| row.values()[r] * wq.get(r, c)).sum()).collect();
        let k: Vec<f64> = (0..4).map(|c| (0..4).map(|r| row.values()[r] * wk.get(r, c)).sum()).collect();
        let expected = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        assert!((tape.value(a1).values()[0] - expected).abs() < 1e-14);

        let bad = tape.constant(Tensor::zeros(3, 4));
        assert!(semantic_matrix(&mut tape, hv, bad, kv).is_err());
    }

    #[test]
    fn gate_endpoints_and_range() {
        let (inst, types) = chain(5);
        let adj = build_typed_adjacency(&inst, &types).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::glorot(types.len(), 1, &mut rng));
        let c = type_scores(&mut tape, table, &adj).unwrap();
        let a = tape.constant(Tensor::glorot(5, 5, &mut rng).map(|x| 5.0 * x));

        let f1 = fuse_gate(&mut tape, a, c, 1.0).unwrap();
        let expected = row_softmax(tape.value(c)).unwrap();
        assert_eq!(tape.value(f1), &expected);
        let mut off_tree = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if !adj.is_edge(i, j) {
                    off_tree += tape.value(f1).get(i, j);
                }
            }
        }
        assert!(off_tree < 1e-40);

        let f0 = fuse_gate(&mut tape, a, c, 0.0).unwrap();
        assert_eq!(tape.value(f0), &row_softmax(tape.value(a)).unwrap());

        let fa = fuse_gate(&mut tape, a, c, 0.9).unwrap();
        let fb = fuse_gate(&mut tape, a, c, 0.9 + 1e-9).unwrap();
        assert!(tape.value(fa).max_abs_diff(tape.value(fb)) < 1e-6);
        for i in 0..5 {
            let s: f64 = tape.value(fa).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        assert!(matches!(fuse_gate(&mut tape, a, c, 1.5), Err(Error::Config(_))));
        assert!(fuse_gate(&mut tape, a, c, -0.1).is_err());
    }
}
