//! Token embeddings and the bidirectional LSTM that produces the node features
//! `H_0` shared by every forest of an instance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction; node features are twice this wide.
    pub hidden_dim: usize,
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmParams {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

/// Parameter handles of the embedding table and both LSTM directions.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    cfg: EncoderConfig,
    table: ParamId,
    fwd: LstmParams,
    bwd: LstmParams,
}

impl SentenceEncoder {
    pub fn register(store: &mut ParameterStore, cfg: EncoderConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.embed_dim == 0 || cfg.hidden_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let table = store.add_weight("embed.table", cfg.vocab_size, cfg.embed_dim)?;
        let mut dir = |name: &str| -> Result<LstmParams> {
            Ok(LstmParams {
                wx: store.add_weight(&format!("lstm.{name}.wx"), cfg.embed_dim, 4 * cfg.hidden_dim)?,
                wh: store.add_weight(&format!("lstm.{name}.wh"), cfg.hidden_dim, 4 * cfg.hidden_dim)?,
                b: store.add_bias(&format!("lstm.{name}.b"), 4 * cfg.hidden_dim)?,
            })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(SentenceEncoder { cfg, table, fwd, bwd })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    /// `n x embed_dim` rows of the embedding table. Ids past the table fold to 0.
    pub fn embed(&self, tape: &mut Tape, store: &ParameterStore, ids: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.table);
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < self.cfg.vocab_size { i } else { 0 })
            .collect();
        tape.gather_rows(table, &ids)
    }

    /// Row `i` of the result is `[forward state after token i; backward state
    /// after token i]`, the backward scan running from the last token.
    pub fn bilstm_encode(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = tape.value(x).dims2()?.0;
        let fwd = self.scan(tape, store, x, self.fwd, (0..n).collect())?;
        let mut bwd = self.scan(tape, store, x, self.bwd, (0..n).rev().collect())?;
        bwd.reverse();
        let f = tape.concat_rows(&fwd)?;
        let b = tape.concat_rows(&bwd)?;
        tape.concat_cols(&[f, b])
    }

    /// Hidden states in visiting order.
    fn scan(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        p: LstmParams,
        order: Vec<usize>,
    ) -> Result<Vec<Var>> {
        let h = self.cfg.hidden_dim;
        let wx = tape.param(store, p.wx);
        let wh = tape.param(store, p.wh);
        let b = tape.param(store, p.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, b)?;

        let mut states = Vec::with_capacity(order.len());
        let mut prev: Option<(Var, Var)> = None;
        for t in order {
            let mut gates = tape.gather_rows(xw, &[t])?;
            if let Some((hp, _)) = prev {
                let rec = tape.matmul(hp, wh)?;
                gates = tape.add(gates, rec)?;
            }
            let i = tape.slice_cols(gates, 0, h)?;
            let f = tape.slice_cols(gates, h, h)?;
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
            let g = tape.tanh(g);
            let ig = tape.mul(i, g)?;
            let c = match prev {
                Some((_, cp)) => {
                    let fc = tape.mul(f, cp)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let hs = tape.mul(o, tc)?;
            states.push(hs);
            prev = Some((hs, c));
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 6,
            embed_dim: 4,
            hidden_dim: 4,
        }
    }

    #[test]
    fn embed_is_a_lookup() {
        let mut store = ParameterStore::new(3);
        let enc = SentenceEncoder::register(&mut store, cfg()).unwrap();
        let mut tape = Tape::new();
        let e = enc.embed(&mut tape, &store, &[4]).unwrap();
        assert_eq!(tape.value(e).values(), store.by_name("embed.table").unwrap().row(4));
        let e2 = enc.embed(&mut tape, &store, &[4]).unwrap();
        assert_eq!(tape.value(e).values(), tape.value(e2).values());
    }

    #[test]
    fn embedding_gradient_counts_rows() {
        let mut store = ParameterStore::new(3);
        let enc = SentenceEncoder::register(&mut store, cfg()).unwrap();
        let ids = [2, 5, 2, 0, 2];
        let table = store.id("embed.table").unwrap();
        let report = crate::gradcheck::finite_diff_check_subset(&mut store, &[table], 1e-6, |s, t| {
            let e = enc.embed(t, s, &ids)?;
            Ok(t.sum(e))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
        let g = store.get(table).grad().unwrap();
        for r in 0..6 {
            let count = ids.iter().filter(|&&i| i == r).count() as f64;
            assert!(g[r * 4..(r + 1) * 4].iter().all(|&v| v == count));
        }
    }

    #[test]
    fn output_shape_and_single_token() {
        let mut store = ParameterStore::new(3);
        let enc = SentenceEncoder::register(&mut store, cfg()).unwrap();
        for n in [1, 5] {
            let mut tape = Tape::new();
            let ids: Vec<usize> = (0..n).collect();
            let x = enc.embed(&mut tape, &store, &ids).unwrap();
            let h = enc.bilstm_encode(&mut tape, &store, x).unwrap();
            assert_eq!(tape.value(h).shape(), &[n, 8]);
        }
    }

    #[test]
    fn reversal_swaps_directions_with_tied_weights() {
        let mut store = ParameterStore::new(8);
        let enc = SentenceEncoder::register(&mut store, cfg()).unwrap();
        for part in ["wx", "wh", "b"] {
            let v = store.by_name(&format!("lstm.fwd.{part}")).unwrap().values().to_vec();
            let shape = store.by_name(&format!("lstm.fwd.{part}")).unwrap().shape().to_vec();
            store.load_values(&format!("lstm.bwd.{part}"), &shape, v).unwrap();
        }
        // nonzero bias so the test is not trivially symmetric
        let b: Vec<f64> = (0..16).map(|i| 0.05 * i as f64 - 0.3).collect();
        store.load_values("lstm.fwd.b", &[1, 16], b.clone()).unwrap();
        store.load_values("lstm.bwd.b", &[1, 16], b).unwrap();

        let ids = [1, 3, 4, 2];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let x = enc.embed(&mut tape, &store, ids).unwrap();
            let h = enc.bilstm_encode(&mut tape, &store, x).unwrap();
            tape.value(h).clone()
        };
        let (a, b) = (run(&ids), run(&rev));
        for i in 0..4 {
            let r = 3 - i;
            assert_eq!(&a.row(i)[..4], &b.row(r)[4..]);
            assert_eq!(&a.row(i)[4..], &b.row(r)[..4]);
        }
    }

    #[test]
    fn gradient_check_n3() {
        let mut store = ParameterStore::new(21);
        let enc = SentenceEncoder::register(&mut store, cfg()).unwrap();
        let report = finite_diff_check(&mut store, 1e-6, |s, t| {
            let x = enc.embed(t, s, &[1, 4, 2])?;
            let h = enc.bilstm_encode(t, s, x)?;
            let h2 = t.mul(h, h)?;
            let hs = t.sum(h2);
            let hh = t.sum(h);
            t.add(hs, hh)
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}
