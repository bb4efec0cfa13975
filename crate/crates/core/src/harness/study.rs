use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::Metrics;
use super::{evaluate, explanation_records, fit_explainer, pretrain_base, run_pipeline, train_full};
use crate::corpus::{split_folds, Instance, LabelVocab};
use crate::error::{Error, Result};
use crate::parallel::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<Metrics>,
    pub mean_accuracy: f64,
}

/// Runs the full protocol on each of `cfg.folds` folds, up to `jobs` at once.
pub fn crossval(cfg: &RunConfig, instances: &[Instance], labels: &LabelVocab, jobs: usize) -> Result<CrossvalReport> {
    cfg.validate()?;
    let folds = split_folds(instances.len(), cfg.folds, cfg.seed)?;
    let metrics = par_map(&folds, jobs, |fold| {
        let (train, test) = fold.select_cloned(instances);
        let out = run_pipeline(cfg, &train, labels, 1)?;
        evaluate(&out.full.checkpoint, &test)
    })?;
    let mean_accuracy = metrics.iter().map(|m| m.accuracy).sum::<f64>() / metrics.len() as f64;
    Ok(CrossvalReport {
        folds: metrics,
        mean_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub heads: Vec<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            heads: vec![1, 2, 3],
            alpha: vec![0.0, 0.5, 0.9],
            beta: vec![0.0, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    /// Wall-clock time of the cell; only measured on request.
    pub seconds: Option<f64>,
    pub error: Option<String>,
}

/// Trains and scores every `(heads, alpha, beta)` cell. The base model,
/// attributions and explainer are shared by the cells of one `(heads, alpha)`
/// pair. A failing cell is reported in its row.
pub fn sweep(
    cfg: &RunConfig,
    grid: &SweepGrid,
    train: &[Instance],
    test: &[Instance],
    labels: &LabelVocab,
    jobs: usize,
    timing: bool,
) -> Result<Vec<SweepRow>> {
    if grid.heads.is_empty() || grid.alpha.is_empty() || grid.beta.is_empty() {
        return Err(Error::config("sweep grid has an empty axis"));
    }
    let pairs: Vec<(usize, f64)> = grid
        .heads
        .iter()
        .flat_map(|&n| grid.alpha.iter().map(move |&a| (n, a)))
        .collect();
    let groups = par_map(&pairs, jobs, |&(heads, alpha)| {
        let started = Instant::now();
        let cell_cfg = RunConfig { heads, alpha, ..cfg.clone() };
        let shared = cell_cfg.validate().and_then(|_| {
            let base = pretrain_base(&cell_cfg, train, labels)?;
            let records = explanation_records(&base.checkpoint, train, 1)?;
            fit_explainer(&base.checkpoint, &records)
        });
        let shared_secs = started.elapsed().as_secs_f64() / grid.beta.len() as f64;
        Ok(grid
            .beta
            .iter()
            .map(|&beta| {
                let started = Instant::now();
                let result = shared.as_ref().map_err(|e| e.to_string()).and_then(|explainer| {
                    let c = RunConfig { beta, ..cell_cfg.clone() };
                    train_full(&c, train, labels, explainer, false)
                        .and_then(|out| evaluate(&out.checkpoint, test))
                        .map_err(|e| e.to_string())
                });
                let seconds = timing.then(|| shared_secs + started.elapsed().as_secs_f64());
                match result {
                    Ok(m) => SweepRow {
                        heads,
                        alpha,
                        beta,
                        f1: Some(m.micro_f1),
                        accuracy: Some(m.accuracy),
                        seconds,
                        error: None,
                    },
                    Err(e) => SweepRow {
                        heads,
                        alpha,
                        beta,
                        f1: None,
                        accuracy: None,
                        seconds,
                        error: Some(e),
                    },
                }
            })
            .collect::<Vec<_>>())
    })?;
    Ok(groups.into_iter().flatten().collect())
}

/// CSV with header `N,alpha,beta,f1,accuracy,seconds,error`; absent values are
/// empty fields.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["N", "alpha", "beta", "f1", "accuracy", "seconds", "error"]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.heads.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            opt(r.f1),
            opt(r.accuracy),
            opt(r.seconds),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
