use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, mean_std, split_key, Domains, ExperimentConfig, SplitPlan};
use crate::blocknet::{BlockId, BlockNet};
use crate::cost::annotate;
use crate::drift::{csv_err, DriftKind};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, train, TrainConfig};

/// `seed` value of aggregate rows.
pub const AGG_SEED: &str = "agg";

/// One line of `results.csv`. Raw rows hold a single run; aggregate rows
/// (`seed == "agg"`) hold the mean over seeds, with the sample standard
/// deviation of accuracy in `accuracy_std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub drift_kind: DriftKind,
    pub block_selection: String,
    pub train_frac: f64,
    pub seed: String,
    pub accuracy_pct: f64,
    pub accuracy_std: Option<f64>,
    pub epochs: f64,
    pub time_s: f64,
    pub flops_fwd: f64,
    pub flops_bwd: f64,
    pub energy_j: f64,
    pub es_pct: f64,
    pub status: String,
}

impl ResultRow {
    pub fn is_aggregate(&self) -> bool {
        self.seed == AGG_SEED
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Sort key for selection names: single blocks in network order, then
/// combinations, then `full`.
pub(crate) fn selection_order(name: &str) -> (u8, Vec<BlockId>, String) {
    if name == "full" {
        return (2, Vec::new(), String::new());
    }
    let ids: Option<Vec<BlockId>> = name.split('+').map(|p| p.trim().parse().ok()).collect();
    match ids {
        Some(ids) if ids.len() == 1 => (0, ids, String::new()),
        Some(ids) => (1, ids, String::new()),
        None => (1, Vec::new(), name.to_string()),
    }
}

fn seed_order(seed: &str) -> (u8, u64, String) {
    match seed.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, seed.to_string()),
    }
}

fn row_cmp(a: &ResultRow, b: &ResultRow) -> Ordering {
    a.drift_kind
        .cmp(&b.drift_kind)
        .then_with(|| selection_order(&a.block_selection).cmp(&selection_order(&b.block_selection)))
        .then_with(|| a.train_frac.total_cmp(&b.train_frac))
        .then_with(|| seed_order(&a.seed).cmp(&seed_order(&b.seed)))
}

pub(crate) fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(row_cmp);
}

/// Read-only state shared by every cell of the sweep.
pub struct MatrixInputs<'a> {
    pub cfg: &'a ExperimentConfig,
    pub base: &'a BlockNet,
    pub domains: &'a Domains,
    pub plan: &'a SplitPlan,
}

#[derive(Clone, Debug)]
struct Cell {
    drift: DriftKind,
    block: String,
    frac: f64,
    seed: usize,
}

impl Cell {
    fn key(&self) -> String {
        format!(
            "{}/{}",
            split_key(self.drift, self.frac, self.seed),
            self.block
        )
    }

    fn row(&self, status: String) -> ResultRow {
        ResultRow {
            drift_kind: self.drift,
            block_selection: self.block.clone(),
            train_frac: self.frac,
            seed: self.seed.to_string(),
            accuracy_pct: f64::NAN,
            accuracy_std: None,
            epochs: f64::NAN,
            time_s: f64::NAN,
            flops_fwd: f64::NAN,
            flops_bwd: f64::NAN,
            energy_j: f64::NAN,
            es_pct: f64::NAN,
            status,
        }
    }
}

impl MatrixInputs<'_> {
    /// Fine-tunes one cell from a fresh copy of the base model and returns
    /// its row together with the tuned network.
    pub fn run_cell(
        &self,
        drift: DriftKind,
        block: &str,
        frac: f64,
        seed: usize,
    ) -> Result<(ResultRow, BlockNet)> {
        let cell = Cell {
            drift,
            block: block.to_string(),
            frac,
            seed,
        };
        self.run(&cell, &self.base.digest())
    }

    fn run(&self, cell: &Cell, base_digest: &str) -> Result<(ResultRow, BlockNet)> {
        let cfg = self.cfg;
        let start = self.base.clone();
        if start.digest() != base_digest {
            return Err(Error::Numeric(format!(
                "{}: base checkpoint changed during the sweep",
                cell.key()
            )));
        }
        let selection = cfg.selection(&cell.block)?;
        let target = self
            .domains
            .targets
            .get(&cell.drift)
            .ok_or_else(|| Error::Usage(format!("no {} target dataset loaded", cell.drift)))?;
        let skey = split_key(cell.drift, cell.frac, cell.seed);
        let split = self
            .plan
            .targets
            .get(&skey)
            .ok_or_else(|| Error::Usage(format!("split {skey} missing from the plan")))?;
        let (tr, va, te) = split.apply(target);
        let tc = TrainConfig {
            seed: derive_seed(cfg.master_seed, &format!("train/{}", cell.key())),
            ..cfg.train.clone()
        };
        let mut model = train(&start, &selection, &tr, &va, &tc)?;

        let frozen_ok = start
            .block_ids()
            .into_iter()
            .filter(|id| !selection.contains(*id))
            .all(|id| start.block_digest(id) == model.net.block_digest(id));
        let cost = annotate(&mut model.log, &model.net, &selection, &cfg.cost)?;
        let mut row = cell.row(if frozen_ok {
            "ok".into()
        } else {
            "freeze-violation".into()
        });
        row.accuracy_pct = 100.0 * evaluate(&model.net, &te)?;
        row.epochs = model.log.epochs.len() as f64;
        row.time_s = cost.time_s;
        row.flops_fwd = cost.flops_forward as f64;
        row.flops_bwd = cost.flops_backward as f64;
        row.energy_j = cost.energy_j;
        row.es_pct = cost.energy_saving_pct;
        Ok((row, model.net))
    }
}

/// Runs every (drift, selection, train_frac, seed) cell. A failing cell is
/// recorded with its error in `status` and the sweep continues. Only raw
/// rows are returned, sorted; [`aggregate`] adds the per-seed summaries.
///
/// `jobs > 1` runs cells on a thread pool. Each cell's randomness comes from
/// its own key, so the rows do not depend on `jobs`.
pub fn run_matrix(inputs: &MatrixInputs<'_>, jobs: usize) -> Result<Vec<ResultRow>> {
    let cfg = inputs.cfg;
    let mut cells = Vec::new();
    for d in &cfg.drifts {
        for block in &cfg.blocks {
            for &frac in &cfg.train_fracs {
                for seed in 0..cfg.n_seeds {
                    cells.push(Cell {
                        drift: d.kind,
                        block: block.clone(),
                        frac,
                        seed,
                    });
                }
            }
        }
    }
    let digest = inputs.base.digest();
    let run = |cell: &Cell| match inputs.run(cell, &digest) {
        Ok((row, _)) => row,
        Err(e) => cell.row(format!("error: {e}")),
    };
    let mut rows: Vec<ResultRow> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };
    sort_rows(&mut rows);
    Ok(rows)
}

/// Raw rows plus one aggregate row per (drift, selection, train_frac),
/// sorted. Aggregates use only successful runs; if some seeds failed the
/// aggregate's status says how many were used.
pub fn aggregate(raw: &[ResultRow]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(DriftKind, String, u64), Vec<&ResultRow>> = BTreeMap::new();
    let mut out: Vec<ResultRow> = Vec::new();
    for r in raw.iter().filter(|r| !r.is_aggregate()) {
        out.push(r.clone());
        groups
            .entry((
                r.drift_kind,
                r.block_selection.clone(),
                r.train_frac.to_bits(),
            ))
            .or_default()
            .push(r);
    }
    for ((drift, block, frac), members) in groups {
        let ok: Vec<&ResultRow> = members.iter().copied().filter(|r| r.is_ok()).collect();
        let mean_of = |f: fn(&ResultRow) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let acc: Vec<f64> = ok.iter().map(|r| r.accuracy_pct).collect();
        let (mean, std) = mean_std(&acc);
        let status = if ok.len() == members.len() {
            "ok".to_string()
        } else {
            format!("partial: {}/{} seeds", ok.len(), members.len())
        };
        out.push(ResultRow {
            drift_kind: drift,
            block_selection: block,
            train_frac: f64::from_bits(frac),
            seed: AGG_SEED.into(),
            accuracy_pct: mean,
            accuracy_std: Some(std),
            epochs: mean_of(|r| r.epochs),
            time_s: mean_of(|r| r.time_s),
            flops_fwd: mean_of(|r| r.flops_fwd),
            flops_bwd: mean_of(|r| r.flops_bwd),
            energy_j: mean_of(|r| r.energy_j),
            es_pct: mean_of(|r| r.es_pct),
            status,
        });
    }
    sort_rows(&mut out);
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}
