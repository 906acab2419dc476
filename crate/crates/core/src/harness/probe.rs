use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{derive_seed, mean_std, report::fmt_mean_std, ExperimentConfig, SplitPlan};
use crate::blocknet::BlockNet;
use crate::cost::block_avg;
use crate::drift::Dataset;
use crate::error::{Error, Result};
use crate::finetune::{evaluate, train, TrainConfig};

/// Column name for the noised model evaluated without any fine-tuning.
pub const NO_TUNING: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeCell {
    pub noised: String,
    pub tuned: String,
    /// Test accuracy (%) per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Noised block × tuned selection accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub sigma: f64,
    pub rows: Vec<String>,
    /// `none` first, then every tuned selection.
    pub columns: Vec<String>,
    pub cells: Vec<Vec<ProbeCell>>,
    /// Column means over the noised rows.
    pub block_avg: Vec<f64>,
}

impl ProbeReport {
    pub fn cell(&self, noised: &str, tuned: &str) -> Option<&ProbeCell> {
        let i = self.rows.iter().position(|r| r == noised)?;
        let j = self.columns.iter().position(|c| c == tuned)?;
        Some(&self.cells[i][j])
    }

    /// Seeds in which tuning the noised block itself beats every other
    /// single block and lands within `tolerance` points of `full`.
    pub fn dominant_seeds(&self, noised: &str, tolerance: f64) -> usize {
        let Some(own) = self.cell(noised, noised) else {
            return 0;
        };
        let full = self.cell(noised, "full");
        let others: Vec<&ProbeCell> = self
            .columns
            .iter()
            .filter(|c| *c != noised && *c != "full" && *c != NO_TUNING)
            .filter_map(|c| self.cell(noised, c))
            .collect();
        (0..own.per_seed.len())
            .filter(|&s| {
                let a = own.per_seed[s];
                others.iter().all(|o| a > o.per_seed[s])
                    && full.is_none_or(|f| a >= f.per_seed[s] - tolerance)
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("noised_block,tuned_block,seed,accuracy_pct,accuracy_std\n");
        for row in &self.cells {
            for c in row {
                for (s, a) in c.per_seed.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{s},{a},", c.noised, c.tuned);
                }
                let _ = writeln!(out, "{},{},agg,{},{}", c.noised, c.tuned, c.mean, c.std);
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("## Noise probe (sigma = {})\n\n", self.sigma);
        let header: Vec<&str> = std::iter::once("noised \\ tuned")
            .chain(
                self.columns
                    .iter()
                    .map(|c| if c == NO_TUNING { "no tuning" } else { c }),
            )
            .collect();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for (name, row) in self.rows.iter().zip(&self.cells) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| {
                    let s = fmt_mean_std(c.mean, c.std);
                    if c.tuned == *name {
                        format!("**{s}**")
                    } else {
                        s
                    }
                })
                .collect();
            let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
        }
        let avg: Vec<String> = self.block_avg.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(out, "| Block Avg | {} |", avg.join(" | "));
        out
    }
}

/// For every configured noised block: perturb the base model, then fine-tune
/// each configured selection on the clean source split and measure test
/// accuracy, for `n_seeds` noise draws.
pub fn noise_probe(
    cfg: &ExperimentConfig,
    base: &BlockNet,
    source: &Dataset,
    plan: &SplitPlan,
    jobs: usize,
) -> Result<ProbeReport> {
    let m = cfg.master_seed;
    let sigma = cfg.noise_probe.sigma;
    let (tr, va, te) = plan.base.apply(source);
    let rows = cfg.noise_probe.noised.clone();
    let mut columns = vec![NO_TUNING.to_string()];
    columns.extend(cfg.blocks.iter().cloned());

    let mut jobs_list = Vec::new();
    for (i, noised) in rows.iter().enumerate() {
        for (j, tuned) in columns.iter().enumerate() {
            for s in 0..cfg.n_seeds {
                jobs_list.push((i, j, noised.as_str(), tuned.as_str(), s));
            }
        }
    }
    let run = |&(_, _, noised, tuned, s): &(usize, usize, &str, &str, usize)| -> Result<f64> {
        let id = cfg.noised_block(noised)?;
        let net = base.inject_noise(
            id,
            sigma,
            derive_seed(m, &format!("probe/noise/{noised}/{s}")),
        )?;
        if tuned == NO_TUNING {
            return Ok(100.0 * evaluate(&net, &te)?);
        }
        let tc = TrainConfig {
            seed: derive_seed(m, &format!("probe/train/{noised}/{tuned}/{s}")),
            ..cfg.train.clone()
        };
        let tuned_net = train(&net, &cfg.selection(tuned)?, &tr, &va, &tc)?.net;
        Ok(100.0 * evaluate(&tuned_net, &te)?)
    };
    let accs: Vec<Result<f64>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| jobs_list.par_iter().map(run).collect())
    } else {
        jobs_list.iter().map(run).collect()
    };

    let mut cells: Vec<Vec<ProbeCell>> = rows
        .iter()
        .map(|r| {
            columns
                .iter()
                .map(|c| ProbeCell {
                    noised: r.clone(),
                    tuned: c.clone(),
                    per_seed: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                })
                .collect()
        })
        .collect();
    for (&(i, j, ..), acc) in jobs_list.iter().zip(accs) {
        cells[i][j].per_seed.push(acc?);
    }
    for c in cells.iter_mut().flatten() {
        (c.mean, c.std) = mean_std(&c.per_seed);
    }
    let block_avg = (0..columns.len())
        .map(|j| block_avg(&cells.iter().map(|r| r[j].mean).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        sigma,
        rows,
        columns,
        cells,
        block_avg,
    })
}
