use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::matrix::{aggregate, selection_order, ResultRow};
use crate::drift::DriftKind;
use crate::error::{Error, Result};

pub fn fmt_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

/// Aggregate rows of one drift, grouped by train_frac then selection.
pub(crate) struct DriftTable {
    pub drift: DriftKind,
    pub fracs: Vec<f64>,
    /// Every non-full selection present, in network order.
    pub blocks: Vec<String>,
    pub has_full: bool,
    pub cells: BTreeMap<(u64, String), ResultRow>,
}

impl DriftTable {
    pub fn get(&self, frac: f64, block: &str) -> Option<&ResultRow> {
        self.cells.get(&(frac.to_bits(), block.to_string()))
    }

    /// Mean accuracy over the block columns at `frac`, ignoring failed cells.
    pub fn block_avg(&self, frac: f64) -> Option<f64> {
        let accs: Vec<f64> = self
            .blocks
            .iter()
            .filter_map(|b| self.get(frac, b))
            .map(|r| r.accuracy_pct)
            .filter(|a| a.is_finite())
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn best_block(&self, frac: f64) -> Option<&str> {
        self.blocks
            .iter()
            .filter_map(|b| self.get(frac, b).map(|r| (b, r.accuracy_pct)))
            .filter(|(_, a)| a.is_finite())
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(b, _)| b.as_str())
    }
}

/// Groups rows into per-drift tables, computing the aggregates from raw rows
/// when the input holds none.
pub(crate) fn drift_tables(rows: &[ResultRow]) -> Vec<DriftTable> {
    let agg: Vec<ResultRow> = if rows.iter().any(|r| r.is_aggregate()) {
        rows.iter().filter(|r| r.is_aggregate()).cloned().collect()
    } else {
        aggregate(rows)
            .into_iter()
            .filter(|r| r.is_aggregate())
            .collect()
    };
    let mut by_drift: BTreeMap<DriftKind, Vec<ResultRow>> = BTreeMap::new();
    for r in agg {
        by_drift.entry(r.drift_kind).or_default().push(r);
    }
    by_drift
        .into_iter()
        .map(|(drift, rows)| {
            let mut fracs: Vec<f64> = rows.iter().map(|r| r.train_frac).collect();
            fracs.sort_by(f64::total_cmp);
            fracs.dedup();
            let mut blocks: Vec<String> = rows
                .iter()
                .map(|r| r.block_selection.clone())
                .filter(|b| b != "full")
                .collect();
            blocks.sort_by_key(|b| selection_order(b));
            blocks.dedup();
            let has_full = rows.iter().any(|r| r.block_selection == "full");
            let cells = rows
                .into_iter()
                .map(|r| ((r.train_frac.to_bits(), r.block_selection.clone()), r))
                .collect();
            DriftTable {
                drift,
                fracs,
                blocks,
                has_full,
                cells,
            }
        })
        .collect()
}

fn acc_cell(r: Option<&ResultRow>) -> String {
    match r {
        Some(r) if r.accuracy_pct.is_finite() => {
            fmt_mean_std(r.accuracy_pct, r.accuracy_std.unwrap_or(0.0))
        }
        _ => "n/a".into(),
    }
}

/// Markdown report: one accuracy table per drift (best block in bold) and
/// one energy table per drift.
pub fn summarize(rows: &[ResultRow]) -> Result<String> {
    let tables = drift_tables(rows);
    if tables.is_empty() {
        return Err(Error::Usage("results contain no rows to summarize".into()));
    }
    let mut out = String::from("# Fine-tuning results\n\nAccuracy in %, mean±std over seeds.\n");
    for t in &tables {
        let _ = write!(out, "\n## {} drift\n\n| train_frac |", t.drift);
        for b in &t.blocks {
            let _ = write!(out, " {b} |");
        }
        out.push_str(" Block Avg |");
        if t.has_full {
            out.push_str(" Full |");
        }
        let ncols = t.blocks.len() + 2 + usize::from(t.has_full);
        let _ = writeln!(out, "\n|{}", "---|".repeat(ncols));
        for &frac in &t.fracs {
            let best = t.best_block(frac);
            let _ = write!(out, "| {frac:.2} |");
            for b in &t.blocks {
                let cell = acc_cell(t.get(frac, b));
                if Some(b.as_str()) == best {
                    let _ = write!(out, " **{cell}** |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            match t.block_avg(frac) {
                Some(a) => {
                    let _ = write!(out, " {a:.2} |");
                }
                None => out.push_str(" n/a |"),
            }
            if t.has_full {
                let _ = write!(out, " {} |", acc_cell(t.get(frac, "full")));
            }
            out.push('\n');
        }
    }

    out.push_str("\n# Training cost\n\nEnergy in J and energy saving versus full tuning in %, mean over train_frac and seeds.\n");
    for t in &tables {
        let _ = writeln!(
            out,
            "\n## {} drift\n\n| selection | epochs | E (J) | ES (%) |\n|---|---|---|---|",
            t.drift
        );
        let mut names = t.blocks.clone();
        if t.has_full {
            names.push("full".into());
        }
        for b in &names {
            let rows: Vec<&ResultRow> = t
                .fracs
                .iter()
                .filter_map(|&f| t.get(f, b))
                .filter(|r| r.energy_j.is_finite())
                .collect();
            if rows.is_empty() {
                let _ = writeln!(out, "| {b} | n/a | n/a | n/a |");
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "| {b} | {:.1} | {:.4} | {:.2} |",
                mean(|r| r.epochs),
                mean(|r| r.energy_j),
                mean(|r| r.es_pct)
            );
        }
    }
    Ok(out)
}
