use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::matrix::{aggregate, read_results, run_matrix, write_results, MatrixInputs, ResultRow};
use super::plot::plot_svgs;
use super::probe::{noise_probe, ProbeReport};
use super::report::summarize;
use super::{
    base_report, build_domains, plan_splits, train_base, BaseReport, Domains, ExperimentConfig,
    SplitPlan,
};
use crate::blocknet::BlockNet;
use crate::drift::{read_dataset, write_dataset, DriftKind};
use crate::error::{Error, Result};

pub const BASE_CHECKPOINT: &str = "base_model.json";
pub const BASE_LOG: &str = "base_log.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const NOISE_PROBE_CSV: &str = "noise_probe.csv";
pub const NOISE_PROBE_MD: &str = "noise_probe.md";

/// Layout of the generated data under an output directory.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub dir: PathBuf,
}

impl DataPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            dir: out.join("data"),
        }
    }

    pub fn source(&self) -> PathBuf {
        self.dir.join("source.csv")
    }

    pub fn target(&self, kind: DriftKind) -> PathBuf {
        self.dir.join(format!("target_{kind}.csv"))
    }

    pub fn splits(&self) -> PathBuf {
        self.dir.join("splits.json")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{what} not found at {}; run `{producer}` first",
            path.display()
        )))
    }
}

/// Writes the source pool, one file per target drift, the split plan and the
/// fully materialized config.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DataPaths> {
    cfg.validate()?;
    let paths = DataPaths::new(out);
    create_dir(&paths.dir)?;
    let domains = build_domains(cfg)?;
    write_dataset(&paths.source(), &domains.source, &cfg.task, None)?;
    for (&kind, ds) in &domains.targets {
        write_dataset(&paths.target(kind), ds, &cfg.task, cfg.drift(kind))?;
    }
    let plan = plan_splits(cfg, &domains.source, &domains.targets)?;
    write_text(&paths.splits(), &serde_json::to_string(&plan)?)?;
    write_text(&out.join("config.json"), &cfg.to_json()?)?;
    Ok(paths)
}

/// Reads what `gen-data` wrote and checks it matches `cfg`.
pub fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<(Domains, SplitPlan)> {
    let paths = DataPaths::new(out);
    require(&paths.source(), "source data", "gen-data")?;
    let (source, sidecar) = read_dataset(&paths.source())?;
    if sidecar.task != cfg.task {
        return Err(Error::Usage(format!(
            "{} was generated from a different task config; rerun `gen-data`",
            paths.source().display()
        )));
    }
    let mut targets = BTreeMap::new();
    for spec in &cfg.drifts {
        let p = paths.target(spec.kind);
        require(&p, &format!("{} target data", spec.kind), "gen-data")?;
        let (ds, sc) = read_dataset(&p)?;
        if sc.drift.as_ref() != Some(spec) || sc.task != cfg.task {
            return Err(Error::Usage(format!(
                "{} was generated from a different config; rerun `gen-data`",
                p.display()
            )));
        }
        targets.insert(spec.kind, ds);
    }
    let sp = paths.splits();
    require(&sp, "split plan", "gen-data")?;
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let stored: SplitPlan = serde_json::from_str(&text)?;
    // the plan is a pure function of config and data; a mismatch means stale files
    if stored != plan_splits(cfg, &source, &targets)? {
        return Err(Error::Usage(format!(
            "{} does not match the current config; rerun `gen-data`",
            sp.display()
        )));
    }
    Ok((Domains { source, targets }, stored))
}

fn load_base(cfg: &ExperimentConfig, out: &Path) -> Result<BlockNet> {
    let p = out.join(BASE_CHECKPOINT);
    require(&p, "base checkpoint", "train-base")?;
    let net = BlockNet::load(&p)?;
    if net.arch() != &cfg.arch {
        return Err(Error::Usage(format!(
            "{} was trained with a different architecture; rerun `train-base`",
            p.display()
        )));
    }
    Ok(net)
}

/// Trains the base model on the source split and stores checkpoint and log.
pub fn cmd_train_base(cfg: &ExperimentConfig, out: &Path) -> Result<BaseReport> {
    cfg.validate()?;
    let (domains, plan) = load_data(cfg, out)?;
    let (net, log) = train_base(cfg, &domains.source, &plan)?;
    net.save(&out.join(BASE_CHECKPOINT))?;
    let report = base_report(cfg, &net, log, &domains, &plan)?;
    write_text(&out.join(BASE_LOG), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_noise_probe(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ProbeReport> {
    cfg.validate()?;
    let base = load_base(cfg, out)?;
    let (domains, plan) = load_data(cfg, out)?;
    let report = noise_probe(cfg, &base, &domains.source, &plan, jobs)?;
    write_text(&out.join(NOISE_PROBE_CSV), &report.to_csv())?;
    write_text(&out.join(NOISE_PROBE_MD), &report.to_markdown())?;
    Ok(report)
}

/// Full sweep; writes `results.csv` (raw and aggregate rows) and the config
/// it was produced with as `results.json`.
pub fn cmd_run_matrix(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let base = load_base(cfg, out)?;
    let (domains, plan) = load_data(cfg, out)?;
    let inputs = MatrixInputs {
        cfg,
        base: &base,
        domains: &domains,
        plan: &plan,
    };
    let rows = aggregate(&run_matrix(&inputs, jobs)?);
    write_results(&out.join(RESULTS_CSV), &rows)?;
    write_text(&out.join("results.json"), &cfg.to_json()?)?;
    Ok(rows)
}

fn read_input(input: &Path) -> Result<Vec<ResultRow>> {
    require(input, "results", "run-matrix")?;
    read_results(input)
}

pub fn cmd_summarize(input: &Path, out: &Path) -> Result<String> {
    let md = summarize(&read_input(input)?)?;
    create_dir(out)?;
    write_text(&out.join(SUMMARY_MD), &md)?;
    Ok(md)
}

/// Writes `accuracy_<drift>.svg` per drift kind and returns the paths.
pub fn cmd_plot(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let charts = plot_svgs(&read_input(input)?)?;
    create_dir(out)?;
    let mut paths = Vec::new();
    for (kind, svg) in charts {
        let p = out.join(format!("accuracy_{kind}.svg"));
        write_text(&p, &svg)?;
        paths.push(p);
    }
    Ok(paths)
}
