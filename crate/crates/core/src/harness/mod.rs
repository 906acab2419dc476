//! Experiment orchestration: base training, the noise probe, the
//! drift × selection × training-size matrix, and the reports built from it.
//!
//! Everything here is deterministic in `(config, master_seed)`. Per-run seeds
//! are derived by hashing the master seed with a key naming the run, so the
//! order (or parallelism) in which runs execute never changes their results.

mod commands;
mod matrix;
mod plot;
mod probe;
mod report;

pub use commands::{
    cmd_gen_data, cmd_noise_probe, cmd_plot, cmd_run_matrix, cmd_summarize, cmd_train_base,
    load_data, DataPaths, BASE_CHECKPOINT, BASE_LOG, NOISE_PROBE_CSV, NOISE_PROBE_MD, RESULTS_CSV,
    SUMMARY_MD,
};
pub use matrix::{
    aggregate, read_results, run_matrix, write_results, MatrixInputs, ResultRow, AGG_SEED,
};
pub use plot::{plot_drift, plot_svgs};
pub use probe::{noise_probe, ProbeCell, ProbeReport, NO_TUNING};
pub use report::{fmt_mean_std, summarize};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocknet::{ArchSpec, BlockId, BlockNet, BlockSelection};
use crate::cost::CostModel;
use crate::drift::{gen_task, make_target, split, Dataset, DriftKind, DriftSpec, Split, TaskSpec};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, train, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProbeConfig {
    /// Standard deviation of the Gaussian added to every parameter of the
    /// noised block.
    pub sigma: f64,
    pub noised: Vec<String>,
}

impl Default for NoiseProbeConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            noised: ["block1", "block2", "block3", "fc"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub cost: CostModel,
    pub drifts: Vec<DriftSpec>,
    /// Selections by name: a block id, `full`, or ids joined with `+`.
    pub blocks: Vec<String>,
    pub train_fracs: Vec<f64>,
    pub val_frac: f64,
    pub test_frac: f64,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub stem_with_block1: bool,
    /// Train/val/test fractions of the source pool used for the base model.
    pub base_split: [f64; 3],
    pub noise_probe: NoiseProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            cost: CostModel::default(),
            drifts: [DriftKind::Input, DriftKind::Feature, DriftKind::Output]
                .map(DriftSpec::of_kind)
                .to_vec(),
            blocks: ["block1", "block2", "block3", "fc", "full"]
                .map(String::from)
                .to_vec(),
            train_fracs: vec![0.1, 0.2, 0.3],
            val_frac: 0.1,
            test_frac: 0.1,
            n_seeds: 3,
            master_seed: 0,
            stem_with_block1: true,
            base_split: [0.8, 0.1, 0.1],
            noise_probe: NoiseProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.cost.validate()?;
        if self.arch.input_dim != self.task.input_dim || self.arch.n_classes != self.task.n_classes
        {
            return Err(Error::Usage(format!(
                "arch expects {} inputs and {} classes but the task has {} and {}",
                self.arch.input_dim, self.arch.n_classes, self.task.input_dim, self.task.n_classes
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::Usage("n_seeds must be >= 1".into()));
        }
        if let Some(f) = self.train_fracs.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Usage(format!("train_frac {f} is outside (0, 1]")));
        }
        for &f in &self.train_fracs {
            if f + self.val_frac + self.test_frac > 1.0 + 1e-9 {
                return Err(Error::Usage(format!(
                    "train_frac {f} plus val and test fractions exceeds 1"
                )));
            }
        }
        if self.drifts.iter().any(|d| d.kind == DriftKind::None) {
            return Err(Error::Usage(
                "drift kind none is not a target domain".into(),
            ));
        }
        let mut kinds: Vec<DriftKind> = self.drifts.iter().map(|d| d.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.drifts.len() {
            return Err(Error::Usage("each drift kind may appear once".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Usage("no block selections configured".into()));
        }
        for name in &self.blocks {
            self.selection(name)?;
        }
        for name in &self.noise_probe.noised {
            self.noised_block(name)?;
        }
        if !self.noise_probe.sigma.is_finite() || self.noise_probe.sigma < 0.0 {
            return Err(Error::Usage("noise_probe.sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn selection(&self, name: &str) -> Result<BlockSelection> {
        BlockSelection::parse(name, &self.arch, self.stem_with_block1)
            .map_err(|e| Error::Usage(format!("block selection {name:?}: {e}")))
    }

    pub fn noised_block(&self, name: &str) -> Result<BlockId> {
        let id: BlockId = name
            .parse()
            .map_err(|e| Error::Usage(format!("noised block {name:?}: {e}")))?;
        if !self.arch.contains(id) {
            return Err(Error::Usage(format!(
                "noised block {name:?} is not in the net"
            )));
        }
        Ok(id)
    }

    pub fn drift(&self, kind: DriftKind) -> Option<&DriftSpec> {
        self.drifts.iter().find(|d| d.kind == kind)
    }
}

/// Seed for the run named `key`, independent of execution order.
pub fn derive_seed(master_seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(key.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Key of one (drift, train_frac, seed) data split.
pub fn split_key(kind: DriftKind, train_frac: f64, seed: usize) -> String {
    format!("{kind}/{train_frac}/{seed}")
}

/// The source pool and every configured target pool.
#[derive(Clone, Debug)]
pub struct Domains {
    pub source: Dataset,
    pub targets: BTreeMap<DriftKind, Dataset>,
}

pub fn build_domains(cfg: &ExperimentConfig) -> Result<Domains> {
    let task = gen_task(&cfg.task)?;
    let mut targets = BTreeMap::new();
    for spec in &cfg.drifts {
        targets.insert(spec.kind, make_target(&task, spec)?);
    }
    Ok(Domains {
        source: task.source,
        targets,
    })
}

/// Every data split the experiments use, keyed so it can be stored and
/// reloaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub base: Split,
    pub targets: BTreeMap<String, Split>,
}

pub fn plan_splits(
    cfg: &ExperimentConfig,
    source: &Dataset,
    targets: &BTreeMap<DriftKind, Dataset>,
) -> Result<SplitPlan> {
    let m = cfg.master_seed;
    let [tr, va, te] = cfg.base_split;
    let base = split(source, tr, va, te, derive_seed(m, "base/split"))?;
    let mut plan = BTreeMap::new();
    for (&kind, ds) in targets {
        for &frac in &cfg.train_fracs {
            for seed in 0..cfg.n_seeds {
                let key = split_key(kind, frac, seed);
                let s = split(
                    ds,
                    frac,
                    cfg.val_frac,
                    cfg.test_frac,
                    derive_seed(m, &format!("split/{key}")),
                )?;
                plan.insert(key, s);
            }
        }
    }
    Ok(SplitPlan {
        base,
        targets: plan,
    })
}

/// Base model plus its bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseReport {
    pub digest: String,
    pub source_test_accuracy_pct: f64,
    /// Base-model accuracy on the test split of every target pool (first
    /// configured train_frac, seed 0).
    pub target_test_accuracy_pct: BTreeMap<DriftKind, f64>,
    pub log: TrainLog,
}

/// Trains the full model from scratch on the source train split.
pub fn train_base(
    cfg: &ExperimentConfig,
    source: &Dataset,
    plan: &SplitPlan,
) -> Result<(BlockNet, TrainLog)> {
    let m = cfg.master_seed;
    let (tr, va, _) = plan.base.apply(source);
    let init = BlockNet::build(&cfg.arch, derive_seed(m, "base/init"))?;
    let tc = TrainConfig {
        seed: derive_seed(m, "base/train"),
        ..cfg.train.clone()
    };
    let model = train(&init, &BlockSelection::full(&cfg.arch), &tr, &va, &tc)?;
    Ok((model.net, model.log))
}

pub fn base_report(
    cfg: &ExperimentConfig,
    net: &BlockNet,
    log: TrainLog,
    domains: &Domains,
    plan: &SplitPlan,
) -> Result<BaseReport> {
    let (_, _, te) = plan.base.apply(&domains.source);
    let mut target_test_accuracy_pct = BTreeMap::new();
    if let Some(&frac) = cfg.train_fracs.first() {
        for (&kind, ds) in &domains.targets {
            if let Some(s) = plan.targets.get(&split_key(kind, frac, 0)) {
                let (_, _, tte) = s.apply(ds);
                target_test_accuracy_pct.insert(kind, 100.0 * evaluate(net, &tte)?);
            }
        }
    }
    Ok(BaseReport {
        digest: net.digest(),
        source_test_accuracy_pct: 100.0 * evaluate(net, &te)?,
        target_test_accuracy_pct,
        log,
    })
}

/// Sample mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
