//! Synthetic source task and the three drift transforms that define target
//! domains.
//!
//! Each class is a mixture of Gaussian subpopulations. The source domain only
//! ever sees the first half of every class's subpopulations; feature-level
//! drift swaps in the second half. Input-level drift is an affine corruption
//! of the features with additive noise, output-level drift flips labels
//! `y -> C - 1 - y`.

mod io;
mod split;

pub(crate) use io::csv_err;
pub use io::{read_dataset, write_dataset, Sidecar};
pub use split::{split, Split};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Shape of the synthetic task.
///
/// With `patches > 0` the input is cut into that many equal patches. Each
/// patch has `parts_per_patch` prototype vectors shared by all classes, and a
/// subpopulation mean is a distinct combination of one part per patch, so
/// recognising a class means recognising a conjunction of parts. With
/// `patches == 0` every class has a random center and its subpopulations
/// scatter around it by `subpop_spread`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub subpops_per_class: usize,
    pub input_dim: usize,
    pub samples_per_subpop: usize,
    pub patches: usize,
    pub parts_per_patch: usize,
    /// Standard deviation of part-prototype (or class-center) coordinates.
    pub mean_scale: f64,
    pub subpop_spread: f64,
    /// Standard deviation of each sample around its subpopulation mean.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            subpops_per_class: 4,
            input_dim: 32,
            samples_per_subpop: 150,
            patches: 4,
            parts_per_patch: 4,
            mean_scale: 1.5,
            subpop_spread: 1.0,
            cluster_spread: 0.8,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Input("a task needs at least 2 classes".into()));
        }
        if self.subpops_per_class < 2 {
            return Err(Error::Input(
                "subpops_per_class must be >= 2 so source and target subpopulations can be disjoint"
                    .into(),
            ));
        }
        if self.input_dim == 0 || self.samples_per_subpop == 0 {
            return Err(Error::Input(
                "input_dim and samples_per_subpop must be >= 1".into(),
            ));
        }
        if !(self.cluster_spread >= 0.0 && self.subpop_spread >= 0.0 && self.mean_scale > 0.0) {
            return Err(Error::Input(
                "spreads must be >= 0 and mean_scale > 0".into(),
            ));
        }
        if self.patches > 0 {
            if !self.input_dim.is_multiple_of(self.patches) {
                return Err(Error::Input(format!(
                    "input_dim {} is not divisible into {} patches",
                    self.input_dim, self.patches
                )));
            }
            let n_sub = self.n_classes * self.subpops_per_class;
            let combos = (self.parts_per_patch as u128)
                .checked_pow(self.patches as u32)
                .unwrap_or(u128::MAX);
            if combos < n_sub as u128 {
                return Err(Error::Input(format!(
                    "{} parts over {} patches cannot give {n_sub} distinct subpopulations",
                    self.parts_per_patch, self.patches
                )));
            }
        }
        Ok(())
    }

    /// Number of subpopulations per class that belong to the source domain.
    pub fn source_subpops(&self) -> usize {
        self.subpops_per_class / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    None,
    Input,
    Feature,
    Output,
}

impl DriftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriftKind::None => "none",
            DriftKind::Input => "input",
            DriftKind::Feature => "feature",
            DriftKind::Output => "output",
        }
    }
}

impl std::fmt::Display for DriftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DriftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DriftKind::None),
            "input" => Ok(DriftKind::Input),
            "feature" => Ok(DriftKind::Feature),
            "output" => Ok(DriftKind::Output),
            _ => Err(Error::Input(format!("unknown drift kind {s:?}"))),
        }
    }
}

/// Labeled samples. `subpop[i]` is the global subpopulation id
/// (`class * subpops_per_class + k`) of sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor2,
    pub y: Vec<usize>,
    pub subpop: Vec<usize>,
    pub n_classes: usize,
    pub domain: Domain,
    pub drift: DriftKind,
}

impl Dataset {
    pub fn new(x: Tensor2, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        let subpop = vec![0; y.len()];
        let ds = Self {
            x,
            y,
            subpop,
            n_classes,
            domain: Domain::Source,
            drift: DriftKind::None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.len() || self.subpop.len() != self.y.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} labels, {} subpopulation ids",
                self.x.rows(),
                self.y.len(),
                self.subpop.len()
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            subpop: idx.iter().map(|&i| self.subpop[i]).collect(),
            n_classes: self.n_classes,
            domain: self.domain,
            drift: self.drift,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }
}

/// Generated task: the source pool plus the reserved second-half
/// subpopulations that feature-level drift draws from.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Row `class * subpops_per_class + k` is the mean of that subpopulation.
    pub means: Tensor2,
    pub source: Dataset,
    reserve: Dataset,
}

impl SyntheticTask {
    pub fn subpop_ids(&self) -> &[usize] {
        &self.source.subpop
    }
}

/// Builds the task deterministically from `spec` (including `spec.seed`).
pub fn gen_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let k = spec.subpops_per_class;
    let means = if spec.patches > 0 {
        part_means(spec, &mut rng)
    } else {
        center_means(spec, &mut rng)
    };

    let half = spec.source_subpops();
    let mut source = Builder::new(d);
    let mut reserve = Builder::new(d);
    for c in 0..spec.n_classes {
        for s in 0..k {
            let id = c * k + s;
            let target = if s < half { &mut source } else { &mut reserve };
            for _ in 0..spec.samples_per_subpop {
                target.push(means.row(id), spec.cluster_spread, &mut rng, c, id);
            }
        }
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        means,
        source: source.finish(spec.n_classes, Domain::Source),
        reserve: reserve.finish(spec.n_classes, Domain::Target),
    })
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class centers with subpopulation means scattered around them.
fn center_means(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Tensor2 {
    let k = spec.subpops_per_class;
    let d = spec.input_dim;
    let mut means = Tensor2::zeros(spec.n_classes * k, d);
    for c in 0..spec.n_classes {
        let center: Vec<f64> = (0..d).map(|_| spec.mean_scale * std_normal(rng)).collect();
        for s in 0..k {
            for (m, &ctr) in means.row_mut(c * k + s).iter_mut().zip(&center) {
                *m = ctr + spec.subpop_spread * std_normal(rng);
            }
        }
    }
    means
}

/// Subpopulation means built from per-patch part prototypes. Every
/// subpopulation gets a distinct part combination.
fn part_means(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Tensor2 {
    let (p, kp) = (spec.patches, spec.parts_per_patch);
    let w = spec.input_dim / p;
    let n_sub = spec.n_classes * spec.subpops_per_class;
    let protos: Vec<Vec<Vec<f64>>> = (0..p)
        .map(|_| {
            (0..kp)
                .map(|_| (0..w).map(|_| spec.mean_scale * std_normal(rng)).collect())
                .collect()
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut means = Tensor2::zeros(n_sub, spec.input_dim);
    let mut i = 0;
    while i < n_sub {
        let code: Vec<usize> = (0..p).map(|_| rng.random_range(0..kp)).collect();
        if !seen.insert(code.clone()) {
            continue;
        }
        let row = means.row_mut(i);
        for (j, &part) in code.iter().enumerate() {
            row[j * w..(j + 1) * w].copy_from_slice(&protos[j][part]);
        }
        i += 1;
    }
    means
}

struct Builder {
    dim: usize,
    x: Vec<f64>,
    y: Vec<usize>,
    subpop: Vec<usize>,
}

impl Builder {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            x: Vec::new(),
            y: Vec::new(),
            subpop: Vec::new(),
        }
    }

    fn push(&mut self, mean: &[f64], spread: f64, rng: &mut ChaCha8Rng, class: usize, id: usize) {
        for &m in mean {
            let z: f64 = StandardNormal.sample(rng);
            self.x.push(m + spread * z);
        }
        self.y.push(class);
        self.subpop.push(id);
    }

    fn finish(self, n_classes: usize, domain: Domain) -> Dataset {
        let rows = self.y.len();
        Dataset {
            x: Tensor2::from_vec(rows, self.dim, self.x).expect("rows pushed with fixed width"),
            y: self.y,
            subpop: self.subpop,
            n_classes,
            domain,
            drift: DriftKind::None,
        }
    }
}

/// Parameters of a target-domain transformation. Fields that do not apply
/// to `kind` are kept for provenance only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub gamma: f64,
    pub beta: f64,
    pub noise_sigma: f64,
    pub subpop_swap: String,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            kind: DriftKind::Input,
            gamma: 0.6,
            beta: 0.4,
            noise_sigma: 0.8,
            subpop_swap: "first-half -> second-half".into(),
            seed: 0,
        }
    }
}

impl DriftSpec {
    pub fn of_kind(kind: DriftKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// `x' = gamma·x + beta + ε`, `ε ~ N(0, noise_sigma²)` i.i.d.; labels kept.
pub fn input_drift(ds: &Dataset, spec: &DriftSpec) -> Result<Dataset> {
    if spec.kind != DriftKind::Input {
        return Err(Error::Usage(format!(
            "input_drift called with a {} drift spec",
            spec.kind
        )));
    }
    if spec.noise_sigma.is_nan()
        || spec.noise_sigma < 0.0
        || !spec.gamma.is_finite()
        || !spec.beta.is_finite()
    {
        return Err(Error::Input(
            "input drift needs finite gamma/beta and noise_sigma >= 0".into(),
        ));
    }
    let mut out = ds.clone();
    out.domain = Domain::Target;
    out.drift = DriftKind::Input;
    if spec.gamma == 1.0 && spec.beta == 0.0 && spec.noise_sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    for v in out.x.data_mut() {
        *v = spec.gamma * *v + spec.beta + noise.sample(&mut rng);
    }
    Ok(out)
}

/// Target domain drawn only from the second half of each class's
/// subpopulations.
pub fn feature_drift(task: &SyntheticTask) -> Result<Dataset> {
    task.spec.validate()?;
    let mut out = task.reserve.clone();
    out.domain = Domain::Target;
    out.drift = DriftKind::Feature;
    Ok(out)
}

/// `y' = (C - 1) - y`; features untouched.
pub fn output_drift(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    let top = ds.n_classes - 1;
    out.y.iter_mut().for_each(|y| *y = top - *y);
    out.domain = Domain::Target;
    out.drift = DriftKind::Output;
    out
}

/// Target dataset for `spec.kind`, derived from the task's source pool (or
/// its reserved subpopulations for feature drift).
pub fn make_target(task: &SyntheticTask, spec: &DriftSpec) -> Result<Dataset> {
    match spec.kind {
        DriftKind::None => {
            let mut ds = task.source.clone();
            ds.domain = Domain::Target;
            Ok(ds)
        }
        DriftKind::Input => input_drift(&task.source, spec),
        DriftKind::Feature => feature_drift(task),
        DriftKind::Output => Ok(output_drift(&task.source)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> TaskSpec {
        TaskSpec {
            n_classes: 4,
            subpops_per_class: 4,
            input_dim: 6,
            patches: 0,
            samples_per_subpop: 25,
            seed: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn gen_task_is_deterministic() {
        let a = gen_task(&small()).unwrap();
        let b = gen_task(&small()).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.means, b.means);
        let mut other = small();
        other.seed = 4;
        assert_ne!(gen_task(&other).unwrap().source.x, a.source.x);
    }

    #[test]
    fn subpopulation_means_are_distinct() {
        let task = gen_task(&small()).unwrap();
        let m = &task.means;
        let mut min_d = f64::INFINITY;
        for i in 0..m.rows() {
            for j in i + 1..m.rows() {
                let d: f64 = m
                    .row(i)
                    .iter()
                    .zip(m.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min_d = min_d.min(d.sqrt());
            }
        }
        assert!(min_d > 0.0);
    }

    #[test]
    fn source_uses_first_half_only() {
        let spec = small();
        let task = gen_task(&spec).unwrap();
        assert!(task
            .source
            .subpop
            .iter()
            .all(|&id| id % spec.subpops_per_class < 2));
        assert_eq!(task.source.len(), 4 * 2 * 25);
        for (&id, &y) in task.subpop_ids().iter().zip(&task.source.y) {
            assert_eq!(id / spec.subpops_per_class, y);
        }
    }

    #[test]
    fn rejects_single_subpop() {
        let mut spec = small();
        spec.subpops_per_class = 1;
        assert!(gen_task(&spec).is_err());
    }

    #[test]
    fn identity_input_drift_keeps_features() {
        let task = gen_task(&small()).unwrap();
        let spec = DriftSpec {
            gamma: 1.0,
            beta: 0.0,
            noise_sigma: 0.0,
            ..DriftSpec::of_kind(DriftKind::Input)
        };
        let out = input_drift(&task.source, &spec).unwrap();
        assert_eq!(out.x, task.source.x);
        assert_eq!(out.drift, DriftKind::Input);
    }

    #[test]
    fn input_drift_changes_only_features() {
        let task = gen_task(&small()).unwrap();
        let out = input_drift(&task.source, &DriftSpec::of_kind(DriftKind::Input)).unwrap();
        assert_eq!(out.y, task.source.y);
        assert_eq!(out.subpop, task.source.subpop);
        assert_ne!(out.x, task.source.x);
    }

    #[test]
    fn input_drift_without_noise_is_affine() {
        let task = gen_task(&small()).unwrap();
        let spec = DriftSpec {
            noise_sigma: 0.0,
            ..DriftSpec::of_kind(DriftKind::Input)
        };
        let out = input_drift(&task.source, &spec).unwrap();
        for (a, b) in out.x.data().iter().zip(task.source.x.data()) {
            assert_eq!(*a, 0.6 * b + 0.4);
        }
    }

    #[test]
    fn input_drift_rejects_other_kinds() {
        let task = gen_task(&small()).unwrap();
        let r = input_drift(&task.source, &DriftSpec::of_kind(DriftKind::Output));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn feature_drift_uses_disjoint_subpops() {
        let spec = small();
        let task = gen_task(&spec).unwrap();
        let target = feature_drift(&task).unwrap();
        assert_eq!(target.drift, DriftKind::Feature);
        for c in 0..spec.n_classes {
            let src: BTreeSet<_> = task
                .source
                .subpop
                .iter()
                .zip(&task.source.y)
                .filter(|p| *p.1 == c)
                .map(|p| *p.0)
                .collect();
            let tgt: BTreeSet<_> = target
                .subpop
                .iter()
                .zip(&target.y)
                .filter(|p| *p.1 == c)
                .map(|p| *p.0)
                .collect();
            assert!(src.is_disjoint(&tgt));
            assert!(!tgt.is_empty());
        }
        assert_eq!(target.class_counts(), task.source.class_counts());
    }

    #[test]
    fn output_drift_flip() {
        let x = Tensor2::from_vec(3, 1, vec![0.5, 1.5, 2.5]).unwrap();
        let ds = Dataset::new(x.clone(), vec![0, 3, 9], 10).unwrap();
        let flipped = output_drift(&ds);
        assert_eq!(flipped.y, vec![9, 6, 0]);
        assert_eq!(flipped.x, x);
        assert_eq!(output_drift(&flipped).y, ds.y);

        let odd = Dataset::new(Tensor2::zeros(1, 1), vec![3], 7).unwrap();
        assert_eq!(output_drift(&odd).y, vec![3]);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Tensor2::zeros(2, 1), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor2::zeros(1, 1), vec![2], 2).is_err());
    }
}
