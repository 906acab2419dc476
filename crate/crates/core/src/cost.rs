//! Training-cost accounting.
//!
//! FLOPs are counted per sample. An affine `m → n` layer costs `2·m·n`
//! multiply-adds plus `n` bias adds going forward; ReLU and residual adds
//! cost one FLOP per element. Going backward, every affine layer from the
//! loss down to the front-most selected block (inclusive) pays `2·m·n` for
//! its input cotangent, and every selected affine layer pays another `2·m·n`
//! for its weight gradient.
//!
//! Energy uses net power: `E = (P_operational − P_standby) · t`. The energy
//! saving of a block run against full fine-tuning is reported as a positive
//! percentage when the block run is cheaper.

use serde::{Deserialize, Serialize};

use crate::blocknet::{BlockId, BlockNet, BlockSelection};
use crate::error::{Error, Result};
use crate::finetune::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Wall-clock seconds reported by the training run.
    MeasuredTime,
    /// FLOPs divided by `throughput_flops_per_s`.
    EstimatedTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub power_operational_w: f64,
    pub power_standby_w: f64,
    pub throughput_flops_per_s: f64,
    pub mode: TimeMode,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            power_operational_w: 4.20,
            power_standby_w: 4.00,
            throughput_flops_per_s: 1.0e9,
            mode: TimeMode::EstimatedTime,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_standby_w >= 0.0 && self.power_operational_w >= self.power_standby_w) {
            return Err(Error::Input(format!(
                "need power_operational_w >= power_standby_w >= 0, got {} / {}",
                self.power_operational_w, self.power_standby_w
            )));
        }
        if self.mode == TimeMode::EstimatedTime
            && (self.throughput_flops_per_s.is_nan() || self.throughput_flops_per_s <= 0.0)
        {
            return Err(Error::Input(
                "throughput_flops_per_s must be > 0 in estimated mode".into(),
            ));
        }
        Ok(())
    }

    pub fn net_power_w(&self) -> f64 {
        self.power_operational_w - self.power_standby_w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub time_s: f64,
    pub energy_j: f64,
    pub energy_saving_pct: f64,
}

/// Forward FLOPs of one affine `m → n` layer for one sample.
pub fn affine_forward_flops(fan_in: usize, fan_out: usize) -> u64 {
    (2 * fan_in * fan_out + fan_out) as u64
}

fn mat_flops(fan_in: usize, fan_out: usize) -> u64 {
    (2 * fan_in * fan_out) as u64
}

/// Per-sample forward FLOPs of the whole net.
pub fn forward_flops(net: &BlockNet) -> u64 {
    net.block_ids()
        .into_iter()
        .map(|id| {
            let layers = net.layers(id);
            let affine: u64 = layers
                .iter()
                .map(|l| affine_forward_flops(l.fan_in(), l.fan_out()))
                .sum();
            let elementwise: u64 = match id {
                // ReLU after the stem
                BlockId::Stem => layers[0].fan_out() as u64,
                // ReLU per layer plus the skip add
                BlockId::Res(_) => {
                    layers.iter().map(|l| l.fan_out() as u64).sum::<u64>()
                        + layers[0].fan_in() as u64
                }
                BlockId::Fc => 0,
            };
            affine + elementwise
        })
        .sum()
}

/// Per-sample backward FLOPs for training `selection`.
pub fn backward_flops(net: &BlockNet, selection: &BlockSelection) -> Result<u64> {
    let front = selection
        .front()
        .ok_or_else(|| Error::Usage("backward FLOPs need a nonempty selection".into()))?;
    let (act, param) = backward_parts(net, selection, front);
    Ok(act + param)
}

/// Activation-cotangent FLOPs only, for the given selection.
pub fn backward_activation_flops(net: &BlockNet, selection: &BlockSelection) -> Result<u64> {
    let front = selection
        .front()
        .ok_or_else(|| Error::Usage("backward FLOPs need a nonempty selection".into()))?;
    Ok(backward_parts(net, selection, front).0)
}

fn backward_parts(net: &BlockNet, selection: &BlockSelection, front: BlockId) -> (u64, u64) {
    let mut act = 0;
    let mut param = 0;
    for id in net.block_ids().into_iter().filter(|&id| id >= front) {
        for l in net.layers(id) {
            let f = mat_flops(l.fan_in(), l.fan_out());
            act += f;
            if selection.contains(id) {
                param += f;
            }
        }
    }
    (act, param)
}

/// Training energy `E = (P_operational − P_standby) · t`.
pub fn energy(time_s: f64, model: &CostModel) -> Result<f64> {
    if time_s.is_nan() || time_s < 0.0 {
        return Err(Error::Input(format!("time must be >= 0, got {time_s}")));
    }
    Ok(model.net_power_w() * time_s)
}

/// Percentage of full-tuning energy saved by a block run:
/// `(e_full − e_block) / e_full · 100`.
pub fn energy_saving(e_block: f64, e_full: f64) -> Result<f64> {
    if e_full.is_nan() || e_full <= 0.0 {
        return Err(Error::Input(format!(
            "full-tuning energy must be > 0, got {e_full}"
        )));
    }
    Ok((e_full - e_block) / e_full * 100.0)
}

/// Mean of the per-block values (Block Avg excludes full tuning by
/// construction: callers pass block columns only).
pub fn block_avg(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("Block Avg of an empty set".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-sample training-step FLOPs (one forward plus the selective backward).
pub fn step_flops(net: &BlockNet, selection: &BlockSelection) -> Result<u64> {
    Ok(forward_flops(net) + backward_flops(net, selection)?)
}

/// Cost of pushing `samples` training samples through `selection`, with the
/// energy saving measured against full tuning over the same samples.
pub fn workload_report(
    net: &BlockNet,
    selection: &BlockSelection,
    samples: u64,
    model: &CostModel,
) -> Result<CostReport> {
    model.validate()?;
    let fwd = forward_flops(net) * samples;
    let bwd = backward_flops(net, selection)? * samples;
    let full = BlockSelection::full(net.arch());
    let full_flops = step_flops(net, &full)? * samples;
    let time_s = (fwd + bwd) as f64 / model.throughput_flops_per_s;
    let full_time = full_flops as f64 / model.throughput_flops_per_s;
    let energy_j = energy(time_s, model)?;
    let energy_saving_pct = if samples == 0 {
        0.0
    } else {
        energy_saving(energy_j, energy(full_time, model)?)?
    };
    Ok(CostReport {
        flops_forward: fwd,
        flops_backward: bwd,
        time_s,
        energy_j,
        energy_saving_pct,
    })
}

/// Fills the FLOP totals of a training log and returns the run's cost.
/// In measured mode the log's wall time is used as `t`.
pub fn annotate(
    log: &mut TrainLog,
    net: &BlockNet,
    selection: &BlockSelection,
    model: &CostModel,
) -> Result<CostReport> {
    let mut report = workload_report(net, selection, log.samples_processed, model)?;
    log.flops_forward = report.flops_forward;
    log.flops_backward = report.flops_backward;
    if model.mode == TimeMode::MeasuredTime {
        report.time_s = log.wall_time_s;
        report.energy_j = energy(report.time_s, model)?;
    }
    Ok(report)
}
