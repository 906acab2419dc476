//! Adam fine-tuning of a chosen block subset with validation-accuracy early
//! stopping. Blocks outside the selection are never written.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocknet::{BlockId, BlockNet, BlockSelection};
use crate::drift::Dataset;
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_fc: f64,
    pub lr_other: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_fc: 0.01,
            lr_other: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_fc > 0.0 && self.lr_other > 0.0) {
            return Err(Error::Input("learning rates must be > 0".into()));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Input("patience and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Input("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, id: BlockId) -> f64 {
        if id == BlockId::Fc {
            self.lr_fc
        } else {
            self.lr_other
        }
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, elementwise over `params`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamHyper,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub initial_train_loss: f64,
    pub initial_val_accuracy: f64,
    /// Full-pass training loss of the returned snapshot.
    pub best_train_loss: f64,
    /// Training samples pushed through forward+backward over the run.
    pub samples_processed: u64,
    pub wall_time_s: f64,
    pub flops_forward: u64,
    pub flops_backward: u64,
}

impl TrainLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: BlockNet,
    pub selection: BlockSelection,
    pub log: TrainLog,
}

/// Fraction of rows whose argmax (ties to the lowest class) equals the label.
pub fn evaluate(net: &BlockNet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(1024) {
        let logits = net.forward(&ds.x.select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == ds.y[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(net: &BlockNet, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let y: Vec<usize> = chunk.iter().map(|&i| ds.y[i]).collect();
        total += net.loss(&ds.x.select_rows(chunk), &y)? * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

struct Optimizer {
    // one state per (block, layer), weights then bias
    states: BTreeMap<BlockId, Vec<(AdamState, AdamState)>>,
}

impl Optimizer {
    fn new(net: &BlockNet, selection: &BlockSelection) -> Self {
        let states = selection
            .ids
            .iter()
            .map(|&id| {
                let layers = net
                    .layers(id)
                    .iter()
                    .map(|l| (AdamState::new(l.w.len()), AdamState::new(l.b.len())))
                    .collect();
                (id, layers)
            })
            .collect();
        Self { states }
    }
}

/// Minimizes the training loss over the selected blocks' parameters only and
/// returns the snapshot with the best validation accuracy.
pub fn train(
    net: &BlockNet,
    selection: &BlockSelection,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if selection.is_empty() {
        return Err(Error::Usage(
            "cannot train with an empty block selection".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let started = Instant::now();
    let hp = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = net.clone();
    let mut opt = Optimizer::new(&current, selection);

    let initial_train_loss = dataset_loss(&current, train_set)?;
    let initial_val_accuracy = evaluate(&current, val_set)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, BlockNet)> = None;
    let mut since_best = 0usize;
    let mut samples_processed = 0u64;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.y[i]).collect();
            let bw = current.backward_selected(selection, &x, &y)?;
            if !bw.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            loss_sum += bw.loss * batch.len() as f64;
            for (id, layer_grads) in &bw.grads {
                let lr = cfg.lr_for(*id);
                let states = opt.states.get_mut(id).expect("state per selected block");
                for ((layer, g), (sw, sb)) in current
                    .layers_mut(*id)
                    .iter_mut()
                    .zip(layer_grads)
                    .zip(states.iter_mut())
                {
                    adam_step(layer.w.data_mut(), g.dw.data(), sw, lr, &hp);
                    adam_step(&mut layer.b, &g.db, sb, lr, &hp);
                }
            }
        }
        samples_processed += train_set.len() as u64;
        let val_accuracy = evaluate(&current, val_set)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, current.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let stopped_epoch = epochs.len();
    let (best_epoch, best_val_accuracy, best_net) = match best {
        Some(b) => b,
        None => (0, initial_val_accuracy, current),
    };
    let best_train_loss = dataset_loss(&best_net, train_set)?;
    if !best_train_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss at best epoch {best_epoch}"
        )));
    }
    let log = TrainLog {
        epochs,
        stopped_epoch,
        best_epoch,
        best_val_accuracy,
        initial_train_loss,
        initial_val_accuracy,
        best_train_loss,
        samples_processed,
        wall_time_s: started.elapsed().as_secs_f64(),
        flops_forward: 0,
        flops_backward: 0,
    };
    Ok(TrainedModel {
        net: best_net,
        selection: selection.clone(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocknet::ArchSpec;
    use crate::drift::{gen_task, output_drift, split, TaskSpec};
    use crate::tensor::Tensor2;

    fn tiny_task() -> (ArchSpec, Dataset) {
        let spec = TaskSpec {
            n_classes: 4,
            subpops_per_class: 2,
            input_dim: 6,
            patches: 0,
            samples_per_subpop: 40,
            cluster_spread: 0.5,
            seed: 1,
            ..TaskSpec::default()
        };
        let arch = ArchSpec {
            input_dim: 6,
            hidden_dim: 8,
            n_res_blocks: 3,
            n_classes: 4,
            layers_per_block: 2,
        };
        (arch, gen_task(&spec).unwrap().source)
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.01, &AdamHyper::default());
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.01, &AdamHyper::default());
        assert!((p[0] - (0.5 - 0.01)).abs() < 1e-9);
        // sign follows the gradient and magnitude ignores its scale
        let mut q = vec![0.0];
        adam_step(
            &mut q,
            &[-250.0],
            &mut AdamState::new(1),
            0.01,
            &AdamHyper::default(),
        );
        assert!((q[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2];
            let mut s = AdamState::new(2);
            for _ in 0..3 {
                adam_step(&mut p, &[0.3, -0.7], &mut s, 0.001, &AdamHyper::default());
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_tie_break_on_zero_fc() {
        let (arch, ds) = tiny_task();
        let mut net = BlockNet::build(&arch, 0).unwrap();
        for layer in net.layers_mut(BlockId::Fc) {
            layer.w.data_mut().fill(0.0);
            layer.b.fill(0.0);
        }
        assert_eq!(evaluate(&net, &ds).unwrap(), 0.25);
    }

    #[test]
    fn evaluate_perfect_lookup() {
        // identity-like net on one-hot inputs: stem copies, residual blocks off
        let arch = ArchSpec {
            input_dim: 3,
            hidden_dim: 3,
            n_res_blocks: 1,
            n_classes: 3,
            layers_per_block: 1,
        };
        let mut net = BlockNet::build(&arch, 0).unwrap();
        net.layers_mut(BlockId::Stem)[0].w = Tensor2::identity(3);
        net.layers_mut(BlockId::Res(0))[0].w.data_mut().fill(0.0);
        net.layers_mut(BlockId::Fc)[0].w = Tensor2::identity(3);
        let x = Tensor2::identity(3);
        let ds = Dataset::new(x, vec![0, 1, 2], 3).unwrap();
        assert_eq!(evaluate(&net, &ds).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_empty_is_usage_error() {
        let (arch, ds) = tiny_task();
        let net = BlockNet::build(&arch, 0).unwrap();
        assert!(matches!(
            evaluate(&net, &ds.subset(&[])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn train_freezes_unselected_blocks() {
        let (arch, ds) = tiny_task();
        let target = output_drift(&ds);
        let s = split(&target, 0.5, 0.2, 0.2, 0).unwrap();
        let (tr, va, _) = s.apply(&target);
        let net = BlockNet::build(&arch, 2).unwrap();
        let sel = BlockSelection::parse("fc", &arch, true).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let out = train(&net, &sel, &tr, &va, &cfg).unwrap();
        for id in arch.block_ids() {
            let same = out.net.block_digest(id) == net.block_digest(id);
            assert_eq!(same, id != BlockId::Fc, "{id}");
        }
    }

    #[test]
    fn single_epoch_bound() {
        let (arch, ds) = tiny_task();
        let s = split(&ds, 0.5, 0.2, 0.2, 0).unwrap();
        let (tr, va, _) = s.apply(&ds);
        let net = BlockNet::build(&arch, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            patience: usize::MAX,
            ..TrainConfig::default()
        };
        let out = train(&net, &BlockSelection::full(&arch), &tr, &va, &cfg).unwrap();
        assert_eq!(out.log.epochs.len(), 1);
        assert_eq!(out.log.stopped_epoch, 1);
        assert_eq!(out.log.samples_processed, tr.len() as u64);
    }

    #[test]
    fn early_stopping_bookkeeping() {
        let (arch, ds) = tiny_task();
        let s = split(&ds, 0.5, 0.2, 0.2, 0).unwrap();
        let (tr, va, _) = s.apply(&ds);
        let net = BlockNet::build(&arch, 3).unwrap();
        let cfg = TrainConfig {
            patience: 3,
            max_epochs: 60,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&net, &BlockSelection::full(&arch), &tr, &va, &cfg).unwrap();
        let log = &out.log;
        assert!(log.stopped_epoch - log.best_epoch <= cfg.patience);
        let best = log
            .epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(0.0, f64::max);
        assert_eq!(best, log.best_val_accuracy);
        assert_eq!(evaluate(&out.net, &va).unwrap(), log.best_val_accuracy);
        assert!(log.best_train_loss <= log.initial_train_loss);
    }

    #[test]
    fn train_is_deterministic() {
        let (arch, ds) = tiny_task();
        let s = split(&ds, 0.5, 0.2, 0.2, 0).unwrap();
        let (tr, va, _) = s.apply(&ds);
        let net = BlockNet::build(&arch, 3).unwrap();
        let sel = BlockSelection::parse("block2+fc", &arch, true).unwrap();
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let a = train(&net, &sel, &tr, &va, &cfg).unwrap();
        let b = train(&net, &sel, &tr, &va, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log.epochs, b.log.epochs);
    }

    #[test]
    fn train_usage_errors() {
        let (arch, ds) = tiny_task();
        let net = BlockNet::build(&arch, 3).unwrap();
        let cfg = TrainConfig::default();
        let full = BlockSelection::full(&arch);
        let empty = ds.subset(&[]);
        assert!(matches!(
            train(&net, &full, &empty, &ds, &cfg),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            train(&net, &full, &ds, &empty, &cfg),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            train(&net, &BlockSelection::empty(), &ds, &ds, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn divergence_is_numeric_error() {
        let (arch, ds) = tiny_task();
        let mut bad = ds.clone();
        bad.x.data_mut()[0] = f64::NAN;
        let net = BlockNet::build(&arch, 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let r = train(&net, &BlockSelection::full(&arch), &bad, &ds, &cfg);
        match r {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
