//! Central-difference verification of [`BlockNet::backward_selected`].

use crate::blocknet::{BlockId, BlockNet, BlockSelection};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Absolute floor on the relative-error denominator, so exactly-zero and
/// vanishing gradients are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameters compared, in (block, layer, flat index) order.
    pub checked: Vec<(BlockId, usize, usize)>,
    /// Parameters whose ±h perturbation flipped a ReLU, where the loss is not
    /// differentiable on the probed interval. Not compared.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn compared(&self) -> usize {
        self.checked.len()
    }
}

fn param_mut(net: &mut BlockNet, id: BlockId, layer: usize, k: usize, n_w: usize) -> &mut f64 {
    let layer = &mut net.layers_mut(id)[layer];
    if k < n_w {
        &mut layer.w.data_mut()[k]
    } else {
        &mut layer.b[k - n_w]
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Perturbs every parameter of every block in `selection` by ±`h` and
/// compares the central difference of the batch loss with the analytic
/// gradient.
pub fn grad_check(
    net: &BlockNet,
    selection: &BlockSelection,
    x: &Tensor2,
    y: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    if y.is_empty() {
        return Err(Error::Usage("gradient check needs a nonempty batch".into()));
    }
    let analytic = net.backward_selected(selection, x, y)?.grads;
    let base_pattern = net.relu_pattern(x)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: Vec::new(),
        skipped_kinks: 0,
    };
    for (&id, layer_grads) in &analytic {
        for (l, g) in layer_grads.iter().enumerate() {
            let n_w = g.dw.len();
            let expected = g.dw.data().iter().chain(&g.db).copied();
            for (k, a) in expected.enumerate() {
                let original = *param_mut(&mut probe, id, l, k, n_w);
                *param_mut(&mut probe, id, l, k, n_w) = original + h;
                let plus = probe.loss(x, y)?;
                let kink_plus = probe.relu_pattern(x)? != base_pattern;
                *param_mut(&mut probe, id, l, k, n_w) = original - h;
                let minus = probe.loss(x, y)?;
                let kink_minus = probe.relu_pattern(x)? != base_pattern;
                *param_mut(&mut probe, id, l, k, n_w) = original;
                if kink_plus || kink_minus {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
                report.checked.push((id, l, k));
            }
        }
    }
    Ok(report)
}
