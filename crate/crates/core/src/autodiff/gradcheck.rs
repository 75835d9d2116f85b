//! Gradient verification: analytic backprop against central finite
//! differences of the loss.
//!
//! Checks run on an `f64` network (lift an `f32` model with
//! [`Network::cast`]) so the finite-difference quotient is not drowned by
//! single-precision rounding. ReLU kinks and max-pool ties make the loss
//! non-differentiable; [`kink_margin`] reports how close a given input comes
//! to one so callers can exclude such points.

use super::{kernels, LayerSpec, Network};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Relative error with an absolute floor: tiny gradients are compared
/// absolutely (floor 1e-2 maps an absolute gap of 1e-6 to a reported 1e-4).
pub fn relative_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-2;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Flat gradient buffer for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradBlock {
    pub layer: usize,
    /// "weight" or "bias".
    pub param: &'static str,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (layer, param, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, &'static str, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn analytic_grads(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
) -> Result<Vec<ParamGradBlock>> {
    let cache = net.forward(batch)?;
    let (_, probs) = net.loss_ce(&cache, labels)?;
    let d_logits = kernels::softmax_ce_grad(&probs, labels);
    let result = net.backward_pure(&cache, &d_logits)?;
    let mut blocks = Vec::new();
    for layer in 0..net.params().len() {
        if let Some((dw, db)) = result.param_grad(layer) {
            blocks.push(ParamGradBlock {
                layer,
                param: "weight",
                values: dw.clone(),
            });
            blocks.push(ParamGradBlock {
                layer,
                param: "bias",
                values: db.clone(),
            });
        }
    }
    Ok(blocks)
}

/// Central finite differences of the mean cross-entropy loss with respect to
/// every parameter. Independent of the backprop path: only forward passes.
pub fn finite_difference_grads(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<Vec<ParamGradBlock>> {
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("eps {eps} must be positive")));
    }
    let mut probe = net.clone();
    let mut blocks = Vec::new();
    for layer in 0..net.params().len() {
        let Some((w, b)) = net.params()[layer].tensors() else {
            continue;
        };
        for (param, len) in [("weight", w.len()), ("bias", b.len())] {
            let mut values = vec![0.0f64; len];
            for i in 0..len {
                let mut eval = |delta: f64| -> Result<f64> {
                    {
                        let (pw, pb) = probe.params_mut()[layer].tensors_mut().expect("param");
                        let buf = if param == "weight" { pw } else { pb };
                        buf.data_mut()[i] += delta;
                    }
                    let cache = probe.forward(batch)?;
                    let (loss, _) = probe.loss_ce(&cache, labels)?;
                    Ok(loss)
                };
                let plus = eval(eps)?;
                let minus = eval(-2.0 * eps)?;
                eval(eps)?; // restore
                values[i] = (plus - minus) / (2.0 * eps);
            }
            blocks.push(ParamGradBlock {
                layer,
                param,
                values,
            });
        }
    }
    Ok(blocks)
}

/// Compare two gradient sets entry by entry.
pub fn compare_grads(analytic: &[ParamGradBlock], numeric: &[ParamGradBlock]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        debug_assert_eq!((a.layer, a.param), (n.layer, n.param));
        for (i, (&av, &nv)) in a.values.iter().zip(&n.values).enumerate() {
            let err = relative_error(av, nv);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((a.layer, a.param, i, av, nv));
            }
        }
    }
    report
}

/// Worst relative deviation between analytic and central-finite-difference
/// gradients of the cross-entropy loss, over every parameter of the network.
pub fn grad_check(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(net, batch, labels)?;
    let numeric = finite_difference_grads(net, batch, labels, eps)?;
    Ok(compare_grads(&analytic, &numeric))
}

/// Distance of the forward pass from the nearest non-smooth point: the
/// minimum of |pre-ReLU activation| over all ReLU inputs and of the win
/// margin over all max-pool windows. Finite differences are only trusted
/// when this margin comfortably exceeds the perturbation size.
pub fn kink_margin(net: &Network<f64>, batch: &Tensor<f64>) -> Result<f64> {
    let cache = net.forward(batch)?;
    let mut margin = f64::INFINITY;
    for (i, layer) in net.arch().layers.iter().enumerate() {
        let Some(x) = (if i == 0 {
            Some(cache.input())
        } else {
            cache.activation_after(i - 1)
        }) else {
            continue;
        };
        match layer {
            LayerSpec::Relu => {
                for v in x.data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let oh = (h - kernel.0) / stride.0 + 1;
                let ow = (w - kernel.1) / stride.1 + 1;
                for nb in 0..n {
                    for ch in 0..c {
                        let plane = (nb * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let v = x.data()
                                            [plane + (oy * stride.0 + ky) * w + ox * stride.1 + kx];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if second.is_finite() {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(margin)
}
