//! Minimal reverse-mode autodiff over a fixed layer set: dense, 2-D
//! convolution, ReLU, max-pool, flatten, and a terminal softmax
//! cross-entropy. Enough to train the small classifiers in the zoo and the
//! temporal curve encoder, and to take gradients with respect to the
//! penultimate feature vector for attribution.
//!
//! A [`Network`] is a sequential stack described by an [`Architecture`]. One
//! layer index is designated `penultimate`: the activation it outputs is the
//! feature vector `z` that the attribution and excitation modules operate on.
//! Forward passes can run over any contiguous suffix of the stack
//! ([`Network::forward_from`]), which is how curves are scored without
//! re-running the convolutional body.
//!
//! Networks are confined to one thread during a forward/backward pair;
//! distinct networks train concurrently with no shared state.

mod gradcheck;
mod kernels;
mod optim;
mod serialize;

pub use gradcheck::{
    compare_grads, finite_difference_grads, grad_check, kink_margin, relative_error,
    GradCheckReport, ParamGradBlock,
};
pub use kernels::{softmax, softmax_ce_grad, softmax_ce_loss};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use serialize::{
    load_weights, read_weights_bin, save_weights, write_weights_bin, WeightMeta,
    WEIGHT_FORMAT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu,
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    /// Terminal loss layer; consumes logits together with integer labels.
    SoftmaxCe,
}

impl LayerSpec {
    fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Network description: layer stack, input shape, and which layer's output
/// is the penultimate feature vector `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    /// Per-sample input shape (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output is `z`. Must be a flat activation.
    pub penultimate: usize,
}

impl Architecture {
    /// Per-sample output shape of every layer except the terminal SoftmaxCe.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let (c, h, w) = self.input;
        let mut cur = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if cur != [*in_dim] {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense expects flat [{in_dim}], got {cur:?}"
                        )));
                    }
                    vec![*out_dim]
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (cc, ch, cw) = match cur.as_slice() {
                        [c, h, w] => (*c, *h, *w),
                        s => {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {i}: conv2d expects [c,h,w], got {s:?}"
                            )))
                        }
                    };
                    if cc != *in_ch {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv2d expects {in_ch} channels, got {cc}"
                        )));
                    }
                    let oh = out_len(ch, kernel.0, stride.0, padding.0, i)?;
                    let ow = out_len(cw, kernel.1, stride.1, padding.1, i)?;
                    vec![*out_ch, oh, ow]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2d { kernel, stride } => {
                    let (cc, ch, cw) = match cur.as_slice() {
                        [c, h, w] => (*c, *h, *w),
                        s => {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {i}: maxpool expects [c,h,w], got {s:?}"
                            )))
                        }
                    };
                    let oh = out_len(ch, kernel.0, stride.0, 0, i)?;
                    let ow = out_len(cw, kernel.1, stride.1, 0, i)?;
                    vec![cc, oh, ow]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::SoftmaxCe => {
                    if i != self.layers.len() - 1 {
                        return Err(Error::InvalidConfig(
                            "softmax_ce must be the terminal layer".into(),
                        ));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("empty layer list".into()));
        }
        let n_loss = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxCe))
            .count();
        if n_loss != 1 || !matches!(self.layers.last(), Some(LayerSpec::SoftmaxCe)) {
            return Err(Error::InvalidConfig(
                "exactly one terminal softmax_ce layer is required".into(),
            ));
        }
        let shapes = self.shapes()?;
        if self.penultimate + 1 >= self.layers.len() {
            return Err(Error::InvalidConfig(
                "penultimate layer must come before the terminal loss layer".into(),
            ));
        }
        if shapes[self.penultimate].len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "penultimate activation must be flat, got {:?}",
                shapes[self.penultimate]
            )));
        }
        if shapes[self.layers.len() - 1].len() != 1 {
            return Err(Error::InvalidConfig("logits must be a flat vector".into()));
        }
        Ok(())
    }

    /// Number of output classes (logit width).
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("validated")[0])
    }

    /// Width of the penultimate feature vector `z`.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.shapes()?[self.penultimate][0])
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize, layer: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "layer {layer}: kernel {kernel} stride {stride} invalid for input {input} (pad {pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Parameters attached to a layer (weight + bias) or nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams<T = f32> {
    None,
    Dense { weight: Tensor<T>, bias: Tensor<T> },
    Conv { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> LayerParams<T> {
    pub fn tensors(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            LayerParams::None => None,
            LayerParams::Dense { weight, bias } | LayerParams::Conv { weight, bias } => {
                Some((weight, bias))
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            LayerParams::None => None,
            LayerParams::Dense { weight, bias } | LayerParams::Conv { weight, bias } => {
                Some((weight, bias))
            }
        }
    }
}

/// Activations recorded by a forward pass over layers
/// `first_layer ..= last covered layer` (the terminal loss layer is never
/// covered; the final activation is the logits when the pass runs to the
/// end).
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    first_layer: usize,
    /// acts[0] is the input fed to `first_layer`; acts[i+1] the output of
    /// layer `first_layer + i`.
    acts: Vec<Tensor<T>>,
    /// Max-pool argmax indices, aligned with covered layers.
    pool_idx: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }

    /// Final activation of the covered range (the logits, for a cache that
    /// runs to the end of the stack).
    pub fn last_activation(&self) -> &Tensor<T> {
        self.acts.last().expect("cache is never empty")
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.last_activation()
    }

    /// Output activation of an absolute layer index, if covered.
    pub fn activation_after(&self, layer: usize) -> Option<&Tensor<T>> {
        layer
            .checked_sub(self.first_layer)
            .and_then(|i| self.acts.get(i + 1))
    }
}

/// A sequential network with parameters.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    arch: Architecture,
    params: Vec<LayerParams<T>>,
    seed: u64,
}

impl<T: Scalar> Network<T> {
    /// Initialize parameters with Kaiming-uniform fan-in scaling
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases) drawn from a
    /// ChaCha8 stream seeded with `seed`. Layers draw in declaration order.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            params.push(match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let weight = kaiming(&mut rng, vec![*out_dim, *in_dim], *in_dim);
                    LayerParams::Dense {
                        weight,
                        bias: Tensor::zeros(vec![*out_dim]),
                    }
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let fan_in = in_ch * kernel.0 * kernel.1;
                    let weight =
                        kaiming(&mut rng, vec![*out_ch, *in_ch, kernel.0, kernel.1], fan_in);
                    LayerParams::Conv {
                        weight,
                        bias: Tensor::zeros(vec![*out_ch]),
                    }
                }
                _ => LayerParams::None,
            });
        }
        Ok(Network { arch, params, seed })
    }

    pub fn from_parts(arch: Architecture, params: Vec<LayerParams<T>>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameter slots for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        Ok(Network { arch, params, seed })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes().expect("validated at construction")
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim().expect("validated at construction")
    }

    pub fn penultimate_layer(&self) -> usize {
        self.arch.penultimate
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .filter_map(|p| p.tensors())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Full forward pass: input batch `[N, C, H, W]` through every layer up
    /// to (excluding) the terminal loss. The cache keeps all activations,
    /// including the penultimate feature vector.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<ForwardCache<T>> {
        let (c, h, w) = self.arch.input;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "input batch {:?} does not match expected [N, {c}, {h}, {w}]",
                batch.shape()
            )));
        }
        self.forward_from(batch.clone(), 0)
    }

    /// Forward over the layer suffix starting at `first_layer`, fed with
    /// `act` (which must match that layer's input shape, batch first).
    pub fn forward_from(&self, act: Tensor<T>, first_layer: usize) -> Result<ForwardCache<T>> {
        self.forward_range(act, first_layer, self.arch.layers.len() - 1)
    }

    /// Forward over layers `first_layer .. end` (exclusive; the terminal
    /// loss layer is never applied).
    fn forward_range(
        &self,
        act: Tensor<T>,
        first_layer: usize,
        end: usize,
    ) -> Result<ForwardCache<T>> {
        let last = self.arch.layers.len() - 1; // index of SoftmaxCe
        if first_layer > last || end > last {
            return Err(Error::InvalidConfig(format!(
                "forward range {first_layer}..{end} out of bounds"
            )));
        }
        let mut acts = vec![act];
        let mut pool_idx = Vec::new();
        for i in first_layer..end {
            let x = acts.last().expect("nonempty");
            let (y, idx) = self.apply_layer(i, x)?;
            acts.push(y);
            pool_idx.push(idx);
        }
        acts.last()
            .expect("nonempty")
            .check_finite("forward pass")?;
        Ok(ForwardCache {
            first_layer,
            acts,
            pool_idx,
        })
    }

    /// Forward through the body only (layers up to and including the
    /// penultimate one); the cache's final activation is `z`.
    pub fn forward_body(&self, batch: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.forward_range(batch.clone(), 0, self.arch.penultimate + 1)
    }

    /// Forward over just the head (layers after the penultimate activation).
    pub fn forward_head(&self, z: Tensor<T>) -> Result<ForwardCache<T>> {
        self.forward_from(z, self.arch.penultimate + 1)
    }

    fn apply_layer(&self, i: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        let n = x.shape()[0];
        match (&self.arch.layers[i], &self.params[i]) {
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                Ok((kernels::dense_forward(x, weight, bias)?, None))
            }
            (
                LayerSpec::Conv2d {
                    stride, padding, ..
                },
                LayerParams::Conv { weight, bias },
            ) => Ok((
                kernels::conv2d_forward(x, weight, bias, *stride, *padding)?,
                None,
            )),
            (LayerSpec::Relu, _) => Ok((kernels::relu_forward(x), None)),
            (LayerSpec::MaxPool2d { kernel, stride }, _) => {
                let (y, idx) = kernels::maxpool_forward(x, *kernel, *stride)?;
                Ok((y, Some(idx)))
            }
            (LayerSpec::Flatten, _) => {
                let flat: usize = x.shape()[1..].iter().product();
                Ok((x.reshaped(vec![n, flat])?, None))
            }
            (LayerSpec::SoftmaxCe, _) => Err(Error::InvalidConfig(
                "softmax_ce is handled by the loss functions".into(),
            )),
            _ => Err(Error::InvalidConfig(format!(
                "layer {i}: parameter slot does not match layer kind"
            ))),
        }
    }

    /// Penultimate activation from a cache produced by [`Network::forward`].
    pub fn penultimate_activation<'c>(&self, cache: &'c ForwardCache<T>) -> Result<&'c Tensor<T>> {
        cache
            .activation_after(self.arch.penultimate)
            .ok_or_else(|| {
                Error::InvalidConfig("cache does not cover the penultimate layer".into())
            })
    }

    /// Mean cross-entropy loss and softmax probabilities for cached logits.
    pub fn loss_ce(&self, cache: &ForwardCache<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
        kernels::softmax_ce_loss(cache.logits(), labels)
    }

    /// Backprop `d_last` (gradient at the cache's final activation) through
    /// the covered layers, returning all parameter gradients plus the
    /// gradient at the cache input. Pure: nothing is accumulated.
    pub fn backward_pure(
        &self,
        cache: &ForwardCache<T>,
        d_last: &Tensor<T>,
    ) -> Result<BackwardResult<T>> {
        if d_last.shape() != cache.logits().shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} does not match activation {:?}",
                d_last.shape(),
                cache.logits().shape()
            )));
        }
        let covered = cache.acts.len() - 1;
        let mut param_grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; covered];
        let mut d = d_last.clone();
        for rev in (0..covered).rev() {
            let layer = cache.first_layer + rev;
            let x = &cache.acts[rev];
            d = match (&self.arch.layers[layer], &self.params[layer]) {
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, .. }) => {
                    let (dx, dw, db) = kernels::dense_backward(x, weight, &d)?;
                    param_grads[rev] = Some((dw, db));
                    dx
                }
                (
                    LayerSpec::Conv2d {
                        stride, padding, ..
                    },
                    LayerParams::Conv { weight, .. },
                ) => {
                    let (dx, dw, db) = kernels::conv2d_backward(x, weight, *stride, *padding, &d)?;
                    param_grads[rev] = Some((dw, db));
                    dx
                }
                (LayerSpec::Relu, _) => kernels::relu_backward(x, &d),
                (LayerSpec::MaxPool2d { .. }, _) => {
                    let idx = cache.pool_idx[rev]
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig("missing pool cache".into()))?;
                    kernels::maxpool_backward(x.shape(), idx, &d)
                }
                (LayerSpec::Flatten, _) => d.reshaped(x.shape().to_vec())?,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {layer}: cannot backprop through this layer kind"
                    )))
                }
            };
        }
        d.check_finite("backward pass")?;
        Ok(BackwardResult {
            first_layer: cache.first_layer,
            param_grads,
            d_input: d,
        })
    }

    /// Backprop and accumulate parameter gradients into the grad slots.
    /// Returns the gradient at the cache input (for a full forward cache
    /// this is the input-image gradient; the gradient w.r.t. the penultimate
    /// activation is available via a head-only cache).
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_last: &Tensor<T>) -> Result<Tensor<T>> {
        let result = self.backward_pure(cache, d_last)?;
        self.accumulate(&result)?;
        Ok(result.d_input)
    }

    /// Convenience for training: softmax-CE loss and full backward from it.
    /// Returns the loss value.
    pub fn backward_ce(&mut self, cache: &ForwardCache<T>, labels: &[usize]) -> Result<f64> {
        let (loss, probs) = self.loss_ce(cache, labels)?;
        let d_logits = kernels::softmax_ce_grad(&probs, labels);
        self.backward(cache, &d_logits)?;
        Ok(loss)
    }

    fn accumulate(&mut self, result: &BackwardResult<T>) -> Result<()> {
        for (rev, grads) in result.param_grads.iter().enumerate() {
            if let Some((dw, db)) = grads {
                let layer = result.first_layer + rev;
                let (w, b) = self.params[layer]
                    .tensors_mut()
                    .ok_or_else(|| Error::InvalidConfig("gradient for parameterless layer".into()))?;
                w.accumulate_grad(dw)?;
                b.accumulate_grad(db)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some((w, b)) = p.tensors_mut() {
                w.zero_grad();
                b.zero_grad();
            }
        }
    }

    /// Gradient of one logit with respect to the penultimate activation, for
    /// every row of `z` (shape `[N, Z]` in, `[N, Z]` out). Pure.
    pub fn head_grad_wrt_features(&self, z: Tensor<T>, class_k: usize) -> Result<Tensor<T>> {
        let n = z.shape()[0];
        let k = self.num_classes();
        if class_k >= k {
            return Err(Error::InvalidConfig(format!(
                "class {class_k} out of range for {k} classes"
            )));
        }
        let cache = self.forward_head(z)?;
        let mut onehot = vec![T::zero(); n * k];
        for row in 0..n {
            onehot[row * k + class_k] = T::one();
        }
        let d_logits = Tensor::from_parts(vec![n, k], onehot);
        Ok(self.backward_pure(&cache, &d_logits)?.d_input)
    }

    /// Copy of this network with a different element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let params = self
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerParams::None,
                LayerParams::Dense { weight, bias } => LayerParams::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                LayerParams::Conv { weight, bias } => LayerParams::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
            })
            .collect();
        Network {
            arch: self.arch.clone(),
            params,
            seed: self.seed,
        }
    }
}

/// All gradients produced by one backward sweep.
pub struct BackwardResult<T = f32> {
    first_layer: usize,
    /// (d_weight, d_bias) per covered layer, None for parameterless layers.
    param_grads: Vec<Option<(Vec<T>, Vec<T>)>>,
    pub d_input: Tensor<T>,
}

impl<T: Scalar> BackwardResult<T> {
    pub fn param_grad(&self, layer: usize) -> Option<&(Vec<T>, Vec<T>)> {
        layer
            .checked_sub(self.first_layer)
            .and_then(|i| self.param_grads.get(i))
            .and_then(|g| g.as_ref())
    }
}

/// Row-wise argmax of a [N, K] tensor; ties break to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0usize;
        for (i, v) in r.iter().enumerate().skip(1) {
            if *v > r[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_real(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape, data)
}
