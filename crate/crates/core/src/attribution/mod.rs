//! Counterfactual attributions over penultimate-layer neurons.
//!
//! For a candidate target class `k` (not necessarily the predicted class),
//! each neuron `z_i` gets the mean attribution of the class-`k` logit to it
//! over a clean probe set. Neurons that consistently attract high
//! attribution for a class they don't legitimately serve are the suspects: a
//! planted trigger is encoded by a few such neurons, and because they are
//! poly-semantic they light up even on clean inputs.
//!
//! Two attribution functions are supported, both taken with respect to the
//! penultimate activation with the sub-network below it frozen, and both
//! targeting the pre-softmax logit:
//!
//! * gradient x activation: `(d logit_k / d z_i) * z_i` at the sample's `z`;
//! * integrated gradients with a zero baseline: `z_i * (1/m) sum_j
//!   d logit_k / d z_i` evaluated at `((j - 0.5) / m) * z` (midpoint rule).

mod concentration;
pub mod theorem;

pub use concentration::{concentration, ConcentrationReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Network;
use crate::datagen::Dataset;
use crate::tensor::Tensor;
use crate::{parallel, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AttributionMethod {
    GradXAct,
    IntegratedGradients { steps: usize },
}

impl AttributionMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AttributionMethod::GradXAct => "gradxact",
            AttributionMethod::IntegratedGradients { .. } => "integrated_gradients",
        }
    }

    pub fn ig_steps(&self) -> Option<usize> {
        match self {
            AttributionMethod::GradXAct => None,
            AttributionMethod::IntegratedGradients { steps } => Some(*steps),
        }
    }
}

/// K x Z matrix of mean attributions: entry (k, i) is neuron i's mean
/// attribution toward class k over the probe set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub model_id: String,
    pub probe_set_id: String,
    pub method_tag: String,
    pub ig_steps: Option<usize>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Row-major K x Z.
    pub values: Vec<f64>,
}

impl AttributionMatrix {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.feature_dim..(class + 1) * self.feature_dim]
    }
}

/// Penultimate activations of every probe sample, as one [N, Z] tensor.
pub fn probe_features(net: &Network<f32>, probe: &Dataset) -> Result<Tensor<f32>> {
    if probe.is_empty() {
        return Err(Error::InvalidConfig("empty probe set".into()));
    }
    let z_dim = net.feature_dim();
    let mut rows = Vec::with_capacity(probe.len() * z_dim);
    for chunk in (0..probe.len()).collect::<Vec<_>>().chunks(256) {
        let batch = probe.batch(chunk);
        let cache = net.forward(&batch)?;
        rows.extend_from_slice(net.penultimate_activation(&cache)?.data());
    }
    Tensor::new(vec![probe.len(), z_dim], rows)
}

/// Mean attribution of the class-`k` logit to each penultimate neuron over
/// the probe set. Returns a length-Z vector.
pub fn attribute(
    net: &Network<f32>,
    probe: &Dataset,
    class_k: usize,
    method: AttributionMethod,
) -> Result<Vec<f64>> {
    let z = probe_features(net, probe)?;
    attribute_features(net, &z, class_k, method)
}

/// Same as [`attribute`], but over precomputed probe features (callers doing
/// all classes share one forward pass over the probe set).
pub fn attribute_features(
    net: &Network<f32>,
    z: &Tensor<f32>,
    class_k: usize,
    method: AttributionMethod,
) -> Result<Vec<f64>> {
    let (n, z_dim) = (z.shape()[0], z.shape()[1]);
    if n == 0 {
        return Err(Error::InvalidConfig("empty probe set".into()));
    }
    let per_sample: Vec<f32> = match method {
        AttributionMethod::GradXAct => {
            let grads = net.head_grad_wrt_features(z.clone(), class_k)?;
            grads
                .data()
                .iter()
                .zip(z.data())
                .map(|(g, v)| g * v)
                .collect()
        }
        AttributionMethod::IntegratedGradients { steps } => {
            if steps < 1 {
                return Err(Error::InvalidConfig("ig_steps must be >= 1".into()));
            }
            let mut grad_sum = vec![0.0f64; n * z_dim];
            for j in 1..=steps {
                let alpha = (j as f64 - 0.5) / steps as f64;
                let scaled_data: Vec<f32> =
                    z.data().iter().map(|v| (*v as f64 * alpha) as f32).collect();
                let scaled = Tensor::from_parts(vec![n, z_dim], scaled_data);
                let grads = net.head_grad_wrt_features(scaled, class_k)?;
                for (acc, g) in grad_sum.iter_mut().zip(grads.data()) {
                    *acc += *g as f64;
                }
            }
            grad_sum
                .iter()
                .zip(z.data())
                .map(|(g, v)| ((g / steps as f64) * *v as f64) as f32)
                .collect()
        }
    };
    // mean over probe samples, accumulated in f64
    let mut out = vec![0.0f64; z_dim];
    for row in 0..n {
        for i in 0..z_dim {
            out[i] += per_sample[row * z_dim + i] as f64;
        }
    }
    for v in &mut out {
        *v /= n as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite("attribution".into()));
        }
    }
    Ok(out)
}

/// One attribution row per candidate class: the full counterfactual matrix.
/// Class rows are independent and computed in parallel.
pub fn counterfactual_matrix(
    net: &Network<f32>,
    probe: &Dataset,
    method: AttributionMethod,
    model_id: &str,
) -> Result<AttributionMatrix> {
    let k = net.num_classes();
    let z = probe_features(net, probe)?;
    let rows = parallel::try_map((0..k).collect(), |class| {
        attribute_features(net, &z, class, method)
    })?;
    Ok(AttributionMatrix {
        model_id: model_id.to_string(),
        probe_set_id: probe_set_id(probe),
        method_tag: method.tag().to_string(),
        ig_steps: method.ig_steps(),
        num_classes: k,
        feature_dim: net.feature_dim(),
        values: rows.into_iter().flatten().collect(),
    })
}

pub fn probe_set_id(probe: &Dataset) -> String {
    match probe.seed() {
        Some(seed) => format!("glyphs-seed{seed}-n{}", probe.len()),
        None => format!("external-n{}", probe.len()),
    }
}

/// Append matrix rows to a CSV writer with columns
/// `model_id,class,neuron,alpha`.
pub fn write_matrix_csv<W: std::io::Write>(
    writer: &mut csv::Writer<W>,
    matrix: &AttributionMatrix,
) -> Result<()> {
    for class in 0..matrix.num_classes {
        for (neuron, alpha) in matrix.row(class).iter().enumerate() {
            writer.serialize((&matrix.model_id, class, neuron, alpha))?;
        }
    }
    Ok(())
}

pub fn save_matrices_csv(matrices: &[AttributionMatrix], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model_id", "class", "neuron", "alpha"])?;
    for m in matrices {
        write_matrix_csv(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Architecture, LayerSpec};

    /// Head is a single dense layer on top of the raw (flattened) input, so
    /// z is the input itself and d logit_k / d z_i = W[k][i] exactly.
    fn linear_head_net(in_dim: usize, classes: usize, seed: u64) -> Network<f32> {
        let arch = Architecture {
            id: "linear-head".into(),
            input: (1, 1, in_dim),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim,
                    out_dim: classes,
                },
                LayerSpec::SoftmaxCe,
            ],
            penultimate: 0,
        };
        Network::init(arch, seed).unwrap()
    }

    fn tiny_probe(n_per_class: usize, dim: usize) -> Dataset {
        let mut ds = Dataset::empty(1, dim, 4, Some(9));
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for i in 0..(n_per_class * 4) {
            let img: Vec<f32> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            ds.push(img, i % 4).unwrap();
        }
        ds
    }

    #[test]
    fn linear_head_closed_form_for_both_methods() {
        let dim = 6;
        let net = linear_head_net(dim, 4, 2);
        let probe = tiny_probe(5, dim);
        let (w, _) = net.params()[1].tensors().unwrap();
        for class in 0..4 {
            let gxa = attribute(&net, &probe, class, AttributionMethod::GradXAct).unwrap();
            let ig = attribute(
                &net,
                &probe,
                class,
                AttributionMethod::IntegratedGradients { steps: 7 },
            )
            .unwrap();
            // closed form: mean_i over probe of W[k][i] * z_i
            for i in 0..dim {
                let mean_z: f64 = (0..probe.len())
                    .map(|s| probe.image(s)[i] as f64)
                    .sum::<f64>()
                    / probe.len() as f64;
                let expected = w.data()[class * dim + i] as f64 * mean_z;
                assert!(
                    (gxa[i] - expected).abs() < 1e-5,
                    "gradxact class {class} neuron {i}: {} vs {}",
                    gxa[i],
                    expected
                );
                assert!(
                    (ig[i] - expected).abs() < 1e-5,
                    "ig class {class} neuron {i}: {} vs {}",
                    ig[i],
                    expected
                );
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_ig() {
        let dim = 5;
        let net = linear_head_net(dim, 3, 1);
        let mut probe = Dataset::empty(1, dim, 3, None);
        probe.push(vec![0.0; dim], 0).unwrap();
        let ig = attribute(
            &net,
            &probe,
            1,
            AttributionMethod::IntegratedGradients { steps: 8 },
        )
        .unwrap();
        assert!(ig.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_equals_stacked_attribute_calls_and_ignores_probe_order() {
        let dim = 6;
        let net = linear_head_net(dim, 4, 8);
        let probe = tiny_probe(4, dim);
        let m = counterfactual_matrix(&net, &probe, AttributionMethod::GradXAct, "m0").unwrap();
        for class in 0..4 {
            let row = attribute(&net, &probe, class, AttributionMethod::GradXAct).unwrap();
            assert_eq!(m.row(class), &row[..]);
        }

        // permute probe order: the mean is order-free up to f.p. association;
        // rows are accumulated in f64 over f32 terms, so demand near-exact
        let mut rev = Dataset::empty(1, dim, 4, None);
        for i in (0..probe.len()).rev() {
            rev.push(probe.image(i).to_vec(), probe.label(i)).unwrap();
        }
        let m2 = counterfactual_matrix(&net, &rev, AttributionMethod::GradXAct, "m0").unwrap();
        for (a, b) in m.values.iter().zip(&m2.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ig_step_guard() {
        let net = linear_head_net(4, 3, 0);
        let probe = tiny_probe(2, 4);
        assert!(attribute(
            &net,
            &probe,
            0,
            AttributionMethod::IntegratedGradients { steps: 0 }
        )
        .is_err());
    }
}
