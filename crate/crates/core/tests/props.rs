//! Property tests over the spec-level invariants that hold for arbitrary
//! inputs (batch composition, LUT monotonicity, attribution linearity, AUC
//! symmetry).

use proptest::prelude::*;

use trojan_scope::attribution::{attribute, AttributionMethod};
use trojan_scope::autodiff::{Architecture, LayerSpec, Network};
use trojan_scope::datagen::{intensity_lut, Dataset};
use trojan_scope::metrics::auc;
use trojan_scope::tensor::Tensor;

fn small_conv_net(seed: u64) -> Network<f32> {
    let arch = Architecture {
        id: "prop".into(),
        input: (1, 6, 6),
        layers: vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (0, 0),
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 32,
                out_dim: 3,
            },
            LayerSpec::SoftmaxCe,
        ],
        penultimate: 2,
    };
    Network::init(arch, seed).unwrap()
}

fn feature_head_net(seed: u64, z_dim: usize) -> Network<f32> {
    let arch = Architecture {
        id: "prop-head".into(),
        input: (1, 1, z_dim),
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: z_dim,
                out_dim: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_dim: 4,
                out_dim: 3,
            },
            LayerSpec::SoftmaxCe,
        ],
        penultimate: 0,
    };
    Network::init(arch, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Forward over a concatenated batch equals row-wise concatenation of
    /// per-sample forwards.
    #[test]
    fn forward_composes_over_batches(
        seed in 0u64..50,
        pixels in proptest::collection::vec(-1.0f32..1.0, 3 * 36),
    ) {
        let net = small_conv_net(seed);
        let batch = Tensor::new(vec![3, 1, 6, 6], pixels.clone()).unwrap();
        let combined = net.forward(&batch).unwrap();
        for row in 0..3 {
            let single = Tensor::new(
                vec![1, 1, 6, 6],
                pixels[row * 36..(row + 1) * 36].to_vec(),
            )
            .unwrap();
            let one = net.forward(&single).unwrap();
            let k = net.num_classes();
            let combined_row = &combined.logits().data()[row * k..(row + 1) * k];
            for (a, b) in combined_row.iter().zip(one.logits().data()) {
                prop_assert!((a - b).abs() < 1e-6, "batch row diverges: {a} vs {b}");
            }
        }
    }

    /// The filter trigger's intensity remap is monotone on [0, 1].
    #[test]
    fn intensity_lut_is_monotone(
        gamma in 0.05f32..5.0,
        u in 0.0f32..1.0,
        v in 0.0f32..1.0,
    ) {
        let (lo, hi) = if u <= v { (u, v) } else { (v, u) };
        prop_assert!(intensity_lut(gamma, lo) <= intensity_lut(gamma, hi));
        prop_assert!((0.0..=1.0).contains(&intensity_lut(gamma, u)));
    }

    /// Attribution over A union B equals the size-weighted mean of the
    /// attributions over A and B.
    #[test]
    fn attribution_is_linear_in_probe_averaging(
        seed in 0u64..30,
        a_rows in proptest::collection::vec(proptest::collection::vec(0.0f32..1.0, 5), 1..5),
        b_rows in proptest::collection::vec(proptest::collection::vec(0.0f32..1.0, 5), 1..5),
        ig in proptest::bool::ANY,
    ) {
        let net = feature_head_net(seed, 5);
        let method = if ig {
            AttributionMethod::IntegratedGradients { steps: 4 }
        } else {
            AttributionMethod::GradXAct
        };
        let build = |rows: &[Vec<f32>]| {
            let mut ds = Dataset::empty(1, 5, 3, None);
            for r in rows {
                ds.push(r.clone(), 0).unwrap();
            }
            ds
        };
        let ds_a = build(&a_rows);
        let ds_b = build(&b_rows);
        let mut union_rows = a_rows.clone();
        union_rows.extend(b_rows.clone());
        let ds_u = build(&union_rows);

        let alpha_a = attribute(&net, &ds_a, 1, method).unwrap();
        let alpha_b = attribute(&net, &ds_b, 1, method).unwrap();
        let alpha_u = attribute(&net, &ds_u, 1, method).unwrap();
        let (na, nb) = (a_rows.len() as f64, b_rows.len() as f64);
        for i in 0..5 {
            let expected = (alpha_a[i] * na + alpha_b[i] * nb) / (na + nb);
            prop_assert!(
                (alpha_u[i] - expected).abs() < 1e-6,
                "neuron {i}: union {} vs weighted mean {}",
                alpha_u[i],
                expected
            );
        }
    }

    /// auc(scores, labels) == 1 - auc(scores, !labels).
    #[test]
    fn auc_complement_identity(
        scores in proptest::collection::vec(0.0f64..1.0, 4..30),
        flips in proptest::collection::vec(proptest::bool::ANY, 4..30),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels = flips[..n].to_vec();
        labels[0] = true;
        labels[1] = false;
        let a = auc(scores, &labels).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = auc(scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}
