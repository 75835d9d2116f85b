//! The deep temporal set encoder that turns a curve tensor into a Trojan
//! score.
//!
//! Each class curve (length T, one channel) runs through a shared two-stage
//! 1-D conv encoder (kernel 13, channels 4 then 16, each stage followed by
//! max-pool kernel 9 stride 2 and ReLU). The K encoded vectors are reduced
//! by element-wise max across classes, which makes the score exactly
//! invariant to class count and order, and a linear head maps the pooled
//! vector to benign/Trojaned logits. Five members trained from distinct
//! seeds are averaged.
//!
//! 1-D convolution rides on the 2-D machinery with height-1 kernels. The
//! convs use zero padding (kernel-1)/2 so the stack closes at T = 40:
//! 40 -> pool 16 -> pool 4, flattened dimension D = 16 * 4 = 64.

mod train;

pub use train::{train_detector, DetectorHyper};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    argmax_rows, read_weights_bin, softmax, write_weights_bin, Architecture, LayerSpec, Network,
    WeightMeta,
};
use crate::excitation::CurveSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalEncoderSpec {
    /// Curve length T.
    pub curve_len: usize,
    pub conv_channels: (usize, usize),
    pub conv_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl Default for TemporalEncoderSpec {
    fn default() -> Self {
        TemporalEncoderSpec {
            curve_len: 40,
            conv_channels: (4, 16),
            conv_kernel: 13,
            pool_kernel: 9,
            pool_stride: 2,
        }
    }
}

impl TemporalEncoderSpec {
    /// One ensemble member as a network: curves enter as [K, 1, 1, T], the
    /// flatten output (penultimate) is the per-curve feature vector.
    pub fn member_architecture(&self) -> Result<Architecture> {
        let pad = (self.conv_kernel - 1) / 2;
        let pool = |len: usize| -> Result<usize> {
            if len < self.pool_kernel {
                return Err(Error::InvalidConfig(format!(
                    "curve too short: pool kernel {} over length {len}",
                    self.pool_kernel
                )));
            }
            Ok((len - self.pool_kernel) / self.pool_stride + 1)
        };
        let l1 = pool(self.curve_len)?;
        let l2 = pool(l1)?;
        let feat = self.conv_channels.1 * l2;
        let arch = Architecture {
            id: "temporal-set-encoder".into(),
            input: (1, 1, self.curve_len),
            layers: vec![
                LayerSpec::Conv2d {
                    in_ch: 1,
                    out_ch: self.conv_channels.0,
                    kernel: (1, self.conv_kernel),
                    stride: (1, 1),
                    padding: (0, pad),
                },
                LayerSpec::MaxPool2d {
                    kernel: (1, self.pool_kernel),
                    stride: (1, self.pool_stride),
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_ch: self.conv_channels.0,
                    out_ch: self.conv_channels.1,
                    kernel: (1, self.conv_kernel),
                    stride: (1, 1),
                    padding: (0, pad),
                },
                LayerSpec::MaxPool2d {
                    kernel: (1, self.pool_kernel),
                    stride: (1, self.pool_stride),
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: feat,
                    out_dim: 2,
                },
                LayerSpec::SoftmaxCe,
            ],
            penultimate: 6,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Flattened per-curve feature dimension D.
    pub fn feature_dim(&self) -> Result<usize> {
        self.member_architecture()?.feature_dim()
    }
}

/// Trained ensemble. Scores are the mean softmax probability of the
/// "Trojaned" class (class 1) across members.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub spec: TemporalEncoderSpec,
    pub members: Vec<Network<f32>>,
}

/// Curves as a [K, 1, 1, T] batch of f32.
fn curves_batch(normalized: &[f64], k: usize, t: usize) -> Result<Tensor<f32>> {
    if normalized.len() != k * t || k == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} curve values for {k} classes x {t} steps",
            normalized.len()
        )));
    }
    let data: Vec<f32> = normalized.iter().map(|v| *v as f32).collect();
    Tensor::new(vec![k, 1, 1, t], data)
}

/// Element-wise max over the K rows of [K, D]; returns ([1, D], argmax row
/// per column for gradient routing).
pub(crate) fn max_pool_rows(z: &Tensor<f32>) -> (Tensor<f32>, Vec<usize>) {
    let (k, d) = (z.shape()[0], z.shape()[1]);
    let mut pooled = vec![f32::NEG_INFINITY; d];
    let mut arg = vec![0usize; d];
    for row in 0..k {
        for col in 0..d {
            let v = z.data()[row * d + col];
            if v > pooled[col] {
                pooled[col] = v;
                arg[col] = row;
            }
        }
    }
    (Tensor::from_parts(vec![1, d], pooled), arg)
}

/// Score one member: encode curves, max across classes, linear head,
/// softmax probability of class 1.
pub(crate) fn member_score(
    member: &Network<f32>,
    normalized: &[f64],
    k: usize,
    t: usize,
) -> Result<f64> {
    let batch = curves_batch(normalized, k, t)?;
    let body = member.forward_body(&batch)?;
    let (pooled, _) = max_pool_rows(body.last_activation());
    let head = member.forward_head(pooled)?;
    let probs = softmax(head.logits())?;
    Ok(probs.data()[1] as f64)
}

/// Ensemble Trojan score in [0, 1] for one model's curve set.
pub fn predict(detector: &DetectorModel, curves: &CurveSet) -> Result<f64> {
    predict_normalized(
        detector,
        &curves.normalized,
        curves.num_classes,
        curves.steps,
    )
}

/// Lower-level entry: normalized curves as a flat K x T row-major slice.
pub fn predict_normalized(
    detector: &DetectorModel,
    normalized: &[f64],
    k: usize,
    t: usize,
) -> Result<f64> {
    if t != detector.spec.curve_len {
        return Err(Error::ShapeMismatch(format!(
            "curve length {t} does not match the detector's {}",
            detector.spec.curve_len
        )));
    }
    let mut sum = 0.0f64;
    for member in &detector.members {
        sum += member_score(member, normalized, k, t)?;
    }
    Ok(sum / detector.members.len() as f64)
}

/// Binary prediction via the ensemble's argmax on the mean score.
pub fn predict_label(detector: &DetectorModel, curves: &CurveSet) -> Result<bool> {
    Ok(predict(detector, curves)? >= 0.5)
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    spec: TemporalEncoderSpec,
    members: Vec<WeightMeta>,
}

pub fn save_detector(detector: &DetectorModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(detector.members.len());
    for (i, member) in detector.members.iter().enumerate() {
        metas.push(write_weights_bin(
            member,
            &dir.join(format!("member_{i}.bin")),
        )?);
    }
    let meta = DetectorMeta {
        spec: detector.spec.clone(),
        members: metas,
    };
    let f = BufWriter::new(File::create(dir.join("detector.json"))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

pub fn load_detector(dir: &Path) -> Result<DetectorModel> {
    let meta: DetectorMeta =
        serde_json::from_reader(BufReader::new(File::open(dir.join("detector.json"))?))?;
    let mut members = Vec::with_capacity(meta.members.len());
    for (i, wm) in meta.members.iter().enumerate() {
        members.push(read_weights_bin(&dir.join(format!("member_{i}.bin")), wm)?);
    }
    if members.is_empty() {
        return Err(Error::Format("detector with no ensemble members".into()));
    }
    Ok(DetectorModel {
        spec: meta.spec,
        members,
    })
}

/// Hard label from raw member logits (used in tests).
#[allow(dead_code)]
pub(crate) fn member_label(member: &Network<f32>, batch: &Tensor<f32>) -> Result<usize> {
    let cache = member.forward(batch)?;
    Ok(argmax_rows(cache.logits())[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_detector(seed: u64, members: usize) -> DetectorModel {
        let spec = TemporalEncoderSpec::default();
        let arch = spec.member_architecture().unwrap();
        let members = (0..members)
            .map(|i| Network::init(arch.clone(), seed + i as u64).unwrap())
            .collect();
        DetectorModel { spec, members }
    }

    fn random_curves(rng: &mut ChaCha8Rng, k: usize, t: usize) -> Vec<f64> {
        (0..k * t).map(|_| rng.gen_range(0.0..1.2)).collect()
    }

    #[test]
    fn feature_dim_at_default_curve_length() {
        let spec = TemporalEncoderSpec::default();
        assert_eq!(spec.feature_dim().unwrap(), 64);
    }

    #[test]
    fn class_permutation_and_duplication_invariance() {
        let det = random_detector(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = det.spec.curve_len;
        for _ in 0..25 {
            let k = rng.gen_range(1..12);
            let curves = random_curves(&mut rng, k, t);
            let base = predict_normalized(&det, &curves, k, t).unwrap();

            // permute class rows
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permuted: Vec<f64> = perm
                .iter()
                .flat_map(|&r| curves[r * t..(r + 1) * t].to_vec())
                .collect();
            let p = predict_normalized(&det, &permuted, k, t).unwrap();
            assert_eq!(base.to_bits(), p.to_bits(), "permutation must be exact");

            // duplicate one row
            let dup_row = rng.gen_range(0..k);
            let mut dup = curves.clone();
            dup.extend_from_slice(&curves[dup_row * t..(dup_row + 1) * t]);
            let d = predict_normalized(&det, &dup, k + 1, t).unwrap();
            assert_eq!(base.to_bits(), d.to_bits(), "duplication must be exact");
        }
    }

    #[test]
    fn accepts_any_class_count() {
        let det = random_detector(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = det.spec.curve_len;
        for k in [1, 5, 10, 23] {
            let curves = random_curves(&mut rng, k, t);
            predict_normalized(&det, &curves, k, t).unwrap();
        }
    }

    #[test]
    fn wrong_curve_length_is_rejected() {
        let det = random_detector(1, 2);
        let curves = vec![0.5; 3 * 17];
        assert!(predict_normalized(&det, &curves, 3, 17).is_err());
    }

    #[test]
    fn ensemble_score_is_within_member_range() {
        let det = random_detector(11, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = det.spec.curve_len;
        for _ in 0..10 {
            let k = rng.gen_range(1..8);
            let curves = random_curves(&mut rng, k, t);
            let ensemble = predict_normalized(&det, &curves, k, t).unwrap();
            let scores: Vec<f64> = det
                .members
                .iter()
                .map(|m| member_score(m, &curves, k, t).unwrap())
                .collect();
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(ensemble >= lo - 1e-12 && ensemble <= hi + 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_scores() {
        let det = random_detector(9, 3);
        let dir = tempfile::tempdir().unwrap();
        save_detector(&det, dir.path()).unwrap();
        let back = load_detector(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let curves = random_curves(&mut rng, 6, det.spec.curve_len);
        let a = predict_normalized(&det, &curves, 6, det.spec.curve_len).unwrap();
        let b = predict_normalized(&back, &curves, 6, det.spec.curve_len).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn temporal_encoder_passes_grad_check() {
        use crate::autodiff::{grad_check, kink_margin};
        let spec = TemporalEncoderSpec::default();
        let arch = spec.member_architecture().unwrap();
        let net: Network<f64> = Network::init(arch, 123).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = spec.curve_len;
        let eps = 1e-6;
        // resample until the input is clear of ReLU kinks and pool ties
        let batch = loop {
            let candidate = Tensor::new(
                vec![4, 1, 1, t],
                (0..4 * t).map(|_| rng.gen_range(0.1..1.0)).collect(),
            )
            .unwrap();
            if kink_margin(&net, &candidate).unwrap() > 100.0 * eps {
                break candidate;
            }
        };
        let report = grad_check(&net, &batch, &[0, 1, 1, 0], eps).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "temporal encoder grad check: {}",
            report.max_rel_err
        );
    }
}
