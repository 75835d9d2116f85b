//! Stratified train/val/test splits over model ids.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn part_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Deterministic stratified split: each label group is shuffled with the
/// seed and apportioned by largest remainder, so every part's label ratio is
/// within one model of the global ratio. Parts are disjoint and exhaustive.
pub fn split_ids(
    ids: &[(String, bool)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Split> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 <= 0.0 || ratios.1 <= 0.0 || ratios.2 <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut groups: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, trojaned) in ids {
        groups[usize::from(*trojaned)].push(id);
    }
    if groups[0].is_empty() || groups[1].is_empty() {
        return Err(Error::InvalidConfig(
            "too few models to stratify: need both labels".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = [ratios.0, ratios.1, ratios.2];
    let mut parts: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (g, group) in groups.iter_mut().enumerate() {
        group.shuffle(&mut rng);
        let n = group.len();
        let raw: Vec<f64> = ratio.iter().map(|r| r * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        // distribute the remainder by largest fraction; rotate the
        // tie-break per group so 50/50 zoos fill val and test evenly
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa)
                .expect("finite ratios")
                .then(((a + g) % 3).cmp(&((b + g) % 3)))
        });
        for i in 0..(n - assigned) {
            counts[order[i % 3]] += 1;
        }
        let mut cursor = 0usize;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            for id in &group[cursor..cursor + count] {
                part.push(id.to_string());
            }
            cursor += count;
        }
    }
    let [train, val, test] = parts;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig(
            "too few models to stratify: an empty split part".into(),
        ));
    }
    let has_both = |part: &[String]| {
        let labels: Vec<bool> = part
            .iter()
            .map(|id| ids.iter().find(|(i, _)| i == id).expect("own id").1)
            .collect();
        labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
    };
    if !has_both(&train) {
        return Err(Error::InvalidConfig(
            "too few models to stratify: single-label training part".into(),
        ));
    }
    Ok(Split { train, val, test })
}
