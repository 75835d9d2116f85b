//! Monte-Carlo simulator for the SGD concentration effect: robustly training
//! a two-class linear model on a poisoned mixture drives the attribution
//! mass (|w|) onto the trigger features, and the harder the trigger
//! robustness requirement, the stronger the concentration.
//!
//! Setup: labels c in {-1, +1}; features z drawn class-conditionally
//! Gaussian; a poisoned fraction is drawn from the source class (-1),
//! given a fixed offset on the trigger subset `s`, and relabeled +1. The
//! robust per-sample loss is `g(delta_w * ||w||_1 - c <z, w>)` with `g`
//! non-decreasing (hinge or logistic), i.e. the loss under the worst-case
//! feature perturbation of size `delta_w` per unit weight.
//!
//! Quantities reported per `delta_w` grid point, all from the same draws:
//!
//! * per-feature expected update
//!   `Delta_i = E[g'(u) (c z_i - sgn(w_i) delta_w)]`;
//! * the trigger-subset concentration change
//!   `Delta_s = sum_{i in s} w_i Delta_i / sum_{i in s} |w_i|`,
//!   with its Monte-Carlo standard error;
//! * the analytic bound `E[g'(u) (gamma_s - delta_w)]` where
//!   `gamma_s = c sum_{i in s} w_i z_i / sum_{i in s} |w_i|`, evaluated on
//!   the same samples (independent accumulation path);
//! * the SGD trajectory of the top-|s| attribution mass
//!   `sum_{i in s} |w_i| / sum_i |w_i|`, averaged over replicate runs, with
//!   the standard error of the terminal mass.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::zoo::derive_seed;
use crate::{parallel, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossShape {
    /// g(u) = max(0, 1 + u); g'(u) = [u > -1]
    Hinge,
    /// g(u) = ln(1 + e^u); g'(u) = sigmoid(u)
    Logistic,
}

impl LossShape {
    fn gprime(&self, u: f64) -> f64 {
        match self {
            LossShape::Hinge => {
                if u > -1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LossShape::Logistic => 1.0 / (1.0 + (-u).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSimConfig {
    /// Feature dimension Z.
    pub feature_dim: usize,
    /// Trigger feature subset s (indices into 0..Z).
    pub trigger_subset: Vec<usize>,
    /// Robustness radius grid.
    pub delta_w_grid: Vec<f64>,
    /// Monte-Carlo draws for the Delta estimates.
    pub samples: usize,
    pub loss: LossShape,
    pub learning_rate: f64,
    /// SGD steps per replicate run.
    pub steps: usize,
    /// Draws averaged per SGD step. The theorem reasons about the expected
    /// update; batching approximates it (batch 1 recovers plain SGD).
    pub batch_size: usize,
    /// Independent replicate runs (for trajectory means and standard errors).
    pub replicates: usize,
    /// Fraction of samples that carry the trigger (relabeled to +1).
    pub poison_fraction: f64,
    /// Offset added to trigger features on poisoned samples.
    pub trigger_strength: f64,
    /// Class-conditional mean of every feature (class c has mean c * this).
    pub background_mean: f64,
    /// Standard deviation of the feature noise.
    pub noise_sigma: f64,
    /// Fixed initial weights; when absent, drawn uniform from (-0.1, 0.1).
    pub initial_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TheoremSimConfig {
    fn default() -> Self {
        TheoremSimConfig {
            feature_dim: 32,
            trigger_subset: vec![0, 1, 2],
            delta_w_grid: vec![0.0, 0.5, 1.0, 2.0],
            samples: 100_000,
            loss: LossShape::Hinge,
            learning_rate: 0.01,
            steps: 3000,
            batch_size: 64,
            replicates: 8,
            poison_fraction: 1.0,
            trigger_strength: 8.0,
            background_mean: 0.1,
            noise_sigma: 1.0,
            initial_weights: None,
            seed: 0,
        }
    }
}

impl TheoremSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trigger_subset.is_empty() {
            return Err(Error::InvalidConfig("empty trigger subset".into()));
        }
        if self
            .trigger_subset
            .iter()
            .any(|&i| i >= self.feature_dim)
        {
            return Err(Error::InvalidConfig(
                "trigger subset index outside the feature dimension".into(),
            ));
        }
        if self.delta_w_grid.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidConfig(
                "delta_w grid must be finite and non-negative".into(),
            ));
        }
        if self.samples == 0 || self.steps == 0 || self.replicates == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "samples, steps, batch_size and replicates must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            return Err(Error::InvalidConfig("poison fraction outside [0,1]".into()));
        }
        if let Some(w) = &self.initial_weights {
            if w.len() != self.feature_dim {
                return Err(Error::InvalidConfig(format!(
                    "{} initial weights for {} features",
                    w.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// One labeled draw from the poisoned mixture.
fn draw_sample(cfg: &TheoremSimConfig, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let poisoned = rng.gen_range(0.0..1.0) < cfg.poison_fraction;
    // poisoned samples are drawn from the source class (-1) and relabeled +1
    let source_class = if poisoned {
        -1.0
    } else if rng.gen_range(0.0..1.0) < 0.5 {
        1.0
    } else {
        -1.0
    };
    let mut z: Vec<f64> = (0..cfg.feature_dim)
        .map(|_| source_class * cfg.background_mean + cfg.noise_sigma * gauss(rng))
        .collect();
    let label = if poisoned {
        for &i in &cfg.trigger_subset {
            z[i] += cfg.trigger_strength;
        }
        1.0
    } else {
        source_class
    };
    (label, z)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// Per-feature expected update at the reference weights.
    pub delta_i: Vec<f64>,
    pub delta_s: f64,
    pub delta_s_se: f64,
    /// Analytic bound E[g'(u) (gamma_s - delta_w)] on the same samples.
    pub bound: f64,
    pub bound_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridPointResult {
    pub delta_w: f64,
    /// Estimates at the initial weights.
    pub estimate: DeltaEstimate,
    /// Mean top-|s| mass per recorded step (step stride in `trajectory_stride`).
    pub trajectory: Vec<f64>,
    pub trajectory_stride: usize,
    pub terminal_top_s_mass: f64,
    pub terminal_top_s_mass_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimResult {
    pub config: TheoremSimConfig,
    pub points: Vec<GridPointResult>,
}

/// Run the full simulation over the delta_w grid (grid points in parallel).
pub fn sgd_concentration_sim(cfg: &TheoremSimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let w0 = initial_weights(cfg);
    let points = parallel::try_map(
        cfg.delta_w_grid.iter().copied().enumerate().collect(),
        |(gi, delta_w)| grid_point(cfg, gi, delta_w, &w0),
    )?;
    Ok(SimResult {
        config: cfg.clone(),
        points,
    })
}

fn initial_weights(cfg: &TheoremSimConfig) -> Vec<f64> {
    match &cfg.initial_weights {
        Some(w) => w.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xa11));
            (0..cfg.feature_dim)
                .map(|_| rng.gen_range(-0.1..0.1))
                .collect()
        }
    }
}

fn grid_point(
    cfg: &TheoremSimConfig,
    grid_idx: usize,
    delta_w: f64,
    w0: &[f64],
) -> Result<GridPointResult> {
    let estimate = estimate_deltas(cfg, grid_idx, delta_w, w0)?;

    // replicate SGD runs
    let stride = (cfg.steps / 100).max(1);
    let n_points = cfg.steps / stride;
    let mut mean_traj = vec![0.0f64; n_points];
    let mut terminals = Vec::with_capacity(cfg.replicates);
    for rep in 0..cfg.replicates {
        let seed = derive_seed(cfg.seed, 0x5d0 + (grid_idx * 1009 + rep) as u64);
        let traj = run_sgd(cfg, delta_w, w0, seed)?;
        for (acc, v) in mean_traj.iter_mut().zip(traj.iter().step_by(stride)) {
            *acc += v;
        }
        terminals.push(*traj.last().expect("steps >= 1"));
    }
    for v in &mut mean_traj {
        *v /= cfg.replicates as f64;
    }
    let mean_term = terminals.iter().sum::<f64>() / terminals.len() as f64;
    let var_term = terminals
        .iter()
        .map(|t| (t - mean_term) * (t - mean_term))
        .sum::<f64>()
        / (terminals.len().saturating_sub(1)).max(1) as f64;
    let se_term = (var_term / terminals.len() as f64).sqrt();

    Ok(GridPointResult {
        delta_w,
        estimate,
        trajectory: mean_traj,
        trajectory_stride: stride,
        terminal_top_s_mass: mean_term,
        terminal_top_s_mass_se: se_term,
    })
}

/// Monte-Carlo estimates of Delta_i, Delta_s and the bound at fixed weights.
/// Delta_s aggregates the per-feature means (one accumulation path); the
/// bound aggregates the per-sample gamma_s expression (the other); both see
/// the same draws.
fn estimate_deltas(
    cfg: &TheoremSimConfig,
    grid_idx: usize,
    delta_w: f64,
    w: &[f64],
) -> Result<DeltaEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xe57 + grid_idx as u64));
    let in_s: Vec<bool> = {
        let mut m = vec![false; cfg.feature_dim];
        for &i in &cfg.trigger_subset {
            m[i] = true;
        }
        m
    };
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let s_l1: f64 = cfg.trigger_subset.iter().map(|&i| w[i].abs()).sum();
    if s_l1 == 0.0 {
        return Err(Error::InvalidConfig(
            "trigger-subset weights are all zero: Delta_s undefined".into(),
        ));
    }

    let mut delta_i = vec![0.0f64; cfg.feature_dim];
    let mut a_sum = 0.0f64; // per-sample Delta_s terms
    let mut a_sq = 0.0f64;
    let mut b_sum = 0.0f64; // per-sample bound terms
    let mut b_sq = 0.0f64;
    for _ in 0..cfg.samples {
        let (c, z) = draw_sample(cfg, &mut rng);
        let margin: f64 = z.iter().zip(w).map(|(zi, wi)| zi * wi).sum();
        let gp = cfg.loss.gprime(delta_w * l1 - c * margin);
        let mut s_weighted = 0.0f64;
        let mut s_margin = 0.0f64;
        for i in 0..cfg.feature_dim {
            let upd = gp * (c * z[i] - w[i].signum() * delta_w);
            delta_i[i] += upd;
            if in_s[i] {
                s_weighted += w[i] * upd;
                s_margin += w[i] * z[i];
            }
        }
        let a = s_weighted / s_l1;
        let gamma_s = c * s_margin / s_l1;
        let b = gp * (gamma_s - delta_w);
        a_sum += a;
        a_sq += a * a;
        b_sum += b;
        b_sq += b * b;
    }
    let n = cfg.samples as f64;
    for v in &mut delta_i {
        *v /= n;
    }
    let mean_se = |sum: f64, sq: f64| -> (f64, f64) {
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    };
    let (delta_s, delta_s_se) = mean_se(a_sum, a_sq);
    let (bound, bound_se) = mean_se(b_sum, b_sq);
    for v in delta_i.iter().chain([&delta_s, &bound]) {
        if !v.is_finite() {
            return Err(Error::NonFinite("theorem simulator estimate".into()));
        }
    }
    Ok(DeltaEstimate {
        delta_i,
        delta_s,
        delta_s_se,
        bound,
        bound_se,
    })
}

/// Mini-batch SGD on the robust loss; returns the top-|s| mass after every
/// step.
fn run_sgd(cfg: &TheoremSimConfig, delta_w: f64, w0: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = w0.to_vec();
    let mut update = vec![0.0f64; cfg.feature_dim];
    let mut traj = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        update.iter_mut().for_each(|u| *u = 0.0);
        for _ in 0..cfg.batch_size {
            let (c, z) = draw_sample(cfg, &mut rng);
            let margin: f64 = z.iter().zip(&w).map(|(zi, wi)| zi * wi).sum();
            let gp = cfg.loss.gprime(delta_w * l1 - c * margin);
            if gp == 0.0 {
                continue;
            }
            for ((u, zi), wi) in update.iter_mut().zip(&z).zip(&w) {
                *u += gp * (c * zi - wi.signum() * delta_w);
            }
        }
        let scale = cfg.learning_rate / cfg.batch_size as f64;
        for (wi, u) in w.iter_mut().zip(&update) {
            *wi += scale * u;
        }
        let l1_now: f64 = w.iter().map(|v| v.abs()).sum();
        let s_now: f64 = cfg.trigger_subset.iter().map(|&i| w[i].abs()).sum();
        let mass = if l1_now == 0.0 {
            cfg.trigger_subset.len() as f64 / cfg.feature_dim as f64
        } else {
            s_now / l1_now
        };
        if !mass.is_finite() {
            return Err(Error::NonFinite("top-|s| mass during SGD".into()));
        }
        traj.push(mass);
    }
    Ok(traj)
}

/// Persist one CSV per grid point (`delta_w_<v>.csv`: step, top_s_mass) and
/// a summary JSON with the estimates.
pub fn save_sim_result(result: &SimResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for p in &result.points {
        let path = out_dir.join(format!("delta_w_{}.csv", p.delta_w));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "top_s_mass"])?;
        for (i, mass) in p.trajectory.iter().enumerate() {
            w.serialize((i * p.trajectory_stride, mass))?;
        }
        w.flush()?;
    }
    let f = std::io::BufWriter::new(fs::File::create(out_dir.join("summary.json"))?);
    serde_json::to_writer_pretty(f, result)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> TheoremSimConfig {
        TheoremSimConfig {
            samples: 20_000,
            steps: 300,
            replicates: 3,
            ..TheoremSimConfig::default()
        }
    }

    #[test]
    fn aligned_gamma_at_zero_delta_expands() {
        // small positive weights on the trigger subset (no loss saturation),
        // strong positive trigger: gamma_s is aligned, Delta_s = E[g' gamma_s]
        // is positive and agrees in sign with the bound.
        let cfg = TheoremSimConfig {
            initial_weights: Some(
                (0..32)
                    .map(|i| if i < 3 { 0.05 } else { 0.01 })
                    .collect(),
            ),
            delta_w_grid: vec![0.0],
            ..quick_cfg()
        };
        let r = sgd_concentration_sim(&cfg).unwrap();
        let e = &r.points[0].estimate;
        assert!(e.delta_s > 0.0, "Delta_s = {}", e.delta_s);
        assert!(e.bound > 0.0);
        assert_eq!(e.delta_s.signum(), e.bound.signum());
    }

    #[test]
    fn misaligned_gamma_shrinks() {
        // negative trigger offset against positive subset weights: gamma_s
        // is misaligned, Delta_s pushes the attributions toward zero.
        let cfg = TheoremSimConfig {
            trigger_strength: -8.0,
            initial_weights: Some(
                (0..32)
                    .map(|i| if i < 3 { 0.5 } else { 0.01 })
                    .collect(),
            ),
            delta_w_grid: vec![0.0],
            ..quick_cfg()
        };
        let r = sgd_concentration_sim(&cfg).unwrap();
        assert!(r.points[0].estimate.delta_s < 0.0);
    }

    #[test]
    fn full_subset_matches_weighted_mean_recount() {
        // |s| = Z: Delta_s must equal the direct recount from delta_i
        let cfg = TheoremSimConfig {
            trigger_subset: (0..32).collect(),
            delta_w_grid: vec![0.5],
            samples: 5_000,
            steps: 50,
            replicates: 2,
            ..TheoremSimConfig::default()
        };
        let r = sgd_concentration_sim(&cfg).unwrap();
        let e = &r.points[0].estimate;
        let w = initial_weights(&cfg);
        let recount: f64 = w.iter().zip(&e.delta_i).map(|(wi, di)| wi * di).sum::<f64>()
            / w.iter().map(|v| v.abs()).sum::<f64>();
        assert!(
            (e.delta_s - recount).abs() < 1e-10,
            "{} vs {}",
            e.delta_s,
            recount
        );
    }

    #[test]
    fn delta_s_does_not_exceed_bound() {
        let cfg = quick_cfg();
        let r = sgd_concentration_sim(&cfg).unwrap();
        for p in &r.points {
            let slack = 2.0 * (p.estimate.delta_s_se + p.estimate.bound_se);
            assert!(
                p.estimate.delta_s <= p.estimate.bound + slack,
                "delta_w {}: {} > {} + {}",
                p.delta_w,
                p.estimate.delta_s,
                p.estimate.bound,
                slack
            );
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = quick_cfg();
        cfg.trigger_subset = vec![];
        assert!(sgd_concentration_sim(&cfg).is_err());
        let mut cfg = quick_cfg();
        cfg.trigger_subset = vec![99];
        assert!(sgd_concentration_sim(&cfg).is_err());
        let mut cfg = quick_cfg();
        cfg.delta_w_grid = vec![-1.0];
        assert!(sgd_concentration_sim(&cfg).is_err());
    }
}
