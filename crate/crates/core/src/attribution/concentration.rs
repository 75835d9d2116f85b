//! Concentration metrics over attribution magnitudes: how much of a class's
//! total attribution mass sits on its top-m neurons, and the Gini
//! coefficient of the magnitude distribution. Planted triggers concentrate
//! mass on the few neurons that encode them.

use serde::{Deserialize, Serialize};

use super::AttributionMatrix;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub m: usize,
    /// Per class: sum of the m largest |alpha| over the sum of all |alpha|.
    pub top_m_mass: Vec<f64>,
    /// Per class: Gini coefficient of |alpha| (0 uniform .. (Z-1)/Z one-hot).
    pub gini: Vec<f64>,
}

/// Depends only on |alpha|: sign flips do not change the report. Rows whose
/// magnitudes sum to zero report the uniform limit (mass m/Z, Gini 0).
pub fn concentration(matrix: &AttributionMatrix, m: usize) -> Result<ConcentrationReport> {
    let z = matrix.feature_dim;
    if m == 0 || m > z {
        return Err(Error::InvalidConfig(format!(
            "top-m count {m} outside 1..={z}"
        )));
    }
    let mut top_m_mass = Vec::with_capacity(matrix.num_classes);
    let mut gini = Vec::with_capacity(matrix.num_classes);
    for class in 0..matrix.num_classes {
        let mut mags: Vec<f64> = matrix.row(class).iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).expect("finite attributions"));
        let total: f64 = mags.iter().sum();
        if total == 0.0 {
            top_m_mass.push(m as f64 / z as f64);
            gini.push(0.0);
            continue;
        }
        let top: f64 = mags[z - m..].iter().sum();
        top_m_mass.push(top / total);
        // Gini from the sorted-magnitude formula:
        //   G = (2 * sum_i i*x_(i)) / (n * sum x) - (n + 1) / n,  i = 1..n
        let weighted: f64 = mags
            .iter()
            .enumerate()
            .map(|(i, x)| (i as f64 + 1.0) * x)
            .sum();
        gini.push(2.0 * weighted / (z as f64 * total) - (z as f64 + 1.0) / z as f64);
    }
    Ok(ConcentrationReport {
        m,
        top_m_mass,
        gini,
    })
}
