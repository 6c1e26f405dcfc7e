//! Scale-invariant SDR and the per-utterance report.

use crate::error::{Error, Result};

/// Results are clamped to `[-SI_SDR_CAP, SI_SDR_CAP]` dB.
pub const SI_SDR_CAP: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The estimate is projected onto the reference; the projection is the
/// target component and the remainder is distortion.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "si_sdr: estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::invalid("si_sdr: reference is silent"));
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if target_energy == 0.0 {
        return Ok(-SI_SDR_CAP);
    }
    if err_energy == 0.0 {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (target_energy / err_energy).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub si_sdr_db: f64,
    pub mse: f64,
    pub input_si_sdr_db: f64,
    pub improvement_db: f64,
}

impl MetricReport {
    /// Scores `enhanced` and the unprocessed reference channel against `target`.
    pub fn measure(enhanced: &[f64], noisy_ref: &[f64], target: &[f64]) -> Result<Self> {
        let si_sdr_db = si_sdr(enhanced, target)?;
        let input_si_sdr_db = si_sdr(noisy_ref, target)?;
        Ok(MetricReport {
            si_sdr_db,
            mse: mse(enhanced, target),
            input_si_sdr_db,
            improvement_db: si_sdr_db - input_si_sdr_db,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}
