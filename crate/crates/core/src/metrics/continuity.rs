//! Local perceptual continuity: decoded drift under scaled random latent
//! perturbations, averaged over scales with inverse-scale weights.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PaeError, Result};
use crate::losses::Perceptual;
use crate::rng::seeded;

/// Maps latent tokens `[B, N, d]` to decoded outputs `[B, ...]`.
pub trait LatentDecoder {
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl LatentDecoder for IdentityDecoder {
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> LatentDecoder for F {
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self(z)
    }
}

/// `w_s = ρ_s⁻¹ / Σ_r ρ_r⁻¹`.
pub fn lpc_weights(scales: &[f64]) -> Result<Vec<f64>> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(config_err("perturbation scales must be positive and finite"));
    }
    let inv: f64 = scales.iter().map(|s| 1.0 / s).sum();
    Ok(scales.iter().map(|s| (1.0 / s) / inv).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpcResult {
    pub value: f64,
    pub per_scale: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Unit direction of `len` entries.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Multi-scale LPC over `z_set` (token matrices `[N, d]`). For every sample,
/// `directions` unit directions are drawn in order from one seeded stream and
/// shared across scales; `ε_s = ρ_s·‖z‖₂`.
pub fn lpc(
    decoder: &dyn LatentDecoder,
    z_set: &[Array2<f64>],
    scales: &[f64],
    directions: usize,
    perceptual: &dyn Perceptual,
    seed: u64,
) -> Result<LpcResult> {
    if z_set.is_empty() {
        return Err(config_err("lpc needs at least one latent"));
    }
    if directions == 0 {
        return Err(config_err("lpc needs at least one direction"));
    }
    let weights = lpc_weights(scales)?;
    let mut rng = seeded(seed);
    let mut sums = vec![0.0; scales.len()];
    for z in z_set {
        let (n, d) = z.dim();
        let flat: Vec<f64> = z.iter().copied().collect();
        let norm = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dirs: Vec<Vec<f64>> = (0..directions).map(|_| random_direction(&mut rng, flat.len())).collect();
        let mut batch = Vec::with_capacity((1 + 2 * directions * scales.len()) * flat.len());
        batch.extend_from_slice(&flat);
        for rho in scales {
            let eps = rho * norm;
            for u in &dirs {
                for sign in [1.0, -1.0] {
                    batch.extend(flat.iter().zip(u).map(|(x, ui)| x + sign * eps * ui));
                }
            }
        }
        let count = batch.len() / flat.len();
        let out = decoder.decode(&Tensor::from_vec(batch, (count, n, d), &Device::Cpu)?)?;
        let base = out.narrow(0, 0, 1)?;
        let rest = out.narrow(0, 1, count - 1)?;
        let reference = base.broadcast_as(rest.shape())?.contiguous()?;
        let dist: Vec<f64> = perceptual.per_sample(&rest, &reference)?.to_dtype(DType::F64)?.to_vec1()?;
        for (s, chunk) in dist.chunks(2 * directions).enumerate() {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            sums[s] += mean;
        }
    }
    let per_scale: Vec<f64> = sums.iter().map(|s| s / z_set.len() as f64).collect();
    let value = per_scale.iter().zip(&weights).map(|(v, w)| v * w).sum();
    if !f64::is_finite(value) {
        return Err(PaeError::Numeric("lpc is not finite".into()));
    }
    Ok(LpcResult { value, per_scale, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MeanAbsDiff;

    #[test]
    fn default_weights() {
        let w = lpc_weights(&[0.1, 0.5, 1.0, 2.0]).unwrap();
        for (a, b) in w.iter().zip([20.0 / 27.0, 4.0 / 27.0, 2.0 / 27.0, 1.0 / 27.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(lpc_weights(&[]).is_err());
        assert!(lpc_weights(&[0.0]).is_err());
    }

    #[test]
    fn constant_decoder_is_zero() {
        let constant = |z: &Tensor| -> Result<Tensor> { Ok(z.zeros_like()?) };
        let z = vec![Array2::from_elem((3, 2), 0.7)];
        let r = lpc(&constant, &z, &[0.1, 1.0], 4, &MeanAbsDiff, 0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.per_scale.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(lpc(&IdentityDecoder, &[], &[0.1], 1, &MeanAbsDiff, 0).is_err());
    }
}
