//! Latent-geometry diagnostics: SSC, LPC, GSQ and eRank, and the report
//! that bundles them with everything needed to recompute each number.

pub mod continuity;
pub mod semantic;
pub mod structure;

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::harness::config::{MetricsConfig, SpectrumMode};
use crate::losses::Perceptual;
use crate::rng::substream_seed;
use crate::tokenizer::LatentCode;

pub use continuity::{lpc, lpc_weights, IdentityDecoder, LatentDecoder, LpcResult};
pub use semantic::{erank, gsq, nn_purity, ErankResult, GsqResult};
pub use structure::{
    kmeans, majority_ids, nmi, project_mask_to_latent, spectral_cluster, ssc, token_affinity,
    Clustering, TokenLabels,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub seed: u64,
    pub ssc_seed: u64,
    pub lpc_seed: u64,
    pub gsq_seed: u64,
    pub sigma: f64,
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
    pub lpc_directions: usize,
    pub lpc_samples: usize,
    pub gsq_classes: usize,
    pub gsq_subsets: Vec<Vec<usize>>,
    pub kmeans_restarts: usize,
    pub erank_spectrum: SpectrumMode,
    pub perceptual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub ssc: Option<f64>,
    pub ssc_per_image: Vec<f64>,
    pub lpc: Option<f64>,
    pub lpc_per_scale: Vec<f64>,
    pub gsq: Option<f64>,
    pub gsq_std: Option<f64>,
    pub erank: Option<f64>,
    /// Metric name to the reason it was not computed.
    pub omitted: BTreeMap<String, String>,
    pub eval_meta: EvalMeta,
}

impl GeometryReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::PaeError::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::PaeError::Format(e.to_string()))
    }
}

/// Global average pool of each latent, `[n, d]`.
pub fn pooled(latents: &[&Array2<f64>]) -> Array2<f64> {
    let d = latents.first().map_or(0, |z| z.ncols());
    let mut out = Array2::zeros((latents.len(), d));
    for (i, z) in latents.iter().enumerate() {
        out.row_mut(i).assign(&z.mean_axis(Axis(0)).expect("non-empty latent"));
    }
    out
}

/// Inputs to [`geometry_report`]. Any missing input omits the metrics that
/// need it.
pub struct GeometryInputs<'a> {
    pub latents: &'a [LatentCode],
    pub decoder: Option<&'a dyn LatentDecoder>,
    pub masks: Option<&'a [TokenLabels]>,
    pub labels: Option<&'a [usize]>,
    pub perceptual: &'a dyn Perceptual,
}

/// Metric seeds derived from the report seed.
pub fn metric_seeds(seed: u64) -> (u64, u64, u64) {
    (
        substream_seed(seed, "metrics.ssc"),
        substream_seed(seed, "metrics.lpc"),
        substream_seed(seed, "metrics.gsq"),
    )
}

pub fn geometry_report(inputs: &GeometryInputs, cfg: &MetricsConfig, seed: u64) -> Result<GeometryReport> {
    if inputs.latents.is_empty() {
        return Err(config_err("geometry report needs at least one latent"));
    }
    let tokens: Vec<Array2<f64>> = inputs.latents.iter().map(|l| l.tokens()).collect();
    let (ssc_seed, lpc_seed, gsq_seed) = metric_seeds(seed);
    let mut omitted = BTreeMap::new();

    let (ssc_value, ssc_per_image) = match inputs.masks {
        Some(masks) if masks.len() == tokens.len() => {
            let per = tokens
                .iter()
                .zip(masks)
                .map(|(z, m)| ssc(z, m, cfg.sigma, ssc_seed, cfg.kmeans_restarts))
                .collect::<Result<Vec<_>>>()?;
            (Some(per.iter().sum::<f64>() / per.len() as f64), per)
        }
        Some(masks) => {
            return Err(config_err(format!("{} masks for {} latents", masks.len(), tokens.len())));
        }
        None => {
            omitted.insert("ssc".into(), "masks unavailable".into());
            (None, Vec::new())
        }
    };

    let weights = lpc_weights(&cfg.lpc_scales)?;
    let (lpc_value, lpc_per_scale) = match inputs.decoder {
        Some(dec) => {
            let take = cfg.lpc_samples.min(tokens.len());
            let r = lpc(dec, &tokens[..take], &cfg.lpc_scales, cfg.lpc_directions, inputs.perceptual, lpc_seed)?;
            (Some(r.value), r.per_scale)
        }
        None => {
            omitted.insert("lpc".into(), "decoder unavailable".into());
            (None, Vec::new())
        }
    };

    let refs: Vec<&Array2<f64>> = tokens.iter().collect();
    let pool = pooled(&refs);
    let (gsq_value, gsq_std, subsets) = match inputs.labels {
        Some(labels) => {
            let r = gsq(&pool, labels, cfg.gsq_classes, cfg.gsq_subsets, gsq_seed)?;
            (Some(r.mean), Some(r.std), r.subsets)
        }
        None => {
            omitted.insert("gsq".into(), "labels unavailable".into());
            (None, None, Vec::new())
        }
    };

    let erank_value = if pool.nrows() >= 2 {
        Some(erank(&pool, cfg.erank_spectrum)?.value)
    } else {
        omitted.insert("erank".into(), "fewer than two latents".into());
        None
    };

    Ok(GeometryReport {
        ssc: ssc_value,
        ssc_per_image,
        lpc: lpc_value,
        lpc_per_scale,
        gsq: gsq_value,
        gsq_std,
        erank: erank_value,
        omitted,
        eval_meta: EvalMeta {
            seed,
            ssc_seed,
            lpc_seed,
            gsq_seed,
            sigma: cfg.sigma,
            scales: cfg.lpc_scales.clone(),
            weights,
            lpc_directions: cfg.lpc_directions,
            lpc_samples: cfg.lpc_samples.min(tokens.len()),
            gsq_classes: cfg.gsq_classes,
            gsq_subsets: subsets,
            kmeans_restarts: cfg.kmeans_restarts,
            erank_spectrum: cfg.erank_spectrum,
            perceptual: inputs.perceptual.name().to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MeanAbsDiff;
    use ndarray::Array3;

    fn latent(seed: usize) -> LatentCode {
        let z = Array3::from_shape_fn((2, 2, 2), |(k, r, c)| ((seed + 1) * (k + 2 * r + c + 1)) as f64 % 5.0 - 2.0);
        LatentCode { z, rms_eps: 0.0 }
    }

    #[test]
    fn report_matches_standalone_and_round_trips() {
        let latents: Vec<LatentCode> = (0..6).map(latent).collect();
        let labels = vec![0, 1, 0, 1, 0, 1];
        let masks: Vec<TokenLabels> = (0..6).map(|_| TokenLabels::canonical(&[0, 0, 1, 1])).collect();
        let cfg = MetricsConfig {
            lpc_samples: 3,
            gsq_classes: 2,
            ..MetricsConfig::default()
        };
        let inputs = GeometryInputs {
            latents: &latents,
            decoder: Some(&IdentityDecoder),
            masks: Some(&masks),
            labels: Some(&labels),
            perceptual: &MeanAbsDiff,
        };
        let rep = geometry_report(&inputs, &cfg, 11).unwrap();
        let m = &rep.eval_meta;
        let toks: Vec<Array2<f64>> = latents.iter().map(|l| l.tokens()).collect();
        let s0 = ssc(&toks[0], &masks[0], m.sigma, m.ssc_seed, m.kmeans_restarts).unwrap();
        assert_eq!(rep.ssc_per_image[0], s0);
        let l = lpc(&IdentityDecoder, &toks[..3], &m.scales, m.lpc_directions, &MeanAbsDiff, m.lpc_seed).unwrap();
        assert_eq!(rep.lpc, Some(l.value));
        let refs: Vec<&Array2<f64>> = toks.iter().collect();
        let g = gsq(&pooled(&refs), &labels, 2, 5, m.gsq_seed).unwrap();
        assert_eq!(rep.gsq, Some(g.mean));
        assert!(rep.omitted.is_empty());
        let back = GeometryReport::from_json(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn missing_inputs_are_omitted_with_reasons() {
        let latents: Vec<LatentCode> = (0..3).map(latent).collect();
        let inputs = GeometryInputs {
            latents: &latents,
            decoder: None,
            masks: None,
            labels: None,
            perceptual: &MeanAbsDiff,
        };
        let rep = geometry_report(&inputs, &MetricsConfig::default(), 0).unwrap();
        assert_eq!(rep.gsq, None);
        assert_eq!(rep.omitted["gsq"], "labels unavailable");
        assert!(rep.omitted.contains_key("ssc") && rep.omitted.contains_key("lpc"));
        assert!(rep.erank.is_some());
    }
}
