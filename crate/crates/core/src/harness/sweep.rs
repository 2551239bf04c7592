//! Pilot sweeps: one toy tokenizer per knob value, its geometry metrics and
//! FID proxies, and sign-normalized Pearson correlations against the
//! generation proxy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PaeError, Result};
use crate::harness::config::{RunConfig, ScrScope};
use crate::harness::pipeline::{run_experiment, ExperimentReport};

/// Sample Pearson correlation; `None` for fewer than two points or a
/// constant column.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKnob {
    Dim,
    LambdaSsr,
    LambdaMcr,
    LambdaScr,
}

impl FromStr for SweepKnob {
    type Err = PaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dim" => Ok(Self::Dim),
            "lambda-ssr" | "ssr" => Ok(Self::LambdaSsr),
            "lambda-mcr" | "mcr" => Ok(Self::LambdaMcr),
            "lambda-scr" | "scr" => Ok(Self::LambdaScr),
            other => Err(config_err(format!("unknown sweep knob `{other}` (dim, lambda-ssr, lambda-mcr, lambda-scr)"))),
        }
    }
}

impl fmt::Display for SweepKnob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dim => "dim",
            Self::LambdaSsr => "lambda-ssr",
            Self::LambdaMcr => "lambda-mcr",
            Self::LambdaScr => "lambda-scr",
        })
    }
}

/// The variant config for one knob value: regularizers other than the swept
/// one are switched off, and the semantic sweep uses the pooled token only.
pub fn variant_config(base: &RunConfig, knob: SweepKnob, value: f64) -> Result<RunConfig> {
    let mut c = base.clone();
    c.losses.lambda_ssr = 0.0;
    c.losses.lambda_mcr = 0.0;
    c.losses.lambda_scr = 0.0;
    match knob {
        SweepKnob::Dim => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(config_err(format!("latent dimension must be a positive integer, got {value}")));
            }
            c.tokenizer.latent_dim = value as usize;
            c.refinement.latent_dim = value as usize;
        }
        SweepKnob::LambdaSsr => c.losses.lambda_ssr = value,
        SweepKnob::LambdaMcr => c.losses.lambda_mcr = value,
        SweepKnob::LambdaScr => {
            c.losses.lambda_scr = value;
            c.losses.scr_scope = ScrScope::PooledOnly;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub rfid_proxy: Option<f64>,
    pub gfid_proxy: Option<f64>,
    pub ssc: Option<f64>,
    pub lpc: Option<f64>,
    pub gsq: Option<f64>,
    pub erank: Option<f64>,
    pub failure: Option<String>,
}

impl SweepRow {
    fn from_report(value: f64, r: &ExperimentReport) -> Self {
        let g = &r.tokenizer.geometry;
        Self {
            value,
            rfid_proxy: Some(r.tokenizer.rfid_proxy),
            gfid_proxy: r.generation.as_ref().map(|g| g.gfid_proxy),
            ssc: g.ssc,
            lpc: g.lpc,
            gsq: g.gsq,
            erank: g.erank,
            failure: None,
        }
    }

    fn failed(value: f64, err: &PaeError) -> Self {
        Self {
            value,
            rfid_proxy: None,
            gfid_proxy: None,
            ssc: None,
            lpc: None,
            gsq: None,
            erank: None,
            failure: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: Option<f64>,
    pub points: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub knob: SweepKnob,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// Metric name to Pearson r against the generation proxy, after sign
    /// normalization (higher always reads as better).
    pub correlations: BTreeMap<String, Correlation>,
}

/// Orients a column so that larger is better: FID proxies and LPC are
/// negated, GSQ is log-transformed.
pub fn normalize_column(name: &str, v: f64) -> Option<f64> {
    match name {
        "gfid" | "rfid" | "lpc" => Some(-v),
        "gsq" if v > 0.0 => Some(v.ln()),
        "gsq" => None,
        _ => Some(v),
    }
}

/// Pearson r of every metric column against the generation proxy.
pub fn correlations(rows: &[SweepRow]) -> BTreeMap<String, Correlation> {
    let columns: [(&str, fn(&SweepRow) -> Option<f64>); 5] = [
        ("rfid", |r| r.rfid_proxy),
        ("ssc", |r| r.ssc),
        ("lpc", |r| r.lpc),
        ("gsq", |r| r.gsq),
        ("erank", |r| r.erank),
    ];
    let mut out = BTreeMap::new();
    for (name, get) in columns {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| {
                let x = normalize_column(name, get(r)?)?;
                let y = normalize_column("gfid", r.gfid_proxy?)?;
                Some((x, y))
            })
            .unzip();
        let r = pearson(&xs, &ys);
        let note = match (xs.len(), r) {
            (n, _) if n < 2 => Some("fewer than two complete rows".to_string()),
            (_, None) => Some("constant column".to_string()),
            _ => None,
        };
        out.insert(name.to_string(), Correlation { r, points: xs.len(), note });
    }
    out
}

/// Runs one experiment per value with the shared seed of `base`. A failing
/// variant becomes a row with a failure marker.
pub fn pilot_sweep(knob: SweepKnob, values: &[f64], base: &RunConfig) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(config_err("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let row = match variant_config(base, knob, v).and_then(|c| run_experiment(&c, true)) {
            Ok(rep) => SweepRow::from_report(v, &rep),
            Err(e) => {
                log::warn!("sweep variant {knob}={v} failed: {e}");
                SweepRow::failed(v, &e)
            }
        };
        rows.push(row);
    }
    Ok(SweepReport {
        knob,
        seed: base.seed,
        correlations: correlations(&rows),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_cases() {
        assert_eq!(pearson(&[1.0], &[2.0]), None);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_orients_columns() {
        assert_eq!(normalize_column("lpc", 0.2), Some(-0.2));
        assert_eq!(normalize_column("gfid", 3.0), Some(-3.0));
        assert_eq!(normalize_column("gsq", 1.0), Some(0.0));
        assert_eq!(normalize_column("ssc", 0.4), Some(0.4));
    }

    #[test]
    fn variants_isolate_one_knob() {
        let base = RunConfig::toy();
        let c = variant_config(&base, SweepKnob::LambdaScr, 0.7).unwrap();
        assert_eq!((c.losses.lambda_ssr, c.losses.lambda_mcr, c.losses.lambda_scr), (0.0, 0.0, 0.7));
        assert_eq!(c.losses.scr_scope, ScrScope::PooledOnly);
        let d = variant_config(&base, SweepKnob::Dim, 4.0).unwrap();
        assert_eq!((d.tokenizer.latent_dim, d.refinement.latent_dim), (4, 4));
        assert!(variant_config(&base, SweepKnob::Dim, 2.5).is_err());
        assert!("lambda-ssr".parse::<SweepKnob>().is_ok());
        assert!("depth".parse::<SweepKnob>().is_err());
    }

    #[test]
    fn single_row_has_undefined_correlation() {
        let row = SweepRow {
            value: 1.0,
            rfid_proxy: Some(1.0),
            gfid_proxy: Some(2.0),
            ssc: Some(0.5),
            lpc: Some(0.1),
            gsq: Some(0.5),
            erank: Some(0.5),
            failure: None,
        };
        let c = correlations(&[row]);
        assert!(c.values().all(|c| c.r.is_none() && c.note.is_some()));
    }
}
