use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub name: String,
    #[serde(with = "extended_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub crc: Vec<f64>,
}

impl SliceMetrics {
    pub fn mean_crc(&self) -> f64 {
        self.crc.iter().sum::<f64>() / self.crc.len() as f64
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "extended_f64")]
    pub mean: f64,
    #[serde(with = "extended_f64")]
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 && mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub psnr: Stat,
    pub ssim: Stat,
    pub rmse: Stat,
    /// Averaged over tumors within a slice first, then over slices.
    pub crc: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub summary: MethodSummary,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub slices: Vec<SliceMetrics>,
}

impl EvalReport {
    pub fn new(method: &str, slices: Vec<SliceMetrics>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Metric("no slices to summarize".into()));
        }
        let col = |f: fn(&SliceMetrics) -> f64| Stat::of(&slices.iter().map(f).collect::<Vec<_>>());
        let summary = MethodSummary {
            psnr: col(|s| s.psnr),
            ssim: col(|s| s.ssim),
            rmse: col(|s| s.rmse),
            crc: col(SliceMetrics::mean_crc),
        };
        Ok(Self { method: method.into(), summary, bias: None, variance: None, slices })
    }

    pub fn with_bias_variance(mut self, bias: f64, variance: f64) -> Self {
        self.bias = Some(bias);
        self.variance = Some(variance);
        self
    }
}

fn fmt_stat(s: &Stat, digits: usize) -> String {
    if s.mean.is_infinite() {
        return "inf".into();
    }
    format!("{:.*} ±{:.*}", digits, s.mean, digits, s.std)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4e}"))
}

/// Aligned plain-text comparison table, one row per method.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let header = ["Method", "PSNR(dB)", "SSIM", "RMSE", "CRC", "Bias", "Variance"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                fmt_stat(&r.summary.psnr, 2),
                fmt_stat(&r.summary.ssim, 4),
                fmt_stat(&r.summary.rmse, 4),
                fmt_stat(&r.summary.crc, 4),
                fmt_opt(r.bias),
                fmt_opt(r.variance),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, row);
    }
    out
}

/// `f64` that round-trips infinities and NaN through JSON as strings.
pub mod extended_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}
