//! Reconstruction metrics in display range and run-level aggregation.
//!
//! Inputs are internal `[-1, 1]` tensors; every metric first maps them to
//! `[0, 1]` and clamps.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::StateTensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_WINDOW: usize = 11;

fn display(x: &StateTensor) -> StateTensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn mse(a: &StateTensor, b: &StateTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(display(a).sub(&display(b))?.sum_sq() / a.len() as f64)
}

/// `+inf` when the images agree exactly.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &StateTensor, b: &StateTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_taps(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the channel-mean grey images, with an 11x11 Gaussian
/// window (sigma 1.5). Images smaller than 11 pixels use the largest odd
/// window that fits.
pub fn ssim(a: &StateTensor, b: &StateTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (ga, gb) = (display(a).channel_mean(), display(b).channel_mean());
    let (h, w, _) = ga.dims();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = gaussian_taps(size);
    let (xa, xb) = (ga.data(), gb.data());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(xa, h, w, &taps);
    let mu_b = filter_valid(xb, h, w, &taps);
    let aa = filter_valid(&prod(xa, xa), h, w, &taps);
    let bb = filter_valid(&prod(xb, xb), h, w, &taps);
    let ab = filter_valid(&prod(xa, xb), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub stage: usize,
    pub resolution: usize,
    pub mse: f64,
    /// `null` in JSON for exact matches.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricRecord {
    pub fn compute(method: impl Into<String>, stage: usize, recon: &StateTensor, truth: &StateTensor) -> Result<Self> {
        let mse = mse(recon, truth)?;
        Ok(Self {
            method: method.into(),
            stage,
            resolution: truth.height(),
            mse,
            psnr_db: psnr_from_mse(mse),
            ssim: ssim(recon, truth)?,
        })
    }

    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr_db.is_infinite()
    }
}

/// One labelled top-resolution measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub omega1: f64,
    pub image_index: usize,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Self { mean, std: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub omega1: f64,
    pub count: usize,
    pub mse: MeanStd,
    pub ssim: MeanStd,
    pub psnr_db: MeanStd,
    /// Reserved; always `null`.
    pub lpips: Option<f64>,
    /// Reserved; always `null`.
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns: method, ω₁, MSE, SSIM, PSNR.
    pub fn to_table(&self) -> String {
        let fmt_ms = |m: &MeanStd, prec: usize| format!("{:.prec$} ± {:.prec$}", m.mean, m.std);
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{}", r.omega1),
                    format!("{:.6} ± {:.6}", r.mse.mean, r.mse.std),
                    fmt_ms(&r.ssim, 4),
                    fmt_ms(&r.psnr_db, 2),
                ]
            })
            .collect();
        let head = ["method", "ω₁", "MSE", "SSIM", "PSNR"];
        let mut widths = head.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &head.map(String::from));
        line(&mut out, &widths.map(|w| "-".repeat(w)));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}

/// Groups records by label (first-seen order) into mean ± population std.
pub fn evaluate_records(records: &[RunRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidRange("no results to evaluate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.label.as_str()) {
            order.push(&r.label);
        }
    }
    let rows = order
        .into_iter()
        .map(|label| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.label == label).collect();
            let col = |f: fn(&MetricRecord) -> f64| -> Vec<f64> { group.iter().map(|r| f(&r.metrics)).collect() };
            ReportRow {
                method: label.to_string(),
                omega1: group[0].omega1,
                count: group.len(),
                mse: MeanStd::of(&col(|m| m.mse)),
                ssim: MeanStd::of(&col(|m| m.ssim)),
                psnr_db: MeanStd::of(&col(|m| m.psnr_db)),
                lpips: None,
                clip_score: None,
            }
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
    })
}

/// One report row per distinct label over the top-resolution metrics of
/// `results`; `labels[i]` names `results[i]`.
pub fn evaluate_run(results: &[crate::cascade::CascadeResult], labels: &[String]) -> Result<EvalReport> {
    if results.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", results.len()), labels.len()));
    }
    let mut seen: Vec<(&str, usize)> = Vec::new();
    let records: Vec<RunRecord> = results
        .iter()
        .zip(labels)
        .map(|(r, label)| {
            let index = match seen.iter_mut().find(|(l, _)| *l == label.as_str()) {
                Some((_, n)) => {
                    *n += 1;
                    *n - 1
                }
                None => {
                    seen.push((label, 1));
                    0
                }
            };
            RunRecord {
                label: label.clone(),
                omega1: r.config.guidance(1),
                image_index: index,
                metrics: r.top_metrics().clone(),
            }
        })
        .collect();
    evaluate_records(&records)
}
