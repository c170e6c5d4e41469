//! Evaluation battery: PSNR, SSIM, a temporal-consistency proxy, optional
//! plugin metrics and report tables.

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{ssim, Perceptual};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_FILE: &str = "report.jsonl";
pub const TABLE_FILE: &str = "report.txt";

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )))
    }
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// PSNR over the pixels where `mask` is set; also returns the pixel count
/// (`None` PSNR when the mask is empty).
pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool], peak: f64) -> Result<(Option<f64>, usize)> {
    check_pair(a, b)?;
    if mask.len() != a.height * a.width {
        return Err(Error::Shape("mask size differs from the image".into()));
    }
    let c = a.channels;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for ch in 0..c {
            let d = a.data[p * c + ch] - b.data[p * c + ch];
            sum += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Ok((None, 0));
    }
    Ok((Some(psnr_from_mse(sum / (n * c) as f64, peak)), n))
}

/// SSIM with the same kernel as the training loss.
pub fn ssim_metric(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b)
}

/// Pixels where the frame is not pure background.
pub fn foreground_mask(img: &Image) -> Vec<bool> {
    img.data.chunks_exact(img.channels).map(|p| p.iter().any(|&v| v > 0.0)).collect()
}

/// Temporal-consistency proxy: mean perceptual distance between successive
/// frame differences of the prediction and of the ground truth.
pub fn temporal_consistency(pred: &[Image], gt: &[Image], net: &Perceptual<f64>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape("temporal_consistency: sequences differ in length".into()));
    }
    if pred.len() < 2 {
        return Ok(0.0);
    }
    // differences enter the feature net centred on 0.5 (the net subtracts 0.5)
    let diff = |a: &Image, b: &Image| -> Result<Image> {
        check_pair(a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y + 0.5).collect();
        Image::from_data(a.height, a.width, a.channels, data)
    };
    let mut total = 0.0;
    for t in 1..pred.len() {
        let dp = diff(&pred[t], &pred[t - 1])?;
        let dg = diff(&gt[t], &gt[t - 1])?;
        total += net.distance(&[&dp], &[&dg])?;
    }
    Ok(total / (pred.len() - 1) as f64)
}

/// A metric backed by an external network (LPIPS, identity similarity).
pub trait ImageMetric {
    fn name(&self) -> &str;
    fn eval(&self, pred: &Image, gt: &Image) -> Result<f64>;
}

/// Optional plugin metrics; absent slots are reported as "n/a".
#[derive(Default)]
pub struct MetricSlots {
    pub lpips: Option<Box<dyn ImageMetric>>,
    pub id: Option<Box<dyn ImageMetric>>,
    /// Backbone for the temporal proxy.
    pub temporal: Option<Perceptual<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub id: Option<f64>,
    /// PSNR over the region mask (e.g. mouth) and its pixel count.
    pub region_psnr: Option<f64>,
    pub region_pixels: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub id: Option<f64>,
    pub temporal: Option<f64>,
    pub region_psnr: Option<f64>,
    pub region_pixels: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_hash: String,
    /// Free-form description of the evaluated slice.
    pub slice: String,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: Aggregate,
}

/// Inputs for one evaluated frame.
pub struct EvalFrame<'a> {
    pub name: String,
    pub pred: &'a Image,
    pub gt: &'a Image,
    /// Pixels that count (all when `None`).
    pub mask: Option<&'a [bool]>,
    /// Optional sub-region for the breakdown.
    pub region: Option<&'a [bool]>,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = v.collect();
    if v.is_empty() || v.iter().any(|x| x.is_none()) {
        return None;
    }
    Some(v.iter().map(|x| x.unwrap()).sum::<f64>() / v.len() as f64)
}

/// Masked copy: pixels outside the mask set to zero in both images, so SSIM
/// and the plugins only see the evaluated region.
fn apply_mask(img: &Image, mask: &[bool]) -> Image {
    let mut out = img.clone();
    for (px, &m) in out.data.chunks_exact_mut(img.channels).zip(mask) {
        if !m {
            px.fill(0.0);
        }
    }
    out
}

/// Per-frame metrics and their means.
pub fn evaluate(name: &str, config_hash: &str, slice: &str, frames: &[EvalFrame], slots: &MetricSlots) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        check_pair(f.pred, f.gt)?;
        let n = f.pred.height * f.pred.width;
        let (pred, gt, psnr_v, pixels) = match f.mask {
            Some(m) => {
                let (p, count) = psnr_masked(f.pred, f.gt, m, 1.0)?;
                (apply_mask(f.pred, m), apply_mask(f.gt, m), p.unwrap_or(PSNR_CAP), count)
            }
            None => (f.pred.clone(), f.gt.clone(), psnr(f.pred, f.gt, 1.0)?, n),
        };
        let (region_psnr, region_pixels) = match f.region {
            Some(r) => psnr_masked(f.pred, f.gt, r, 1.0)?,
            None => (None, 0),
        };
        rows.push(FrameMetrics {
            frame: f.name.clone(),
            psnr: psnr_v,
            ssim: ssim_metric(&pred, &gt)?,
            lpips: f.pred_metric(&slots.lpips, &pred, &gt)?,
            id: f.pred_metric(&slots.id, &pred, &gt)?,
            region_psnr,
            region_pixels,
            pixels,
        });
    }
    let temporal = match &slots.temporal {
        Some(net) => {
            let p: Vec<Image> = frames.iter().map(|f| f.pred.clone()).collect();
            let g: Vec<Image> = frames.iter().map(|f| f.gt.clone()).collect();
            Some(temporal_consistency(&p, &g, net)?)
        }
        None => None,
    };
    let k = rows.len().max(1) as f64;
    let with_region: Vec<&FrameMetrics> = rows.iter().filter(|r| r.region_psnr.is_some()).collect();
    let aggregate = Aggregate {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
        lpips: mean_opt(rows.iter().map(|r| r.lpips)),
        id: mean_opt(rows.iter().map(|r| r.id)),
        temporal,
        region_psnr: mean_opt(with_region.iter().map(|r| r.region_psnr)),
        region_pixels: rows.iter().map(|r| r.region_pixels).sum(),
        frames: rows.len(),
    };
    if let Some(p) = aggregate.region_psnr {
        log::info!("{name}: region PSNR {p:.3} dB over {} pixels", aggregate.region_pixels);
    }
    Ok(EvalReport { name: name.into(), config_hash: config_hash.into(), slice: slice.into(), frames: rows, aggregate })
}

impl EvalFrame<'_> {
    fn pred_metric(&self, slot: &Option<Box<dyn ImageMetric>>, pred: &Image, gt: &Image) -> Result<Option<f64>> {
        slot.as_ref().map(|m| m.eval(pred, gt)).transpose()
    }
}

/// SHA-256 of a configuration's canonical JSON.
pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let v = serde_json::to_value(config)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Run { name: String, config_hash: String, slice: String },
    Frame(FrameMetrics),
    Summary(Aggregate),
}

impl EvalReport {
    /// Line-delimited JSON: a run header, one record per frame, a summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header =
            Record::Run { name: self.name.clone(), config_hash: self.config_hash.clone(), slice: self.slice.clone() };
        writeln!(out, "{}", serde_json::to_string(&header)?).expect("string write");
        for f in &self.frames {
            writeln!(out, "{}", serde_json::to_string(&Record::Frame(f.clone()))?).expect("string write");
        }
        writeln!(out, "{}", serde_json::to_string(&Record::Summary(self.aggregate.clone()))?).expect("string write");
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report: Option<EvalReport> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<Record>(line)? {
                Record::Run { name, config_hash, slice } => {
                    report = Some(EvalReport { name, config_hash, slice, frames: Vec::new(), aggregate: Aggregate::default() })
                }
                Record::Frame(f) => report.as_mut().ok_or_else(|| missing_header())?.frames.push(f),
                Record::Summary(a) => report.as_mut().ok_or_else(|| missing_header())?.aggregate = a,
            }
        }
        report.ok_or_else(missing_header)
    }

    /// Writes `report.jsonl` and `report.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(REPORT_FILE);
        fs::write(&p, self.to_jsonl()?).map_err(|e| Error::io(&p, e))?;
        let t = dir.join(TABLE_FILE);
        fs::write(&t, table(std::slice::from_ref(self))).map_err(|e| Error::io(&t, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

fn missing_header() -> Error {
    Error::InvalidInput("report has no run header".into())
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

/// Comparison table with one row per run, sorted by name.
pub fn table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let header = ["Method", "LPIPS ↓", "SSIM ↑", "PSNR ↑", "ID ↑", "t-LPIPS ↓", "Mouth PSNR ↑", "Frames"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            let a = &r.aggregate;
            [
                r.name.clone(),
                cell(a.lpips, 4),
                cell(Some(a.ssim), 4),
                cell(Some(a.psnr), 2),
                cell(a.id, 4),
                cell(a.temporal, 4),
                cell(a.region_psnr, 2),
                a.frames.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> =
            cells.iter().zip(&widths).map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(header.to_vec());
    out.push_str(&format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for r in &body {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
    }
    out
}

/// Loads `report.jsonl` from every run directory and returns the table and
/// the summary records (sorted by run name) as JSON lines.
pub fn report(run_dirs: &[PathBuf]) -> Result<(String, String)> {
    let mut reports = run_dirs
        .iter()
        .map(|d| EvalReport::load(d.join(REPORT_FILE)))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    let mut lines = String::new();
    for r in &reports {
        let rec = serde_json::json!({ "name": r.name, "config_hash": r.config_hash, "slice": r.slice, "summary": r.aggregate });
        writeln!(lines, "{rec}").expect("string write");
    }
    Ok((table(&reports), lines))
}
