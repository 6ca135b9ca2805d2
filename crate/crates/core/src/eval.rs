//! Full-reference metrics and the ablation table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape(a: &Video, b: &Video, op: &'static str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::invalid(op, format!("shapes {:?} and {:?} differ", a.tensor().shape(), b.tensor().shape())));
    }
    Ok(())
}

fn psnr_of(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Video, b: &Video) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    Ok(psnr_of(a.data(), b.data()))
}

/// Mean SSIM over every `window x window` position of every channel plane.
pub fn ssim_with(a: &Video, b: &Video, window: usize, c1: f64, c2: f64) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if window == 0 || h < window || w < window {
        return Err(Error::invalid("ssim", format!("frame {h}x{w} is smaller than window {window}")));
    }
    let planes = a.frames() * a.channels();
    let total: f64 = (0..planes)
        .map(|p| {
            ssim_plane(
                &a.data()[p * h * w..(p + 1) * h * w],
                &b.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                window,
                c1,
                c2,
            )
        })
        .sum();
    Ok(total / planes as f64)
}

pub fn ssim(a: &Video, b: &Video) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let n = (win * win) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let i = (y + dy) * w + x + dx;
                    let (p, q) = (a[i], b[i]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Mean over consecutive frame pairs of the mean absolute difference
/// between the temporal gradients of `out` and `reference`. Lower is better.
pub fn temporal_consistency(out: &Video, reference: &Video) -> Result<f64> {
    same_shape(out, reference, "temporal_consistency")?;
    let f = out.frames();
    if f < 2 {
        return Err(Error::invalid("temporal_consistency", format!("needs at least 2 frames, got {f}")));
    }
    let n = out.frame_len();
    let mut total = 0.0;
    for t in 0..f - 1 {
        let (o0, o1) = (out.frame(t), out.frame(t + 1));
        let (r0, r1) = (reference.frame(t), reference.frame(t + 1));
        let l1: f64 = (0..n).map(|i| ((o1[i] - o0[i]) - (r1[i] - r0[i])).abs()).sum();
        total += l1 / n as f64;
    }
    Ok(total / (f - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Absent for single-frame clips.
    pub temporal_consistency: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

/// All metrics of `out` against `reference`.
pub fn evaluate(out: &Video, reference: &Video) -> Result<MetricReport> {
    let psnr_all = psnr(out, reference)?;
    let ssim_all = ssim(out, reference)?;
    let tc = if out.frames() >= 2 { Some(temporal_consistency(out, reference)?) } else { None };
    let per_frame = (0..out.frames())
        .map(|f| {
            let a = single_frame(out, f)?;
            let b = single_frame(reference, f)?;
            Ok(FrameMetrics { psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { psnr: psnr_all, ssim: ssim_all, temporal_consistency: tc, per_frame })
}

fn single_frame(v: &Video, f: usize) -> Result<Video> {
    let t = crate::tensor::Tensor::new([1, v.channels(), v.height(), v.width()], v.frame(f).to_vec())?;
    Video::new(t)
}

/// Mean metrics per configuration label across seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: BTreeMap<String, AblationRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Configuration flags as `key=value` strings.
    pub flags: Vec<String>,
    pub psnr_per_seed: Vec<f64>,
    pub lq_psnr_per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr_per_seed)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl AblationTable {
    pub fn record(&mut self, label: &str, flags: Vec<String>, psnr: f64, lq_psnr: f64) {
        let row = self.rows.entry(label.to_string()).or_default();
        row.flags = flags;
        row.psnr_per_seed.push(psnr);
        row.lq_psnr_per_seed.push(lq_psnr);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation table serializes")
    }

    /// Plain-text table, one row per configuration.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>10}  {}\n", "config", "psnr", "lq psnr", "flags");
        for (label, row) in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>10.3} {:>10.3}  {}\n",
                label,
                row.mean_psnr(),
                mean(&row.lq_psnr_per_seed),
                row.flags.join(",")
            ));
        }
        s
    }
}
