//! Regression metrics and the hotspot / risk summary of a predicted map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::train::{dataset_mse, Prepared};
use crate::unet::UNetParams;

pub const DEFAULT_HOTSPOT_THRESHOLD: f64 = 0.8;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when `mse == 0`.
pub fn psnr(mse: f64, max_val: f64) -> Result<f64> {
    if !(mse >= 0.0) || !mse.is_finite() {
        return Err(Error::InvalidInput(format!("mse must be finite and nonnegative, got {mse}")));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidInput(format!("max value must be positive, got {max_val}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// Serialized as `null` when infinite (perfect prediction).
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub n_samples: usize,
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// MSE and PSNR (peak 1.0) of `params` over every sample of `dataset`.
pub fn evaluate(params: &UNetParams, dataset: &Dataset) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let prepared = Prepared::from_dataset(dataset)?;
    let mse = dataset_mse(params, &prepared)?;
    Ok(MetricsReport {
        mse,
        psnr_db: psnr(mse, 1.0)?,
        n_samples: dataset.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HotspotCounting {
    /// 8-connected regions above threshold.
    #[default]
    Components,
    /// Individual pixels above threshold.
    Pixels,
}

impl FromStr for HotspotCounting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "components" => Ok(Self::Components),
            "pixels" => Ok(Self::Pixels),
            other => Err(format!("unknown counting mode '{other}' (expected components or pixels)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hotspots {
    /// 1.0 where the map is strictly above the threshold, else 0.0.
    pub mask: Grid2D,
    /// Number of 8-connected components of the mask.
    pub count: usize,
    pub pixel_count: usize,
}

/// Thresholds the map and labels the above-threshold pixels with
/// 8-connectivity (iterative flood fill).
pub fn detect_hotspots(map: &Grid2D, threshold: f64) -> Hotspots {
    let (h, w) = map.shape();
    let above: Vec<bool> = map.values().iter().map(|&v| v > threshold).collect();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..h * w {
        if !above[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if above[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    let mask = Grid2D::new(h, w, above.iter().map(|&a| a as u8 as f64).collect()).expect("finite mask");
    Hotspots {
        mask,
        count,
        pixel_count: above.iter().filter(|&&a| a).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskLevel::Low => "LOW",
            RiskLevel::Medium => "MEDIUM",
            RiskLevel::High => "HIGH",
        })
    }
}

/// Hotspot-count bands: `0` is LOW, `medium_min..high_min` MEDIUM, and
/// `high_min..` HIGH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskBands {
    pub medium_min: u64,
    pub high_min: u64,
}

impl Default for RiskBands {
    fn default() -> Self {
        Self {
            medium_min: 1,
            high_min: 10,
        }
    }
}

impl RiskBands {
    pub fn classify(&self, count: i64) -> Result<RiskLevel> {
        if count < 0 {
            return Err(Error::InvalidInput(format!("hotspot count cannot be negative, got {count}")));
        }
        let count = count as u64;
        Ok(if count == 0 || count < self.medium_min {
            RiskLevel::Low
        } else if count < self.high_min {
            RiskLevel::Medium
        } else {
            RiskLevel::High
        })
    }
}

/// Classification with the default bands (0 / 1–9 / ≥10).
pub fn classify_risk(count: i64) -> Result<RiskLevel> {
    RiskBands::default().classify(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskOptions {
    pub threshold: f64,
    pub counting: HotspotCounting,
    pub bands: RiskBands,
}

impl Default for RiskOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_HOTSPOT_THRESHOLD,
            counting: HotspotCounting::Components,
            bands: RiskBands::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub max_ir_drop: f64,
    pub mean_ir_drop: f64,
    pub hotspot_count: u64,
    pub risk_level: RiskLevel,
    pub threshold_used: f64,
}

/// Summary statistics of an (unclipped) prediction.
pub fn risk_report(prediction: &Grid2D, threshold: f64) -> Result<RiskReport> {
    risk_report_with(
        prediction,
        &RiskOptions {
            threshold,
            ..RiskOptions::default()
        },
    )
}

pub fn risk_report_with(prediction: &Grid2D, opts: &RiskOptions) -> Result<RiskReport> {
    if !opts.threshold.is_finite() {
        return Err(Error::InvalidParameter(format!("threshold must be finite, got {}", opts.threshold)));
    }
    let hotspots = detect_hotspots(prediction, opts.threshold);
    let count = match opts.counting {
        HotspotCounting::Components => hotspots.count,
        HotspotCounting::Pixels => hotspots.pixel_count,
    } as u64;
    Ok(RiskReport {
        max_ir_drop: prediction.max(),
        mean_ir_drop: prediction.mean(),
        hotspot_count: count,
        risk_level: opts.bands.classify(count as i64)?,
        threshold_used: opts.threshold,
    })
}
