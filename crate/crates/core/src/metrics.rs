//! Dense-pose structure metrics (binary and per-index IoU), SSIM and
//! aggregate statistics.

use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest body-part index a dense-pose detector emits.
pub const DP_MAX_INDEX: u8 = 24;

/// Per-image value of an IoU whose union is empty.
pub const MASKED: f64 = -1.0;

/// Body-part index image, values 0..=24 (0 = no body).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseIndexMap(GrayImage);

impl DenseIndexMap {
    pub fn new(pixels: GrayImage) -> Result<Self> {
        if let Some(&v) = pixels.as_raw().iter().find(|&&v| v > DP_MAX_INDEX) {
            return Err(Error::IndexOutOfRange(v));
        }
        Ok(Self(pixels))
    }

    /// Reads the index plane of a dense-pose PNG. Color files store the
    /// index in the blue component (channel 0 in BGR decoding order);
    /// grayscale files store it directly.
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::from(e).at(path))?;
        let plane = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                let rgba = other.to_rgba8();
                GrayImage::from_fn(rgba.width(), rgba.height(), |x, y| image::Luma([rgba.get_pixel(x, y).0[2]]))
            }
        };
        Self::new(plane).map_err(|e| e.at(path))
    }

    pub fn pixels(&self) -> &GrayImage {
        &self.0
    }

    pub fn max_index(&self) -> u8 {
        self.0.as_raw().iter().copied().max().unwrap_or(0)
    }
}

fn same_shape(a: &DenseIndexMap, b: &DenseIndexMap) -> Result<()> {
    if a.0.dimensions() != b.0.dimensions() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.0.dimensions(), b.0.dimensions())));
    }
    Ok(())
}

fn iou_by(a: &[u8], b: &[u8], pred: impl Fn(u8) -> bool) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (pred(x), pred(y));
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        MASKED
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the nonzero supports; [`MASKED`] when both are empty.
pub fn binary_iou(a: &DenseIndexMap, b: &DenseIndexMap) -> Result<f64> {
    same_shape(a, b)?;
    Ok(iou_by(a.0.as_raw(), b.0.as_raw(), |v| v > 0))
}

/// Binary similarity between ground-truth and generated detections.
pub fn dpbs(gt: &DenseIndexMap, gen: &DenseIndexMap) -> Result<f64> {
    binary_iou(gt, gen)
}

/// IoU restricted to body-part index `index`.
pub fn index_iou(a: &DenseIndexMap, b: &DenseIndexMap, index: u8) -> Result<f64> {
    same_shape(a, b)?;
    Ok(iou_by(a.0.as_raw(), b.0.as_raw(), |v| v == index))
}

/// How the per-index IoUs of one image are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpisMode {
    /// Mean over indices `1..=max` whose union is nonempty.
    #[default]
    PresentIndices,
    /// Mean over all 24 slots: indices above the pair's maximum count as 0,
    /// masked indices below it are left out.
    AllSlots,
}

/// Index similarity in the default mode.
pub fn dpis(gt: &DenseIndexMap, gen: &DenseIndexMap) -> Result<f64> {
    dpis_with(gt, gen, DpisMode::PresentIndices)
}

pub fn dpis_with(gt: &DenseIndexMap, gen: &DenseIndexMap, mode: DpisMode) -> Result<f64> {
    same_shape(gt, gen)?;
    let max_idx = gt.max_index().max(gen.max_index());
    let mut slots = [0.0f64; DP_MAX_INDEX as usize];
    let mut masked = [false; DP_MAX_INDEX as usize];
    for idx in 1..=max_idx {
        let v = index_iou(gt, gen, idx)?;
        slots[idx as usize - 1] = v;
        masked[idx as usize - 1] = v == MASKED;
    }
    let limit = match mode {
        DpisMode::PresentIndices => max_idx as usize,
        DpisMode::AllSlots => DP_MAX_INDEX as usize,
    };
    let (sum, count) = slots[..limit]
        .iter()
        .zip(&masked[..limit])
        .filter(|(_, &m)| !m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean, population standard deviation and median over unmasked entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub count: usize,
    pub masked_count: usize,
}

impl MetricStats {
    /// `None` entries are masked.
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let kept: Vec<f64> = values.iter().flatten().copied().collect();
        let masked_count = values.len() - kept.len();
        if kept.is_empty() {
            return Self {
                mean: None,
                sd: None,
                median: None,
                count: 0,
                masked_count,
            };
        }
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = kept.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Self {
            mean: Some(mean),
            sd: Some(var.sqrt()),
            median: Some(median),
            count: kept.len(),
            masked_count,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-0.5 * ((i as f64 - r) / sigma).powi(2)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, xx)| (0..n).map(|i| k[i] * x[[y, xx + i]]).sum());
    Array2::from_shape_fn((oh, ow), |(y, xx)| (0..n).map(|i| k[i] * rows[[y + i, xx]]).sum())
}

/// SSIM settings; defaults are the canonical 11x11 Gaussian window with
/// sigma 1.5, `k1 = 0.01`, `k2 = 0.03`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 255.0,
        }
    }
}

/// Mean local SSIM over positions where the window fits, averaged over
/// channels. Inputs are `C x H x W`.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, cfg: SsimConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (c, h, w) = a.dim();
    if cfg.window > h || cfg.window > w {
        return Err(Error::WindowTooLarge {
            window: cfg.window,
            height: h,
            width: w,
        });
    }
    let k = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let y = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &k) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
        let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
        let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
        total += (num / den).mean().expect("nonempty");
    }
    Ok(total / c as f64)
}

pub fn ssim_rgb(a: &image::RgbImage, b: &image::RgbImage) -> Result<f64> {
    let to = |img: &image::RgbImage| {
        let (w, h) = img.dimensions();
        Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| img.get_pixel(x as u32, y as u32).0[c] as f64)
    };
    ssim(&to(a), &to(b), SsimConfig::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    ByName,
    ByOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub gt: String,
    pub generated: String,
    /// `None` when neither image contains a detection.
    pub dpbs: Option<f64>,
    pub dpis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pairing: Pairing,
    pub dpis_mode: DpisMode,
    pub images: Vec<ImageScore>,
    pub dpbs: MetricStats,
    /// Unmasked over images, as DPIS is always defined.
    pub dpis: MetricStats,
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))? {
        let entry = entry.map_err(|e| Error::from(e).at(dir))?;
        if entry.file_type().map_err(|e| Error::from(e).at(entry.path()))?.is_file() {
            out.push(entry.path());
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scores every ground-truth file against its generated counterpart.
/// Nothing is returned unless every pair scores.
pub fn evaluate_directory(gt_dir: &Path, gen_dir: &Path, pairing: Pairing, mode: DpisMode) -> Result<EvaluationReport> {
    let gt_files = list_files(gt_dir)?;
    let gen_files = list_files(gen_dir)?;
    if gt_files.len() != gen_files.len() {
        return Err(Error::CountMismatch {
            gt: gt_files.len(),
            gen: gen_files.len(),
        });
    }
    let pairs: Vec<(PathBuf, PathBuf)> = gt_files
        .iter()
        .enumerate()
        .map(|(i, g)| match pairing {
            Pairing::ByOrder => (g.clone(), gen_files[i].clone()),
            Pairing::ByName => (g.clone(), gen_dir.join(g.file_name().expect("file"))),
        })
        .collect();
    let images = pairs
        .par_iter()
        .map(|(g, p)| {
            let gt = DenseIndexMap::read(g)?;
            let gen = DenseIndexMap::read(p)?;
            let b = dpbs(&gt, &gen).map_err(|e| e.at(p))?;
            Ok(ImageScore {
                gt: name_of(g),
                generated: name_of(p),
                dpbs: (b != MASKED).then_some(b),
                dpis: dpis_with(&gt, &gen, mode).map_err(|e| e.at(p))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dpbs_stats = MetricStats::from_values(&images.iter().map(|s| s.dpbs).collect::<Vec<_>>());
    let dpis_stats = MetricStats::from_values(&images.iter().map(|s| Some(s.dpis)).collect::<Vec<_>>());
    Ok(EvaluationReport {
        pairing,
        dpis_mode: mode,
        images,
        dpbs: dpbs_stats,
        dpis: dpis_stats,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image followed by `mean`, `sd` and `median` rows; masked
    /// values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Config(e.to_string());
        w.write_record(["gt", "generated", "dpbs", "dpis"]).map_err(csv_err)?;
        for s in &self.images {
            w.write_record([s.gt.clone(), s.generated.clone(), cell(s.dpbs), s.dpis.to_string()])
                .map_err(csv_err)?;
        }
        for (label, b, i) in [
            ("mean", self.dpbs.mean, self.dpis.mean),
            ("sd", self.dpbs.sd, self.dpis.sd),
            ("median", self.dpbs.median, self.dpis.median),
        ] {
            w.write_record([label.to_string(), String::new(), cell(b), cell(i)]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> DenseIndexMap {
        DenseIndexMap::new(GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))).unwrap()
    }

    #[test]
    fn binary_iou_examples() {
        let a = map(4, 4, |x, _| (x % 3) as u8 + 1);
        assert_eq!(binary_iou(&a, &a).unwrap(), 1.0);
        let e = map(4, 4, |_, _| 0);
        assert_eq!(binary_iou(&e, &e).unwrap(), MASKED);
        let top = map(4, 4, |_, y| (y < 2) as u8);
        let full = map(4, 4, |_, _| 1);
        assert_eq!(binary_iou(&top, &full).unwrap(), 0.5);
    }

    #[test]
    fn dpis_examples() {
        let a = map(4, 4, |x, _| if x < 2 { 1 } else { 5 });
        assert_eq!(dpis(&a, &a).unwrap(), 1.0);
        let r1 = map(4, 4, |_, y| (y < 2) as u8);
        let r2 = map(4, 4, |_, y| 2 * (y < 2) as u8);
        assert_eq!(dpis(&r1, &r2).unwrap(), 0.0);
        let left = map(4, 4, |x, _| (x < 2) as u8);
        let full = map(4, 4, |_, _| 1);
        assert_eq!(dpis(&left, &full).unwrap(), 0.5);
        // slots above the maximum index count as zeros
        assert_eq!(dpis_with(&left, &full, DpisMode::AllSlots).unwrap(), 0.5 / 24.0);
        assert_eq!(dpis_with(&a, &a, DpisMode::AllSlots).unwrap(), 2.0 / 21.0);
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(matches!(
            DenseIndexMap::new(GrayImage::from_pixel(2, 2, image::Luma([25]))),
            Err(Error::IndexOutOfRange(25))
        ));
    }

    #[test]
    fn stats_match_hand_values() {
        let s = MetricStats::from_values(&[Some(1.0), None, Some(0.0), Some(0.5), Some(0.25)]);
        assert_eq!(s.mean, Some(0.4375));
        assert_eq!(s.median, Some(0.375));
        assert_eq!(s.masked_count, 1);
        let var: f64 = [1.0f64, 0.0, 0.5, 0.25].iter().map(|v| (v - 0.4375).powi(2)).sum::<f64>() / 4.0;
        assert!((s.sd.unwrap() - var.sqrt()).abs() < 1e-15);
        assert_eq!(MetricStats::from_values(&[None]).mean, None);
    }

    #[test]
    fn ssim_examples() {
        let a = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((x * 7 + y * 13) % 256) as f64);
        assert!((ssim(&a, &a, SsimConfig::default()).unwrap() - 1.0).abs() < 1e-9);
        let z = Array3::zeros((1, 16, 16));
        let m = Array3::from_elem((1, 16, 16), 255.0);
        assert!(ssim(&z, &m, SsimConfig::default()).unwrap() < 0.05);
        let small = Array3::zeros((1, 8, 8));
        assert!(matches!(ssim(&small, &small, SsimConfig::default()), Err(Error::WindowTooLarge { .. })));
    }
}
