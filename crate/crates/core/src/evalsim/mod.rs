//! Image-quality metrics, the synthetic phantom, k-space noise simulation
//! and summary statistics.

mod kspace;
mod phantom;
mod stats;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use kspace::{
    CoilMaps, inject_kspace_noise, inject_kspace_noise_complex, kspace_noisy_volume, rss_combine,
};
pub use phantom::{Ellipse, NoiseModel, PhantomSpec, make_phantom, phantom_masks};
pub use stats::{
    Quantiles, TestResult, jarque_bera, mean_std, one_sided_proportion_test, paired_t_test, quantiles,
};

/// Signal and background regions for SNR/CNR.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMasks {
    pub signal: Array2<bool>,
    pub background: Array2<bool>,
    pub provenance: String,
}

impl RoiMasks {
    pub fn new(signal: Array2<bool>, background: Array2<bool>, provenance: impl Into<String>) -> Result<Self> {
        if signal.dim() != background.dim() {
            return Err(Error::InvalidMasks(format!(
                "signal {:?} and background {:?} differ in shape",
                signal.dim(),
                background.dim()
            )));
        }
        if !signal.iter().any(|&v| v) || !background.iter().any(|&v| v) {
            return Err(Error::InvalidMasks("masks must be non-empty".into()));
        }
        if signal.iter().zip(background.iter()).any(|(&a, &b)| a && b) {
            return Err(Error::InvalidMasks("signal and background overlap".into()));
        }
        Ok(Self {
            signal,
            background,
            provenance: provenance.into(),
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let (r, c) = self.signal.dim();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        h.update(self.signal.iter().map(|&b| b as u8).collect::<Vec<_>>());
        h.update(self.background.iter().map(|&b| b as u8).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }

    fn check(&self, img: ArrayView2<f32>) -> Result<()> {
        if img.dim() != self.signal.dim() {
            return Err(Error::shape(format!("{:?}", self.signal.dim()), format!("{:?}", img.dim())));
        }
        Ok(())
    }
}

/// Stores masks as a raw container of shape `[w, h, 1, 1]` with arrays
/// `signal` and `background` holding 0/1.
pub fn write_masks(masks: &RoiMasks, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = masks.signal.dim();
    let to_f = |m: &Array2<bool>| m.iter().map(|&b| b as u8 as f32).collect::<Vec<_>>();
    let mut payload = to_f(&masks.signal);
    payload.extend(to_f(&masks.background));
    let c = crate::data_io::RawContainer {
        header: crate::data_io::ContainerHeader {
            shape: [w, h, 1, 1],
            spacing: [1.0; 3],
            normalization: None,
            source_id: masks.provenance.clone(),
            b0_volumes: Vec::new(),
            stage: Some("masks".into()),
            arrays: vec!["signal".into(), "background".into()],
            extra: None,
        },
        payload,
    };
    crate::data_io::write_container(path, &c)
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<RoiMasks> {
    let c = crate::data_io::read_container(path)?;
    let [w, h, d, l] = c.header.shape;
    if d * l != 1 {
        return Err(Error::InvalidMasks(format!("mask container has shape {:?}", c.header.shape)));
    }
    let get = |name: &str| -> Result<Array2<bool>> {
        let a = c.array(name)?;
        Ok(Array2::from_shape_fn((h, w), |(i, j)| a[[0, 0, i, j]] != 0.0))
    };
    RoiMasks::new(get("signal")?, get("background")?, c.header.source_id.clone())
}

fn masked(img: ArrayView2<f32>, mask: &Array2<bool>) -> Vec<f64> {
    img.iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m)
        .map(|(&v, _)| v as f64)
        .collect()
}

fn region_stats(img: ArrayView2<f32>, masks: &RoiMasks) -> Result<(f64, f64, f64)> {
    masks.check(img)?;
    let (ms, _) = mean_std(&masked(img, &masks.signal));
    let (mb, sb) = mean_std(&masked(img, &masks.background));
    if !(sb > 0.0) {
        return Err(Error::DegenerateBackground);
    }
    Ok((ms, mb, sb))
}

/// `mean(signal) / std(background)`.
pub fn snr(img: ArrayView2<f32>, masks: &RoiMasks) -> Result<f64> {
    let (ms, _, sb) = region_stats(img, masks)?;
    Ok(ms / sb)
}

/// `(mean(signal) − mean(background)) / std(background)`.
pub fn cnr(img: ArrayView2<f32>, masks: &RoiMasks) -> Result<f64> {
    let (ms, mb, sb) = region_stats(img, masks)?;
    Ok((ms - mb) / sb)
}

/// SNR and CNR of one image, tagged with the masks used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub snr: f64,
    pub cnr: f64,
    pub mask_fingerprint: String,
}

pub fn score(img: ArrayView2<f32>, masks: &RoiMasks) -> Result<Scores> {
    let (ms, mb, sb) = region_stats(img, masks)?;
    Ok(Scores {
        snr: ms / sb,
        cnr: (ms - mb) / sb,
        mask_fingerprint: masks.fingerprint(),
    })
}

/// `(ΔSNR, ΔCNR)` of a denoised image over its noisy input. Both scores
/// must come from the same masks.
pub fn relative(denoised: &Scores, noisy: &Scores) -> Result<(f64, f64)> {
    if denoised.mask_fingerprint != noisy.mask_fingerprint {
        return Err(Error::MaskMismatch(
            denoised.mask_fingerprint.clone(),
            noisy.mask_fingerprint.clone(),
        ));
    }
    Ok((denoised.snr - noisy.snr, denoised.cnr - noisy.cnr))
}

pub fn relative_scores(denoised: ArrayView2<f32>, noisy: ArrayView2<f32>, masks: &RoiMasks) -> Result<(f64, f64)> {
    relative(&score(denoised, masks)?, &score(noisy, masks)?)
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB, capped at 99 dB.
pub fn psnr(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr operands differ in shape");
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> [[f64; 7]; 7] {
    let mut w = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over all fully contained 7×7 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03).
pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim operands differ in shape");
    let (h, w) = a.dim();
    assert!(h >= 7 && w >= 7, "ssim needs images of at least 7x7");
    let win = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - 7 {
        for j in 0..=w - 7 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, row) in win.iter().enumerate() {
                for (dj, &g) in row.iter().enumerate() {
                    let x = a[[i + di, j + dj]] as f64;
                    let y = b[[i + di, j + dj]] as f64;
                    mx += g * x;
                    my += g * y;
                    xx += g * x * x;
                    yy += g * y * y;
                    xy += g * x * y;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Per-slice quality numbers for one denoised sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub volume: usize,
    pub slice: usize,
    pub psnr_noisy: Option<f64>,
    pub psnr_denoised: Option<f64>,
    pub ssim_noisy: Option<f64>,
    pub ssim_denoised: Option<f64>,
    pub snr: f64,
    pub cnr: f64,
    pub delta_snr: f64,
    pub delta_cnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub quantiles: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mask_fingerprint: String,
    pub rows: Vec<SliceMetrics>,
    pub summary: Vec<MetricSummary>,
}

impl MetricsReport {
    pub fn new(mask_fingerprint: String, rows: Vec<SliceMetrics>) -> Self {
        let mut summary = Vec::new();
        let cols: [(&str, fn(&SliceMetrics) -> Option<f64>); 8] = [
            ("psnr_noisy", |r| r.psnr_noisy),
            ("psnr_denoised", |r| r.psnr_denoised),
            ("ssim_noisy", |r| r.ssim_noisy),
            ("ssim_denoised", |r| r.ssim_denoised),
            ("snr", |r| Some(r.snr)),
            ("cnr", |r| Some(r.cnr)),
            ("delta_snr", |r| Some(r.delta_snr)),
            ("delta_cnr", |r| Some(r.delta_cnr)),
        ];
        for (name, get) in cols {
            let vals: Vec<f64> = rows.iter().filter_map(get).collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&vals);
            summary.push(MetricSummary {
                name: name.to_string(),
                mean,
                std,
                quantiles: quantiles(&vals),
            });
        }
        Self {
            mask_fingerprint,
            rows,
            summary,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from(
            "volume,slice,psnr_noisy,psnr_denoised,ssim_noisy,ssim_denoised,snr,cnr,delta_snr,delta_cnr\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.volume,
                r.slice,
                opt(r.psnr_noisy),
                opt(r.psnr_denoised),
                opt(r.ssim_noisy),
                opt(r.ssim_denoised),
                r.snr,
                r.cnr,
                r.delta_snr,
                r.delta_cnr
            );
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Scores every slice of `denoised` against `noisy`, and against `clean`
/// when ground truth exists. Volumes are `(l, d, h, w)`.
pub fn evaluate(
    denoised: &ndarray::Array4<f32>,
    noisy: &ndarray::Array4<f32>,
    clean: Option<&ndarray::Array4<f32>>,
    masks: &RoiMasks,
    data_range: f64,
) -> Result<MetricsReport> {
    if denoised.dim() != noisy.dim() || clean.is_some_and(|c| c.dim() != noisy.dim()) {
        return Err(Error::shape(format!("{:?}", noisy.dim()), format!("{:?}", denoised.dim())));
    }
    let (l, d, _, _) = noisy.dim();
    let mut rows = Vec::with_capacity(l * d);
    for v in 0..l {
        for z in 0..d {
            let dn = denoised.slice(ndarray::s![v, z, .., ..]);
            let nz = noisy.slice(ndarray::s![v, z, .., ..]);
            let sd = score(dn, masks)?;
            let (ds, dc) = relative(&sd, &score(nz, masks)?)?;
            let c = clean.map(|c| c.slice(ndarray::s![v, z, .., ..]));
            rows.push(SliceMetrics {
                volume: v,
                slice: z,
                psnr_noisy: c.map(|c| psnr(nz, c, data_range)),
                psnr_denoised: c.map(|c| psnr(dn, c, data_range)),
                ssim_noisy: c.map(|c| ssim(nz, c, data_range)),
                ssim_denoised: c.map(|c| ssim(dn, c, data_range)),
                snr: sd.snr,
                cnr: sd.cnr,
                delta_snr: ds,
                delta_cnr: dc,
            });
        }
    }
    Ok(MetricsReport::new(masks.fingerprint(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks() -> RoiMasks {
        let sig = Array2::from_shape_fn((4, 4), |(i, _)| i < 2);
        let bg = Array2::from_shape_fn((4, 4), |(i, _)| i >= 2);
        RoiMasks::new(sig, bg, "halves").unwrap()
    }

    #[test]
    fn snr_cnr_definitions() {
        let img = Array2::from_shape_fn((4, 4), |(i, j)| if i < 2 { 100.0 } else if j % 2 == 0 { 30.0 } else { 10.0 });
        let m = masks();
        assert!((snr(img.view(), &m).unwrap() - 10.0).abs() < 1e-12);
        assert!((cnr(img.view(), &m).unwrap() - 8.0).abs() < 1e-12);
        let flat = Array2::from_elem((4, 4), 1.0f32);
        assert!(matches!(snr(flat.view(), &m), Err(Error::DegenerateBackground)));
    }

    #[test]
    fn mask_validation_and_mismatch() {
        let all = Array2::from_elem((4, 4), true);
        assert!(RoiMasks::new(all.clone(), all.clone(), "x").is_err());
        assert!(RoiMasks::new(all, Array2::from_elem((4, 4), false), "x").is_err());
        let m = masks();
        let swapped = RoiMasks::new(m.background.clone(), m.signal.clone(), "swapped").unwrap();
        let img = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32);
        let a = score(img.view(), &m).unwrap();
        let b = score(img.view(), &swapped).unwrap();
        assert!(matches!(relative(&a, &b), Err(Error::MaskMismatch(..))));
        assert_eq!(relative_scores(img.view(), img.view(), &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn psnr_definitions() {
        let a = Array2::<f32>::zeros((10, 10));
        assert_eq!(psnr(a.view(), a.view(), 1.0), PSNR_CAP_DB);
        let b = Array2::from_elem((10, 10), 0.1f32);
        assert!((psnr(a.view(), b.view(), 1.0) - 20.0).abs() < 1e-5);
        assert_eq!(psnr(a.view(), b.view(), 1.0), psnr(b.view(), a.view(), 1.0));
    }

    #[test]
    fn ssim_identity() {
        let a = Array2::from_shape_fn((9, 9), |(i, j)| ((i * 3 + j * 5) % 7) as f32 / 7.0);
        assert!((ssim(a.view(), a.view(), 1.0) - 1.0).abs() < 1e-12);
    }
}
