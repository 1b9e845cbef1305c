//! Region information entropy, per-category Gaussian entropy models and
//! the entropy band filter for pseudo labels.
//!
//! Entropy is measured in nats over an equal-width intensity histogram of the
//! pixels whose centers fall inside the box. A category is modeled by the
//! mean and unbiased standard deviation of its annotated instances'
//! entropies; a pseudo label survives when its entropy lies in
//! `[mu - sigma, mu + sigma]` for its category.

use std::io::Write;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::cbp::PseudoLabel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{pixels_inside, RotatedBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub value: f64,
    pub pixel_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub bins: usize,
    /// Regions with fewer pixels are excluded from fitting and pass the filter.
    pub min_pixels: usize,
    /// Categories with fewer annotated samples use the global record.
    pub min_samples: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            min_pixels: 16,
            min_samples: 5,
        }
    }
}

/// `-sum p ln p` over the non-empty bins of a histogram.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

/// Histogram of the box's pixels over `bins` equal-width bins on [0, 255].
pub fn region_histogram(image: &GrayImage, b: &RotatedBox, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for (x, y) in pixels_inside(b, image.width(), image.height()) {
        let v = image.get_pixel(x, y).0[0] as usize;
        counts[v * bins / 256] += 1;
    }
    counts
}

pub fn region_entropy(image: &GrayImage, b: &RotatedBox, bins: usize) -> EntropyStats {
    assert!(bins >= 2, "region_entropy needs at least two bins");
    let counts = region_histogram(image, b, bins);
    EntropyStats {
        value: entropy_of_counts(&counts),
        pixel_count: counts.iter().sum(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: usize,
}

impl GaussianRecord {
    fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mu = values.iter().sum::<f64>() / n as f64;
        let sigma = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        Self {
            mu,
            sigma,
            sample_count: n,
        }
    }

    /// Inclusive `mu +- sigma` band test.
    pub fn accepts(&self, h: f64) -> bool {
        self.mu - self.sigma <= h && h <= self.mu + self.sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category: usize,
    #[serde(flatten)]
    pub gaussian: GaussianRecord,
}

/// Fitted entropy statistics, serialized as `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub config: EntropyConfig,
    pub num_categories: usize,
    /// Categories with at least `min_samples` annotated instances.
    pub categories: Vec<CategoryRecord>,
    pub global: GaussianRecord,
    /// Raw per-category sample entropies, kept for histogram export.
    pub samples: Vec<Vec<f64>>,
}

impl EntropyModel {
    /// Fits from `(category, stats)` samples. Samples below `min_pixels` are
    /// skipped.
    pub fn fit(samples: impl IntoIterator<Item = (usize, EntropyStats)>, num_categories: usize, config: EntropyConfig) -> Result<Self> {
        let mut per_category: Vec<Vec<f64>> = vec![Vec::new(); num_categories];
        for (category, stats) in samples {
            if category >= num_categories {
                return Err(Error::Argument(format!("category {category} out of range")));
            }
            if stats.pixel_count >= config.min_pixels {
                per_category[category].push(stats.value);
            }
        }
        let all: Vec<f64> = per_category.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::Config(
                "entropy model needs at least one annotated instance with enough pixels".into(),
            ));
        }
        let categories = per_category
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty() && v.len() >= config.min_samples)
            .map(|(category, v)| CategoryRecord {
                category,
                gaussian: GaussianRecord::from_samples(v),
            })
            .collect();
        Ok(Self {
            config,
            num_categories,
            categories,
            global: GaussianRecord::from_samples(&all),
            samples: per_category,
        })
    }

    /// The category's record, or the global fallback.
    pub fn record(&self, category: usize) -> &GaussianRecord {
        self.categories
            .iter()
            .find(|r| r.category == category)
            .map(|r| &r.gaussian)
            .unwrap_or(&self.global)
    }

    /// Filter decision for a region with the given statistics.
    pub fn keeps(&self, category: usize, stats: &EntropyStats) -> bool {
        if stats.pixel_count < self.config.min_pixels {
            return true;
        }
        self.record(category).accepts(stats.value)
    }

    /// Writes the per-category entropy histograms and fitted parameters as
    /// CSV: `category,bin_lo,bin_hi,count,mu,sigma`.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W, hist_bins: usize) -> std::io::Result<()> {
        let max_h = (self.config.bins as f64).ln();
        let width = max_h / hist_bins as f64;
        writeln!(out, "category,bin_lo,bin_hi,count,mu,sigma")?;
        for (category, values) in self.samples.iter().enumerate() {
            let record = self.record(category);
            let mut counts = vec![0usize; hist_bins];
            for &v in values {
                let idx = ((v / width) as usize).min(hist_bins - 1);
                counts[idx] += 1;
            }
            for (i, count) in counts.iter().enumerate() {
                writeln!(
                    out,
                    "{category},{:.6},{:.6},{count},{:.6},{:.6}",
                    i as f64 * width,
                    (i + 1) as f64 * width,
                    record.mu,
                    record.sigma
                )?;
            }
        }
        Ok(())
    }
}

/// Fits the model on every labeled instance of the dataset.
pub fn fit_entropy_model(dataset: &Dataset, config: EntropyConfig) -> Result<EntropyModel> {
    if config.bins < 2 {
        return Err(Error::Config("entropy histogram needs at least two bins".into()));
    }
    let bins = config.bins;
    let samples = dataset
        .manifest
        .scenes
        .iter()
        .zip(&dataset.rasters)
        .flat_map(|(scene, raster)| {
            scene
                .labeled()
                .map(move |inst| (inst.category, region_entropy(raster, &inst.bbox, bins)))
        });
    EntropyModel::fit(samples, dataset.manifest.num_categories(), config)
}

/// Splits pseudo labels into (kept, rejected) by the entropy band test.
pub fn egpf_filter(labels: Vec<PseudoLabel>, image: &GrayImage, model: &EntropyModel) -> (Vec<PseudoLabel>, Vec<PseudoLabel>) {
    labels.into_iter().partition(|label| {
        let stats = region_entropy(image, &label.bbox, model.config.bins);
        model.keeps(label.category, &stats)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn raster_from(values: &[u8], width: u32) -> GrayImage {
        let height = values.len() as u32 / width;
        GrayImage::from_fn(width, height, |x, y| Luma([values[(y * width + x) as usize]]))
    }

    fn whole(width: u32, height: u32) -> RotatedBox {
        RotatedBox::axis_aligned(width as f64 / 2.0, height as f64 / 2.0, width as f64, height as f64).unwrap()
    }

    fn stats(value: f64) -> EntropyStats {
        EntropyStats { value, pixel_count: 100 }
    }

    #[test]
    fn constant_region_has_zero_entropy() {
        let img = raster_from(&[77; 64], 8);
        let s = region_entropy(&img, &whole(8, 8), 32);
        assert_eq!(s.value, 0.0);
        assert_eq!(s.pixel_count, 64);
    }

    #[test]
    fn two_level_region_has_ln2() {
        let values: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 10 } else { 200 }).collect();
        let img = raster_from(&values, 8);
        let s = region_entropy(&img, &whole(8, 8), 32);
        assert!((s.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_over_all_bins_has_ln_bins() {
        let values: Vec<u8> = (0..256).map(|i| i as u8).collect();
        let img = raster_from(&values, 16);
        let s = region_entropy(&img, &whole(16, 16), 32);
        assert!((s.value - 32f64.ln()).abs() < 1e-12);
        assert!((s.value - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn empty_region() {
        let img = raster_from(&[5; 16], 4);
        let b = RotatedBox::axis_aligned(-40.0, -40.0, 2.0, 2.0).unwrap();
        assert_eq!(region_entropy(&img, &b, 32), EntropyStats { value: 0.0, pixel_count: 0 });
    }

    #[test]
    fn fit_constant_category() {
        let m = EntropyModel::fit((0..6).map(|_| (0, stats(1.7))), 1, EntropyConfig::default()).unwrap();
        let r = m.record(0);
        assert!((r.mu - 1.7).abs() < 1e-12);
        assert!(r.sigma.abs() < 1e-12);
    }

    #[test]
    fn fit_two_samples_unbiased_sigma() {
        let cfg = EntropyConfig {
            min_samples: 2,
            ..Default::default()
        };
        let m = EntropyModel::fit([(0, stats(1.0)), (0, stats(3.0))], 1, cfg).unwrap();
        let r = m.record(0);
        assert!((r.mu - 2.0).abs() < 1e-12);
        assert!((r.sigma - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sparse_category_falls_back_to_global() {
        let mut samples: Vec<(usize, EntropyStats)> = (0..10).map(|i| (0, stats(1.0 + 0.01 * i as f64))).collect();
        samples.push((1, stats(3.0)));
        samples.push((1, stats(3.2)));
        let m = EntropyModel::fit(samples, 2, EntropyConfig::default()).unwrap();
        assert_eq!(m.categories.len(), 1);
        assert_eq!(m.record(1), &m.global);
        assert_eq!(m.global.sample_count, 12);
    }

    #[test]
    fn fit_without_samples_is_config_error() {
        let small = EntropyStats { value: 1.0, pixel_count: 3 };
        assert!(matches!(
            EntropyModel::fit([(0, small)], 1, EntropyConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(EntropyModel::fit([], 1, EntropyConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn band_test_is_inclusive() {
        let cfg = EntropyConfig {
            min_samples: 2,
            ..Default::default()
        };
        let m = EntropyModel::fit([(0, stats(1.0)), (0, stats(3.0))], 1, cfg).unwrap();
        let r = *m.record(0);
        assert!(m.keeps(0, &stats(r.mu)));
        assert!(m.keeps(0, &stats(r.mu + r.sigma)));
        assert!(m.keeps(0, &stats(r.mu - r.sigma)));
        assert!(!m.keeps(0, &stats(r.mu + 2.0 * r.sigma)));
        // Too few pixels: abstain.
        assert!(m.keeps(0, &EntropyStats { value: 100.0, pixel_count: 4 }));
    }

    #[test]
    fn zero_sigma_keeps_exact_match_only() {
        let m = EntropyModel::fit((0..5).map(|_| (0, stats(2.0))), 1, EntropyConfig::default()).unwrap();
        assert!(m.keeps(0, &stats(2.0)));
        assert!(!m.keeps(0, &stats(2.0 + 1e-9)));
    }

    #[test]
    fn histogram_csv_shape() {
        let m = EntropyModel::fit((0..5).map(|i| (0, stats(1.0 + 0.1 * i as f64))), 1, EntropyConfig::default()).unwrap();
        let mut buf = Vec::new();
        m.write_histogram_csv(&mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "category,bin_lo,bin_hi,count,mu,sigma");
        assert_eq!(lines.len(), 11);
        let total: usize = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 5);
    }
}
