//! Synthetic dense scenes, sparse-annotation sampling, Box Ratio, and the
//! on-disk dataset layout (`annotations.json` plus `scenes/<id>.pgm`).

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::entropy::{entropy_of_counts, region_entropy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{pixels_inside, RawBox, RotatedBox};
use crate::io;
use crate::rng::{pair_id, stream, Domain};

/// Histogram resolution the texture synthesizer targets.
pub const TEXTURE_BINS: usize = 32;

/// Largest allowed deviation between an instance's rendered region entropy
/// and its target.
pub const ENTROPY_TOLERANCE: f64 = 0.15;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SCENES_DIR: &str = "scenes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct Instance {
    pub bbox: RotatedBox,
    pub category: usize,
    pub labeled: bool,
    pub difficulty: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
    category: usize,
    labeled: bool,
    difficulty: f64,
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = Error;

    fn try_from(r: InstanceRecord) -> Result<Self> {
        let bbox = RotatedBox::try_from(RawBox {
            cx: r.cx,
            cy: r.cy,
            w: r.w,
            h: r.h,
            theta: r.theta,
        })?;
        if !(0.0..=1.0).contains(&r.difficulty) {
            return Err(Error::Argument(format!("difficulty {} not in [0, 1]", r.difficulty)));
        }
        Ok(Instance {
            bbox,
            category: r.category,
            labeled: r.labeled,
            difficulty: r.difficulty,
        })
    }
}

impl From<Instance> for InstanceRecord {
    fn from(i: Instance) -> Self {
        InstanceRecord {
            cx: i.bbox.cx(),
            cy: i.bbox.cy(),
            w: i.bbox.w(),
            h: i.bbox.h(),
            theta: i.bbox.theta(),
            category: i.category,
            labeled: i.labeled,
            difficulty: i.difficulty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_id: u32,
    pub instances: Vec<Instance>,
}

impl SceneRecord {
    pub fn labeled(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.labeled)
    }

    pub fn hidden(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| !i.labeled)
    }
}

/// Contents of `annotations.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub scenes: Vec<SceneRecord>,
    pub seed: u64,
    pub ratio: Option<f64>,
}

impl Manifest {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn instance_count(&self) -> usize {
        self.scenes.iter().map(|s| s.instances.len()).sum()
    }

    pub fn labeled_count(&self) -> usize {
        self.scenes.iter().map(|s| s.labeled().count()).sum()
    }

    /// Labeled instances per category over the whole manifest.
    pub fn labeled_per_category(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_categories()];
        for inst in self.scenes.iter().flat_map(|s| s.labeled()) {
            counts[inst.category] += 1;
        }
        counts
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let c = self.num_categories();
        if c == 0 {
            return Err(Error::data(path, "categories", "at least one category is required"));
        }
        for (si, scene) in self.scenes.iter().enumerate() {
            for (ii, inst) in scene.instances.iter().enumerate() {
                if inst.category >= c {
                    return Err(Error::data(
                        path,
                        format!("scenes[{si}].instances[{ii}].category"),
                        format!("category {} out of range (have {c})", inst.category),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A manifest together with its rasters (`rasters[i]` belongs to `scenes[i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub rasters: Vec<GrayImage>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(ANNOTATIONS_FILE), &self.manifest)?;
        let scenes_dir = dir.join(SCENES_DIR);
        std::fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
        for (scene, raster) in self.manifest.scenes.iter().zip(&self.rasters) {
            let path = raster_path(dir, scene.image_id);
            write_pgm(&path, raster)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ANNOTATIONS_FILE);
        let manifest: Manifest = io::read_json(&path)?;
        manifest.validate(&path)?;
        let rasters = manifest
            .scenes
            .iter()
            .map(|s| read_pgm(&raster_path(dir, s.image_id)))
            .collect::<Result<Vec<_>>>()?;
        for (scene, raster) in manifest.scenes.iter().zip(&rasters) {
            let (w, h) = raster.dimensions();
            for (ii, inst) in scene.instances.iter().enumerate() {
                if pixels_inside(&inst.bbox, w, h).is_empty() {
                    return Err(Error::data(
                        &path,
                        format!("scene {}.instances[{ii}]", scene.image_id),
                        "instance box does not cover any raster pixel",
                    ));
                }
            }
        }
        Ok(Self { manifest, rasters })
    }

    /// Copy with new labeled flags, sharing the same rasters.
    pub fn with_manifest(&self, manifest: Manifest) -> Self {
        Self {
            manifest,
            rasters: self.rasters.clone(),
        }
    }
}

pub fn raster_path(dir: &Path, image_id: u32) -> std::path::PathBuf {
    dir.join(SCENES_DIR).join(format!("{image_id}.pgm"))
}

/// Writes a binary (P5, maxval 255) PGM.
pub fn write_pgm(path: &Path, raster: &GrayImage) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(raster.as_raw(), raster.width(), raster.height(), image::ExtendedColorType::L8)
        .map_err(|e| Error::data(path, "raster", e))?;
    io::write_bytes(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::data(path, "raster", e))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::data(
            path,
            "raster",
            format!("expected 8-bit grayscale, found {:?}", other.color()),
        )),
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// Mean region entropy (nats, 32-bin histogram) of this category.
    pub entropy_target: f64,
    /// Histogram bin the texture intensities concentrate around.
    pub intensity_bin: f64,
    pub difficulty_mean: f64,
    pub difficulty_concentration: f64,
    /// Range of the long side, px.
    pub length: [f64; 2],
    /// Range of the long/short side ratio.
    pub aspect: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub level: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise: i32,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            level: 100.0,
            amplitude: 4.0,
            period: 96.0,
            noise: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scenes: usize,
    pub width: u32,
    pub height: u32,
    /// Mean instance count per scene.
    pub density: usize,
    /// Relative spread of the per-scene instance count.
    pub density_jitter: f64,
    /// Probability that an instance is placed next to one of its own kind.
    pub cluster_tendency: f64,
    /// Minimum free space between circumscribed circles, px.
    pub gap: f64,
    /// Texture margin painted around each box, px. At most half the gap.
    pub halo: f64,
    pub max_placement_attempts: usize,
    /// Per-instance entropy spread around the category target.
    pub entropy_jitter: f64,
    /// Fraction of instances drawn from the wide spread below.
    pub entropy_outlier_rate: f64,
    pub entropy_outlier_jitter: f64,
    pub background: BackgroundSpec,
    pub categories: Vec<CategorySpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl GenConfig {
    /// The pinned benchmark: 200 scenes, 5 categories, ~40 instances each.
    pub fn benchmark() -> Self {
        let names = ["plane", "ship", "vehicle", "tank", "court"];
        let entropy = [1.4, 1.85, 2.3, 2.75, 3.2];
        let bins = [6.0, 26.0, 4.0, 22.0, 16.0];
        let difficulty = [0.15, 0.2, 0.25, 0.3, 0.35];
        let categories = (0..5)
            .map(|c| CategorySpec {
                name: names[c].to_string(),
                entropy_target: entropy[c],
                intensity_bin: bins[c],
                difficulty_mean: difficulty[c],
                difficulty_concentration: 8.0,
                length: [14.0, 26.0],
                aspect: [1.4, 2.2],
            })
            .collect();
        Self {
            scenes: 200,
            width: 320,
            height: 320,
            density: 40,
            density_jitter: 0.2,
            cluster_tendency: 0.6,
            gap: 3.0,
            halo: 1.5,
            max_placement_attempts: 400,
            entropy_jitter: 0.03,
            entropy_outlier_rate: 0.1,
            entropy_outlier_jitter: 0.2,
            background: BackgroundSpec::default(),
            categories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("raster dimensions must be positive".into()));
        }
        if !(self.halo >= 0.0 && 2.0 * self.halo <= self.gap) {
            return Err(Error::Config("halo must be non-negative and at most half the gap".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_tendency) {
            return Err(Error::Config("cluster_tendency must be in [0, 1]".into()));
        }
        let max_h = (TEXTURE_BINS as f64).ln();
        for (i, c) in self.categories.iter().enumerate() {
            if c.name.is_empty() || c.name == "all" || c.name.contains([',', '\n']) {
                return Err(Error::Config(format!("categories[{i}].name {:?} is not usable as a CSV label", c.name)));
            }
            if !(c.entropy_target > 0.0 && c.entropy_target < max_h) {
                return Err(Error::Config(format!(
                    "categories[{i}].entropy_target must be in (0, ln {TEXTURE_BINS})"
                )));
            }
            if !(c.difficulty_mean > 0.0 && c.difficulty_mean < 1.0 && c.difficulty_concentration > 0.0) {
                return Err(Error::Config(format!("categories[{i}] difficulty parameters invalid")));
            }
            if !(c.length[0] > 0.0 && c.length[0] <= c.length[1] && c.aspect[0] >= 1.0 && c.aspect[0] <= c.aspect[1]) {
                return Err(Error::Config(format!("categories[{i}] size ranges invalid")));
            }
            for other in &self.categories[..i] {
                if (other.entropy_target - c.entropy_target).abs() < 1e-6 {
                    return Err(Error::Config(format!(
                        "categories[{i}] shares its entropy target with another category"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generates `cfg.scenes` scenes. Output depends only on `(cfg, seed)`.
pub fn generate_scenes(cfg: &GenConfig, seed: u64, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let results = exec.map_range(cfg.scenes, |i| generate_scene(cfg, seed, i as u32));
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut rasters = Vec::with_capacity(cfg.scenes);
    for r in results {
        let (scene, raster) = r?;
        scenes.push(scene);
        rasters.push(raster);
    }
    Ok(Dataset {
        manifest: Manifest {
            categories: cfg.categories.iter().map(|c| c.name.clone()).collect(),
            scenes,
            seed,
            ratio: None,
        },
        rasters,
    })
}

fn generate_scene(cfg: &GenConfig, seed: u64, image_id: u32) -> Result<(SceneRecord, GrayImage)> {
    let mut rng = stream(seed, Domain::Layout, image_id as u64);
    let count = if cfg.density == 0 {
        0
    } else {
        let spread = cfg.density as f64 * cfg.density_jitter;
        (cfg.density as f64 + rng.random_range(-1.0..=1.0) * spread).round().max(0.0) as usize
    };

    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.random_range(0..cfg.categories.len());
        let spec = &cfg.categories[category];
        let length = rng.random_range(spec.length[0]..=spec.length[1]);
        let aspect = rng.random_range(spec.aspect[0]..=spec.aspect[1]);
        let theta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
        let (w, h) = (length, length / aspect);
        let radius = 0.5 * w.hypot(h);
        let difficulty = Beta::new(
            spec.difficulty_mean * spec.difficulty_concentration,
            (1.0 - spec.difficulty_mean) * spec.difficulty_concentration,
        )
        .map_err(|e| Error::Config(format!("difficulty distribution: {e}")))?
        .sample(&mut rng)
        .clamp(0.0, 1.0);

        let mut placed = None;
        for _ in 0..cfg.max_placement_attempts {
            let (cx, cy) = propose_position(cfg, &instances, category, radius, &mut rng);
            let inside = cx >= radius + 1.0
                && cy >= radius + 1.0
                && cx <= cfg.width as f64 - radius - 1.0
                && cy <= cfg.height as f64 - radius - 1.0;
            if !inside {
                continue;
            }
            let clear = instances.iter().all(|o| {
                let d = (o.bbox.cx() - cx).hypot(o.bbox.cy() - cy);
                d >= radius + o.bbox.circumradius() + cfg.gap
            });
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = placed else {
            return Err(Error::Generation(format!(
                "scene {image_id}: cannot place instance {} of {count} without overlap; density too high for a {}x{} raster",
                instances.len() + 1,
                cfg.width,
                cfg.height
            )));
        };
        instances.push(Instance {
            bbox: RotatedBox::new(cx, cy, w, h, theta)?,
            category,
            labeled: true,
            difficulty,
        });
    }

    let raster = render_scene(cfg, seed, image_id, &instances);
    Ok((SceneRecord { image_id, instances }, raster))
}

fn propose_position<R: Rng>(cfg: &GenConfig, placed: &[Instance], category: usize, radius: f64, rng: &mut R) -> (f64, f64) {
    let neighbours: Vec<&Instance> = placed.iter().filter(|i| i.category == category).collect();
    if !neighbours.is_empty() && rng.random::<f64>() < cfg.cluster_tendency {
        let anchor = neighbours[rng.random_range(0..neighbours.len())];
        let dist = radius + anchor.bbox.circumradius() + cfg.gap + rng.random_range(0.0..6.0);
        let dir = rng.random_range(0.0..2.0 * PI);
        (anchor.bbox.cx() + dist * dir.cos(), anchor.bbox.cy() + dist * dir.sin())
    } else {
        (
            rng.random_range(0.0..cfg.width as f64),
            rng.random_range(0.0..cfg.height as f64),
        )
    }
}

fn render_scene(cfg: &GenConfig, seed: u64, image_id: u32, instances: &[Instance]) -> GrayImage {
    let mut rng = stream(seed, Domain::Texture, image_id as u64);
    let bg = &cfg.background;
    let phase_x = rng.random_range(0.0..2.0 * PI);
    let phase_y = rng.random_range(0.0..2.0 * PI);
    let mut raster = GrayImage::new(cfg.width, cfg.height);
    for (x, y, px) in raster.enumerate_pixels_mut() {
        let wave = (2.0 * PI * x as f64 / bg.period + phase_x).sin() * (2.0 * PI * y as f64 / bg.period + phase_y).cos();
        let noise = if bg.noise > 0 { rng.random_range(-bg.noise..=bg.noise) } else { 0 };
        let v = (bg.level + bg.amplitude * wave).round() as i32 + noise;
        px.0[0] = v.clamp(0, 255) as u8;
    }

    for (k, inst) in instances.iter().enumerate() {
        let mut rng = stream(seed, Domain::Texture, pair_id(image_id as u64 + 1, k as u64));
        let spec = &cfg.categories[inst.category];
        let b = &inst.bbox;
        let painted = RotatedBox::new(b.cx(), b.cy(), b.w() + 2.0 * cfg.halo, b.h() + 2.0 * cfg.halo, b.theta())
            .expect("dilated box is valid");
        let pixels = pixels_inside(&painted, cfg.width, cfg.height);
        let spread = if rng.random::<f64>() < cfg.entropy_outlier_rate {
            cfg.entropy_outlier_jitter
        } else {
            cfg.entropy_jitter
        };
        let jitter = Normal::new(0.0, spread.max(1e-12)).unwrap().sample(&mut rng);
        let max_h = (TEXTURE_BINS as f64).ln() - 0.05;
        let target = (spec.entropy_target + jitter).clamp(0.05, max_h);
        paint_texture(&mut raster, &pixels, spec.intensity_bin, target, &mut rng);
    }
    raster
}

/// Paints `pixels` with i.i.d. intensities whose 32-bin histogram entropy
/// lands within [`ENTROPY_TOLERANCE`] of `target`; retries a few times and
/// keeps the closest rendering.
fn paint_texture<R: Rng>(raster: &mut GrayImage, pixels: &[(u32, u32)], center_bin: f64, target: f64, rng: &mut R) {
    if pixels.is_empty() {
        return;
    }
    let n = pixels.len() as f64;
    // Plug-in entropy of n samples is biased low by about (K - 1) / 2n.
    let support = target.exp();
    let corrected = (target + (support - 1.0) / (2.0 * n)).min((TEXTURE_BINS as f64).ln() - 1e-3);
    let probs = binned_gaussian_with_entropy(center_bin, corrected);
    let mut cdf = probs.clone();
    for i in 1..cdf.len() {
        cdf[i] += cdf[i - 1];
    }
    let width = 256 / TEXTURE_BINS as u32;

    let mut best: Option<(f64, Vec<u8>)> = None;
    for _ in 0..8 {
        let values: Vec<u8> = pixels
            .iter()
            .map(|_| {
                let u: f64 = rng.random();
                let bin = cdf.iter().position(|&c| u < c).unwrap_or(TEXTURE_BINS - 1) as u32;
                (bin * width + rng.random_range(0..width)) as u8
            })
            .collect();
        let mut counts = [0usize; TEXTURE_BINS];
        for &v in &values {
            counts[v as usize / width as usize] += 1;
        }
        let err = (entropy_of_counts(&counts) - target).abs();
        let better = best.as_ref().is_none_or(|(e, _)| err < *e);
        if better {
            best = Some((err, values));
        }
        if err <= ENTROPY_TOLERANCE / 3.0 {
            break;
        }
    }
    let (_, values) = best.unwrap();
    for (&(x, y), v) in pixels.iter().zip(values) {
        raster.put_pixel(x, y, image::Luma([v]));
    }
}

/// Discretized Gaussian over [`TEXTURE_BINS`] bins, with its width solved by
/// bisection so that the distribution's entropy equals `target`.
fn binned_gaussian_with_entropy(center: f64, target: f64) -> Vec<f64> {
    let dist = |log_width: f64| -> Vec<f64> {
        let s = log_width.exp();
        let raw: Vec<f64> = (0..TEXTURE_BINS)
            .map(|i| {
                let z = (i as f64 - center) / s;
                (-0.5 * z * z).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    };
    let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
    let (mut lo, mut hi) = (-6.0f64, 8.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if entropy(&dist(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dist(0.5 * (lo + hi))
}

/// Measured region entropy of every instance, in manifest order.
pub fn instance_entropies(dataset: &Dataset, bins: usize) -> Vec<Vec<f64>> {
    dataset
        .manifest
        .scenes
        .iter()
        .zip(&dataset.rasters)
        .map(|(scene, raster)| {
            scene
                .instances
                .iter()
                .map(|i| region_entropy(raster, &i.bbox, bins).value)
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sparse sampling and Box Ratio
// ---------------------------------------------------------------------------

/// `round(ratio * n)` with halves rounded up, never below one.
pub fn sparse_keep_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Per image and per category, labels `sparse_keep_count(ratio, n)` of the
/// category's instances chosen uniformly without replacement.
pub fn sample_sparse(manifest: &Manifest, ratio: f64, seed: u64) -> Result<Manifest> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!("sampling ratio {ratio} not in (0, 1]")));
    }
    let mut out = manifest.clone();
    out.ratio = Some(ratio);
    for scene in &mut out.scenes {
        let mut rng = stream(seed, Domain::Sampling, scene.image_id as u64);
        let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, inst) in scene.instances.iter().enumerate() {
            by_category.entry(inst.category).or_default().push(i);
        }
        for inst in &mut scene.instances {
            inst.labeled = false;
        }
        for members in by_category.values() {
            let keep = sparse_keep_count(ratio, members.len());
            for pick in rand::seq::index::sample(&mut rng, members.len(), keep) {
                scene.instances[members[pick]].labeled = true;
            }
        }
    }
    Ok(out)
}

/// Labeled instances over all instances.
pub fn box_ratio(manifest: &Manifest) -> Result<f64> {
    let total = manifest.instance_count();
    if total == 0 {
        return Err(Error::Argument("box ratio of a manifest without instances is undefined".into()));
    }
    Ok(manifest.labeled_count() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            scenes: 6,
            width: 160,
            height: 160,
            density: 10,
            ..GenConfig::benchmark()
        }
    }

    fn manifest_with(counts: &[(u32, usize, usize)]) -> Manifest {
        // (image_id, category, n)
        let mut scenes: BTreeMap<u32, Vec<Instance>> = BTreeMap::new();
        for &(id, cat, n) in counts {
            for k in 0..n {
                scenes.entry(id).or_default().push(Instance {
                    bbox: RotatedBox::new(10.0 + 20.0 * k as f64, 10.0, 8.0, 4.0, 0.0).unwrap(),
                    category: cat,
                    labeled: true,
                    difficulty: 0.5,
                });
            }
        }
        Manifest {
            categories: vec!["a".into(), "b".into(), "c".into()],
            scenes: scenes
                .into_iter()
                .map(|(image_id, instances)| SceneRecord { image_id, instances })
                .collect(),
            seed: 0,
            ratio: None,
        }
    }

    #[test]
    fn keep_count_rounds_half_up_with_floor_of_one() {
        assert_eq!(sparse_keep_count(0.25, 10), 3);
        assert_eq!(sparse_keep_count(0.1, 1), 1);
        assert_eq!(sparse_keep_count(0.1, 4), 1);
        assert_eq!(sparse_keep_count(0.1, 15), 2);
        assert_eq!(sparse_keep_count(1.0, 7), 7);
    }

    #[test]
    fn sample_sparse_counts() {
        let m = manifest_with(&[(0, 0, 10), (0, 1, 1), (1, 2, 4)]);
        let s = sample_sparse(&m, 0.25, 7).unwrap();
        let count = |id: u32, cat: usize| {
            s.scenes
                .iter()
                .find(|sc| sc.image_id == id)
                .unwrap()
                .instances
                .iter()
                .filter(|i| i.category == cat && i.labeled)
                .count()
        };
        assert_eq!(count(0, 0), 3);
        assert_eq!(count(0, 1), 1);
        assert_eq!(count(1, 2), 1);
        assert_eq!(s.ratio, Some(0.25));
    }

    #[test]
    fn sample_sparse_full_ratio_labels_everything() {
        let m = manifest_with(&[(0, 0, 5), (0, 1, 3)]);
        let s = sample_sparse(&m, 1.0, 1).unwrap();
        assert_eq!(box_ratio(&s).unwrap(), 1.0);
    }

    #[test]
    fn sample_sparse_rejects_bad_ratio() {
        let m = manifest_with(&[(0, 0, 5)]);
        assert!(sample_sparse(&m, 0.0, 1).is_err());
        assert!(sample_sparse(&m, 1.5, 1).is_err());
    }

    #[test]
    fn box_ratio_cases() {
        let mut m = manifest_with(&[(0, 0, 1000)]);
        for (k, inst) in m.scenes[0].instances.iter_mut().enumerate() {
            inst.labeled = k < 79;
        }
        assert!((box_ratio(&m).unwrap() - 0.079).abs() < 1e-12);
        let empty = manifest_with(&[]);
        assert!(box_ratio(&empty).is_err());
    }

    #[test]
    fn zero_density_gives_empty_scenes() {
        let cfg = GenConfig {
            density: 0,
            ..small_config()
        };
        let d = generate_scenes(&cfg, 3, Exec::Sequential).unwrap();
        assert!(d.manifest.scenes.iter().all(|s| s.instances.is_empty()));
    }

    #[test]
    fn generation_is_deterministic_across_strategies() {
        let cfg = small_config();
        let a = generate_scenes(&cfg, 11, Exec::Sequential).unwrap();
        let b = generate_scenes(&cfg, 11, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_scenes(&cfg, 12, Exec::Parallel).unwrap();
        assert_ne!(a.rasters, c.rasters);
    }

    #[test]
    fn infeasible_density_is_an_error() {
        let cfg = GenConfig {
            scenes: 1,
            width: 64,
            height: 64,
            density: 200,
            max_placement_attempts: 50,
            ..GenConfig::benchmark()
        };
        assert!(matches!(generate_scenes(&cfg, 1, Exec::Sequential), Err(Error::Generation(_))));
    }

    #[test]
    fn instances_do_not_overlap_and_stay_inside() {
        let cfg = small_config();
        let d = generate_scenes(&cfg, 5, Exec::Sequential).unwrap();
        for scene in &d.manifest.scenes {
            for (i, a) in scene.instances.iter().enumerate() {
                let c = a.bbox.corners();
                assert!(c.iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= 160.0 && p.y <= 160.0));
                for b in &scene.instances[i + 1..] {
                    assert_eq!(crate::geometry::rotated_iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn binned_gaussian_hits_entropy() {
        for target in [0.5, 1.4, 2.3, 3.2] {
            let p = binned_gaussian_with_entropy(12.0, target);
            let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h - target).abs() < 1e-9, "{target} -> {h}");
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let d = generate_scenes(&small_config(), 9, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let pgm = std::fs::read(raster_path(dir.path(), 0)).unwrap();
        assert!(pgm.starts_with(b"P5"));
    }

    #[test]
    fn load_reports_file_and_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(ANNOTATIONS_FILE),
            r#"{"categories":["a"],"scenes":[{"image_id":0,"instances":[{"cx":1,"cy":1,"w":2,"h":1,"category":0,"labeled":true,"difficulty":0.1}]}],"seed":0,"ratio":null}"#,
        )
        .unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("annotations.json"), "{err}");
        assert!(err.contains("scenes[0].instances[0]"), "{err}");
        assert!(err.contains("theta"), "{err}");
    }
}
