//! Parametric stand-in for the detector's teacher.
//!
//! Skill per category grows with the amount of supervision the category has
//! received, `s_c = 1 - exp(-lambda * n_c)`. An instance is detected with
//! probability `s_c * (1 - difficulty)`; a detection yields `m` jittered
//! proposals scored around the same value. Supervision that turned out to be
//! wrong (`noisy` counts) contaminates the teacher: it confuses the category
//! more often and scores background clutter higher.
//!
//! Each instance carries fixed traits drawn from the teacher's own seed: a
//! uniform deciding whether it fires, one deciding whether it is confused,
//! and a score offset. A teacher that has learned an object therefore keeps
//! finding it from call to call, and finds it whenever a more skilled
//! teacher with the same seed would.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cbp::{Proposal, ProposalFile};
use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::rng::{pair_id, stream, Domain};

const SCORE_FLOOR: f64 = 1e-3;
const SCORE_CEIL: f64 = 1.0 - 1e-3;
const LOCALIZATION_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Skill growth rate per supervised instance.
    pub lambda: f64,
    /// Proposals per detected object.
    pub proposals_per_object: usize,
    pub center_jitter: f64,
    /// Relative standard deviation of the side lengths.
    pub size_jitter: f64,
    pub angle_jitter: f64,
    /// Jittered boxes are redrawn until they overlap their object at least
    /// this much.
    pub min_localization_iou: f64,
    /// Per-object score offset, fixed for the teacher's lifetime.
    pub object_score_jitter: f64,
    /// Per-proposal score noise.
    pub score_jitter: f64,
    /// Upper bound of the noise scores given to non-predicted categories.
    pub residual_score: f64,
    /// Mean number of background false proposals per scene.
    pub false_rate: f64,
    /// Upper bound of a clean teacher's background proposal scores.
    pub background_score: f64,
    /// Base rate of category confusion, scaled by `1 - skill`.
    pub confusion: f64,
    /// Confusion increase per unit of contamination.
    pub contamination_confusion: f64,
    /// Background score increase per unit of contamination.
    pub hallucination_boost: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            lambda: 0.006,
            proposals_per_object: 12,
            center_jitter: 1.5,
            size_jitter: 0.1,
            angle_jitter: 0.05,
            min_localization_iou: 0.6,
            object_score_jitter: 0.05,
            score_jitter: 0.02,
            residual_score: 0.1,
            false_rate: 5.0,
            background_score: 0.45,
            confusion: 0.5,
            contamination_confusion: 3.0,
            hallucination_boost: 2.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lambda, self.false_rate, self.confusion, self.contamination_confusion, self.hallucination_boost];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("surrogate rates must be non-negative".into()));
        }
        if self.proposals_per_object == 0 {
            return Err(Error::Config("surrogate.proposals_per_object must be at least 1".into()));
        }
        for (name, v) in [
            ("center_jitter", self.center_jitter),
            ("size_jitter", self.size_jitter),
            ("angle_jitter", self.angle_jitter),
            ("object_score_jitter", self.object_score_jitter),
            ("score_jitter", self.score_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("surrogate.{name} must be a non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.min_localization_iou) {
            return Err(Error::Config("surrogate.min_localization_iou must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.residual_score) || !(0.0..1.0).contains(&self.background_score) {
            return Err(Error::Config("surrogate score bounds must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Supervision received per category. `total` is the (weighted) number of
/// supervised instances; `noisy` is the part of it that does not correspond
/// to a real object of that category.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisionCounts {
    pub total: Vec<f64>,
    pub noisy: Vec<f64>,
}

impl SupervisionCounts {
    pub fn new(num_categories: usize) -> Self {
        Self {
            total: vec![0.0; num_categories],
            noisy: vec![0.0; num_categories],
        }
    }

    pub fn add(&mut self, category: usize, weight: f64, correct: bool) {
        self.total[category] += weight;
        if !correct {
            self.noisy[category] += weight;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTeacher {
    pub config: SurrogateConfig,
    /// Seed of the per-instance traits.
    pub seed: u64,
    pub skills: Vec<f64>,
    pub contamination: Vec<f64>,
}

/// `1 - exp(-lambda * n)`.
pub fn skill_from_count(lambda: f64, count: f64) -> f64 {
    1.0 - (-lambda * count.max(0.0)).exp()
}

impl SurrogateTeacher {
    pub fn new(config: SurrogateConfig, num_categories: usize, seed: u64) -> Self {
        Self {
            config,
            seed,
            skills: vec![0.0; num_categories],
            contamination: vec![0.0; num_categories],
        }
    }

    pub fn update_skill(&mut self, counts: &SupervisionCounts) -> Result<()> {
        if counts.total.len() != self.skills.len() || counts.noisy.len() != self.skills.len() {
            return Err(Error::Argument("supervision counts do not match the category count".into()));
        }
        if counts.total.iter().chain(&counts.noisy).any(|c| c.is_nan() || *c < 0.0) {
            return Err(Error::Argument("supervision counts must be non-negative".into()));
        }
        for c in 0..self.skills.len() {
            self.skills[c] = skill_from_count(self.config.lambda, counts.total[c]);
            self.contamination[c] = if counts.total[c] > 0.0 {
                (counts.noisy[c] / counts.total[c]).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Ok(())
    }

    /// Probability that an instance of `category` with `difficulty` is detected.
    pub fn detection_probability(&self, category: usize, difficulty: f64) -> f64 {
        self.skills[category] * (1.0 - difficulty)
    }

    /// Pre-NMS proposals for one scene. Box and score noise come from `seed`;
    /// every instance and the background draw from their own streams, so the
    /// output for one object never depends on the others.
    pub fn emit_proposals(&self, scene: &SceneRecord, width: u32, height: u32, seed: u64) -> ProposalFile {
        let cfg = &self.config;
        let num_categories = self.skills.len();
        let mut proposals = Vec::new();
        let base_id = scene.image_id as u64 + 1;

        for (k, inst) in scene.instances.iter().enumerate() {
            let mut traits = stream(self.seed, Domain::Teacher, pair_id(base_id, k as u64));
            let fire: f64 = traits.random();
            let confuse: f64 = traits.random();
            let offset = gauss(&mut traits, cfg.object_score_jitter);
            let other = if num_categories > 1 {
                let o = traits.random_range(0..num_categories - 1);
                if o >= inst.category {
                    o + 1
                } else {
                    o
                }
            } else {
                inst.category
            };
            let p_fire = self.detection_probability(inst.category, inst.difficulty);
            if fire >= p_fire {
                continue;
            }
            let skill = self.skills[inst.category];
            let kappa = self.contamination[inst.category];
            let p_confuse = (cfg.confusion * (1.0 - skill) + cfg.contamination_confusion * kappa).min(1.0);
            let predicted = if confuse < p_confuse { other } else { inst.category };
            let mean_score = skill * (1.0 - inst.difficulty) + offset;
            let mut rng = stream(seed, Domain::Emission, pair_id(base_id, k as u64));
            let b = &inst.bbox;
            for _ in 0..cfg.proposals_per_object {
                let score = (mean_score + gauss(&mut rng, cfg.score_jitter)).clamp(SCORE_FLOOR, SCORE_CEIL);
                let mut scores: Vec<f64> = (0..num_categories)
                    .map(|_| rng.random_range(0.0..=cfg.residual_score).max(SCORE_FLOOR))
                    .collect();
                scores[predicted] = score;
                let bbox = jittered(b, cfg, &mut rng);
                proposals.push(Proposal { bbox, scores });
            }
        }

        let mut rng = stream(seed, Domain::Emission, pair_id(base_id, u32::MAX as u64));
        let count = if cfg.false_rate > 0.0 {
            Poisson::new(cfg.false_rate).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
        } else {
            0
        };
        for _ in 0..count {
            let length: f64 = rng.random_range(12.0..26.0);
            let aspect: f64 = rng.random_range(1.4..2.2);
            let theta = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let category = rng.random_range(0..num_categories);
            let base = rng.random_range(0.05..cfg.background_score.max(0.05 + 1e-9));
            let radius = 0.5 * length * (1.0 + 1.0 / (aspect * aspect)).sqrt();
            let mut spot = None;
            for _ in 0..20 {
                let cx = rng.random_range(radius..(width as f64 - radius).max(radius + 1e-9));
                let cy = rng.random_range(radius..(height as f64 - radius).max(radius + 1e-9));
                let clear = scene
                    .instances
                    .iter()
                    .all(|i| (i.bbox.cx() - cx).hypot(i.bbox.cy() - cy) >= radius + i.bbox.circumradius());
                if clear {
                    spot = Some((cx, cy));
                    break;
                }
            }
            let Some((cx, cy)) = spot else { continue };
            let score = (base + cfg.hallucination_boost * self.contamination[category]).clamp(SCORE_FLOOR, SCORE_CEIL);
            let mut scores: Vec<f64> = (0..num_categories)
                .map(|_| rng.random_range(0.0..=cfg.residual_score).max(SCORE_FLOOR))
                .collect();
            scores[category] = score;
            let bbox = RotatedBox::new(cx, cy, length, length / aspect, theta).expect("valid background box");
            proposals.push(Proposal { bbox, scores });
        }

        ProposalFile {
            image_id: scene.image_id,
            proposals,
        }
    }
}

/// A perturbed copy of `b` overlapping it by at least
/// `min_localization_iou`; `b` itself when the draws keep missing.
fn jittered<R: Rng>(b: &RotatedBox, cfg: &SurrogateConfig, rng: &mut R) -> RotatedBox {
    for _ in 0..LOCALIZATION_ATTEMPTS {
        let w = b.w() * (1.0 + gauss(rng, cfg.size_jitter)).max(0.2);
        let h = b.h() * (1.0 + gauss(rng, cfg.size_jitter)).max(0.2);
        let cx = b.cx() + gauss(rng, cfg.center_jitter);
        let cy = b.cy() + gauss(rng, cfg.center_jitter);
        let theta = b.theta() + gauss(rng, cfg.angle_jitter);
        let candidate = RotatedBox::new(cx, cy, w, h, theta).expect("jittered box stays valid");
        if rotated_iou(&candidate, b) >= cfg.min_localization_iou {
            return candidate;
        }
    }
    *b
}

fn gauss<R: Rng>(rng: &mut R, std: f64) -> f64 {
    // Always consume one draw so the stream layout does not depend on std.
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    z * std
}
