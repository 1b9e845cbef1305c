//! The closed mining loop. Each epoch the surrogate teacher proposes boxes
//! for every scene, CBP mines pseudo labels, the entropy filter screens them,
//! PLF tracks and freezes them, and the supervision they add retrains the
//! teacher for the next epoch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbp::{cbp_generate, CbpConfig, Proposal, PseudoLabel};
use crate::dataset::{Dataset, SceneRecord};
use crate::entropy::{egpf_filter, EntropyModel};
use crate::error::{Error, Result};
use crate::eval::{average_precision, match_mined, Detection, GroundTruth, MATCH_IOU};
use crate::exec::Exec;
use crate::geometry::{nms, RotatedBox};
use crate::io;
use crate::loss::{partition_negatives, total_loss_terms, LossConfig, LossTerms, SampleRole, TrainingSample};
use crate::plf::{PlfConfig, PlfTracker};
use crate::rng::{derive_seed, stream, Domain};
use crate::surrogate::{SupervisionCounts, SurrogateConfig, SurrogateTeacher};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MINING_FILE: &str = "mining.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRACKER_FILE: &str = "tracker.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PROPOSALS_DIR: &str = "proposals";

pub const METRICS_HEADER: &str = "epoch,category,AP,precision,recall,frozen_count,box_ratio";
const MINING_HEADER: &str =
    "epoch,category,proposals_above_thr,mined,egpf_rejected,candidates,frozen,candidate_precision,frozen_precision";
const LOSS_HEADER: &str = "epoch,positive,negative,total,hard_negatives,normal_negatives";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    /// Off for the baseline arm: the teacher only ever sees the real labels.
    pub mining: bool,
    pub egpf: bool,
    pub plf: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            mining: true,
            egpf: true,
            plf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// The first `scenes` scenes form the fixed loss probe batch.
    pub scenes: usize,
    /// Background negatives sampled per probe scene.
    pub background: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            background: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u32,
    /// Dataset directory the run was made on (informational for the library).
    pub dataset: Option<PathBuf>,
    /// Fitted entropy model the run used.
    pub entropy_model: Option<PathBuf>,
    /// Class-wise rotated NMS threshold applied to teacher output before scoring.
    pub eval_nms_iou: f64,
    pub mode: ModeConfig,
    pub cbp: CbpConfig,
    pub plf: PlfConfig,
    pub loss: LossConfig,
    pub surrogate: SurrogateConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            dataset: None,
            entropy_model: None,
            eval_nms_iou: 0.5,
            mode: ModeConfig::default(),
            cbp: CbpConfig::default(),
            plf: PlfConfig::default(),
            loss: LossConfig::default(),
            surrogate: SurrogateConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eval_nms_iou > 0.0 && self.eval_nms_iou <= 1.0) {
            return Err(Error::Config(format!("eval_nms_iou {} outside (0, 1]", self.eval_nms_iou)));
        }
        self.cbp.validate()?;
        self.plf.validate()?;
        self.surrogate.validate()
    }
}

/// Quality numbers for one category (or all of them) after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub frozen_count: usize,
    /// Share of instances supervised as ground truth: real labels plus frozen pseudo labels.
    pub box_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningStats {
    pub proposals_above_thr: usize,
    pub mined: usize,
    pub egpf_rejected: usize,
    pub candidates: usize,
    pub frozen: usize,
    pub candidate_hits: usize,
    pub frozen_hits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: u32,
    pub per_category: Vec<CategoryMetrics>,
    pub all: CategoryMetrics,
    pub mining: Vec<MiningStats>,
    pub loss: LossTerms,
    pub hard_negatives: usize,
    pub normal_negatives: usize,
    pub skills: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub epochs: Vec<EpochReport>,
    pub tracker: PlfTracker,
    pub teacher: SurrogateTeacher,
}

/// Per-scene output of the parallel part of an epoch.
struct SceneMining {
    above: Vec<usize>,
    mined: Vec<usize>,
    rejected: Vec<usize>,
    kept: Vec<PseudoLabel>,
}

/// A pseudo label currently used as supervision.
struct Supervised {
    image_id: u32,
    bbox: RotatedBox,
    category: usize,
    weight: f64,
    frozen: bool,
}

fn gt_of(image_id: u32, bbox: RotatedBox, category: usize) -> GroundTruth {
    GroundTruth {
        image_id,
        bbox,
        category,
    }
}

/// Teacher output turned into scored detections: argmax category, max
/// score, class-wise rotated NMS.
pub fn detections_from_proposals(image_id: u32, proposals: &[Proposal], num_categories: usize, nms_iou: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in 0..num_categories {
        let idx: Vec<usize> = (0..proposals.len()).filter(|&i| proposals[i].category() == c).collect();
        if idx.is_empty() {
            continue;
        }
        let boxes: Vec<RotatedBox> = idx.iter().map(|&i| proposals[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| proposals[i].max_score()).collect();
        let kept = nms(&boxes, &scores, nms_iou).expect("boxes and scores have equal length");
        out.extend(kept.into_iter().map(|k| Detection {
            image_id,
            bbox: boxes[k],
            category: c,
            score: scores[k],
        }));
    }
    out
}

fn check_inputs(dataset: &Dataset, model: Option<&EntropyModel>, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.rasters.len() != dataset.manifest.scenes.len() {
        return Err(Error::Argument("dataset has a different number of rasters and scenes".into()));
    }
    if cfg.mode.mining && cfg.mode.egpf {
        match model {
            None => return Err(Error::Config("entropy filtering is enabled but no fitted entropy model was given".into())),
            Some(m) if m.num_categories != dataset.manifest.num_categories() => {
                return Err(Error::Config(format!(
                    "entropy model covers {} categories, dataset has {}",
                    m.num_categories,
                    dataset.manifest.num_categories()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Runs the loop for `cfg.epochs` epochs. `on_epoch` sees every report with
/// the tracker state at the end of that epoch.
pub fn run_loop(
    dataset: &Dataset,
    model: Option<&EntropyModel>,
    cfg: &RunConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochReport, &PlfTracker) -> Result<()>,
) -> Result<RunOutcome> {
    run_loop_dumping(dataset, model, cfg, exec, None, on_epoch)
}

/// [`run_loop`] that also writes every emitted proposal file to
/// `proposals_path(dump_dir, epoch, image_id)` when `dump_dir` is given.
pub fn run_loop_dumping(
    dataset: &Dataset,
    model: Option<&EntropyModel>,
    cfg: &RunConfig,
    exec: Exec,
    dump_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport, &PlfTracker) -> Result<()>,
) -> Result<RunOutcome> {
    check_inputs(dataset, model, cfg)?;
    let manifest = &dataset.manifest;
    let nc = manifest.num_categories();
    let scenes = &manifest.scenes;
    let mut tracker = PlfTracker::new(cfg.plf.clone(), scenes.len().max(1));
    let mut teacher = SurrogateTeacher::new(cfg.surrogate.clone(), nc, derive_seed(cfg.seed, Domain::Teacher, 0));

    let labeled = manifest.labeled_per_category();
    let mut totals = vec![0usize; nc];
    for inst in scenes.iter().flat_map(|s| &s.instances) {
        totals[inst.category] += 1;
    }
    let hidden: Vec<Vec<GroundTruth>> = scenes
        .iter()
        .map(|s| s.hidden().map(|i| gt_of(s.image_id, i.bbox, i.category)).collect())
        .collect();
    let all_gt: Vec<GroundTruth> = scenes
        .iter()
        .flat_map(|s| s.instances.iter().map(|i| gt_of(s.image_id, i.bbox, i.category)))
        .collect();

    let mut best_counts = SupervisionCounts::new(nc);
    for (c, &n) in labeled.iter().enumerate() {
        best_counts.total[c] = n as f64;
    }
    teacher.update_skill(&best_counts)?;

    let eval_seed = derive_seed(cfg.seed, Domain::Evaluation, 0);
    let mut reports = Vec::with_capacity(cfg.epochs as usize);
    let mut unfrozen: Vec<Vec<PseudoLabel>> = vec![Vec::new(); scenes.len()];

    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, Domain::Emission, epoch as u64);
        let mined: Vec<SceneMining> = exec.map_range(scenes.len(), |i| {
            let scene = &scenes[i];
            let raster = &dataset.rasters[i];
            let file = teacher.emit_proposals(scene, raster.width(), raster.height(), epoch_seed);
            if let Some(dir) = dump_dir {
                file.save(&proposals_path(dir, epoch, scene.image_id))?;
            }
            let mut above = vec![0usize; nc];
            for p in &file.proposals {
                if p.max_score() > cfg.cbp.score_thr {
                    above[p.category()] += 1;
                }
            }
            let mut out = SceneMining {
                above,
                mined: vec![0; nc],
                rejected: vec![0; nc],
                kept: Vec::new(),
            };
            if !cfg.mode.mining {
                return Ok(out);
            }
            let mut known: Vec<RotatedBox> = scene.labeled().map(|i| i.bbox).collect();
            if cfg.mode.plf {
                known.extend(tracker.frozen_for(scene.image_id).iter().map(|f| f.bbox));
            }
            let labels = cbp_generate(&file.proposals, &known, &cfg.cbp)?;
            for l in &labels {
                out.mined[l.category] += 1;
            }
            let (kept, rejected) = match (cfg.mode.egpf, model) {
                (true, Some(m)) => egpf_filter(labels, raster, m),
                _ => (labels, Vec::new()),
            };
            for l in &rejected {
                out.rejected[l.category] += 1;
            }
            out.kept = kept;
            Ok(out)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut mining = vec![MiningStats::default(); nc];
        for m in &mined {
            for (c, stats) in mining.iter_mut().enumerate() {
                stats.proposals_above_thr += m.above[c];
                stats.mined += m.mined[c];
                stats.egpf_rejected += m.rejected[c];
            }
        }

        if cfg.mode.plf {
            for (scene, m) in scenes.iter().zip(mined) {
                tracker.update(scene.image_id, epoch, m.kept)?;
            }
        } else {
            unfrozen = mined.into_iter().map(|m| m.kept).collect();
        }

        let supervised = supervised_labels(scenes, &tracker, &unfrozen, cfg.mode.plf);
        let mut counts = SupervisionCounts::new(nc);
        for (c, &n) in labeled.iter().enumerate() {
            counts.total[c] = n as f64;
        }
        let mut frozen_per_category = vec![0usize; nc];
        for (si, labels) in supervised.iter().enumerate() {
            let as_gt: Vec<GroundTruth> = labels.iter().map(|l| gt_of(l.image_id, l.bbox, l.category)).collect();
            let hits = match_mined(&as_gt, &hidden[si], MATCH_IOU);
            for (l, hit) in labels.iter().zip(hits) {
                counts.add(l.category, l.weight, hit);
                let stats = &mut mining[l.category];
                if l.frozen {
                    frozen_per_category[l.category] += 1;
                    stats.frozen += 1;
                    stats.frozen_hits += hit as usize;
                } else {
                    stats.candidates += 1;
                    stats.candidate_hits += hit as usize;
                }
            }
        }
        // The teacher does not unlearn: each category keeps the largest
        // supervision it has seen, with the contamination measured now.
        for c in 0..nc {
            if counts.total[c] >= best_counts.total[c] {
                best_counts.total[c] = counts.total[c];
                best_counts.noisy[c] = counts.noisy[c];
            } else {
                let share = if counts.total[c] > 0.0 { counts.noisy[c] / counts.total[c] } else { 0.0 };
                best_counts.noisy[c] = share * best_counts.total[c];
            }
        }
        teacher.update_skill(&best_counts)?;

        let detections: Vec<Detection> = exec
            .map_range(scenes.len(), |i| {
                let raster = &dataset.rasters[i];
                let file = teacher.emit_proposals(&scenes[i], raster.width(), raster.height(), eval_seed);
                detections_from_proposals(scenes[i].image_id, &file.proposals, nc, cfg.eval_nms_iou)
            })
            .into_iter()
            .flatten()
            .collect();
        let ap = average_precision(&detections, &all_gt, nc, MATCH_IOU)?;

        let hidden_per_category: Vec<usize> = (0..nc)
            .map(|c| hidden.iter().flatten().filter(|g| g.category == c).count())
            .collect();
        let per_category: Vec<CategoryMetrics> = (0..nc)
            .map(|c| {
                let m = &mining[c];
                category_metrics(
                    ap.per_category[c],
                    m.candidates + m.frozen,
                    m.candidate_hits + m.frozen_hits,
                    hidden_per_category[c],
                    frozen_per_category[c],
                    labeled[c],
                    totals[c],
                )
            })
            .collect();
        let sum = |f: &dyn Fn(&MiningStats) -> usize| mining.iter().map(f).sum::<usize>();
        let all = category_metrics(
            ap.map,
            sum(&|m| m.candidates + m.frozen),
            sum(&|m| m.candidate_hits + m.frozen_hits),
            hidden_per_category.iter().sum(),
            frozen_per_category.iter().sum(),
            labeled.iter().sum(),
            totals.iter().sum(),
        );

        let (loss, hard_negatives, normal_negatives) = probe_loss(dataset, &supervised, &teacher, cfg)?;
        let report = EpochReport {
            epoch,
            per_category,
            all,
            mining,
            loss,
            hard_negatives,
            normal_negatives,
            skills: teacher.skills.clone(),
        };
        on_epoch(&report, &tracker)?;
        reports.push(report);
    }

    Ok(RunOutcome {
        epochs: reports,
        tracker,
        teacher,
    })
}

/// The loop with mining switched off: the teacher only learns from the
/// sparse real labels.
pub fn run_baseline(
    dataset: &Dataset,
    cfg: &RunConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochReport, &PlfTracker) -> Result<()>,
) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode.mining = false;
    run_loop(dataset, None, &cfg, exec, on_epoch)
}

fn category_metrics(
    ap: Option<f64>,
    mined: usize,
    hits: usize,
    hidden: usize,
    frozen: usize,
    labeled: usize,
    total: usize,
) -> CategoryMetrics {
    CategoryMetrics {
        ap,
        precision: if mined == 0 { 1.0 } else { hits as f64 / mined as f64 },
        recall: if hidden == 0 { 0.0 } else { hits as f64 / hidden as f64 },
        frozen_count: frozen,
        box_ratio: if total == 0 { 0.0 } else { (labeled + frozen) as f64 / total as f64 },
    }
}

fn supervised_labels(
    scenes: &[SceneRecord],
    tracker: &PlfTracker,
    unfrozen: &[Vec<PseudoLabel>],
    plf: bool,
) -> Vec<Vec<Supervised>> {
    scenes
        .iter()
        .enumerate()
        .map(|(si, scene)| {
            if plf {
                let frozen = tracker.frozen_for(scene.image_id).iter().map(|t| (t, true));
                let active = tracker.active_for(scene.image_id).iter().map(|t| (t, false));
                frozen
                    .chain(active)
                    .map(|(t, is_frozen)| Supervised {
                        image_id: t.image_id,
                        bbox: t.bbox,
                        category: t.category,
                        weight: if is_frozen { 1.0 } else { t.score },
                        frozen: is_frozen,
                    })
                    .collect()
            } else {
                unfrozen[si]
                    .iter()
                    .map(|l| Supervised {
                        image_id: scene.image_id,
                        bbox: l.bbox,
                        category: l.category,
                        weight: l.score,
                        frozen: false,
                    })
                    .collect()
            }
        })
        .collect()
}

fn student_probs(num_categories: usize, category: usize, p: f64) -> Vec<f64> {
    let mut probs = vec![0.02; num_categories];
    probs[category] = p;
    probs
}

/// Loss over a fixed probe batch. The student is a stand-in whose
/// probabilities and box errors follow the teacher's skill; negatives are
/// near misses around known boxes, unlabeled objects (the teacher sees
/// them, which exercises the ignore weighting) and plain background.
fn probe_loss(
    dataset: &Dataset,
    supervised: &[Vec<Supervised>],
    teacher: &SurrogateTeacher,
    cfg: &RunConfig,
) -> Result<(LossTerms, usize, usize)> {
    let nc = teacher.skills.len();
    let mut samples = Vec::new();
    let mut known = Vec::new();
    let scenes = dataset.manifest.scenes.iter().zip(&dataset.rasters);
    for (si, (scene, raster)) in scenes.enumerate().take(cfg.probe.scenes) {
        let mut rng = stream(cfg.seed, Domain::Probe, scene.image_id as u64);
        let mut positive = |bbox: RotatedBox, category: usize, role: SampleRole, rng: &mut rand_chacha::ChaCha8Rng| {
            let s = teacher.skills[category];
            let shift = (1.0 - s) * bbox.h() * 0.5;
            let pred = bbox.translated(rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
            samples.push(TrainingSample {
                student_probs: student_probs(nc, category, 0.05 + 0.9 * s),
                teacher_foreground: s,
                role,
                pred_box: Some(pred),
                gt_box: Some(bbox),
            });
        };
        for inst in scene.labeled() {
            known.push(inst.bbox);
            positive(inst.bbox, inst.category, SampleRole::RealGt { target: inst.category }, &mut rng);
        }
        for l in &supervised[si] {
            let role = if l.frozen {
                known.push(l.bbox);
                SampleRole::FrozenGt { target: l.category }
            } else {
                SampleRole::PseudoGt {
                    target: l.category,
                    score: Some(l.weight),
                }
            };
            positive(l.bbox, l.category, role, &mut rng);
        }
        for inst in scene.labeled() {
            let near = inst.bbox.translated(0.4 * inst.bbox.w() * inst.bbox.theta().cos(), 0.4 * inst.bbox.w() * inst.bbox.theta().sin());
            let s = teacher.skills[inst.category];
            samples.push(TrainingSample {
                student_probs: student_probs(nc, inst.category, 0.05 + 0.4 * s),
                teacher_foreground: 0.3 + 0.6 * s,
                role: SampleRole::NormalNegative,
                pred_box: Some(near),
                gt_box: None,
            });
        }
        for inst in scene.hidden() {
            let covered = supervised[si]
                .iter()
                .any(|l| crate::geometry::rotated_iou(&l.bbox, &inst.bbox) >= MATCH_IOU);
            if covered {
                continue;
            }
            samples.push(TrainingSample {
                student_probs: student_probs(nc, inst.category, 0.05 + 0.9 * teacher.skills[inst.category]),
                teacher_foreground: teacher.detection_probability(inst.category, inst.difficulty),
                role: SampleRole::NormalNegative,
                pred_box: Some(inst.bbox),
                gt_box: None,
            });
        }
        for _ in 0..cfg.probe.background {
            let x = rng.random_range(0.0..raster.width() as f64);
            let y = rng.random_range(0.0..raster.height() as f64);
            samples.push(TrainingSample {
                student_probs: vec![0.02; nc],
                teacher_foreground: rng.random_range(0.0..0.2),
                role: SampleRole::NormalNegative,
                pred_box: Some(RotatedBox::axis_aligned(x, y, 16.0, 8.0)?),
                gt_box: None,
            });
        }
    }
    partition_negatives(&mut samples, &known, &cfg.loss);
    let hard = samples.iter().filter(|s| s.role == SampleRole::HardNegative).count();
    let normal = samples.iter().filter(|s| s.role == SampleRole::NormalNegative).count();
    Ok((total_loss_terms(&samples, &cfg.loss)?, hard, normal))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_rows(report: &EpochReport, categories: &[String]) -> String {
    let mut out = String::new();
    let rows = report
        .per_category
        .iter()
        .zip(categories.iter().map(String::as_str))
        .chain(std::iter::once((&report.all, "all")));
    for (m, name) in rows {
        let _ = writeln!(
            out,
            "{},{name},{},{:.6},{:.6},{},{:.6}",
            report.epoch,
            fmt_opt(m.ap),
            m.precision,
            m.recall,
            m.frozen_count,
            m.box_ratio
        );
    }
    out
}

fn ratio(hits: usize, n: usize) -> String {
    if n == 0 {
        String::new()
    } else {
        format!("{:.6}", hits as f64 / n as f64)
    }
}

fn mining_rows(report: &EpochReport, categories: &[String]) -> String {
    let mut out = String::new();
    for (m, name) in report.mining.iter().zip(categories) {
        let _ = writeln!(
            out,
            "{},{name},{},{},{},{},{},{},{}",
            report.epoch,
            m.proposals_above_thr,
            m.mined,
            m.egpf_rejected,
            m.candidates,
            m.frozen,
            ratio(m.candidate_hits, m.candidates),
            ratio(m.frozen_hits, m.frozen)
        );
    }
    out
}

fn loss_row(report: &EpochReport) -> String {
    format!(
        "{},{:.9},{:.9},{:.9},{},{}\n",
        report.epoch,
        report.loss.positive,
        report.loss.negative,
        report.loss.total(),
        report.hard_negatives,
        report.normal_negatives
    )
}

pub fn checkpoint_path(run_dir: &Path, epoch: u32) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("tracker_epoch_{epoch:03}.json"))
}

pub fn proposals_path(dir: &Path, epoch: u32, image_id: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}")).join(format!("{image_id}.json"))
}

/// Runs the loop (or the baseline when `cfg.mode.mining` is off) and writes
/// the run directory: config snapshot, metrics, mining and loss logs, the
/// final tracker and one tracker checkpoint per epoch. With `dump_proposals`
/// the teacher's raw proposals go under `proposals/epoch_NNN/`.
pub fn run_to_dir(
    dataset: &Dataset,
    model: Option<&EntropyModel>,
    cfg: &RunConfig,
    exec: Exec,
    run_dir: &Path,
    dump_proposals: bool,
) -> Result<RunOutcome> {
    check_inputs(dataset, model, cfg)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    io::write_toml(&run_dir.join(CONFIG_FILE), cfg)?;
    let categories = &dataset.manifest.categories;
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut mining = format!("{MINING_HEADER}\n");
    let mut loss = format!("{LOSS_HEADER}\n");
    let dump_dir = run_dir.join(PROPOSALS_DIR);
    let dump = dump_proposals.then_some(dump_dir.as_path());
    let outcome = run_loop_dumping(dataset, model, cfg, exec, dump, |report, tracker| {
        metrics.push_str(&metrics_rows(report, categories));
        mining.push_str(&mining_rows(report, categories));
        loss.push_str(&loss_row(report));
        tracker.save(&checkpoint_path(run_dir, report.epoch))
    })?;
    io::write_bytes(&run_dir.join(METRICS_FILE), metrics.as_bytes())?;
    io::write_bytes(&run_dir.join(MINING_FILE), mining.as_bytes())?;
    io::write_bytes(&run_dir.join(LOSS_FILE), loss.as_bytes())?;
    outcome.tracker.save(&run_dir.join(TRACKER_FILE))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal(cx: f64, scores: Vec<f64>) -> Proposal {
        Proposal::new(RotatedBox::new(cx, 10.0, 12.0, 6.0, 0.0).unwrap(), scores).unwrap()
    }

    #[test]
    fn detections_suppress_within_category_only() {
        let props = vec![
            proposal(10.0, vec![0.9, 0.1]),
            proposal(10.5, vec![0.7, 0.2]),
            proposal(10.2, vec![0.1, 0.8]),
            proposal(60.0, vec![0.6, 0.0]),
        ];
        let dets = detections_from_proposals(3, &props, 2, 0.5);
        let summary: Vec<(usize, f64)> = dets.iter().map(|d| (d.category, d.score)).collect();
        assert_eq!(summary, vec![(0, 0.9), (0, 0.6), (1, 0.8)]);
        assert!(dets.iter().all(|d| d.image_id == 3));
    }

    #[test]
    fn metrics_rows_end_with_all() {
        let m = |ap| CategoryMetrics {
            ap,
            precision: 1.0,
            recall: 0.25,
            frozen_count: 2,
            box_ratio: 0.125,
        };
        let report = EpochReport {
            epoch: 4,
            per_category: vec![m(Some(0.5)), m(None)],
            all: m(Some(0.5)),
            mining: Vec::new(),
            loss: LossTerms::default(),
            hard_negatives: 0,
            normal_negatives: 0,
            skills: Vec::new(),
        };
        let text = metrics_rows(&report, &["a".into(), "b".into()]);
        assert_eq!(
            text,
            "4,a,0.500000,1.000000,0.250000,2,0.125000\n\
             4,b,,1.000000,0.250000,2,0.125000\n\
             4,all,0.500000,1.000000,0.250000,2,0.125000\n"
        );
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig {
            seed: 9,
            epochs: 3,
            ..RunConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = toml::from_str("seed = 2\n[mode]\nplf = false\n").unwrap();
        assert!(partial.mode.mining && partial.mode.egpf && !partial.mode.plf);
        assert!(toml::from_str::<RunConfig>("seed = 2\nepoch = 3\n").is_err());
    }

    #[test]
    fn invalid_nms_threshold_is_rejected() {
        let cfg = RunConfig {
            eval_nms_iou: 0.0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_names_are_zero_padded() {
        let p = checkpoint_path(Path::new("run"), 7);
        assert_eq!(p, Path::new("run/checkpoints/tracker_epoch_007.json"));
    }
}
