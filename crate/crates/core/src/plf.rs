//! Pseudo-label freezing.
//!
//! Each epoch's mined labels for an image are matched against the labels
//! tracked for that image. A re-mined label gains `delta_up`, a missed one
//! loses `delta_down` (and is dropped at zero), and a label whose confidence
//! exceeds one is frozen: from then on it is treated as ground truth and never
//! touched again. Mined batches also pass through a FIFO queue whose capacity
//! is the number of iterations (images) per epoch.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cbp::PseudoLabel;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::io;

/// Confidence must exceed `1 + FREEZE_EPSILON` to freeze, so that float
/// drift in repeated additions never freezes a label that sits at one.
const FREEZE_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlfConfig {
    pub delta_up: f64,
    pub delta_down: f64,
    pub match_iou: f64,
}

impl Default for PlfConfig {
    fn default() -> Self {
        Self {
            delta_up: 0.2,
            delta_down: 0.1,
            match_iou: 0.5,
        }
    }
}

impl PlfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_up > 0.0 && self.delta_down >= 0.0) {
            return Err(Error::Config("plf deltas must be positive".into()));
        }
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(Error::Config(format!("plf.match_iou = {} not in (0, 1)", self.match_iou)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelState {
    Candidate,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedPseudoLabel {
    pub id: u64,
    pub image_id: u32,
    pub bbox: RotatedBox,
    pub category: usize,
    pub confidence: f64,
    /// `S_p` of the most recent mining.
    pub score: f64,
    pub state: LabelState,
    pub last_matched_epoch: u32,
}

/// Result of matching one image's current labels against its tracked ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(current index, tracked index)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_current: Vec<usize>,
    pub missed_tracked: Vec<usize>,
}

/// Greedy one-to-one matching by descending IoU over same-category pairs
/// with IoU at least `match_iou`. Ties resolve by lower current index, then
/// lower tracked index.
pub fn match_labels(current: &[PseudoLabel], tracked: &[TrackedPseudoLabel], match_iou: f64) -> Matching {
    let mut candidates = Vec::new();
    for (ci, c) in current.iter().enumerate() {
        for (ti, t) in tracked.iter().enumerate() {
            if c.category != t.category {
                continue;
            }
            let iou = rotated_iou(&c.bbox, &t.bbox);
            if iou >= match_iou {
                candidates.push((iou, ci, ti));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut current_used = vec![false; current.len()];
    let mut tracked_used = vec![false; tracked.len()];
    let mut pairs = Vec::new();
    for (_, ci, ti) in candidates {
        if !current_used[ci] && !tracked_used[ti] {
            current_used[ci] = true;
            tracked_used[ti] = true;
            pairs.push((ci, ti));
        }
    }
    Matching {
        pairs,
        unmatched_current: (0..current.len()).filter(|&i| !current_used[i]).collect(),
        missed_tracked: (0..tracked.len()).filter(|&i| !tracked_used[i]).collect(),
    }
}

/// One image's mined labels for one epoch, as stored in the FIFO queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedBatch {
    pub image_id: u32,
    pub epoch: u32,
    pub labels: Vec<PseudoLabel>,
}

/// Labels newly frozen by an update, plus the image's remaining candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlfUpdate {
    pub frozen: Vec<TrackedPseudoLabel>,
    pub active: Vec<TrackedPseudoLabel>,
}

/// Tracker state; serializes to the `tracker.json` checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlfTracker {
    pub config: PlfConfig,
    pub capacity: usize,
    pub queue: VecDeque<MinedBatch>,
    pub active: BTreeMap<u32, Vec<TrackedPseudoLabel>>,
    pub frozen: BTreeMap<u32, Vec<TrackedPseudoLabel>>,
    pub last_epoch: BTreeMap<u32, u32>,
    pub epoch: u32,
    pub next_id: u64,
}

impl PlfTracker {
    /// `capacity` is the number of iterations (images) per epoch.
    pub fn new(config: PlfConfig, capacity: usize) -> Self {
        Self {
            config,
            capacity: capacity.max(1),
            queue: VecDeque::new(),
            active: BTreeMap::new(),
            frozen: BTreeMap::new(),
            last_epoch: BTreeMap::new(),
            epoch: 0,
            next_id: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn frozen_for(&self, image_id: u32) -> &[TrackedPseudoLabel] {
        self.frozen.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn active_for(&self, image_id: u32) -> &[TrackedPseudoLabel] {
        self.active.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.values().map(Vec::len).sum()
    }

    pub fn frozen_labels(&self) -> impl Iterator<Item = &TrackedPseudoLabel> {
        self.frozen.values().flatten()
    }

    pub fn active_labels(&self) -> impl Iterator<Item = &TrackedPseudoLabel> {
        self.active.values().flatten()
    }

    /// Applies one epoch tick for one image.
    pub fn update(&mut self, image_id: u32, epoch: u32, mined: Vec<PseudoLabel>) -> Result<PlfUpdate> {
        if epoch < self.epoch {
            return Err(Error::Usage(format!(
                "plf update for epoch {epoch} after epoch {} was processed",
                self.epoch
            )));
        }
        if let Some(&last) = self.last_epoch.get(&image_id) {
            if epoch <= last {
                return Err(Error::Usage(format!(
                    "image {image_id} already updated for epoch {last}; got epoch {epoch}"
                )));
            }
        }
        self.epoch = epoch;
        self.last_epoch.insert(image_id, epoch);
        let cfg = self.config.clone();

        let frozen_here = self.frozen.entry(image_id).or_default();
        // Frozen labels are absorbing: re-mined copies of them are ignored.
        let current: Vec<PseudoLabel> = mined
            .iter()
            .filter(|m| {
                !frozen_here
                    .iter()
                    .any(|f| f.category == m.category && rotated_iou(&f.bbox, &m.bbox) >= cfg.match_iou)
            })
            .cloned()
            .collect();

        let tracked = self.active.remove(&image_id).unwrap_or_default();
        let matching = match_labels(&current, &tracked, cfg.match_iou);
        let ceiling = 1.0 + cfg.delta_up;

        let mut next: Vec<TrackedPseudoLabel> = Vec::with_capacity(tracked.len() + current.len());
        let mut tracked_slots: Vec<Option<TrackedPseudoLabel>> = tracked.into_iter().map(Some).collect();
        for &(ci, ti) in &matching.pairs {
            let mut t = tracked_slots[ti].take().expect("each tracked label matches once");
            let c = &current[ci];
            t.confidence = (t.confidence + cfg.delta_up).min(ceiling);
            t.bbox = c.bbox;
            t.score = c.score;
            t.last_matched_epoch = epoch;
            next.push(t);
        }
        for &ti in &matching.missed_tracked {
            let mut t = tracked_slots[ti].take().expect("each tracked label is missed once");
            t.confidence = (t.confidence - cfg.delta_down).max(0.0);
            if t.confidence > 1e-12 {
                next.push(t);
            }
        }
        for &ci in &matching.unmatched_current {
            let c = &current[ci];
            next.push(TrackedPseudoLabel {
                id: self.next_id,
                image_id,
                bbox: c.bbox,
                category: c.category,
                confidence: c.score.clamp(0.0, ceiling),
                score: c.score,
                state: LabelState::Candidate,
                last_matched_epoch: epoch,
            });
            self.next_id += 1;
        }
        next.sort_by_key(|t| t.id);

        // Freeze in descending confidence so that, among overlapping
        // same-category candidates, only the strongest freezes.
        let mut order: Vec<usize> = (0..next.len()).collect();
        order.sort_by(|&a, &b| next[b].confidence.total_cmp(&next[a].confidence).then(next[a].id.cmp(&next[b].id)));
        let mut newly_frozen = Vec::new();
        let mut remove = vec![false; next.len()];
        for i in order {
            if next[i].confidence <= 1.0 + FREEZE_EPSILON {
                continue;
            }
            let duplicate = frozen_here
                .iter()
                .chain(newly_frozen.iter())
                .any(|f: &TrackedPseudoLabel| f.category == next[i].category && rotated_iou(&f.bbox, &next[i].bbox) >= cfg.match_iou);
            remove[i] = true;
            if !duplicate {
                let mut f = next[i].clone();
                f.state = LabelState::Frozen;
                newly_frozen.push(f);
            }
        }
        let active: Vec<TrackedPseudoLabel> = next
            .into_iter()
            .zip(remove)
            .filter(|(_, r)| !r)
            .map(|(t, _)| t)
            .collect();
        newly_frozen.sort_by_key(|t| t.id);
        frozen_here.extend(newly_frozen.iter().cloned());
        if !active.is_empty() {
            self.active.insert(image_id, active.clone());
        }

        self.queue.push_back(MinedBatch {
            image_id,
            epoch,
            labels: mined,
        });
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(PlfUpdate {
            frozen: newly_frozen,
            active,
        })
    }
}
