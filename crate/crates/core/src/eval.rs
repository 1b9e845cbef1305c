//! Detection AP/mAP and pseudo-label quality.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u32,
    pub bbox: RotatedBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u32,
    pub bbox: RotatedBox,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    pub map: Option<f64>,
}

/// All-point interpolated AP of a single category. `dets` must already be in
/// score-descending order.
fn category_ap(dets: &[&Detection], gts: &[&GroundTruth], iou_thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut by_image: BTreeMap<u32, Vec<(usize, &RotatedBox)>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push((i, &g.bbox));
    }
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_image.get(&d.image_id) {
            for &(gi, gb) in cands {
                if used[gi] {
                    continue;
                }
                let iou = rotated_iou(&d.bbox, gb);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    interpolated_area(&recall, &precision)
}

/// Area under the precision envelope, stepping at each recall increase.
pub fn interpolated_area(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        if *r > prev_recall {
            area += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    area
}

fn by_score_desc(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0))
}

pub fn average_precision(
    detections: &[Detection],
    gt: &[GroundTruth],
    num_categories: usize,
    iou_thr: f64,
) -> Result<ApReport> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Argument(format!("iou threshold {iou_thr} outside (0, 1]")));
    }
    if let Some(d) = detections.iter().find(|d| d.category >= num_categories || !d.score.is_finite()) {
        return Err(Error::Argument(format!(
            "detection in image {} has category {} or score {} out of range",
            d.image_id, d.category, d.score
        )));
    }
    if let Some(g) = gt.iter().find(|g| g.category >= num_categories) {
        return Err(Error::Argument(format!("ground truth category {} out of range", g.category)));
    }
    let mut per_category = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let gts: Vec<&GroundTruth> = gt.iter().filter(|g| g.category == c).collect();
        if gts.is_empty() {
            per_category.push(None);
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> =
            detections.iter().enumerate().filter(|(_, d)| d.category == c).collect();
        dets.sort_by(by_score_desc);
        let dets: Vec<&Detection> = dets.into_iter().map(|(_, d)| d).collect();
        per_category.push(Some(category_ap(&dets, &gts, iou_thr)));
    }
    let scored: Vec<f64> = per_category.iter().flatten().copied().collect();
    let map = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(ApReport { per_category, map })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoMetrics {
    pub true_positives: usize,
    pub mined: usize,
    pub hidden: usize,
    pub precision: f64,
    pub recall: f64,
}

impl PseudoMetrics {
    fn from_counts(true_positives: usize, mined: usize, hidden: usize) -> Self {
        let precision = if mined == 0 { 1.0 } else { true_positives as f64 / mined as f64 };
        let recall = if hidden == 0 { 0.0 } else { true_positives as f64 / hidden as f64 };
        Self { true_positives, mined, hidden, precision, recall }
    }
}

/// Which mined labels hit a hidden instance. Pairs are matched greedily in
/// decreasing IoU order, one-to-one, same image and category only.
pub fn match_mined(mined: &[GroundTruth], hidden: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut pairs = Vec::new();
    for (i, m) in mined.iter().enumerate() {
        for (j, h) in hidden.iter().enumerate() {
            if m.image_id != h.image_id || m.category != h.category {
                continue;
            }
            let iou = rotated_iou(&m.bbox, &h.bbox);
            if iou >= iou_thr {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut hit = vec![false; mined.len()];
    let mut taken = vec![false; hidden.len()];
    for (_, i, j) in pairs {
        if !hit[i] && !taken[j] {
            hit[i] = true;
            taken[j] = true;
        }
    }
    hit
}

pub fn pseudo_label_metrics(mined: &[GroundTruth], hidden: &[GroundTruth]) -> PseudoMetrics {
    let tp = match_mined(mined, hidden, MATCH_IOU).iter().filter(|h| **h).count();
    PseudoMetrics::from_counts(tp, mined.len(), hidden.len())
}
