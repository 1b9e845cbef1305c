//! Cluster-based pseudo-label generation.
//!
//! Pre-NMS teacher proposals are filtered (score threshold, overlap with
//! known ground truth, top-k), linked into a graph whose edges join pairs with
//! IoU above `edge_iou`, and each connected cluster is fused into one pseudo
//! label:
//!
//! * confidence `S_p = max_i s_i * N_c / k`;
//! * box = score-weighted mean of the member boxes (angle averaged on the
//!   doubled-angle circle, since rectangles repeat every half turn);
//! * category = majority vote over the members' argmax categories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{order_by_score_desc, normalize_angle, rotated_iou, RawBox, RotatedBox};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProposalRecord", into = "ProposalRecord")]
pub struct Proposal {
    pub bbox: RotatedBox,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
    scores: Vec<f64>,
}

impl TryFrom<ProposalRecord> for Proposal {
    type Error = Error;

    fn try_from(r: ProposalRecord) -> Result<Self> {
        let bbox = RotatedBox::try_from(RawBox {
            cx: r.cx,
            cy: r.cy,
            w: r.w,
            h: r.h,
            theta: r.theta,
        })?;
        Proposal::new(bbox, r.scores)
    }
}

impl From<Proposal> for ProposalRecord {
    fn from(p: Proposal) -> Self {
        ProposalRecord {
            cx: p.bbox.cx(),
            cy: p.bbox.cy(),
            w: p.bbox.w(),
            h: p.bbox.h(),
            theta: p.bbox.theta(),
            scores: p.scores,
        }
    }
}

impl Proposal {
    pub fn new(bbox: RotatedBox, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Argument("proposal needs at least one category score".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Argument(format!("proposal score {s} not in [0, 1]")));
        }
        Ok(Self { bbox, scores })
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Category with the highest score; ties go to the lower id.
    pub fn category(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Per-image proposal file: `proposals/<image_id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalFile {
    pub image_id: u32,
    pub proposals: Vec<Proposal>,
}

impl ProposalFile {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// How member boxes are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Divide the score-weighted sum by the total weight.
    #[default]
    Normalized,
    /// Divide the score-weighted sum by the member count, component by
    /// component (angle included). Shrinks boxes when scores are below one.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbpConfig {
    pub score_thr: f64,
    pub top_k: usize,
    pub gt_excl_iou: f64,
    pub edge_iou: f64,
    pub fusion: FusionMode,
}

impl Default for CbpConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.6,
            top_k: 30,
            gt_excl_iou: 0.5,
            edge_iou: 0.5,
            fusion: FusionMode::Normalized,
        }
    }
}

impl CbpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_thr", self.score_thr),
            ("gt_excl_iou", self.gt_excl_iou),
            ("edge_iou", self.edge_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("cbp.{name} = {v} not in (0, 1)")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("cbp.top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A mined, not yet verified label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: RotatedBox,
    pub category: usize,
    /// Cluster confidence `S_p`.
    pub score: f64,
    pub cluster_size: usize,
}

/// Score threshold, ground-truth exclusion and top-k, in that order.
/// Returns proposal indices sorted by descending max score.
pub fn filter_proposals(proposals: &[Proposal], known_gt: &[RotatedBox], cfg: &CbpConfig) -> Vec<usize> {
    let scores: Vec<f64> = proposals.iter().map(Proposal::max_score).collect();
    order_by_score_desc(&scores)
        .into_iter()
        .filter(|&i| scores[i] > cfg.score_thr)
        .filter(|&i| known_gt.iter().all(|gt| rotated_iou(&proposals[i].bbox, gt) < cfg.gt_excl_iou))
        .take(cfg.top_k)
        .collect()
}

/// Connected components of the IoU graph over `boxes`, found by
/// breadth-first expansion from the highest-scoring unvisited node. Each
/// component lists positions into `boxes` in visiting order.
pub fn build_clusters(boxes: &[RotatedBox], scores: &[f64], edge_iou: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut adjacent = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rotated_iou(&boxes[i], &boxes[j]) > edge_iou {
                adjacent[i].push(j);
                adjacent[j].push(i);
            }
        }
    }
    let order = order_by_score_desc(scores);
    for list in &mut adjacent {
        list.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }

    let mut visited = vec![false; n];
    let mut clusters = Vec::new();
    for &seed in &order {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let mut members = vec![seed];
        let mut head = 0;
        while head < members.len() {
            let node = members[head];
            head += 1;
            for &next in &adjacent[node] {
                if !visited[next] {
                    visited[next] = true;
                    members.push(next);
                }
            }
        }
        clusters.push(members);
    }
    clusters
}

/// `max(scores) * N_c / k`.
pub fn cluster_score(scores: &[f64], k: usize) -> f64 {
    debug_assert!(!scores.is_empty() && scores.len() <= k);
    let max = scores.iter().copied().fold(0.0, f64::max);
    max * scores.len() as f64 / k as f64
}

/// Fuses member boxes weighted by their max scores.
pub fn fuse_box(members: &[&Proposal], mode: FusionMode) -> Result<RotatedBox> {
    if members.is_empty() {
        return Err(Error::Argument("cannot fuse an empty cluster".into()));
    }
    let scores: Vec<f64> = members.iter().map(|p| p.max_score()).collect();
    let lead = order_by_score_desc(&scores)[0];
    let lead_theta = members[lead].bbox.theta();
    match mode {
        FusionMode::Normalized => {
            let total: f64 = scores.iter().sum();
            if total <= 0.0 {
                return Ok(members[lead].bbox);
            }
            let (mut x, mut y, mut w, mut h, mut c2, mut s2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (p, &s) in members.iter().zip(&scores) {
                let (bw, bh, bt) = aligned_to(&p.bbox, lead_theta);
                x += s * p.bbox.cx();
                y += s * p.bbox.cy();
                w += s * bw;
                h += s * bh;
                c2 += s * (2.0 * bt).cos();
                s2 += s * (2.0 * bt).sin();
            }
            let theta = if c2.hypot(s2) < 1e-12 * total {
                lead_theta
            } else {
                0.5 * s2.atan2(c2)
            };
            RotatedBox::new(x / total, y / total, w / total, h / total, theta)
        }
        FusionMode::Literal => {
            let n = members.len() as f64;
            let sum = |f: &dyn Fn(&RotatedBox) -> f64| -> f64 {
                members.iter().zip(&scores).map(|(p, &s)| s * f(&p.bbox)).sum::<f64>() / n
            };
            RotatedBox::new(
                sum(&|b| b.cx()),
                sum(&|b| b.cy()),
                sum(&|b| b.w()),
                sum(&|b| b.h()),
                sum(&|b| b.theta()),
            )
        }
    }
}

/// Expresses `b` as `(w, h, theta)` with `theta` within a quarter turn of
/// `reference`, swapping sides where needed.
fn aligned_to(b: &RotatedBox, reference: f64) -> (f64, f64, f64) {
    let wrap = |d: f64| {
        let (_, _, t) = normalize_angle(1.0, 0.5, d);
        t
    };
    let direct = wrap(b.theta() - reference);
    let swapped = wrap(b.theta() + std::f64::consts::FRAC_PI_2 - reference);
    if direct.abs() <= swapped.abs() {
        (b.w(), b.h(), reference + direct)
    } else {
        (b.h(), b.w(), reference + swapped)
    }
}

/// Majority category; ties broken by larger summed score, then lower id.
pub fn vote_class(members: &[&Proposal]) -> usize {
    let c = members.iter().map(|p| p.scores.len()).max().unwrap_or(0);
    let mut counts = vec![0usize; c];
    let mut sums = vec![0.0f64; c];
    for p in members {
        let cat = p.category();
        counts[cat] += 1;
        sums[cat] += p.max_score();
    }
    let mut best = 0;
    for cat in 1..c {
        let better = counts[cat] > counts[best] || (counts[cat] == counts[best] && sums[cat] > sums[best]);
        if better {
            best = cat;
        }
    }
    best
}

/// Full generation step for one image.
pub fn cbp_generate(proposals: &[Proposal], known_gt: &[RotatedBox], cfg: &CbpConfig) -> Result<Vec<PseudoLabel>> {
    let candidates = filter_proposals(proposals, known_gt, cfg);
    let boxes: Vec<RotatedBox> = candidates.iter().map(|&i| proposals[i].bbox).collect();
    let scores: Vec<f64> = candidates.iter().map(|&i| proposals[i].max_score()).collect();
    let mut labels = Vec::new();
    for cluster in build_clusters(&boxes, &scores, cfg.edge_iou) {
        let members: Vec<&Proposal> = cluster.iter().map(|&pos| &proposals[candidates[pos]]).collect();
        let member_scores: Vec<f64> = cluster.iter().map(|&pos| scores[pos]).collect();
        let bbox = fuse_box(&members, cfg.fusion)?;
        // A fused box can drift onto known ground truth even when no member did.
        if known_gt.iter().any(|gt| rotated_iou(&bbox, gt) >= cfg.gt_excl_iou) {
            continue;
        }
        labels.push(PseudoLabel {
            bbox,
            category: vote_class(&members),
            score: cluster_score(&member_scores, cfg.top_k),
            cluster_size: cluster.len(),
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    fn prop(b: RotatedBox, scores: &[f64]) -> Proposal {
        Proposal::new(b, scores.to_vec()).unwrap()
    }

    /// Box shifted along x so that iou with `base` (same size) equals `iou`.
    fn shifted(base: &RotatedBox, iou: f64) -> RotatedBox {
        base.translated(base.w() * (1.0 - iou) / (1.0 + iou), 0.0)
    }

    #[test]
    fn filter_drops_low_scores() {
        let ps = vec![prop(bx(0.0, 0.0, 4.0, 2.0, 0.0), &[0.5, 0.3]); 5];
        assert!(filter_proposals(&ps, &[], &CbpConfig::default()).is_empty());
    }

    #[test]
    fn filter_excludes_known_gt_overlap() {
        let gt = bx(0.0, 0.0, 10.0, 5.0, 0.0);
        let near = gt.translated(0.25, 0.0);
        assert!(rotated_iou(&gt, &near) > 0.9);
        let ps = vec![prop(near, &[0.99]), prop(bx(50.0, 0.0, 10.0, 5.0, 0.0), &[0.7])];
        assert_eq!(filter_proposals(&ps, &[gt], &CbpConfig::default()), vec![1]);
    }

    #[test]
    fn filter_keeps_top_k_by_score() {
        let ps: Vec<Proposal> = (0..50)
            .map(|i| prop(bx(i as f64 * 20.0, 0.0, 4.0, 2.0, 0.0), &[0.61 + 0.007 * i as f64]))
            .collect();
        let kept = filter_proposals(&ps, &[], &CbpConfig::default());
        assert_eq!(kept.len(), 30);
        let expected: Vec<usize> = (20..50).rev().collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn clusters_disjoint_and_chain() {
        let a = bx(0.0, 0.0, 10.0, 2.0, 0.0);
        let far = bx(100.0, 0.0, 10.0, 2.0, 0.0);
        assert_eq!(build_clusters(&[a, far], &[0.9, 0.8], 0.5), vec![vec![0], vec![1]]);

        let b = shifted(&a, 0.6);
        let c = shifted(&b, 0.6);
        assert!(rotated_iou(&a, &c) < 0.5);
        let clusters = build_clusters(&[a, b, c], &[0.9, 0.8, 0.7], 0.5);
        assert_eq!(clusters.len(), 1);
        let mut members = clusters[0].clone();
        members.sort();
        assert_eq!(members, vec![0, 1, 2]);

        assert!(build_clusters(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn cluster_score_examples() {
        assert!((cluster_score(&vec![1.0; 30], 30) - 1.0).abs() < 1e-12);
        let mut s = vec![0.7; 15];
        s[3] = 0.8;
        assert!((cluster_score(&s, 30) - 0.4).abs() < 1e-12);
        assert!((cluster_score(&[0.6], 30) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn fuse_identical_members() {
        let b = bx(3.0, 4.0, 6.0, 2.0, 0.4);
        let ps = [prop(b, &[0.7]), prop(b, &[0.9])];
        let refs: Vec<&Proposal> = ps.iter().collect();
        let f = fuse_box(&refs, FusionMode::Normalized).unwrap();
        assert!((f.cx() - 3.0).abs() < 1e-12 && (f.w() - 6.0).abs() < 1e-12 && (f.theta() - 0.4).abs() < 1e-12);
        // Literal mode preserves identical boxes when all scores are one.
        let ones = [prop(b, &[1.0]), prop(b, &[1.0])];
        let refs: Vec<&Proposal> = ones.iter().collect();
        let f = fuse_box(&refs, FusionMode::Literal).unwrap();
        assert!((f.cx() - 3.0).abs() < 1e-12 && (f.h() - 2.0).abs() < 1e-12 && (f.theta() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fuse_pair_normalized_and_literal() {
        let ps = [prop(bx(0.0, 0.0, 4.0, 2.0, 0.0), &[0.8]), prop(bx(2.0, 0.0, 4.0, 2.0, 0.0), &[0.8])];
        let refs: Vec<&Proposal> = ps.iter().collect();
        let n = fuse_box(&refs, FusionMode::Normalized).unwrap();
        assert!((n.cx() - 1.0).abs() < 1e-12 && n.cy().abs() < 1e-12);
        let l = fuse_box(&refs, FusionMode::Literal).unwrap();
        assert!((l.cx() - 0.8).abs() < 1e-12 && l.cy().abs() < 1e-12);
    }

    #[test]
    fn fuse_angle_across_the_wrap() {
        let eps = 0.05;
        let ps = [
            prop(bx(0.0, 0.0, 8.0, 2.0, FRAC_PI_2 - eps), &[0.8]),
            prop(bx(0.0, 0.0, 8.0, 2.0, -FRAC_PI_2 + eps), &[0.8]),
        ];
        let refs: Vec<&Proposal> = ps.iter().collect();
        let f = fuse_box(&refs, FusionMode::Normalized).unwrap();
        assert!((f.theta().abs() - FRAC_PI_2).abs() < 1e-9, "{}", f.theta());
        assert!((f.w() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_near_square_with_swapped_sides() {
        // Same physical box, once as (w, h, t) and once as (h, w, t + pi/2).
        let a = bx(0.0, 0.0, 10.0, 9.0, 0.1);
        let b = bx(0.0, 0.0, 9.6, 10.0, 0.1);
        assert!(b.theta() < -1.0);
        assert!(rotated_iou(&a, &b) > 0.85);
        let ps = [prop(a, &[0.9]), prop(b, &[0.9])];
        let refs: Vec<&Proposal> = ps.iter().collect();
        let f = fuse_box(&refs, FusionMode::Normalized).unwrap();
        assert!(rotated_iou(&f, &a) > 0.9);
    }

    #[test]
    fn vote_majority_and_ties() {
        let b = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let all3: Vec<Proposal> = (0..4).map(|_| prop(b, &[0.1, 0.1, 0.1, 0.9])).collect();
        assert_eq!(vote_class(&all3.iter().collect::<Vec<_>>()), 3);

        let mixed = [
            prop(b, &[0.0, 0.7, 0.1]),
            prop(b, &[0.0, 0.7, 0.1]),
            prop(b, &[0.0, 0.7, 0.1]),
            prop(b, &[0.0, 0.1, 0.9]),
            prop(b, &[0.0, 0.1, 0.9]),
        ];
        assert_eq!(vote_class(&mixed.iter().collect::<Vec<_>>()), 1);

        let tied = [
            prop(b, &[0.75, 0.1]),
            prop(b, &[0.75, 0.1]),
            prop(b, &[0.1, 0.6]),
            prop(b, &[0.1, 0.6]),
        ];
        assert_eq!(vote_class(&tied.iter().collect::<Vec<_>>()), 0);
        let tied_rev = [
            prop(b, &[0.6, 0.1]),
            prop(b, &[0.6, 0.1]),
            prop(b, &[0.1, 0.75]),
            prop(b, &[0.1, 0.75]),
        ];
        assert_eq!(vote_class(&tied_rev.iter().collect::<Vec<_>>()), 1);
    }

    #[test]
    fn generate_nothing_above_threshold() {
        let ps = vec![prop(bx(0.0, 0.0, 4.0, 2.0, 0.0), &[0.2]); 10];
        assert!(cbp_generate(&ps, &[], &CbpConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn generate_single_tight_cluster() {
        let b = bx(20.0, 20.0, 12.0, 6.0, 0.3);
        let ps = vec![prop(b, &[0.05, 0.9]); 30];
        let labels = cbp_generate(&ps, &[], &CbpConfig::default()).unwrap();
        assert_eq!(labels.len(), 1);
        assert!((labels[0].score - 0.9).abs() < 1e-12);
        assert_eq!(labels[0].category, 1);
        assert_eq!(labels[0].cluster_size, 30);
        assert!(rotated_iou(&labels[0].bbox, &b) > 1.0 - 1e-9);
    }

    #[test]
    fn generate_two_separated_clusters() {
        let a = bx(20.0, 20.0, 12.0, 6.0, 0.3);
        let b = bx(80.0, 60.0, 10.0, 4.0, -0.7);
        let mut ps = vec![prop(a, &[0.9, 0.05]); 10];
        ps.extend(vec![prop(b, &[0.05, 0.8]); 8]);
        let labels = cbp_generate(&ps, &[], &CbpConfig::default()).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(rotated_iou(&labels[0].bbox, &labels[1].bbox), 0.0);
        assert!((labels[0].score - 0.9 * 10.0 / 30.0).abs() < 1e-12);
        assert!((labels[1].score - 0.8 * 8.0 / 30.0).abs() < 1e-12);
        assert_eq!((labels[0].category, labels[1].category), (0, 1));
    }

    #[test]
    fn proposal_file_round_trip() {
        let f = ProposalFile {
            image_id: 4,
            proposals: vec![prop(bx(1.0, 2.0, 3.0, 1.0, 0.2), &[0.3, 0.6])],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("4.json");
        f.save(&path).unwrap();
        assert_eq!(ProposalFile::load(&path).unwrap(), f);
    }
}
