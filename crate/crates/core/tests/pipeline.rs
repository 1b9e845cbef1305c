use std::collections::BTreeMap;

use pseudomine::dataset::{generate_scenes, sample_sparse, Dataset, GenConfig};
use pseudomine::entropy::{fit_entropy_model, EntropyConfig, EntropyModel};
use pseudomine::pipeline::{checkpoint_path, run_baseline, run_loop, run_to_dir, RunConfig};
use pseudomine::plf::{LabelState, PlfTracker, TrackedPseudoLabel};
use pseudomine::{rotated_iou, Error, Exec};

fn gen_config() -> GenConfig {
    GenConfig {
        scenes: 30,
        width: 240,
        height: 240,
        density: 24,
        ..GenConfig::benchmark()
    }
}

fn prepared(ratio: f64, seed: u64) -> (Dataset, EntropyModel) {
    let full = generate_scenes(&gen_config(), seed, Exec::Parallel).unwrap();
    let sparse = full.with_manifest(sample_sparse(&full.manifest, ratio, seed).unwrap());
    let model = fit_entropy_model(&sparse, EntropyConfig::default()).unwrap();
    (sparse, model)
}

/// The default skill rate is sized for the 200-scene benchmark; these small
/// datasets carry far fewer labels, so the teacher learns faster per label.
const SMALL_LAMBDA: f64 = 0.04;

fn config(seed: u64, epochs: u32) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        epochs,
        ..RunConfig::default()
    };
    cfg.surrogate.lambda = SMALL_LAMBDA;
    cfg
}

#[test]
fn egpf_without_model_is_a_config_error() {
    let (data, _) = prepared(0.1, 1);
    let err = run_loop(&data, None, &config(1, 2), Exec::Parallel, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn model_with_wrong_category_count_is_rejected() {
    let (data, mut model) = prepared(0.1, 1);
    model.num_categories += 1;
    let err = run_loop(&data, Some(&model), &config(1, 2), Exec::Parallel, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_epochs_report_nothing() {
    let (data, model) = prepared(0.1, 2);
    let out = run_loop(&data, Some(&model), &config(2, 0), Exec::Parallel, |_, _| panic!("no epoch expected")).unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(out.tracker.frozen_count(), 0);
}

#[test]
fn full_labels_leave_nothing_to_mine() {
    let (data, model) = prepared(1.0, 3);
    let out = run_loop(&data, Some(&model), &config(3, 4), Exec::Parallel, |_, _| Ok(())).unwrap();
    for r in &out.epochs {
        assert_eq!(r.all.frozen_count, 0);
        assert!(r.mining.iter().all(|m| m.candidates == 0 && m.frozen == 0));
        assert_eq!(r.all.box_ratio, 1.0);
    }
    assert_eq!(out.tracker.frozen_count(), 0);
    assert_eq!(out.tracker.active_labels().count(), 0);
}

#[test]
fn teacher_skill_never_decreases() {
    let (data, model) = prepared(0.1, 4);
    let out = run_loop(&data, Some(&model), &config(4, 6), Exec::Parallel, |_, _| Ok(())).unwrap();
    for w in out.epochs.windows(2) {
        for (a, b) in w[0].skills.iter().zip(&w[1].skills) {
            assert!(b >= a, "skill fell from {a} to {b}");
        }
    }
}

#[test]
fn baseline_never_mines() {
    let (data, _) = prepared(0.1, 5);
    let out = run_baseline(&data, &config(5, 3), Exec::Parallel, |_, _| Ok(())).unwrap();
    assert_eq!(out.epochs.len(), 3);
    for r in &out.epochs {
        assert_eq!(r.all.frozen_count, 0);
        assert_eq!(r.all.recall, 0.0);
        assert!(r.mining.iter().all(|m| m.mined == 0));
    }
}

fn frozen_by_id(tracker: &PlfTracker) -> BTreeMap<u64, TrackedPseudoLabel> {
    tracker.frozen_labels().map(|l| (l.id, l.clone())).collect()
}

#[test]
fn frozen_labels_persist_unchanged_across_checkpoints() {
    let (data, model) = prepared(0.1, 6);
    let dir = tempfile::tempdir().unwrap();
    let epochs = 10;
    let out = run_to_dir(&data, Some(&model), &config(6, epochs), Exec::Parallel, dir.path(), false).unwrap();
    let mut previous = BTreeMap::new();
    for e in 1..=epochs {
        let tracker = PlfTracker::load(&checkpoint_path(dir.path(), e)).unwrap();
        let current = frozen_by_id(&tracker);
        for (id, label) in &previous {
            assert_eq!(current.get(id), Some(label), "frozen label {id} changed by epoch {e}");
        }
        assert!(current.values().all(|l| l.state == LabelState::Frozen));
        previous = current;
    }
    assert!(!previous.is_empty(), "no label froze in {epochs} epochs");
    assert_eq!(previous, frozen_by_id(&out.tracker));
}

#[test]
fn frozen_labels_do_not_duplicate_known_objects() {
    let (data, model) = prepared(0.1, 7);
    let out = run_loop(&data, Some(&model), &config(7, 10), Exec::Parallel, |_, _| Ok(())).unwrap();
    for scene in &data.manifest.scenes {
        let frozen = out.tracker.frozen_for(scene.image_id);
        for f in frozen {
            for real in scene.labeled() {
                assert!(rotated_iou(&f.bbox, &real.bbox) < 0.5, "frozen label {} sits on a real label", f.id);
            }
        }
        for (i, a) in frozen.iter().enumerate() {
            for b in &frozen[i + 1..] {
                if a.category == b.category {
                    assert!(rotated_iou(&a.bbox, &b.bbox) < 0.5, "frozen labels {} and {} coincide", a.id, b.id);
                }
            }
        }
    }
}

/// Two equally common categories that differ only in difficulty, on the
/// benchmark layout and seed. The teacher starts below the score threshold
/// for a typical object, and category confusion is off so that threshold
/// crossings are counted under the object's own category.
#[test]
fn easy_category_is_mined_before_hard_one() {
    let mut gen = GenConfig::benchmark();
    gen.categories.truncate(2);
    gen.categories[0].difficulty_mean = 0.2;
    gen.categories[1].difficulty_mean = 0.7;
    let full = generate_scenes(&gen, 42, Exec::Parallel).unwrap();
    let sparse = full.with_manifest(sample_sparse(&full.manifest, 0.1, 42).unwrap());
    let model = fit_entropy_model(&sparse, EntropyConfig::default()).unwrap();
    let mut cfg = RunConfig {
        seed: 42,
        epochs: 10,
        ..RunConfig::default()
    };
    cfg.surrogate.lambda = 0.002;
    cfg.surrogate.confusion = 0.0;
    cfg.surrogate.contamination_confusion = 0.0;
    let out = run_loop(&sparse, Some(&model), &cfg, Exec::Parallel, |_, _| Ok(())).unwrap();
    let first = |c: usize| {
        out.epochs
            .iter()
            .find(|r| r.mining[c].proposals_above_thr > 0)
            .map_or(u32::MAX, |r| r.epoch)
    };
    let (easy, hard) = (first(0), first(1));
    assert!(easy < hard, "easy first crosses at epoch {easy}, hard at {hard}");
}
