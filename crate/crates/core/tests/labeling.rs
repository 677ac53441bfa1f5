//! Labeling rules and epoch sampling counts as properties.

use std::collections::HashMap;

use proptest::prelude::*;
use visf_core::dataworld::{
    label, sample_epoch, segment_dataset, Category, Dataset, DatasetMeta, LabeledFrame, SamplingConfig, Safety,
    Trajectory,
};

use Safety::{Safe, Unsafe};

fn trajectory(id: usize, len: usize, collision: Option<usize>) -> Trajectory {
    let labels = label(len, collision.map(|c| c as i64)).unwrap();
    let id = format!("traj{id:04}");
    Trajectory {
        frames: labels
            .into_iter()
            .enumerate()
            .map(|(t, (state_label, control_label))| LabeledFrame {
                traj: id.clone(),
                t,
                features: vec![vec![0.0; 2]],
                u: vec![0.0, 0.0],
                state_label,
                control_label,
                gt: Vec::new(),
            })
            .collect(),
        id,
    }
}

fn dataset(spec: &[(usize, Option<usize>)]) -> Dataset {
    Dataset {
        meta: DatasetMeta {
            dt: 0.1,
            cameras: 1,
            feature_dim: 2,
            control_dim: 2,
            seed: 0,
            config_hash: None,
            tool_version: None,
        },
        trajectories: spec.iter().enumerate().map(|(i, &(len, c))| trajectory(i, len, c)).collect(),
    }
}

/// A trajectory length with an optional in-range collision step.
fn traj_spec() -> impl Strategy<Value = (usize, Option<usize>)> {
    (0usize..60).prop_flat_map(|len| {
        let c = if len == 0 {
            Just(None).boxed()
        } else {
            proptest::option::of(0..len).boxed()
        };
        (Just(len), c)
    })
}

proptest! {
    #[test]
    fn labels_follow_the_collision_rules(len in 1usize..200, c in proptest::option::of(0usize..200)) {
        let c = c.filter(|&c| c < len);
        let labels = label(len, c.map(|v| v as i64)).unwrap();
        prop_assert_eq!(labels.len(), len);
        for (t, &l) in labels.iter().enumerate() {
            let expected = match c {
                // Every state and control from the collision on.
                Some(c) if t >= c => (Unsafe, Unsafe),
                // The five steps before it: safe states, unsafe controls.
                Some(c) if c - t <= 5 => (Safe, Unsafe),
                _ => (Safe, Safe),
            };
            prop_assert_eq!(l, expected, "t={} c={:?}", t, c);
        }
        // Counts of each kind, computed in closed form.
        let count = |p: (Safety, Safety)| labels.iter().filter(|&&l| l == p).count();
        match c {
            Some(c) => {
                prop_assert_eq!(count((Unsafe, Unsafe)), len - c);
                prop_assert_eq!(count((Safe, Unsafe)), c.min(5));
            }
            None => prop_assert_eq!(count((Safe, Safe)), len),
        }
        prop_assert_eq!(count((Unsafe, Safe)), 0);
    }

    #[test]
    fn epoch_counts_match_the_oversampling_rule(
        specs in proptest::collection::vec(traj_spec(), 0..12),
        seed in 0u64..1000,
    ) {
        let ds = dataset(&specs);
        let cfg = SamplingConfig::default();
        let segments = segment_dataset(&ds, 5);
        let epoch = sample_epoch(&segments, &cfg, seed);

        let mut expected = 0;
        for (i, &(len, c)) in specs.iter().enumerate() {
            let safe_frames = ds.trajectories[i].frames.iter()
                .filter(|f| f.state_label == Safe && f.control_label == Safe).count();
            let (unsafe_, transition) = match c {
                _ if len < 5 => (0, 0),
                Some(c) => ((len - c) / 5, usize::from(c >= 5)),
                None => (0, 0),
            };
            let safe_draws = if len >= 5 && safe_frames >= 5 { 5 } else { 0 };
            expected += 10 * (unsafe_ + transition) + safe_draws;

            let mine: Vec<_> = epoch.iter().filter(|s| s.traj == i).collect();
            let of = |cat| mine.iter().filter(|s| s.category == cat).count();
            prop_assert_eq!(of(Category::Unsafe), 10 * unsafe_, "trajectory {}", i);
            prop_assert_eq!(of(Category::Transition), 10 * transition, "trajectory {}", i);
            prop_assert_eq!(of(Category::Safe), safe_draws, "trajectory {}", i);
        }
        prop_assert_eq!(epoch.len(), expected);

        // Every sampled window really has the labels of its category.
        for s in &epoch {
            prop_assert_eq!(Category::of(s.frames(&ds)), Some(s.category));
            prop_assert_eq!(s.len, 5);
        }
    }

    #[test]
    fn safe_draws_are_distinct_when_enough_exist(len in 25usize..80, seed in 0u64..1000) {
        let ds = dataset(&[(len, None)]);
        let epoch = sample_epoch(&segment_dataset(&ds, 5), &SamplingConfig::default(), seed);
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for s in &epoch {
            *seen.entry(s.start).or_default() += 1;
        }
        prop_assert_eq!(epoch.len(), 5);
        prop_assert!(seen.values().all(|&n| n == 1));
    }

    #[test]
    fn sampling_is_seed_deterministic(specs in proptest::collection::vec(traj_spec(), 1..8), seed in 0u64..1000) {
        let ds = dataset(&specs);
        let segments = segment_dataset(&ds, 5);
        let cfg = SamplingConfig::default();
        prop_assert_eq!(sample_epoch(&segments, &cfg, seed), sample_epoch(&segments, &cfg, seed));
    }
}

#[test]
fn accident_free_trajectory_contributes_five_safe_windows() {
    let ds = dataset(&[(50, None)]);
    let epoch = sample_epoch(&segment_dataset(&ds, 5), &SamplingConfig::default(), 3);
    assert_eq!(epoch.len(), 5);
    assert!(epoch.iter().all(|s| s.category == Category::Safe));
}

#[test]
fn transition_window_is_oversampled_tenfold() {
    let ds = dataset(&[(40, Some(20))]);
    let epoch = sample_epoch(&segment_dataset(&ds, 5), &SamplingConfig::default(), 3);
    let transitions: Vec<_> = epoch.iter().filter(|s| s.category == Category::Transition).collect();
    assert_eq!(transitions.len(), 10);
    assert!(transitions.iter().all(|s| s.start == 15));
}

#[test]
fn empty_dataset_gives_empty_epoch() {
    let ds = dataset(&[]);
    assert!(sample_epoch(&segment_dataset(&ds, 5), &SamplingConfig::default(), 0).is_empty());
}
