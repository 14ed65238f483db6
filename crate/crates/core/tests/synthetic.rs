use std::collections::HashMap;

use hfit_core::data::{stack, synth_scene};

#[test]
fn most_scenes_have_two_classes() {
    let rich = (0..1000u64)
        .filter(|&s| {
            let scene = synth_scene(s, 64, 64, 6).unwrap();
            let first = scene.labels[0];
            scene.labels.iter().any(|&l| l != first)
        })
        .count();
    assert!(rich >= 950, "{rich} of 1000");
}

#[test]
fn each_class_has_one_depth_per_scene() {
    for seed in 0..40 {
        let scene = synth_scene(seed, 64, 96, 6).unwrap();
        let mut seen: HashMap<u8, f64> = HashMap::new();
        for (i, &l) in scene.labels.iter().enumerate() {
            let d = scene.depth3.data()[i * 3];
            let c = &scene.depth3.data()[i * 3..i * 3 + 3];
            assert!(c[0] == c[1] && c[1] == c[2]);
            let prev = *seen.entry(l).or_insert(d);
            assert_eq!(prev, d, "seed {seed} class {l}");
        }
        let bg = seen.get(&0).copied();
        if let Some(bg) = bg {
            assert!(seen.values().all(|&d| d <= bg), "background is farthest");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let a = synth_scene(17, 64, 64, 6).unwrap();
    let b = synth_scene(17, 64, 64, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.labels, synth_scene(18, 64, 64, 6).unwrap().labels);
}

#[test]
fn values_stay_in_unit_range() {
    for seed in 0..20 {
        let s = synth_scene(seed, 32, 32, 8).unwrap();
        assert!(s.rgb.min() >= 0.0 && s.rgb.max() <= 1.0);
        assert!(s.depth3.min() >= 0.0 && s.depth3.max() <= 1.0);
        assert!(s.labels.iter().all(|&l| l < 8));
    }
}

#[test]
fn stacking_rejects_mixed_sizes() {
    let a = synth_scene(0, 32, 32, 3).unwrap();
    let b = synth_scene(1, 64, 32, 3).unwrap();
    assert!(stack(&[a.clone(), b]).is_err());
    let (input, labels) = stack(&[a.clone(), a]).unwrap();
    assert_eq!(input.rgb.shape(), &[2, 32, 32, 3]);
    assert_eq!(labels.len(), 2 * 32 * 32);
}
