use hfit_core::data::{augment, normalize_depth, synth_scene, AugmentConfig};
use hfit_core::hgfi::integrate_tensors;
use hfit_core::metrics::ConfusionMatrix;
use hfit_core::rhff::{recalibrate_tensors, Recalibration};
use hfit_core::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn integrate_oracle(f: &[f64], g: &[f64], hist: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    (0..f.len())
        .map(|i| {
            let mut acc = 0.0;
            for (fl, gl) in hist {
                acc += gl[i] * fl[i];
            }
            (1.0 + g[i]) * f[i] + (1.0 - g[i]) * acc
        })
        .collect()
}

proptest! {
    #[test]
    fn integrate_matches_scalar_loop(
        n in 1usize..12,
        levels in 0usize..4,
        seed in vec(-3.0f64..3.0, 12 * 10),
        gates in vec(unit(), 12 * 5),
    ) {
        let f = seed[..n].to_vec();
        let g = gates[..n].to_vec();
        let hist: Vec<(Vec<f64>, Vec<f64>)> = (0..levels)
            .map(|l| {
                let o = (l + 1) * 12;
                (seed[o..o + n].to_vec(), gates[o..o + n].to_vec())
            })
            .collect();
        let t = |v: &Vec<f64>| Tensor::from_vec(&[n], v.clone()).unwrap();
        let th: Vec<(Tensor, Tensor)> = hist.iter().map(|(a, b)| (t(a), t(b))).collect();
        let got = integrate_tensors(&t(&f), &t(&g), &th).unwrap();
        for (x, y) in got.data().iter().zip(integrate_oracle(&f, &g, &hist)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn closed_gates_carry_only_the_current_feature(n in 1usize..10, f in vec(-5.0f64..5.0, 10), h in vec(-5.0f64..5.0, 10)) {
        let cur = Tensor::from_vec(&[n], f[..n].to_vec()).unwrap();
        let prev = Tensor::from_vec(&[n], h[..n].to_vec()).unwrap();
        let open = integrate_tensors(&cur, &Tensor::full(&[n], 1.0), &[(prev.clone(), Tensor::full(&[n], 1.0))]).unwrap();
        prop_assert_eq!(open, cur.map(|v| 2.0 * v));
        let shut = integrate_tensors(&cur, &Tensor::zeros(&[n]), &[(prev, Tensor::zeros(&[n]))]).unwrap();
        prop_assert_eq!(shut, cur);
    }

    #[test]
    fn recalibration_contracts(t in 1usize..8, d in 1usize..5, p in vec(-4.0f64..4.0, 32), cv in vec(unit(), 8), cs in vec(unit(), 8)) {
        let prior = Tensor::from_vec(&[t, d], p[..t * d].to_vec()).unwrap();
        let cvt = Tensor::from_vec(&[t], cv[..t].to_vec()).unwrap();
        let cst = Tensor::from_vec(&[t], cs[..t].to_vec()).unwrap();
        let out = recalibrate_tensors(&prior, &cvt, &cst, Recalibration::default()).unwrap();
        for i in 0..t {
            let w = cs[i] * (1.0 - cv[i]);
            for j in 0..d {
                let (x, y) = (out.data()[i * d + j], prior.data()[i * d + j]);
                prop_assert!(x.abs() <= y.abs() + 1e-15);
                prop_assert!((x - w * y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn confusion_matches_brute_force(
        c in 2usize..6,
        pairs in vec((0u8..6, 0u8..7), 1..200),
        shards in 1usize..5,
    ) {
        let ignore = 6u8;
        let pred: Vec<u8> = pairs.iter().map(|p| p.0 % c as u8).collect();
        let label: Vec<u8> = pairs.iter().map(|p| if p.1 == 6 { ignore } else { p.1 % c as u8 }).collect();
        let mut whole = ConfusionMatrix::new(c);
        whole.accumulate(&pred, &label, ignore).unwrap();
        let mut merged = ConfusionMatrix::new(c);
        let step = pred.len().div_ceil(shards);
        for (p, l) in pred.chunks(step).zip(label.chunks(step)) {
            let mut part = ConfusionMatrix::new(c);
            part.accumulate(p, l, ignore).unwrap();
            merged.merge(&part).unwrap();
        }
        prop_assert_eq!(&merged, &whole);

        let kept: Vec<(u8, u8)> = pred.iter().zip(&label).filter(|(_, l)| **l != ignore).map(|(p, l)| (*p, *l)).collect();
        if kept.is_empty() {
            prop_assert!(whole.compute().is_err());
            return Ok(());
        }
        let report = whole.compute().unwrap();
        let mut ious = Vec::new();
        for k in 0..c as u8 {
            let tp = kept.iter().filter(|(p, l)| *p == k && *l == k).count() as f64;
            let fp = kept.iter().filter(|(p, l)| *p == k && *l != k).count() as f64;
            let fn_ = kept.iter().filter(|(p, l)| *p != k && *l == k).count() as f64;
            if tp + fp + fn_ > 0.0 {
                ious.push(tp / (tp + fp + fn_));
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let acc = kept.iter().filter(|(p, l)| p == l).count() as f64 / kept.len() as f64;
        prop_assert!((report.m_iou - miou).abs() < 1e-12);
        prop_assert!((report.a_acc - acc).abs() < 1e-12);
        for v in [report.m_fsc, report.m_iou, report.m_pre, report.m_rec, report.a_acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn normalize_depth_is_idempotent(v in vec(-1e3f64..1e3, 1..64)) {
        let raw = Tensor::from_vec(&[1, v.len()], v).unwrap();
        let once = normalize_depth(&raw).unwrap();
        prop_assert!(once.min() >= 0.0 && once.max() <= 1.0);
        let n = raw.numel();
        let channel: Vec<f64> = once.data().chunks(3).map(|c| c[0]).collect();
        prop_assert!(once.data().chunks(3).all(|c| c[0] == c[1] && c[1] == c[2]));
        let twice = normalize_depth(&Tensor::from_vec(&[1, n], channel).unwrap()).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_moves_rasters_together(seed in any::<u64>(), scene in 0u64..50) {
        let sample = synth_scene(scene, 64, 64, 5).unwrap();
        let cfg = AugmentConfig {
            crop_size: 64,
            scale_range: (1.0, 1.0),
            flip_prob: 0.5,
            photometric_prob: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&sample, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let flipped = out.labels != sample.labels;
        for y in 0..64 {
            for x in 0..64 {
                let sx = if flipped { 63 - x } else { x };
                let (i, j) = (y * 64 + x, y * 64 + sx);
                prop_assert_eq!(out.labels[i], sample.labels[j]);
                prop_assert_eq!(&out.rgb.data()[i * 3..i * 3 + 3], &sample.rgb.data()[j * 3..j * 3 + 3]);
                prop_assert_eq!(&out.depth3.data()[i * 3..i * 3 + 3], &sample.depth3.data()[j * 3..j * 3 + 3]);
            }
        }
    }

    #[test]
    fn augment_keeps_labels_in_range(seed in any::<u64>()) {
        let sample = synth_scene(seed % 97, 64, 64, 4).unwrap();
        let cfg = AugmentConfig { crop_size: 64, ..AugmentConfig::default() };
        let out = augment(&sample, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        prop_assert!(out.labels.iter().all(|&l| l < 4 || l == cfg.ignore_index));
        prop_assert_eq!(out.rgb.shape(), &[64, 64, 3][..]);
    }
}
