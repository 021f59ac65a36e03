use std::collections::HashSet;

use proptest::prelude::*;

use dmfseg::model::ModelConfig;
use dmfseg::model::SegModel;
use dmfseg::synth::{make_sample, SynthConfig};
use dmfseg::tensor::IGNORE_LABEL;
use dmfseg::train::{evaluate, train_model, Confusion, TrainConfig};

/// Per-class IoU from pixel sets over all images, keyed by
/// `(image, pixel)`; classes absent from both sides are skipped.
fn set_miou(images: &[(Vec<u8>, Vec<u8>)], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let mut gt = HashSet::new();
        let mut pr = HashSet::new();
        for (i, (pred, label)) in images.iter().enumerate() {
            for (p, (&a, &g)) in pred.iter().zip(label).enumerate() {
                if g == IGNORE_LABEL {
                    continue;
                }
                if g == c {
                    gt.insert((i, p));
                }
                if a == c {
                    pr.insert((i, p));
                }
            }
        }
        let union = gt.union(&pr).count();
        if union > 0 {
            ious.push(gt.intersection(&pr).count() as f64 / union as f64);
        }
    }
    100.0 * ious.iter().sum::<f64>() / ious.len() as f64
}

fn images_strategy() -> impl Strategy<Value = (usize, Vec<(Vec<u8>, Vec<u8>)>)> {
    (2usize..6).prop_flat_map(|k| {
        let label = prop_oneof![9 => 0..k as u8, 1 => Just(IGNORE_LABEL)];
        let image = (1usize..40).prop_flat_map(move |n| {
            (proptest::collection::vec(0..k as u8, n), proptest::collection::vec(label.clone(), n))
        });
        (Just(k), proptest::collection::vec(image, 1..5))
    })
}

proptest! {
    #[test]
    fn miou_matches_set_intersection((k, images) in images_strategy()) {
        let mut conf = Confusion::new(k);
        for (pred, label) in &images {
            conf.add(pred, label).unwrap();
        }
        let m = conf.metrics();
        let want = set_miou(&images, k);
        if want.is_nan() {
            prop_assert!(m.miou.is_nan());
        } else {
            prop_assert!((m.miou - want).abs() < 1e-9, "{} vs {want}", m.miou);
        }
        let total: u64 = conf.counts.iter().sum();
        let trace: u64 = (0..k).map(|c| conf.counts[c * k + c]).sum();
        if total > 0 {
            prop_assert!((m.aacc - 100.0 * trace as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn image_order_does_not_matter((k, images) in images_strategy(), rot in 0usize..5) {
        let mut a = Confusion::new(k);
        let mut b = Confusion::new(k);
        for (pred, label) in &images {
            a.add(pred, label).unwrap();
        }
        let n = images.len();
        for i in 0..n {
            let (pred, label) = &images[(i + rot) % n];
            b.add(pred, label).unwrap();
        }
        prop_assert_eq!(a.counts.clone(), b.counts.clone());
        let (ma, mb) = (a.metrics(), b.metrics());
        prop_assert!(ma.miou.to_bits() == mb.miou.to_bits());
    }
}

#[test]
fn ignore_pixels_never_count() {
    let mut c = Confusion::new(3);
    c.add(&[0, 1, 2, 2], &[0, IGNORE_LABEL, IGNORE_LABEL, 2]).unwrap();
    assert_eq!(c.counts.iter().sum::<u64>(), 2);
    assert_eq!(c.metrics().miou, 100.0);
    assert!(c.metrics().iou[1].is_nan());
}

#[test]
fn micro_model_overfits_one_sample() {
    let sample = make_sample(7, &SynthConfig { height: 32, width: 64, ..Default::default() }).unwrap();
    let mut model = SegModel::<f32>::new(0, &ModelConfig::micro(6)).unwrap();
    let cfg = TrainConfig { lr: 2e-3, warmup: 10, iters: 200, batch_size: 1, ..Default::default() };
    let samples = vec![sample];
    let before = evaluate(&model, &samples, 1).unwrap();
    let log = train_model(&mut model, &samples, &cfg, |_| {}).unwrap();
    let first = log[0].loss;
    let last = log[log.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(last <= 0.5 * first, "loss {first:.4} -> {last:.4}");
    let after = evaluate(&model, &samples, 1).unwrap();
    assert!(after.aacc > before.aacc, "{} -> {}", before.aacc, after.aacc);
}
