mod common;

use common::{det_xyxy, enumerated_matching_instances, lexmax_matching};
use proptest::prelude::*;
use strawdet::bbox::BBox;
use strawdet::detect::Detection;
use strawdet::metrics::{average_precision, match_detections, Evaluator, GtBox, PrCurve, EVAL_IOU};
use strawdet::rng::SplitMix64;

#[test]
fn greedy_matches_exhaustive_oracle() {
    let cases = enumerated_matching_instances();
    assert!(cases.len() > 200_000);
    for (dets, gts) in &cases {
        let got = match_detections(dets, gts, EVAL_IOU);
        let want = lexmax_matching(dets, gts, EVAL_IOU);
        assert_eq!(got.tp, want, "dets {dets:?} gts {gts:?}");
        assert_eq!(got.false_negatives, gts.len() - want.iter().filter(|&&t| t).count());
    }
}

fn random_scene(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let mut r = SplitMix64::new(seed);
    let images = 1 + r.below(4) as usize;
    let mut all_d = Vec::new();
    let mut all_g = Vec::new();
    for _ in 0..images {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..r.below(6) {
            let (x, y) = (r.uniform(0.0, 200.0), r.uniform(0.0, 200.0));
            let (w, h) = (r.uniform(10.0, 40.0), r.uniform(10.0, 40.0));
            let c = r.below(3) as usize;
            gts.push(GtBox { class_id: c, bbox: BBox::new(x, y, x + w, y + h) });
            if r.next_f64() < 0.8 {
                let j = r.uniform(-6.0, 6.0);
                let cls = if r.next_f64() < 0.9 { c } else { (c + 1) % 3 };
                dets.push(det_xyxy(cls, r.next_f64() as f32, (x + j) as f32, y as f32, (x + w + j) as f32, (y + h) as f32));
            }
        }
        for _ in 0..r.below(4) {
            let (x, y) = (r.uniform(0.0, 200.0), r.uniform(0.0, 200.0));
            dets.push(det_xyxy(r.below(3) as usize, r.next_f64() as f32, x as f32, y as f32, x as f32 + 20.0, y as f32 + 20.0));
        }
        all_d.push(dets);
        all_g.push(gts);
    }
    (all_d, all_g)
}

fn aps(dets: &[Vec<Detection>], gts: &[Vec<GtBox>]) -> Vec<Option<f64>> {
    let mut ev = Evaluator::new(3, EVAL_IOU, 0.25);
    for (d, g) in dets.iter().zip(gts) {
        ev.add_image(d, g);
    }
    ev.finish().classes.iter().map(|c| c.ap).collect()
}

proptest! {
    #[test]
    fn ap_invariant_under_monotone_rescaling(seed in any::<u64>()) {
        let (dets, gts) = random_scene(seed);
        let base = aps(&dets, &gts);
        let rescaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { score: 0.05 + 0.9 * d.score.powi(3), ..*d }).collect())
            .collect();
        prop_assert_eq!(base, aps(&rescaled, &gts));
    }

    #[test]
    fn low_false_positive_never_raises_ap(seed in any::<u64>(), class_id in 0usize..3) {
        let (mut dets, gts) = random_scene(seed);
        let base = aps(&dets, &gts);
        let lowest = dets.iter().flatten().map(|d| d.score).fold(1.0f32, f32::min);
        dets[0].push(det_xyxy(class_id, lowest * 0.5, 500.0, 500.0, 520.0, 520.0));
        for (a, b) in base.iter().zip(aps(&dets, &gts)) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(b <= *a + 1e-12);
            }
        }
    }

    #[test]
    fn ap_in_unit_interval(seed in any::<u64>()) {
        let (dets, gts) = random_scene(seed);
        for ap in aps(&dets, &gts).into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}

#[test]
fn hand_derived_ap_cases() {
    let ap = |s: &[(f32, bool)], n| average_precision(&PrCurve::from_sweep(0, s, n)).unwrap();
    assert!((ap(&[(0.9, true)], 1) - 1.0).abs() < 1e-6);
    assert!((ap(&[(0.9, false), (0.8, true)], 1) - 0.5).abs() < 1e-6);
    // TP, FP, TP over 2 GTs: precision 1 up to recall 0.5, then 2/3
    let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((ap(&[(0.9, true), (0.8, false), (0.7, true)], 2) - want).abs() < 1e-9);
}
