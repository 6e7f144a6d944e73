mod common;

use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use common::{random_eval_instance, ref_nms};
use dense_fpn::eval::{evaluate, EvalReport};
use dense_fpn::fusion::FusionMode;
use dense_fpn::geometry::{decode_box, encode_box, generate_anchors, iou, nms, AnchorSpec, BBox, Detection, GtBox};
use dense_fpn::heads::{assign_and_sample_rcnn, rcnn_labels};
use dense_fpn::io::{parse_annotations, write_annotations, Annotation, RunConfig};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 0.5..120.0f64, 0.5..120.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

fn sized_box(side: std::ops::Range<f64>) -> impl Strategy<Value = BBox> {
    (-50.0..250.0f64, -50.0..250.0f64, side.clone(), side).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

fn detection(classes: usize) -> impl Strategy<Value = Detection> {
    (bbox(), 0u32..=20, 0..classes).prop_map(|(b, s, c)| Detection::new(b, f64::from(s) / 20.0, c).unwrap())
}

fn close(a: &EvalReport, b: &EvalReport, tol: f64) -> bool {
    a.metrics().iter().zip(b.metrics()).all(|(x, y)| (x.1 - y.1).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    /// Sizes stay within a factor of 60 of each other, inside the log-scale clamp.
    #[test]
    fn encode_decode_round_trip(a in sized_box(2.0..120.0), g in sized_box(2.0..120.0)) {
        let d = encode_box(&a, &g).unwrap();
        let back = decode_box(&a, &d);
        let scale = g.width().max(g.height());
        for (x, y) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            prop_assert!((x - y).abs() <= 1e-6 * scale.max(x.abs()).max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn zero_deltas_return_the_anchor(a in bbox()) {
        prop_assert_eq!(decode_box(&a, &[0.0; 4]), a);
    }

    #[test]
    fn nms_matches_quadratic_reference(dets in vec(detection(3), 0..=25), thr in 0.1..0.9f64) {
        prop_assert_eq!(nms(&dets, thr, usize::MAX), ref_nms(&dets, thr));
    }

    #[test]
    fn anchor_count_closed_form(h in 1usize..12, w in 1usize..12, p6 in any::<bool>(), ratios in vec(0.25..4.0f64, 1..4)) {
        let levels = if p6 { 5 } else { 4 };
        let extents: Vec<(usize, usize)> = (0..levels).map(|i| ((16 * h) >> i, (16 * w) >> i)).collect();
        let spec = AnchorSpec { ratios: ratios.clone(), ..AnchorSpec::default().truncated(levels) };
        let set = generate_anchors(&extents, (64 * h, 64 * w), &spec).unwrap();
        let cells: usize = extents.iter().map(|(h, w)| h * w).sum();
        prop_assert_eq!(set.len(), ratios.len() * cells);
    }

    #[test]
    fn positives_persist_at_lower_thresholds(boxes in vec(bbox(), 1..30), gts in vec((bbox(), 0usize..10), 1..5)) {
        let thresholds = [0.5, 0.6, 0.7];
        let labels: Vec<_> = thresholds.iter().map(|&t| rcnn_labels(&boxes, &gts, t)).collect();
        for hi in 0..3 {
            for lo in 0..=hi {
                for i in 0..boxes.len() {
                    if labels[hi][i].is_some() {
                        prop_assert_eq!(labels[lo][i], labels[hi][i]);
                    }
                }
            }
        }
    }

    #[test]
    fn sampled_batch_is_exact(boxes in vec(bbox(), 0..120), gts in vec((bbox(), 0usize..10), 1..4),
                              batch in 1usize..64, frac in 0.0..=1.0f64, seed in any::<u64>()) {
        let b = assign_and_sample_rcnn(&boxes, &gts, 0.5, batch, frac, seed);
        let npos = rcnn_labels(&boxes, &gts, 0.5).iter().filter(|l| l.is_some()).count();
        let nneg = boxes.len() - npos;
        prop_assert_eq!(b.len(), batch.min(boxes.len()));
        let quota = ((batch as f64) * frac).round() as usize;
        if npos >= quota && nneg >= batch - quota {
            prop_assert_eq!(b.num_positive(), quota);
        }
        let mut idx = b.indices.clone();
        idx.dedup();
        prop_assert_eq!(idx.len(), b.len());
    }

    #[test]
    fn eval_ignores_score_scale(seed in any::<u64>(), c in 0.01..1.0f64) {
        let (dets, gts) = random_eval_instance(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        let scaled: BTreeMap<_, _> = dets
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|d| Detection { score: d.score * c, ..*d }).collect::<Vec<_>>()))
            .collect();
        prop_assert!(close(&evaluate(&dets, &gts).unwrap(), &evaluate(&scaled, &gts).unwrap(), 1e-12));
    }

    #[test]
    fn eval_ignores_image_order(seed in any::<u64>(), rot in 1usize..10) {
        let (dets, gts) = random_eval_instance(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        // unique scores so no ranking depends on image order
        let mut k = 0.0;
        let dets: BTreeMap<_, _> = dets
            .into_iter()
            .map(|(id, v)| {
                let v = v.into_iter().map(|d| {
                    k += 1.0;
                    Detection { score: d.score * 0.5 + k * 1e-4, ..d }
                }).collect::<Vec<_>>();
                (id, v)
            })
            .collect();
        let ids: Vec<String> = gts.keys().cloned().collect();
        let rename = |id: &String| {
            let i = ids.iter().position(|x| x == id).unwrap();
            format!("z{:02}", (ids.len() - 1 - i + rot) % ids.len())
        };
        let d2: BTreeMap<_, _> = dets.iter().map(|(k, v)| (rename(k), v.iter().rev().copied().collect::<Vec<_>>())).collect();
        let g2: BTreeMap<_, _> = gts.iter().map(|(k, v)| (rename(k), v.clone())).collect();
        prop_assert!(close(&evaluate(&dets, &gts).unwrap(), &evaluate(&d2, &g2).unwrap(), 1e-12));
    }

    #[test]
    fn recall_is_monotone_in_detection_limit(seed in any::<u64>()) {
        let (dets, gts) = random_eval_instance(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        let r = evaluate(&dets, &gts).unwrap();
        prop_assert!(r.ar_1 <= r.ar_10 && r.ar_10 <= r.ar_100 && r.ar_100 <= r.ar_500);
        for (_, v) in r.metrics() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn isolated_true_positive_never_lowers_ap(seed in any::<u64>(), score in 0.0..=1.0f64) {
        let (mut dets, mut gts) = random_eval_instance(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        let target = BBox::new(500.0, 500.0, 520.0, 530.0);
        gts.get_mut("img00").unwrap().push(GtBox::new(target, 1));
        let before = evaluate(&dets, &gts).unwrap();
        dets.get_mut("img00").unwrap().push(Detection::new(target, score, 1).unwrap());
        let after = evaluate(&dets, &gts).unwrap();
        prop_assert!(after.ap_5095 >= before.ap_5095 - 1e-12);
        prop_assert!(after.ap_50 >= before.ap_50 - 1e-12);
        prop_assert!(after.ap_75 >= before.ap_75 - 1e-12);
    }

    #[test]
    fn config_round_trip(
        mode in prop_oneof![Just(FusionMode::Concat), Just(FusionMode::Add)],
        p2 in any::<bool>(), p3 in any::<bool>(), p6 in any::<bool>(),
        out in 1usize..512, lambda in 0.0..10.0f64, lr in 1e-6..1.0f64, lr2 in 1e-7..1e-2f64,
        n1 in 1usize..100_000, momentum in 0.0..0.999f64, wd in 0.0..0.01f64,
        flip in 0.0..=1.0f64, seed in any::<u64>(), t0 in 0.5..0.6f64, dt in 0.001..0.1f64,
        bases in vec(1.0..300.0f64, 5),
    ) {
        let mut cfg = RunConfig::default();
        let m = &mut cfg.model;
        m.fusion.mode = mode;
        m.fusion.dense_to_p2 = p2;
        m.fusion.dense_to_p3 = p3;
        m.fusion.add_p6 = p6;
        m.fusion.out_channels = out;
        let levels = if p6 { 5 } else { 4 };
        m.anchors.base_sizes = bases[..levels].to_vec();
        m.anchors.strides = (0..levels).map(|i| 4 << i).collect();
        m.cascade.lambda = lambda;
        m.cascade.stages = 2;
        m.cascade.iou_thresholds = vec![t0, t0 + dt];
        cfg.optimizer.lr_schedule = vec![(n1, lr), (7, lr2)];
        cfg.optimizer.momentum = momentum;
        cfg.optimizer.weight_decay = wd;
        cfg.input.flip_probability = flip;
        cfg.seed = seed;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text, "prop").unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn annotation_round_trip(rows in vec((any::<i32>(), any::<i32>(), 0i64..5000, 0i64..5000, 0i64..2, 0u8..=11, 0i64..3, 0i64..3), 0..30)) {
        let anns: Vec<Annotation> = rows
            .into_iter()
            .map(|(l, t, w, h, s, c, tr, oc)| Annotation {
                left: l.into(), top: t.into(), width: w, height: h, score: s, category: c, truncation: tr, occlusion: oc,
            })
            .collect();
        let text = write_annotations(&anns);
        let back = parse_annotations(&text, "prop").unwrap();
        prop_assert_eq!(&back, &anns);
        prop_assert_eq!(write_annotations(&back), text);
    }
}
