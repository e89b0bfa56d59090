use proptest::prelude::*;

use scl::eval::{average_precision, evaluate, iou, Detection, GroundTruth};
use scl::losses::{
    binary_cross_entropy, focal_loss, instance_context_loss, Domain, IlossKind, InstanceContextProbs, PointLoss,
};
use scl::netarch::boxes::{decode, encode, nms};
use scl::synthdata::{next_batch, read_annotations, write_annotations, AnnotationRecord, BoxAnnotation};

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn arb_domain() -> impl Strategy<Value = Domain> {
    prop_oneof![Just(Domain::Source), Just(Domain::Target)]
}

fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let gts = prop::collection::vec((0..3usize, 0..3usize, arb_box()), 0..8).prop_map(|v| {
        v.into_iter()
            .map(|(img, class, bbox)| GroundTruth {
                image: format!("i{img}"),
                class,
                bbox,
            })
            .collect::<Vec<_>>()
    });
    let dets = prop::collection::vec((0..3usize, 0..3usize, 0.0..1.0f64, arb_box()), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(img, class, score, bbox)| Detection {
                image: format!("i{img}"),
                class,
                score,
                bbox,
            })
            .collect::<Vec<_>>()
    });
    (dets, gts)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn map_is_nonincreasing_in_threshold((dets, gts) in arb_case()) {
        let thr: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let r = evaluate(&dets, &gts, &thr, 3).unwrap();
        for w in r.map.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(r.map.iter().all(|m| (0.0..=1.0).contains(m)));
    }

    #[test]
    fn perfect_detections_score_one(gts in prop::collection::vec(arb_box(), 1..6), thr in 0.05..0.95f64) {
        let gts: Vec<GroundTruth> = gts.into_iter().enumerate()
            .map(|(i, bbox)| GroundTruth { image: format!("i{i}"), class: 0, bbox }).collect();
        let dets: Vec<Detection> = gts.iter().enumerate()
            .map(|(i, g)| Detection { image: g.image.clone(), class: 0, score: 1.0 - i as f64 * 0.01, bbox: g.bbox }).collect();
        prop_assert_eq!(average_precision(&dets, &gts, thr), 1.0);
    }

    #[test]
    fn adding_a_low_scored_false_positive_never_raises_ap((dets, gts) in arb_case(), b in arb_box()) {
        let before = evaluate(&dets, &gts, &[0.5], 3).unwrap();
        let mut more = dets.clone();
        more.push(Detection { image: "elsewhere".into(), class: 0, score: -1.0, bbox: b });
        let after = evaluate(&more, &gts, &[0.5], 3).unwrap();
        prop_assert_eq!(before.map, after.map);
    }

    #[test]
    fn focal_never_exceeds_cross_entropy(p in 0.0..=1.0f64, d in arb_domain(), gamma in 0.0..8.0f64) {
        let f = focal_loss(p, d, gamma).unwrap();
        let c = binary_cross_entropy(p, d);
        prop_assert!(f >= 0.0 && f <= c + 1e-12);
    }

    #[test]
    fn logit_and_probability_forms_agree(z in -12.0..12.0f64, d in arb_domain(), gamma in 0.0..6.0f64) {
        let p = 1.0 / (1.0 + (-z).exp());
        for l in [PointLoss::Bce(d), PointLoss::Focal(d, gamma), PointLoss::Squared(0.0), PointLoss::Squared(1.0)] {
            let (a, b) = (l.value_logit(z), l.value(p));
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{:?}: {} vs {}", l, a, b);
            // chain rule through the sigmoid
            let (ga, gb) = (l.derivative_logit(z), l.derivative(p) * p * (1.0 - p));
            prop_assert!((ga - gb).abs() <= 1e-8 * gb.abs().max(1.0), "{:?}: {} vs {}", l, ga, gb);
        }
    }

    #[test]
    fn iloss_scales_with_region_count(n in 1usize..6, p in 0.01..0.99f64, gamma in 0.0..6.0f64) {
        let one = InstanceContextProbs { images: vec![(Domain::Source, vec![p])] };
        let many = InstanceContextProbs { images: vec![(Domain::Source, vec![p; n])] };
        let a = instance_context_loss(&one, IlossKind::Fl, gamma).unwrap();
        let b = instance_context_loss(&many, IlossKind::Fl, gamma).unwrap();
        prop_assert!((b - n as f64 * a).abs() < 1e-10);
    }

    #[test]
    fn box_codec_round_trips(anchor in arb_box(), b in arb_box()) {
        let d = encode(&b, &anchor);
        let back = decode(&d, &anchor);
        for i in 0..4 {
            prop_assert!((back[i] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_keeps_separated_boxes(boxes in prop::collection::vec(arb_box(), 1..10), thr in 0.1..0.9f64) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| i as f64).collect();
        let keep = nms(&boxes, &scores, thr);
        prop_assert!(!keep.is_empty());
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]).unwrap() <= thr);
            }
        }
    }

    #[test]
    fn annotations_round_trip(recs in prop::collection::vec(
        (0usize..100, prop::bool::ANY, prop::collection::vec((arb_box(), 0usize..3), 0..4)), 0..6)
    ) {
        let records: Vec<AnnotationRecord> = recs.into_iter().map(|(i, src, boxes)| AnnotationRecord {
            image: format!("split/{i:06}.png"),
            domain: src as u8,
            width: 80,
            height: 80,
            boxes: boxes.into_iter().map(|(b, class)| BoxAnnotation { x1: b[0], y1: b[1], x2: b[2], y2: b[3], class }).collect(),
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        write_annotations(&records, &path).unwrap();
        prop_assert_eq!(read_annotations(&path).unwrap(), records);
    }

    #[test]
    fn batches_cover_each_epoch(ns in 1usize..12, nt in 1usize..12, epoch in 0usize..3) {
        let spec = scl::synthdata::SceneSpec::default();
        let data = scl::synthdata::generate_pair_dataset(&spec, ns, nt, 1).unwrap();
        let mut seen = vec![0; ns];
        for step in epoch * ns..(epoch + 1) * ns {
            let (s, t) = next_batch(&data.source, &data.target, step).unwrap();
            prop_assert_eq!(s.domain, Domain::Source);
            prop_assert_eq!(t.domain, Domain::Target);
            let idx = data.source.iter().position(|x| x.image == s.image).unwrap();
            seen[idx] += 1;
        }
        prop_assert!(seen.iter().all(|c| *c == 1));
    }
}

#[test]
fn malformed_annotation_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"image":"s/0.png","domain":1,"width":64,"height":64,"boxes":[]}"#,
            "\n",
            r#"{"image":"s/1.png","domain":1,"width":64,"height":64,"boxes":[{"x1":9,"y1":1,"x2":3,"y2":5,"class":0}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let e = read_annotations(&path).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains(":2:") && msg.contains("s/1.png"), "{msg}");
}
