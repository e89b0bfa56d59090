use scl::losses::LossConfig;
use scl::netarch::boxes::box_iou;
use scl::netarch::ModelSpec;
use scl::synthdata::{generate_pair_dataset, SceneSpec};
use scl::trainer::{build_step_graph, run_training, RunOutputs, TrainConfig};

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        decay_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn detector_fits_its_training_images() {
    let data = generate_pair_dataset(&SceneSpec::default(), 4, 4, 1).unwrap();
    let out = run_training::<f32>(ModelSpec::default(), LossConfig::source_only(3), short(400), &data, &RunOutputs::default()).unwrap();
    let first = &out.reports[0];
    let sg = build_step_graph(&out.model, &data.source[0], &data.target[0]).unwrap();
    let (rpn, cls, reg) = (sg.value(sg.terms.rpn), sg.value(sg.terms.cls), sg.value(sg.terms.reg));
    assert!(rpn < first.l_rpn, "rpn {rpn} vs {}", first.l_rpn);
    assert!(cls < first.l_cls, "cls {cls} vs {}", first.l_cls);
    assert!(reg < first.l_reg, "reg {reg} vs {}", first.l_reg);

    for s in &data.source {
        let feats = out.model.backbone_forward(&s.tensor()).unwrap();
        let props = out.model.rpn_propose(&feats).unwrap();
        assert!(props.len() <= out.model.spec.head.rpn_top_n);
        for b in &s.boxes {
            let best = props.iter().map(|p| box_iou(&p.bbox, &b.bbox())).fold(0.0, f64::max);
            assert!(best >= 0.5, "{}: best proposal IoU {best}", s.image);
        }
    }
}

#[test]
fn same_seed_same_run() {
    let data = generate_pair_dataset(&SceneSpec::default(), 3, 3, 1).unwrap();
    let run = || run_training::<f32>(ModelSpec::default(), LossConfig::default(), short(6), &data, &RunOutputs::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.reports, b.reports);
    assert!(a.reports.iter().all(|r| r.l_iloss.is_some() && r.l_levels.len() == 3));
    let cfg = TrainConfig {
        seed: 1,
        ..short(6)
    };
    let c = run_training::<f32>(ModelSpec::default(), LossConfig::default(), cfg, &data, &RunOutputs::default()).unwrap();
    assert_ne!(a.reports[0].total, c.reports[0].total);
}
