use scl_demo::{ap_curve, loss_curves, scene};

#[test]
fn focal_curve_sits_below_cross_entropy() {
    let c = loss_curves(2.0, 50);
    assert_eq!(c.p.len(), 50);
    for i in 0..50 {
        assert!(c.fl_source[i] <= c.ce_source[i]);
        assert!(c.fl_target[i] <= c.ce_target[i]);
    }
    // confident correct predictions cost less than confident wrong ones
    assert!(c.ce_source[49] < c.ce_source[0]);
    assert!(c.ls_target[0] < c.ls_target[49]);
}

#[test]
fn scene_is_rgba_and_deterministic() {
    let a = scene(3, 0, 0.5, 1, 60.0);
    assert_eq!(a.rgba.len(), a.width * a.height * 4);
    assert!(a.rgba.chunks(4).all(|p| p[3] == 255));
    assert!(!a.boxes.is_empty());
    assert_eq!(a, scene(3, 0, 0.5, 1, 60.0));
    assert_ne!(a.rgba, scene(3, 0, 0.0, 0, 0.0).rgba);
}

#[test]
fn ap_falls_as_threshold_rises() {
    let exact = ap_curve(1, 5, 0.0, 0);
    assert!(exact.map.iter().all(|m| (*m - 1.0).abs() < 1e-12));
    let noisy = ap_curve(1, 20, 0.15, 2);
    assert!(noisy.map.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(noisy.map[0] > noisy.map[18]);
}
