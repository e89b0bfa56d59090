//! Browser demo: domain-classifier loss curves, a shifted synthetic scene and
//! AP against the IoU threshold. The plain functions are usable natively; the
//! `wasm_bindgen` exports wrap them and return JSON.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use scl::eval::{evaluate, Detection, GroundTruth};
use scl::losses::{Domain, PointLoss};
use scl::synthdata::{render_sample, SceneSpec, ShiftSpec, Split, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCurves {
    /// Probability of "source" output by the classifier.
    pub p: Vec<f64>,
    pub ce_source: Vec<f64>,
    pub ce_target: Vec<f64>,
    pub fl_source: Vec<f64>,
    pub fl_target: Vec<f64>,
    pub ls_source: Vec<f64>,
    pub ls_target: Vec<f64>,
}

/// Samples the three domain-classifier losses on `n` points of `(0, 1)`.
pub fn loss_curves(gamma: f64, n: usize) -> LossCurves {
    let n = n.max(2);
    let p: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    let curve = |l: PointLoss| p.iter().map(|&v| l.value(v)).collect::<Vec<_>>();
    // the least-squares classifier outputs P(target), so feed it 1 - p
    let ls = |t: f64| p.iter().map(|&v| PointLoss::Squared(t).value(1.0 - v)).collect::<Vec<_>>();
    LossCurves {
        ce_source: curve(PointLoss::Bce(Domain::Source)),
        ce_target: curve(PointLoss::Bce(Domain::Target)),
        fl_source: curve(PointLoss::Focal(Domain::Source, gamma)),
        fl_target: curve(PointLoss::Focal(Domain::Target, gamma)),
        ls_source: ls(0.0),
        ls_target: ls(1.0),
        p,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// RGBA, row-major, ready for `ImageData`.
    pub rgba: Vec<u8>,
    pub boxes: Vec<[f64; 5]>,
}

/// Renders test-split scene `index` under the given appearance shift.
pub fn scene(seed: u64, index: usize, fog: f64, blur: usize, hue_rotation: f64) -> Scene {
    let spec = SceneSpec {
        seed,
        shift: ShiftSpec {
            fog: fog.clamp(0.0, 1.0),
            blur: blur.min(4),
            hue_rotation,
        },
        ..SceneSpec::default()
    };
    let s = render_sample(&spec, Split::TargetTest, index);
    let rgba = s.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    Scene {
        width: s.width,
        height: s.height,
        rgba,
        boxes: s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2, b.class as f64]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApCurve {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
}

/// mAP of simulated detections over `n_images` scenes as the IoU threshold
/// rises. Each ground-truth box yields one detection whose corners move by up
/// to `jitter` times the box size, plus `n_false` random false alarms per image.
pub fn ap_curve(seed: u64, n_images: usize, jitter: f64, n_false: usize) -> ApCurve {
    let spec = SceneSpec {
        seed,
        shift: ShiftSpec::none(),
        ..SceneSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa9);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for i in 0..n_images.max(1) {
        let s = render_sample(&spec, Split::Source, i);
        let (w, h) = (s.width as f64, s.height as f64);
        for b in &s.boxes {
            gts.push(GroundTruth {
                image: s.image.clone(),
                class: b.class,
                bbox: b.bbox(),
            });
            let (bw, bh) = (b.x2 - b.x1, b.y2 - b.y1);
            let mut j = |v: f64, size: f64| v + rng.gen_range(-1.0..=1.0) * jitter.abs() * size;
            let (x1, y1) = (j(b.x1, bw), j(b.y1, bh));
            let (x2, y2) = (j(b.x2, bw).max(x1 + 1.0), j(b.y2, bh).max(y1 + 1.0));
            dets.push(Detection {
                image: s.image.clone(),
                class: b.class,
                score: rng.gen_range(0.5..1.0),
                bbox: [x1, y1, x2, y2],
            });
        }
        for _ in 0..n_false {
            let (x, y) = (rng.gen_range(0.0..w - 8.0), rng.gen_range(0.0..h - 8.0));
            let size = rng.gen_range(8.0..20.0f64);
            dets.push(Detection {
                image: s.image.clone(),
                class: rng.gen_range(0..NUM_CLASSES),
                score: rng.gen_range(0.0..0.9),
                bbox: [x, y, (x + size).min(w), (y + size).min(h)],
            });
        }
    }
    let thresholds: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    let r = evaluate(&dets, &gts, &thresholds, NUM_CLASSES).expect("thresholds lie in (0, 1)");
    ApCurve { thresholds, map: r.map }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo values serialize")
}

#[wasm_bindgen(js_name = lossCurves)]
pub fn loss_curves_json(gamma: f64, n: usize) -> String {
    json(&loss_curves(gamma, n))
}

#[wasm_bindgen(js_name = renderScene)]
pub fn scene_json(seed: u32, index: u32, fog: f64, blur: u32, hue_rotation: f64) -> String {
    json(&scene(seed as u64, index as usize, fog, blur as usize, hue_rotation))
}

#[wasm_bindgen(js_name = apCurve)]
pub fn ap_curve_json(seed: u32, n_images: u32, jitter: f64, n_false: u32) -> String {
    json(&ap_curve(seed as u64, n_images as usize, jitter, n_false as usize))
}
