//! Axis-aligned box helpers shared by the proposal and detection stages.
//! Boxes are `[x1, y1, x2, y2]` in image pixels.

pub type BBox = [f64; 4];

/// Scaling applied to head regression targets.
pub const HEAD_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU that treats degenerate boxes as non-overlapping.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &BBox, width: f64, height: f64) -> BBox {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Regression target `(dx, dy, dw, dh)` taking `reference` onto `target`.
pub fn encode(target: &BBox, reference: &BBox) -> [f64; 4] {
    let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
    let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
    let (tw, th) = (target[2] - target[0], target[3] - target[1]);
    let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
    [(tx - rx) / rw, (ty - ry) / rh, (tw / rw).ln(), (th / rh).ln()]
}

pub fn decode(deltas: &[f64; 4], reference: &BBox) -> BBox {
    let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
    let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = rh * deltas[3].min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let r = [10.0, 12.0, 30.0, 28.0];
        let t = [8.5, 15.0, 33.0, 27.0];
        let back = decode(&encode(&t, &r), &r);
        for (a, b) in back.iter().zip(&t) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_suppresses_overlaps_in_score_order() {
        let boxes = [[0.0, 0.0, 10.0, 10.0], [1.0, 1.0, 11.0, 11.0], [20.0, 20.0, 30.0, 30.0]];
        assert_eq!(nms(&boxes, &[0.5, 0.9, 0.7], 0.5), vec![1, 2]);
    }

    #[test]
    fn iou_of_degenerate_is_zero() {
        assert_eq!(box_iou(&[0.0, 0.0, 0.0, 5.0], &[0.0, 0.0, 5.0, 5.0]), 0.0);
        assert!((box_iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    }
}
