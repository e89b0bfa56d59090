//! Detection evaluation: IoU, greedy matching, all-point interpolated AP and
//! mAP over a list of IoU thresholds.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::boxes::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image: String,
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: String,
    pub class: usize,
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[0] < bx[2] && bx[1] < bx[3]) {
            return Err(Error::InvalidBox(*bx));
        }
    }
    Ok(crate::netarch::boxes::box_iou(a, b))
}

/// Per-detection outcome of greedy matching, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub order: Vec<usize>,
    pub is_tp: Vec<bool>,
    pub n_gt: usize,
}

/// Matches detections of one class against ground truth of that class.
/// Detections are visited by descending score (ties keep input order); each
/// goes to the highest-IoU unmatched box in its image and counts as a true
/// positive when that IoU reaches `iou_thr`.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Matching {
    let mut by_image: HashMap<&str, Vec<(BBox, bool)>> = HashMap::new();
    for g in gts {
        by_image.entry(g.image.as_str()).or_default().push((g.bbox, false));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let is_tp = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let Some(cands) = by_image.get_mut(d.image.as_str()) else {
                return false;
            };
            let best = cands
                .iter()
                .enumerate()
                .filter(|(_, (_, used))| !used)
                .map(|(j, (b, _))| (j, crate::netarch::boxes::box_iou(&d.bbox, b)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= iou_thr => {
                    cands[j].1 = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    Matching {
        order,
        is_tp,
        n_gt: gts.len(),
    }
}

/// Area under the precision envelope of a ranked TP/FP list.
pub fn ap_from_ranking(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || is_tp.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for (i, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// All-point interpolated AP for one class.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    let m = greedy_match(dets, gts, iou_thr);
    ap_from_ranking(&m.is_tp, m.n_gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub class: usize,
    pub n_gt: usize,
    /// One entry per threshold.
    pub ap: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassResult>,
    /// Mean AP over classes with ground truth, per threshold.
    pub map: Vec<f64>,
}

impl EvalResult {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.thresholds.iter().position(|t| (t - thr).abs() < 1e-12).map(|i| self.map[i])
    }

    /// CSV with one row per class and a closing `mAP` row; columns are
    /// `class,n_gt` followed by `AP@t` per threshold.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("class,n_gt");
        for t in &self.thresholds {
            s += &format!(",AP@{}", fmt_thr(*t));
        }
        s.push('\n');
        for c in &self.classes {
            let name = class_names.get(c.class).map(|n| n.to_string()).unwrap_or_else(|| c.class.to_string());
            s += &format!("{name},{}", c.n_gt);
            for ap in &c.ap {
                s += &format!(",{ap:.6}");
            }
            s.push('\n');
        }
        s += &format!("mAP,{}", self.classes.iter().map(|c| c.n_gt).sum::<usize>());
        for m in &self.map {
            s += &format!(",{m:.6}");
        }
        s.push('\n');
        s
    }
}

pub fn fmt_thr(t: f64) -> String {
    format!("{t:.2}")
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    match thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        Some(t) => Err(Error::Config(format!("IoU threshold {t} outside (0, 1)"))),
        None => Ok(()),
    }
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64], num_classes: usize) -> Result<EvalResult> {
    validate_thresholds(thresholds)?;
    let mut classes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class == class).cloned().collect();
        let mut r = ClassResult {
            class,
            n_gt: cg.len(),
            ap: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            fn_: Vec::new(),
        };
        for &t in thresholds {
            let m = greedy_match(&cd, &cg, t);
            let tp = m.is_tp.iter().filter(|v| **v).count();
            r.ap.push(ap_from_ranking(&m.is_tp, m.n_gt));
            r.tp.push(tp);
            r.fp.push(cd.len() - tp);
            r.fn_.push(cg.len() - tp);
        }
        classes.push(r);
    }
    let map = (0..thresholds.len())
        .map(|i| {
            let present: Vec<f64> = classes.iter().filter(|c| c.n_gt > 0).map(|c| c.ap[i]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        classes,
        map,
    })
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}
