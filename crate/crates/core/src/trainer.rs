//! The training step: one forward pass over a (source, target) pair that
//! builds every loss term, one backward pass of `L_det + lambda * L_SCL`,
//! and an SGD-with-momentum update. Gradient routing between the context
//! and detection groups is enforced by the reversal and stop-gradient nodes
//! inside the graph.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::gradroute::GradRoutingPolicy;
use crate::graph::DiffValue;
use crate::losses::{Domain, LossConfig, PointLoss};
use crate::netarch::boxes::{box_iou, encode, BBox, HEAD_DELTA_STD};
use crate::netarch::{checkpoint, DetectorModel, ModelSpec, ParamGroup, Session};
use crate::synthdata::{next_batch, DomainSample, PairDataset};
use crate::tensor::Real;

pub const RPN_POS_IOU: f64 = 0.5;
pub const RPN_NEG_IOU: f64 = 0.3;
pub const ROI_FG_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Decay the rate by 10x every this many steps; 0 disables decay.
    pub decay_every: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 saves only the final model.
    pub checkpoint_every: usize,
    pub grl_scale: f64,
    /// Where the instance-context classifier's reversal sits; see
    /// [`GradRoutingPolicy::reverse_iloss_context`].
    pub reverse_iloss_context: bool,
    /// Rescale the full gradient to at most this L2 norm; 0 disables.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 1e-3,
            decay_every: 2000,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 0,
            grl_scale: 0.03,
            reverse_iloss_context: true,
            clip_grad_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_every > self.steps {
            return Err(Error::Config(format!(
                "decay_every {} exceeds the {} training steps (use 0 to disable decay)",
                self.decay_every, self.steps
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Routing policy implied by this config and a loss configuration.
    pub fn policy(&self, loss: &LossConfig) -> GradRoutingPolicy {
        GradRoutingPolicy {
            grl_scale: self.grl_scale,
            detach_enabled: loss.use_detach,
            reverse_enabled: true,
            reverse_iloss_context: self.reverse_iloss_context,
        }
    }
}

/// `lr * 0.1^floor(step / decay_every)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.decay_every == 0 {
        return cfg.lr;
    }
    cfg.lr * 0.1f64.powi((step / cfg.decay_every) as i32)
}

/// Diagnostics of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    /// One entry per level; empty when the adversarial branch is off.
    pub l_levels: Vec<f64>,
    pub l_iloss: Option<f64>,
    pub l_scl: f64,
    pub l_det: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm_context: f64,
    pub grad_norm_detection: f64,
}

/// Handles to every loss term of a step graph.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub rpn: DiffValue,
    pub cls: DiffValue,
    pub reg: DiffValue,
    pub levels: Vec<DiffValue>,
    pub iloss: Option<DiffValue>,
    pub scl: Option<DiffValue>,
    pub det: DiffValue,
    pub total: DiffValue,
}

pub struct StepGraph<'m, T> {
    pub session: Session<'m, T>,
    pub terms: LossTerms,
}

impl<T: Real> StepGraph<'_, T> {
    pub fn value(&self, v: DiffValue) -> f64 {
        self.session.graph.scalar(v)
    }

    /// Squared gradient norm per parameter group after a backward pass;
    /// `(context, detection)`.
    pub fn group_sq_norms(&self) -> (f64, f64) {
        let mut out = (0.0, 0.0);
        for (id, p) in self.session.model.params.iter() {
            let Some(g) = self.session.param_grad(id) else { continue };
            let s: f64 = g.iter().map(|v| v.f64() * v.f64()).sum();
            match p.group {
                ParamGroup::Context => out.0 += s,
                ParamGroup::Detection => out.1 += s,
            }
        }
        out
    }

    /// Largest absolute gradient over parameters whose name starts with `prefix`.
    pub fn max_abs_grad(&self, prefix: &str) -> f64 {
        self.session
            .model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .filter_map(|(id, _)| self.session.param_grad(id))
            .flat_map(|g| g.iter().map(|v| v.f64().abs()))
            .fold(0.0, f64::max)
    }
}

fn gt_boxes(sample: &DomainSample) -> (Vec<BBox>, Vec<usize>) {
    (sample.boxes.iter().map(|b| b.bbox()).collect(), sample.boxes.iter().map(|b| b.class).collect())
}

/// RPN objectness labels and delta targets for every anchor.
fn rpn_targets(anchors: &[BBox], gts: &[BBox]) -> (Vec<Option<bool>>, Vec<f64>, Vec<f64>, usize) {
    let a = anchors.len();
    let mut labels = vec![Some(false); a];
    let mut targets = vec![0.0; 4 * a];
    let mut weights = vec![0.0; 4 * a];
    let mut best_gt = vec![None::<(usize, f64)>; a];
    for (i, anchor) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = box_iou(anchor, g);
            if best_gt[i].is_none_or(|(_, b)| v > b) {
                best_gt[i] = Some((j, v));
            }
        }
    }
    for (i, b) in best_gt.iter().enumerate() {
        match b {
            Some((_, v)) if *v >= RPN_POS_IOU => labels[i] = Some(true),
            Some((_, v)) if *v >= RPN_NEG_IOU => labels[i] = None,
            _ => {}
        }
    }
    // every ground-truth box keeps its best anchor
    for (j, g) in gts.iter().enumerate() {
        let best = (0..a).max_by(|&x, &y| box_iou(&anchors[x], g).total_cmp(&box_iou(&anchors[y], g)));
        if let Some(i) = best {
            if box_iou(&anchors[i], g) > 0.0 {
                labels[i] = Some(true);
                best_gt[i] = Some((j, box_iou(&anchors[i], g)));
            }
        }
    }
    let mut n_pos = 0;
    for i in 0..a {
        if labels[i] == Some(true) {
            let (j, _) = best_gt[i].unwrap();
            let d = encode(&gts[j], &anchors[i]);
            for c in 0..4 {
                targets[c * a + i] = d[c];
                weights[c * a + i] = 1.0;
            }
            n_pos += 1;
        }
    }
    (labels, targets, weights, n_pos)
}

/// Builds the forward graph of one step. The source image drives the
/// detection losses and the source halves of the domain losses; the target
/// image drives the target halves.
pub fn build_step_graph<'m, T: Real>(
    model: &'m DetectorModel<T>,
    source: &DomainSample,
    target: &DomainSample,
) -> Result<StepGraph<'m, T>> {
    if source.boxes.is_empty() {
        return Err(Error::InvalidInput(format!("source sample {} has no boxes", source.image)));
    }
    let cfg = &model.loss;
    let adversarial = cfg.lambda > 0.0;
    let mut s = model.session();
    let (gts, gt_classes) = gt_boxes(source);

    let xs = s.image(&source.tensor());
    let feats_s = s.backbone(xs)?;
    let top_s = *feats_s.last().unwrap();

    // L_rpn
    let rpn = s.rpn(top_s)?;
    let anchors = model.spec.anchors();
    let (labels, targets, weights, n_pos) = rpn_targets(&anchors, &gts);
    let obj = s.graph.logit_bce(rpn.objectness, &labels)?;
    let box_l = s.graph.smooth_l1(rpn.deltas, &targets, &weights, n_pos.max(1) as f64)?;
    let l_rpn = s.graph.add(obj, box_l)?;

    // ROI set: proposals plus ground truth
    let mut rois: Vec<BBox> = s.propose(&rpn)?.into_iter().map(|p| p.bbox).collect();
    rois.extend_from_slice(&gts);
    let mut roi_labels = Vec::with_capacity(rois.len());
    let mut reg_t = vec![0.0; 4 * rois.len()];
    let mut reg_w = vec![0.0; 4 * rois.len()];
    let mut n_fg = 0usize;
    for (r, roi) in rois.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, box_iou(roi, g)))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        if best.1 >= ROI_FG_IOU {
            roi_labels.push(gt_classes[best.0] + 1);
            let d = encode(&gts[best.0], roi);
            for c in 0..4 {
                reg_t[4 * r + c] = d[c] / HEAD_DELTA_STD[c];
                reg_w[4 * r + c] = 1.0;
            }
            n_fg += 1;
        } else {
            roi_labels.push(0);
        }
    }

    let ctx_s = if cfg.use_context { Some(s.context(&feats_s)?) } else { None };
    let inst_s = s.roi_features(top_s, &rois)?;
    let head = s.head(inst_s, ctx_s)?;
    let l_cls = s.graph.softmax_cross_entropy(head.cls_logits, &roi_labels)?;
    let l_reg = s.graph.smooth_l1(head.deltas, &reg_t, &reg_w, n_fg.max(1) as f64)?;
    let l_det = s.graph.add_all(&[l_rpn, l_cls, l_reg])?;

    let mut levels = Vec::new();
    let mut iloss = None;
    let mut scl = None;
    let mut total = l_det;
    if adversarial {
        let xt = s.image(&target.tensor());
        let feats_t = s.backbone(xt)?;
        for (k, kind) in cfg.level_kinds.iter().enumerate() {
            let mut halves = Vec::with_capacity(2);
            for (feat, d, w) in [(feats_s[k], Domain::Source, cfg.alpha), (feats_t[k], Domain::Target, cfg.beta)] {
                let z = s.domain_logits(k, feat)?;
                let n = s.graph.value(z).numel();
                let weight = if kind.is_spatial() { w } else { 1.0 };
                let pl = PointLoss::for_kind(*kind, d, cfg.gamma);
                halves.push(s.graph.logit_point_loss(z, vec![pl; n], weight, n as f64)?);
            }
            levels.push(s.graph.add(halves[0], halves[1])?);
        }
        let mut scl_parts = levels.clone();
        if cfg.use_iloss {
            let top_t = *feats_t.last().unwrap();
            let ctx_t = s.context(&feats_t)?;
            let rpn_t = s.rpn(top_t)?;
            let rois_t: Vec<BBox> = s.propose(&rpn_t)?.into_iter().map(|p| p.bbox).collect();
            let inst_t = s.roi_features(top_t, &rois_t)?;
            let z_s = s.instance_domain_logits(inst_s, ctx_s)?;
            let z_t = s.instance_domain_logits(inst_t, Some(ctx_t))?;
            // one image per domain, so each domain total is divided by 1
            let mut halves = Vec::with_capacity(2);
            for (z, d) in [(z_s, Domain::Source), (z_t, Domain::Target)] {
                let n = s.graph.value(z).numel();
                let pl = PointLoss::for_iloss(cfg.iloss_kind, d, cfg.gamma);
                halves.push(s.graph.logit_point_loss(z, vec![pl; n], 1.0, 1.0)?);
            }
            let il = s.graph.add(halves[0], halves[1])?;
            iloss = Some(il);
            scl_parts.push(il);
        }
        let sc = s.graph.add_all(&scl_parts)?;
        scl = Some(sc);
        let weighted = s.graph.scale(sc, cfg.lambda);
        total = s.graph.add(l_det, weighted)?;
    }

    Ok(StepGraph {
        session: s,
        terms: LossTerms {
            rpn: l_rpn,
            cls: l_cls,
            reg: l_reg,
            levels,
            iloss,
            scl,
            det: l_det,
            total,
        },
    })
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: DetectorModel<T>,
    pub cfg: TrainConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: DetectorModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = model.params.iter().map(|(_, p)| vec![T::ZERO; p.value.numel()]).collect();
        Ok(Trainer { model, cfg, velocity })
    }

    /// Builds a fresh model from `spec` and `loss`, seeded by `cfg.seed`.
    pub fn from_config(spec: ModelSpec, loss: LossConfig, cfg: TrainConfig) -> Result<Self> {
        let policy = cfg.policy(&loss);
        let model = DetectorModel::new(spec, loss, policy, cfg.seed)?;
        Trainer::new(model, cfg)
    }

    pub fn train_step(&mut self, source: &DomainSample, target: &DomainSample, step: usize) -> Result<StepReport> {
        let (report, grads) = {
            let mut sg = build_step_graph(&self.model, source, target)?;
            let t = &sg.terms;
            let named: Vec<(String, DiffValue)> = [("L_rpn", t.rpn), ("L_cls", t.cls), ("L_reg", t.reg)]
                .into_iter()
                .map(|(n, v)| (n.to_string(), v))
                .chain(t.levels.iter().enumerate().map(|(k, v)| (format!("L_{}", k + 1), *v)))
                .chain(t.iloss.map(|v| ("L_ILoss".to_string(), v)))
                .chain([("total".to_string(), t.total)])
                .collect();
            for (name, v) in &named {
                if !sg.value(*v).is_finite() {
                    return Err(Error::NonFinite { term: name.clone(), step });
                }
            }
            let total = sg.terms.total;
            sg.session.graph.backward(total);
            let (c2, d2) = sg.group_sq_norms();
            let t = &sg.terms;
            let report = StepReport {
                step,
                l_rpn: sg.value(t.rpn),
                l_cls: sg.value(t.cls),
                l_reg: sg.value(t.reg),
                l_levels: t.levels.iter().map(|v| sg.value(*v)).collect(),
                l_iloss: t.iloss.map(|v| sg.value(v)),
                l_scl: t.scl.map(|v| sg.value(v)).unwrap_or(0.0),
                l_det: sg.value(t.det),
                total: sg.value(t.total),
                lr: lr_at(step, &self.cfg),
                grad_norm_context: c2.sqrt(),
                grad_norm_detection: d2.sqrt(),
            };
            if !(c2.is_finite() && d2.is_finite()) {
                return Err(Error::NonFinite {
                    term: "gradient".into(),
                    step,
                });
            }
            let grads: Vec<Option<Vec<T>>> = self
                .model
                .params
                .iter()
                .map(|(id, _)| sg.session.param_grad(id).map(<[T]>::to_vec))
                .collect();
            (report, grads)
        };
        let norm = (report.grad_norm_context.powi(2) + report.grad_norm_detection.powi(2)).sqrt();
        let clip = self.cfg.clip_grad_norm;
        let scale = T::of(if clip > 0.0 && norm > clip { clip / norm } else { 1.0 });
        let lr = T::of(report.lr);
        let mu = T::of(self.cfg.momentum);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let v = &mut self.velocity[i];
            let p = &mut self.model.params.get_mut(crate::netarch::ParamId(i)).value.data;
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        Ok(report)
    }
}

/// Output of [`run_training`].
pub struct TrainOutcome<T> {
    pub model: DetectorModel<T>,
    pub reports: Vec<StepReport>,
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Line-delimited report log; the first line is the run header.
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a TrainConfig,
    loss: &'a LossConfig,
    spec: &'a ModelSpec,
    label: String,
}

pub fn run_training<T: Real>(
    spec: ModelSpec,
    loss: LossConfig,
    cfg: TrainConfig,
    data: &PairDataset,
    outputs: &RunOutputs,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::from_config(spec, loss, cfg)?;
    let mut log = match &outputs.log {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p)?);
            let header = LogHeader {
                config: &trainer.cfg,
                loss: &trainer.model.loss,
                spec: &trainer.model.spec,
                label: trainer.model.loss.label(),
            };
            serde_json::to_writer(&mut w, &header)?;
            w.write_all(b"\n")?;
            Some(w)
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let steps = trainer.cfg.steps;
    let mut reports = Vec::with_capacity(steps);
    for step in 0..steps {
        let (src, tgt) = next_batch(&data.source, &data.target, step)?;
        let r = trainer.train_step(src, tgt, step)?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        reports.push(r);
        let every = trainer.cfg.checkpoint_every;
        if let Some(dir) = &outputs.checkpoint_dir {
            if every > 0 && (step + 1) % every == 0 && step + 1 < steps {
                checkpoint::save(&trainer.model, step + 1, &dir.join(format!("step_{:06}.json", step + 1)))?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        checkpoint::save(&trainer.model, steps, &dir.join("final.json"))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        reports,
    })
}

/// Runs the detector over `samples` and collects detections and ground truth.
pub fn detect_all<T: Real>(model: &DetectorModel<T>, samples: &[DomainSample]) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        for d in model.detect(&s.tensor())? {
            dets.push(Detection {
                image: s.image.clone(),
                class: d.class,
                score: d.score,
                bbox: d.bbox,
            });
        }
        gts.extend(s.boxes.iter().map(|b| GroundTruth {
            image: s.image.clone(),
            class: b.class,
            bbox: b.bbox(),
        }));
    }
    Ok((dets, gts))
}

pub fn default_checkpoint(dir: &Path) -> PathBuf {
    dir.join("final.json")
}
