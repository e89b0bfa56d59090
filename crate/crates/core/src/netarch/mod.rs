//! The desk-scale detector: a K-block convolutional backbone with a domain
//! classifier behind a reversal node at every block, the detached context
//! sub-network, a single-scale RPN, ROI alignment, the detection head and
//! the instance-context domain classifier.

pub mod boxes;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradroute::GradRoutingPolicy;
use crate::graph::{DiffValue, Graph};
use crate::losses::{Domain, DomainMap, LossConfig, LossKind};
use crate::tensor::{Real, Tensor};

use boxes::{clip, decode, nms, BBox, HEAD_DELTA_STD};

pub const MIN_INPUT_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub k: usize,
    pub widths: Vec<usize>,
    /// `[height, width]` of the RGB input.
    pub input_size: [usize; 2],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::for_k(3)
    }
}

impl BackboneSpec {
    /// Widths double per block starting at 32.
    pub fn for_k(k: usize) -> Self {
        BackboneSpec {
            k,
            widths: (0..k).map(|i| 32 << i).collect(),
            input_size: [64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.widths.len() != self.k {
            return Err(Error::Config(format!("{} widths for K = {}", self.widths.len(), self.k)));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("block widths must be positive".into()));
        }
        let [h, w] = self.input_size;
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::Config(format!("input {h}x{w} below {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")));
        }
        if (h >> self.k) == 0 || (w >> self.k) == 0 {
            return Err(Error::Config(format!("K = {} blocks collapse a {h}x{w} input", self.k)));
        }
        Ok(())
    }

    /// `(C, H, W)` of every tapped feature map.
    pub fn feature_dims(&self) -> Vec<(usize, usize, usize)> {
        let [h, w] = self.input_size;
        (0..self.k).map(|i| (self.widths[i], h >> (i + 1), w >> (i + 1))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub num_classes: usize,
    /// Instance feature width `F_inst`.
    pub inst_dim: usize,
    /// Output width of each context forward net.
    pub context_dim: usize,
    pub head_hidden: usize,
    pub roi_size: usize,
    pub anchor_size: f64,
    pub rpn_hidden: usize,
    pub rpn_top_n: usize,
    pub rpn_nms: f64,
    pub spatial_dc_hidden: usize,
    pub global_dc_hidden: usize,
    pub iloss_hidden: usize,
    pub det_score_thr: f64,
    pub det_nms: f64,
    pub max_dets: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            num_classes: 3,
            inst_dim: 128,
            context_dim: 128,
            head_hidden: 64,
            roi_size: 7,
            anchor_size: 20.0,
            rpn_hidden: 64,
            rpn_top_n: 32,
            rpn_nms: 0.7,
            spatial_dc_hidden: 16,
            global_dc_hidden: 32,
            iloss_hidden: 64,
            det_score_thr: 0.05,
            det_nms: 0.5,
            max_dets: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
}

impl ModelSpec {
    /// A few-channel network for gradient tests.
    pub fn micro(k: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec {
                k,
                widths: (0..k).map(|i| 2 + i).collect(),
                input_size: [64, 64],
            },
            head: HeadSpec {
                inst_dim: 5,
                context_dim: 3,
                head_hidden: 4,
                roi_size: 2,
                rpn_hidden: 3,
                rpn_top_n: 4,
                spatial_dc_hidden: 2,
                global_dc_hidden: 2,
                iloss_hidden: 3,
                ..HeadSpec::default()
            },
        }
    }

    pub fn context_vector_dim(&self) -> usize {
        self.backbone.k * self.head.context_dim
    }

    /// Feature stride of the last tapped map.
    pub fn top_stride(&self) -> f64 {
        let (_, _, w) = *self.backbone.feature_dims().last().unwrap();
        self.backbone.input_size[1] as f64 / w as f64
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let (_, h, w) = *self.backbone.feature_dims().last().unwrap();
        let s = self.top_stride();
        let half = self.head.anchor_size / 2.0;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                out.push([cx - half, cy - half, cx + half, cy + half]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// The context forward nets.
    Context,
    /// Backbone, RPN, detection head and every domain classifier.
    Detection,
}

impl ParamGroup {
    pub fn of_name(name: &str) -> Self {
        if name.starts_with("context.") {
            ParamGroup::Context
        } else {
            ParamGroup::Detection
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        let group = ParamGroup::of_name(&name);
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(i, _)| i).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum LevelClassifier {
    /// Two 1x1 convolutions; one probability per location.
    Spatial(Conv, Conv),
    /// Two 3x3 convolutions, global pooling and a linear unit.
    Global(Conv, Conv, Linear),
}

#[derive(Clone, Debug)]
struct Layers {
    backbone: Vec<[Conv; 2]>,
    domain: Vec<LevelClassifier>,
    context: Vec<[Conv; 3]>,
    rpn_conv: Conv,
    rpn_obj: Conv,
    rpn_deltas: Conv,
    roi_fc: Linear,
    head_fc: Linear,
    cls: Linear,
    reg: Linear,
    inst_domain: Option<(Linear, Linear)>,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        self.store.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    /// `bound = None` uses He-uniform scaling for a ReLU layer.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bound: Option<f64>) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = bound.unwrap_or((6.0 / fan_in).sqrt());
        Conv {
            w: self.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound),
            b: self.zeros(format!("{name}.bias"), &[cout]),
            stride: 1,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, bound: Option<f64>) -> Linear {
        let bound = bound.unwrap_or((6.0 / i as f64).sqrt());
        Linear {
            w: self.uniform(format!("{name}.weight"), &[o, i], bound),
            b: self.zeros(format!("{name}.bias"), &[o]),
        }
    }
}

/// Proposal from the RPN, in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Class-scored box produced at inference time. `class` excludes background.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures<T> {
    pub features: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// Per ROI, `num_classes + 1` probabilities with background at index 0.
    pub class_probs: Vec<Vec<f64>>,
    pub deltas: Vec<[f64; 4]>,
    /// Instance-context domain probability `P_(i,j)` per ROI.
    pub domain_probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel<T> {
    pub spec: ModelSpec,
    pub loss: LossConfig,
    pub policy: GradRoutingPolicy,
    pub params: ParamStore<T>,
    layers: Layers,
}

impl<T: Real> DetectorModel<T> {
    pub fn new(spec: ModelSpec, loss: LossConfig, policy: GradRoutingPolicy, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        loss.validate()?;
        if loss.k() != spec.backbone.k {
            return Err(Error::Config(format!(
                "{} level kinds for a {}-block backbone",
                loss.k(),
                spec.backbone.k
            )));
        }
        policy.validate(loss.lambda > 0.0)?;
        let h = &spec.head;
        let dims = spec.backbone.feature_dims();
        let mut store = ParamStore { params: Vec::new() };
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &(c, _, _)) in dims.iter().enumerate() {
            let a = init.conv(&format!("backbone.block{}.conv1", i + 1), cin, c, 3, None);
            let b = init.conv(&format!("backbone.block{}.conv2", i + 1), c, c, 3, None);
            backbone.push([a, b]);
            cin = c;
        }

        let mut domain = Vec::new();
        for (i, (&(c, _, _), kind)) in dims.iter().zip(&loss.level_kinds).enumerate() {
            let name = format!("domain.level{}", i + 1);
            domain.push(if kind.is_spatial() {
                let hid = h.spatial_dc_hidden;
                LevelClassifier::Spatial(
                    init.conv(&format!("{name}.conv1"), c, hid, 1, None),
                    init.conv(&format!("{name}.conv2"), hid, 1, 1, Some(0.1)),
                )
            } else {
                let hid = h.global_dc_hidden;
                LevelClassifier::Global(
                    init.conv(&format!("{name}.conv1"), c, hid, 3, None),
                    init.conv(&format!("{name}.conv2"), hid, hid, 3, None),
                    init.linear(&format!("{name}.fc"), hid, 1, Some(0.1)),
                )
            });
        }

        let mut context = Vec::new();
        if loss.use_context {
            for (i, &(c, _, _)) in dims.iter().enumerate() {
                let name = format!("context.net{}", i + 1);
                context.push([
                    init.conv(&format!("{name}.conv1"), c, c, 3, None),
                    init.conv(&format!("{name}.conv2"), c, c, 3, None),
                    init.conv(&format!("{name}.conv3"), c, h.context_dim, 3, None),
                ]);
            }
        }

        let (ctop, _, _) = *dims.last().unwrap();
        let rpn_conv = init.conv("rpn.conv", ctop, h.rpn_hidden, 3, None);
        let rpn_obj = init.conv("rpn.objectness", h.rpn_hidden, 1, 1, Some(0.01));
        let rpn_deltas = init.conv("rpn.deltas", h.rpn_hidden, 4, 1, Some(0.01));
        let roi_in = ctop * h.roi_size * h.roi_size;
        let roi_fc = init.linear("head.roi_fc", roi_in, h.inst_dim, None);
        let joint = h.inst_dim + if loss.use_context { spec.context_vector_dim() } else { 0 };
        let head_fc = init.linear("head.fc", joint, h.head_hidden, None);
        let cls = init.linear("head.cls", h.head_hidden, h.num_classes + 1, Some(0.01));
        let reg = init.linear("head.reg", h.head_hidden, 4, Some(0.001));
        let inst_domain = loss.use_iloss.then(|| {
            (
                init.linear("instance_domain.fc1", joint, h.iloss_hidden, None),
                init.linear("instance_domain.fc2", h.iloss_hidden, 1, Some(0.1)),
            )
        });

        Ok(DetectorModel {
            spec,
            loss,
            policy,
            params: store,
            layers: Layers {
                backbone,
                domain,
                context,
                rpn_conv,
                rpn_obj,
                rpn_deltas,
                roi_fc,
                head_fc,
                cls,
                reg,
                inst_domain,
            },
        })
    }

    pub fn k(&self) -> usize {
        self.spec.backbone.k
    }

    pub fn session(&self) -> Session<'_, T> {
        Session {
            model: self,
            graph: Graph::new(),
            bound: vec![None; self.params.len()],
        }
    }

    // ---- plain-data entry points ---------------------------------------------------

    pub fn backbone_forward(&self, image: &Tensor<T>) -> Result<StageFeatures<T>> {
        let mut s = self.session();
        let x = s.graph.constant(image.clone());
        let feats = s.backbone(x)?;
        Ok(StageFeatures {
            features: feats.iter().map(|f| s.graph.value(*f).clone()).collect(),
        })
    }

    /// Classifier output for level `level` (0-based) on its tapped feature.
    pub fn domain_classifier_forward(&self, level: usize, feat: &Tensor<T>, domain: Domain) -> Result<DomainMap> {
        let mut s = self.session();
        let x = s.graph.constant(feat.clone());
        let out = s.domain_classifier(level, x)?;
        s.domain_map(out, domain)
    }

    pub fn context_forward(&self, feats: &StageFeatures<T>) -> Result<Vec<f64>> {
        let mut s = self.session();
        let xs: Vec<DiffValue> = feats.features.iter().map(|f| s.graph.constant(f.clone())).collect();
        let c = s.context(&xs)?;
        Ok(s.graph.value(c).to_f64())
    }

    pub fn rpn_propose(&self, feats: &StageFeatures<T>) -> Result<Vec<Proposal>> {
        let mut s = self.session();
        let top = s.graph.constant(feats.features.last().unwrap().clone());
        let rpn = s.rpn(top)?;
        s.propose(&rpn)
    }

    pub fn roi_extract(&self, feats: &StageFeatures<T>, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let mut s = self.session();
        let top = s.graph.constant(feats.features.last().unwrap().clone());
        let inst = s.roi_features(top, boxes)?;
        Ok(rows(s.graph.value(inst)))
    }

    pub fn detect_head_forward(&self, inst: &[Vec<f64>], context: Option<&[f64]>) -> Result<HeadOutput> {
        let mut s = self.session();
        let d = self.spec.head.inst_dim;
        if inst.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("instance features must be {d}-d")));
        }
        let flat: Vec<f64> = inst.iter().flatten().copied().collect();
        let x = s.graph.constant(Tensor::from_f64(&[inst.len(), d], &flat)?);
        let ctx = match context {
            Some(c) => Some(s.graph.constant(Tensor::from_f64(&[c.len()], c)?)),
            None => None,
        };
        let out = s.head(x, ctx)?;
        s.head_output(&out)
    }

    /// Full inference on one `[3, H, W]` image.
    pub fn detect(&self, image: &Tensor<T>) -> Result<Vec<ScoredBox>> {
        let mut s = self.session();
        let x = s.graph.constant(image.clone());
        let feats = s.backbone(x)?;
        let ctx = if self.loss.use_context { Some(s.context(&feats)?) } else { None };
        let top = *feats.last().unwrap();
        let rpn = s.rpn(top)?;
        let proposals = s.propose(&rpn)?;
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let inst = s.roi_features(top, &rois)?;
        let head = s.head(inst, ctx)?;
        let out = s.head_output(&head)?;
        Ok(self.postprocess(&rois, &out))
    }

    fn postprocess(&self, rois: &[BBox], out: &HeadOutput) -> Vec<ScoredBox> {
        let h = &self.spec.head;
        let [ih, iw] = self.spec.backbone.input_size;
        let mut dets = Vec::new();
        let refined: Vec<BBox> = rois
            .iter()
            .zip(&out.deltas)
            .map(|(r, d)| {
                let scaled = [d[0] * HEAD_DELTA_STD[0], d[1] * HEAD_DELTA_STD[1], d[2] * HEAD_DELTA_STD[2], d[3] * HEAD_DELTA_STD[3]];
                clip(&decode(&scaled, r), iw as f64, ih as f64)
            })
            .collect();
        for class in 0..h.num_classes {
            let mut cand_boxes = Vec::new();
            let mut cand_scores = Vec::new();
            for (b, p) in refined.iter().zip(&out.class_probs) {
                let score = p[class + 1];
                if score >= h.det_score_thr && b[2] > b[0] && b[3] > b[1] {
                    cand_boxes.push(*b);
                    cand_scores.push(score);
                }
            }
            for i in nms(&cand_boxes, &cand_scores, h.det_nms) {
                dets.push(ScoredBox {
                    bbox: cand_boxes[i],
                    class,
                    score: cand_scores[i],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(h.max_dets);
        dets
    }
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = *t.shape.last().unwrap_or(&0);
    if d == 0 {
        return vec![Vec::new(); t.shape.first().copied().unwrap_or(0)];
    }
    t.data.chunks(d).map(|r| r.iter().map(|v| v.f64()).collect()).collect()
}

/// Differentiable outputs of the detection head for a set of ROIs.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub cls_logits: DiffValue,
    pub deltas: DiffValue,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnNodes {
    /// `[1, H, W]` objectness logits, one anchor per cell.
    pub objectness: DiffValue,
    /// `[4, H, W]` box deltas.
    pub deltas: DiffValue,
}

/// One forward/backward graph over a model, with parameters bound as
/// gradient-collecting leaves on first use.
pub struct Session<'m, T> {
    pub model: &'m DetectorModel<T>,
    pub graph: Graph<T>,
    bound: Vec<Option<DiffValue>>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn param(&mut self, id: ParamId) -> DiffValue {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.variable(self.model.params.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient reaching parameter `id` in the last backward pass.
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.bound[id.0].and_then(|v| self.graph.grad(v))
    }

    fn conv(&mut self, x: DiffValue, c: Conv) -> Result<DiffValue> {
        let w = self.param(c.w);
        let b = self.param(c.b);
        self.graph.conv2d(x, w, b, c.stride, c.pad)
    }

    fn conv_relu(&mut self, x: DiffValue, c: Conv) -> Result<DiffValue> {
        let y = self.conv(x, c)?;
        Ok(self.graph.relu(y))
    }

    fn linear(&mut self, x: DiffValue, l: Linear) -> Result<DiffValue> {
        let w = self.param(l.w);
        let b = self.param(l.b);
        self.graph.linear(x, w, b)
    }

    pub fn image(&mut self, image: &Tensor<T>) -> DiffValue {
        self.graph.constant(image.clone())
    }

    /// Tapped feature maps, one per block.
    pub fn backbone(&mut self, image: DiffValue) -> Result<Vec<DiffValue>> {
        let (c, h, w) = self.graph.value(image).chw()?;
        if c != 3 || h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::Shape(format!(
                "input must be 3 x H x W with H, W >= {MIN_INPUT_SIZE}, got {c}x{h}x{w}"
            )));
        }
        let mut x = image;
        let mut feats = Vec::with_capacity(self.model.k());
        for block in self.model.layers.backbone.clone() {
            x = self.conv_relu(x, block[0])?;
            x = self.conv_relu(x, block[1])?;
            x = self.graph.max_pool2(x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Probability output of the level classifier behind its reversal node:
    /// `[1, H, W]` for spatial classifiers, `[1]` for image-level ones.
    pub fn domain_classifier(&mut self, level: usize, feat: DiffValue) -> Result<DiffValue> {
        let z = self.domain_logits(level, feat)?;
        Ok(self.graph.sigmoid(z))
    }

    /// Pre-sigmoid output of [`Session::domain_classifier`].
    pub fn domain_logits(&mut self, level: usize, feat: DiffValue) -> Result<DiffValue> {
        let Some(cls) = self.model.layers.domain.get(level).cloned() else {
            return Err(Error::Config(format!("no domain classifier at level {}", level + 1)));
        };
        let x = self.model.policy.reverse(&mut self.graph, feat)?;
        let logit = match cls {
            LevelClassifier::Spatial(a, b) => {
                let h = self.conv_relu(x, a)?;
                self.conv(h, b)?
            }
            LevelClassifier::Global(a, b, fc) => {
                let h = self.conv_relu(x, a)?;
                let h = self.conv_relu(h, b)?;
                let p = self.graph.global_avg_pool(h)?;
                let y = self.linear(p, fc)?;
                self.graph.reshape(y, &[1])?
            }
        };
        Ok(logit)
    }

    pub fn domain_map(&self, out: DiffValue, domain: Domain) -> Result<DomainMap> {
        let v = self.graph.value(out);
        match v.shape[..] {
            [1, h, w] => DomainMap::spatial(h, w, v.to_f64(), domain),
            [1] => DomainMap::image_level(v.data[0].f64(), domain),
            _ => Err(Error::Shape(format!("unexpected classifier output {:?}", v.shape))),
        }
    }

    /// Context vector: each tap passes the routing policy's detach, three
    /// conv+ReLU stages and global average pooling; the K pieces are
    /// concatenated.
    pub fn context(&mut self, feats: &[DiffValue]) -> Result<DiffValue> {
        let nets = self.model.layers.context.clone();
        if nets.is_empty() {
            return Err(Error::Config("model was built without the context sub-network".into()));
        }
        if feats.len() != nets.len() {
            return Err(Error::Shape(format!("{} taps for {} context nets", feats.len(), nets.len())));
        }
        let mut parts = Vec::with_capacity(nets.len());
        for (f, net) in feats.iter().zip(nets) {
            let mut x = self.model.policy.detach(&mut self.graph, *f);
            for c in net {
                x = self.conv_relu(x, c)?;
            }
            parts.push(self.graph.global_avg_pool(x)?);
        }
        self.graph.concat(&parts)
    }

    pub fn rpn(&mut self, top: DiffValue) -> Result<RpnNodes> {
        let l = &self.model.layers;
        let (conv, obj, del) = (l.rpn_conv, l.rpn_obj, l.rpn_deltas);
        let h = self.conv_relu(top, conv)?;
        Ok(RpnNodes {
            objectness: self.conv(h, obj)?,
            deltas: self.conv(h, del)?,
        })
    }

    /// Decodes, clips, suppresses (NMS) and keeps the top-N anchors.
    pub fn propose(&self, rpn: &RpnNodes) -> Result<Vec<Proposal>> {
        let spec = &self.model.spec;
        let [ih, iw] = spec.backbone.input_size;
        let anchors = spec.anchors();
        let obj = self.graph.value(rpn.objectness);
        let del = self.graph.value(rpn.deltas);
        let a = anchors.len();
        let mut cand = Vec::with_capacity(a);
        let mut scores = Vec::with_capacity(a);
        for (i, anchor) in anchors.iter().enumerate() {
            let d = [del.data[i].f64(), del.data[a + i].f64(), del.data[2 * a + i].f64(), del.data[3 * a + i].f64()];
            let b = clip(&decode(&d, anchor), iw as f64, ih as f64);
            if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 && b.iter().all(|v| v.is_finite()) {
                cand.push(b);
                scores.push(1.0 / (1.0 + (-obj.data[i].f64()).exp()));
            }
        }
        if cand.is_empty() {
            return Err(Error::DegenerateImage("no anchor survived clipping".into()));
        }
        let keep = nms(&cand, &scores, spec.head.rpn_nms);
        Ok(keep
            .into_iter()
            .take(spec.head.rpn_top_n)
            .map(|i| Proposal {
                bbox: cand[i],
                objectness: scores[i],
            })
            .collect())
    }

    /// `[M, F_inst]` instance features from the top map.
    pub fn roi_features(&mut self, top: DiffValue, boxes: &[BBox]) -> Result<DiffValue> {
        let spec = &self.model.spec;
        let scale = 1.0 / spec.top_stride();
        let size = spec.head.roi_size;
        let fc = self.model.layers.roi_fc;
        let r = self.graph.roi_align(top, boxes, scale, size)?;
        let y = self.linear(r, fc)?;
        Ok(self.graph.relu(y))
    }

    fn joint(&mut self, inst: DiffValue, ctx: Option<DiffValue>) -> Result<(DiffValue, Option<DiffValue>)> {
        match (self.model.loss.use_context, ctx) {
            (true, Some(c)) => {
                let want = self.model.spec.context_vector_dim();
                if self.graph.value(c).shape != [want] {
                    return Err(Error::Config(format!(
                        "context vector {:?}, expected [{want}]",
                        self.graph.value(c).shape
                    )));
                }
                let m = self.graph.value(inst).shape[0];
                let rep = self.graph.repeat_rows(c, m)?;
                Ok((self.graph.concat(&[inst, rep])?, Some(rep)))
            }
            (true, None) => Err(Error::Config("model uses context but none was given".into())),
            (false, _) => Ok((inst, None)),
        }
    }

    /// Classification logits and box deltas per ROI.
    pub fn head(&mut self, inst: DiffValue, ctx: Option<DiffValue>) -> Result<HeadNodes> {
        let (x, _) = self.joint(inst, ctx)?;
        let l = &self.model.layers;
        let (fc, cls, reg) = (l.head_fc, l.cls, l.reg);
        let h = self.linear(x, fc)?;
        let h = self.graph.relu(h);
        Ok(HeadNodes {
            cls_logits: self.linear(h, cls)?,
            deltas: self.linear(h, reg)?,
        })
    }

    /// `[M, 1]` instance-context domain probabilities behind the reversal.
    pub fn instance_domain(&mut self, inst: DiffValue, ctx: Option<DiffValue>) -> Result<DiffValue> {
        let z = self.instance_domain_logits(inst, ctx)?;
        Ok(self.graph.sigmoid(z))
    }

    /// Pre-sigmoid output of [`Session::instance_domain`].
    pub fn instance_domain_logits(&mut self, inst: DiffValue, ctx: Option<DiffValue>) -> Result<DiffValue> {
        let Some((fc1, fc2)) = self.model.layers.inst_domain else {
            return Err(Error::Config("model was built without the instance-context classifier".into()));
        };
        let policy = self.model.policy.clone();
        let x = if policy.reverse_iloss_context {
            let (joint, _) = self.joint(inst, ctx)?;
            policy.reverse(&mut self.graph, joint)?
        } else {
            let r = policy.reverse(&mut self.graph, inst)?;
            self.joint(r, ctx)?.0
        };
        let h = self.linear(x, fc1)?;
        let h = self.graph.relu(h);
        self.linear(h, fc2)
    }

    pub fn head_output(&self, head: &HeadNodes) -> Result<HeadOutput> {
        let logits = rows(self.graph.value(head.cls_logits));
        let class_probs = logits
            .iter()
            .map(|r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect();
        let deltas = rows(self.graph.value(head.deltas)).into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
        Ok(HeadOutput {
            class_probs,
            deltas,
            domain_probs: None,
        })
    }
}

impl<T: Real> DetectorModel<T> {
    /// Head output including the instance-context probabilities.
    pub fn detect_head_with_domain(&self, inst: &[Vec<f64>], context: Option<&[f64]>) -> Result<HeadOutput> {
        let mut out = self.detect_head_forward(inst, context)?;
        if self.layers.inst_domain.is_some() {
            let mut s = self.session();
            let d = self.spec.head.inst_dim;
            let flat: Vec<f64> = inst.iter().flatten().copied().collect();
            let x = s.graph.constant(Tensor::from_f64(&[inst.len(), d], &flat)?);
            let ctx = match context {
                Some(c) => Some(s.graph.constant(Tensor::from_f64(&[c.len()], c)?)),
                None => None,
            };
            let p = s.instance_domain(x, ctx)?;
            out.domain_probs = Some(s.graph.value(p).to_f64());
        }
        Ok(out)
    }

    /// Level kinds whose classifier emits a map.
    pub fn spatial_levels(&self) -> Vec<bool> {
        self.loss.level_kinds.iter().map(|k| *k == LossKind::Ls).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(loss: LossConfig) -> DetectorModel<f32> {
        DetectorModel::new(ModelSpec::default(), loss, GradRoutingPolicy::default(), 1).unwrap()
    }

    fn image(v: f32) -> Tensor<f32> {
        Tensor::from_vec(&[3, 64, 64], vec![v; 3 * 64 * 64]).unwrap()
    }

    fn textured() -> Tensor<f32> {
        Tensor::from_vec(&[3, 64, 64], (0..3 * 64 * 64).map(|i| ((i as f32) * 0.37).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let m = model(LossConfig::default());
        let f = m.backbone_forward(&textured()).unwrap();
        let shapes: Vec<Vec<usize>> = f.features.iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 32], vec![64, 16, 16], vec![128, 8, 8]]);
        let z = m.backbone_forward(&image(0.0)).unwrap();
        assert!(z.features.iter().all(|t| t.all_finite()));
        let again = m.backbone_forward(&textured()).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn undersized_input_is_rejected() {
        let m = model(LossConfig::default());
        let small = Tensor::from_vec(&[3, 32, 32], vec![0.5f32; 3 * 32 * 32]).unwrap();
        assert!(matches!(m.backbone_forward(&small), Err(Error::Shape(_))));
    }

    #[test]
    fn domain_classifier_shapes() {
        let m = model(LossConfig::default());
        let f = m.backbone_forward(&textured()).unwrap();
        let d1 = m.domain_classifier_forward(0, &f.features[0], Domain::Source).unwrap();
        assert_eq!(d1.dims, Some((32, 32)));
        let d3 = m.domain_classifier_forward(2, &f.features[2], Domain::Source).unwrap();
        assert_eq!(d3.dims, None);
        for v in d1.values.iter().chain(&d3.values) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert!(matches!(m.domain_classifier_forward(3, &f.features[2], Domain::Source), Err(Error::Config(_))));
    }

    #[test]
    fn context_vector_is_384_d() {
        let m = model(LossConfig::default());
        let f = m.backbone_forward(&textured()).unwrap();
        assert_eq!(m.context_forward(&f).unwrap().len(), 384);
    }

    #[test]
    fn proposals_are_valid_and_bounded() {
        let m = model(LossConfig::default());
        let f = m.backbone_forward(&textured()).unwrap();
        let props = m.rpn_propose(&f).unwrap();
        assert!(!props.is_empty() && props.len() <= 32);
        for p in &props {
            let b = p.bbox;
            assert!(b[0] < b[2] && b[1] < b[3]);
            assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 64.0 && b[3] <= 64.0);
        }
    }

    #[test]
    fn roi_and_head_contracts() {
        let m = model(LossConfig::default());
        let f = m.backbone_forward(&textured()).unwrap();
        let boxes = [[0.0, 0.0, 64.0, 64.0], [10.0, 12.0, 30.0, 40.0], [11.0, 12.0, 31.0, 40.0]];
        let inst = m.roi_extract(&f, &boxes).unwrap();
        assert_eq!(inst.len(), 3);
        assert!(inst.iter().all(|r| r.len() == 128));
        // one-pixel shift: finite, bounded change
        let diff: f64 = inst[1].iter().zip(&inst[2]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let norm: f64 = inst[1].iter().map(|a| a.abs()).sum::<f64>();
        assert!(diff.is_finite() && diff <= norm + 1.0);
        assert!(matches!(m.roi_extract(&f, &[[5.0, 5.0, 5.0, 9.0]]), Err(Error::InvalidBox(_))));

        let ctx = m.context_forward(&f).unwrap();
        let out = m.detect_head_with_domain(&inst, Some(&ctx)).unwrap();
        for p in &out.class_probs {
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(out.domain_probs.unwrap().iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(matches!(m.detect_head_forward(&inst, Some(&ctx[..100])), Err(Error::Config(_))));
    }

    #[test]
    fn roi_of_constant_map_is_constant() {
        let m = model(LossConfig::source_only(3));
        let top = Tensor::from_vec(&[128, 8, 8], vec![0.25f32; 128 * 64]).unwrap();
        let mut s = m.session();
        let x = s.graph.constant(top);
        let r = s.graph.roi_align(x, &[[0.0, 0.0, 64.0, 64.0]], 1.0 / 8.0, 7).unwrap();
        assert!(s.graph.value(r).data.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn head_width_follows_context_toggle() {
        let with = model(LossConfig::default());
        let id = with.params.find("head.fc.weight").unwrap();
        assert_eq!(with.params.get(id).value.shape, vec![64, 512]);
        let without = model(LossConfig::source_only(3));
        let id = without.params.find("head.fc.weight").unwrap();
        assert_eq!(without.params.get(id).value.shape, vec![64, 128]);
        assert!(without.params.ids_in(ParamGroup::Context).is_empty());
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let m = model(LossConfig::default());
        let ctx = m.params.ids_in(ParamGroup::Context);
        let det = m.params.ids_in(ParamGroup::Detection);
        assert_eq!(ctx.len() + det.len(), m.params.len());
        assert!(ctx.iter().all(|i| !det.contains(i)));
        assert!(ctx.iter().all(|i| m.params.get(*i).name.starts_with("context.")));
        assert_eq!(ctx.len(), 3 * 3 * 2);
    }

    #[test]
    fn ls_above_level_one_gets_a_spatial_classifier() {
        let loss = LossConfig {
            level_kinds: vec![LossKind::Ls, LossKind::Ls, LossKind::Fl],
            ..LossConfig::default()
        };
        let m = model(loss);
        let f = m.backbone_forward(&textured()).unwrap();
        let d2 = m.domain_classifier_forward(1, &f.features[1], Domain::Target).unwrap();
        assert_eq!(d2.dims, Some((16, 16)));
    }

    #[test]
    fn k_mismatch_is_a_config_error() {
        let r = DetectorModel::<f32>::new(ModelSpec::default(), LossConfig::source_only(2), GradRoutingPolicy::default(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
