//! Loss kernels: binary and categorical cross-entropy, weighted least
//! squares, focal loss, the per-level domain loss dispatch, the
//! instance-context alignment loss and the aggregate objectives.
//!
//! Probabilities entering a logarithm are clamped to `[PROB_EPS, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Domain flag `d`: source images are labelled 1, target images 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "source")]
    Source,
}

impl Domain {
    pub fn flag(self) -> u8 {
        match self {
            Domain::Source => 1,
            Domain::Target => 0,
        }
    }

    pub fn from_flag(d: u8) -> Result<Self> {
        match d {
            1 => Ok(Domain::Source),
            0 => Ok(Domain::Target),
            other => Err(Error::InvalidInput(format!("domain flag {other} not in {{0, 1}}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "FL")]
    Fl,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Ls => "LS",
            LossKind::Ce => "CE",
            LossKind::Fl => "FL",
        }
    }

    /// Whether the level classifier for this kind emits a per-location map.
    pub fn is_spatial(self) -> bool {
        matches!(self, LossKind::Ls)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "LS" | "ls" => Ok(LossKind::Ls),
            "CE" | "ce" => Ok(LossKind::Ce),
            "FL" | "fl" => Ok(LossKind::Fl),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IlossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "FL")]
    Fl,
}

impl IlossKind {
    pub fn label(self) -> &'static str {
        match self {
            IlossKind::Ce => "CE",
            IlossKind::Fl => "FL",
        }
    }
}

/// The ablation configuration space: which loss sits at each cut-in level,
/// the instance-context loss, and the Context / ILoss / Detach toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub level_kinds: Vec<LossKind>,
    pub iloss_kind: IlossKind,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_context: bool,
    pub use_iloss: bool,
    pub use_detach: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            level_kinds: vec![LossKind::Ls, LossKind::Ce, LossKind::Fl],
            iloss_kind: IlossKind::Fl,
            gamma: 5.0,
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            use_context: true,
            use_iloss: true,
            use_detach: true,
        }
    }
}

impl LossConfig {
    /// Plain detector training: no adversarial branch, no context.
    pub fn source_only(k: usize) -> Self {
        LossConfig {
            level_kinds: default_level_kinds(k),
            lambda: 0.0,
            use_context: false,
            use_iloss: false,
            use_detach: false,
            ..LossConfig::default()
        }
    }

    pub fn k(&self) -> usize {
        self.level_kinds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_kinds.is_empty() {
            return Err(Error::Config("at least one cut-in level is required".into()));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.use_iloss && !self.use_context {
            return Err(Error::Config(
                "use_iloss requires use_context (the instance-context classifier consumes the context vector)".into(),
            ));
        }
        Ok(())
    }

    /// Row label such as `LS|CE|FL + ILoss=FL + Context + Detach`.
    pub fn label(&self) -> String {
        let mut s = self
            .level_kinds
            .iter()
            .map(|k| k.label())
            .collect::<Vec<_>>()
            .join("|");
        if self.use_iloss {
            s.push_str(" + ILoss=");
            s.push_str(self.iloss_kind.label());
        }
        if self.use_context {
            s.push_str(" + Context");
        }
        if self.use_detach {
            s.push_str(" + Detach");
        }
        if self.lambda == 0.0 {
            s.push_str(" + lambda=0");
        }
        s
    }
}

/// Default placement for `k` levels: LS at the bottom, FL at the top, CE
/// in between.
pub fn default_level_kinds(k: usize) -> Vec<LossKind> {
    (0..k)
        .map(|i| {
            if i == 0 {
                LossKind::Ls
            } else if i + 1 == k {
                LossKind::Fl
            } else {
                LossKind::Ce
            }
        })
        .collect()
}

/// Output of a domain classifier for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMap {
    pub values: Vec<f64>,
    /// `(H, W)` for per-location maps, `None` for an image-level probability.
    pub dims: Option<(usize, usize)>,
    pub domain: Domain,
}

impl DomainMap {
    pub fn spatial(h: usize, w: usize, values: Vec<f64>, domain: Domain) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} map needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        let m = DomainMap {
            values,
            dims: Some((h, w)),
            domain,
        };
        m.check_range()?;
        Ok(m)
    }

    pub fn image_level(p: f64, domain: Domain) -> Result<Self> {
        let m = DomainMap {
            values: vec![p],
            dims: None,
            domain,
        };
        m.check_range()?;
        Ok(m)
    }

    fn check_range(&self) -> Result<()> {
        match self.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            Some(p) => Err(Error::Numeric(format!("probability {p} outside [0, 1]"))),
            None => Ok(()),
        }
    }
}

/// Per-region instance-context domain probabilities, grouped by image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceContextProbs {
    pub images: Vec<(Domain, Vec<f64>)>,
}

impl InstanceContextProbs {
    pub fn counts(&self) -> (usize, usize) {
        let ns = self.images.iter().filter(|(d, _)| *d == Domain::Source).count();
        (ns, self.images.len() - ns)
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

/// `p_t`: the probability assigned to the true domain.
fn sign(d: Domain) -> f64 {
    match d {
        Domain::Source => 1.0,
        Domain::Target => -1.0,
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn p_true(p: f64, d: Domain) -> f64 {
    match d {
        Domain::Source => p,
        Domain::Target => 1.0 - p,
    }
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN in class probabilities".into()));
    }
    if label >= probs.len() {
        return Err(Error::Index {
            index: label,
            len: probs.len(),
        });
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-clamp_prob(probs[label]).ln())
}

/// Binary cross-entropy of a source-probability `p` for an image of domain `d`.
pub fn binary_cross_entropy(p: f64, d: Domain) -> f64 {
    -clamp_prob(p_true(p, d)).ln()
}

pub fn focal_loss(p: f64, d: Domain, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    Ok(focal_value(p_true(p, d), gamma))
}

#[inline]
fn focal_value(pt: f64, gamma: f64) -> f64 {
    let pt = clamp_prob(pt);
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// d/dp of the focal loss (through the `p_t` mapping).
pub fn focal_loss_grad(p: f64, d: Domain, gamma: f64) -> f64 {
    let pt = p_true(p, d);
    let dpt = match d {
        Domain::Source => 1.0,
        Domain::Target => -1.0,
    };
    if !(PROB_EPS..=1.0).contains(&pt) {
        return 0.0;
    }
    let q = 1.0 - pt;
    let first = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln()
    };
    (first - q.powf(gamma) / pt) * dpt
}

pub fn binary_cross_entropy_grad(p: f64, d: Domain) -> f64 {
    let pt = p_true(p, d);
    if !(PROB_EPS..=1.0).contains(&pt) {
        return 0.0;
    }
    match d {
        Domain::Source => -1.0 / pt,
        Domain::Target => 1.0 / pt,
    }
}

/// Per-element loss applied to a probability; the graph's loss nodes are
/// built from these.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointLoss {
    Bce(Domain),
    Focal(Domain, f64),
    /// `(p - target)^2`
    Squared(f64),
}

impl PointLoss {
    pub fn value(self, p: f64) -> f64 {
        match self {
            PointLoss::Bce(d) => binary_cross_entropy(p, d),
            PointLoss::Focal(d, g) => focal_value(p_true(p, d), g),
            PointLoss::Squared(t) => (p - t) * (p - t),
        }
    }

    pub fn derivative(self, p: f64) -> f64 {
        match self {
            PointLoss::Bce(d) => binary_cross_entropy_grad(p, d),
            PointLoss::Focal(d, g) => focal_loss_grad(p, d, g),
            PointLoss::Squared(t) => 2.0 * (p - t),
        }
    }

    /// Loss as a function of the classifier logit `z = logit(p)`. Evaluated
    /// without clamping, so it stays finite and smooth for saturated logits.
    pub fn value_logit(self, z: f64) -> f64 {
        match self {
            PointLoss::Bce(d) => softplus(-sign(d) * z),
            PointLoss::Focal(d, g) => {
                let sz = sign(d) * z;
                sigmoid(-sz).powf(g) * softplus(-sz)
            }
            PointLoss::Squared(t) => (sigmoid(z) - t).powi(2),
        }
    }

    /// d/dz of [`PointLoss::value_logit`]. Unlike the probability-space
    /// derivative it does not vanish for confidently wrong predictions.
    pub fn derivative_logit(self, z: f64) -> f64 {
        match self {
            PointLoss::Bce(d) => -sign(d) * sigmoid(-sign(d) * z),
            PointLoss::Focal(d, g) => {
                let s = sign(d);
                let (pt, qt) = (sigmoid(s * z), sigmoid(-s * z));
                // d/dpt of -(1-pt)^g ln pt, times dpt/dz = s pt (1-pt)
                s * (g * qt.powf(g) * pt * (-softplus(-s * z)) - qt.powf(g + 1.0))
            }
            PointLoss::Squared(t) => {
                let p = sigmoid(z);
                2.0 * (p - t) * p * (1.0 - p)
            }
        }
    }

    /// The binary loss for a domain classifier of kind `kind` on an image of
    /// domain `d`.
    pub fn for_kind(kind: LossKind, d: Domain, gamma: f64) -> Self {
        match kind {
            LossKind::Ce => PointLoss::Bce(d),
            LossKind::Fl => PointLoss::Focal(d, gamma),
            LossKind::Ls => PointLoss::Squared(match d {
                Domain::Source => 0.0,
                Domain::Target => 1.0,
            }),
        }
    }

    pub fn for_iloss(kind: IlossKind, d: Domain, gamma: f64) -> Self {
        match kind {
            IlossKind::Ce => PointLoss::Bce(d),
            IlossKind::Fl => PointLoss::Focal(d, gamma),
        }
    }
}

/// `alpha/HW * sum D(s)^2 + beta/HW * sum (1 - D(t))^2`.
pub fn least_squares_loss(source: &DomainMap, target: &DomainMap, alpha: f64, beta: f64) -> Result<f64> {
    let (Some(sd), Some(td)) = (source.dims, target.dims) else {
        return Err(Error::Config("least-squares loss needs per-location maps".into()));
    };
    if source.values.is_empty() || target.values.is_empty() {
        return Err(Error::InvalidInput("empty domain map".into()));
    }
    if sd != td {
        return Err(Error::Shape(format!("source map {sd:?} vs target map {td:?}")));
    }
    let hw = source.values.len() as f64;
    let s: f64 = source.values.iter().map(|p| p * p).sum();
    let t: f64 = target.values.iter().map(|p| (1.0 - p) * (1.0 - p)).sum();
    Ok(alpha * s / hw + beta * t / hw)
}

fn mean_point_loss(map: &DomainMap, loss: PointLoss) -> Result<f64> {
    if map.values.is_empty() {
        return Err(Error::InvalidInput("empty domain map".into()));
    }
    Ok(map.values.iter().map(|&p| loss.value(p)).sum::<f64>() / map.values.len() as f64)
}

/// Source term plus target term of one level's domain classifier.
pub fn level_domain_loss(kind: LossKind, source_out: &DomainMap, target_out: &DomainMap, cfg: &LossConfig) -> Result<f64> {
    match kind {
        LossKind::Ls => {
            if source_out.dims.is_none() || target_out.dims.is_none() {
                return Err(Error::Config("LS needs a per-location classifier output".into()));
            }
            least_squares_loss(source_out, target_out, cfg.alpha, cfg.beta)
        }
        LossKind::Ce | LossKind::Fl => {
            if kind == LossKind::Fl && !(cfg.gamma >= 0.0) {
                return Err(Error::Config(format!("focal gamma must be >= 0, got {}", cfg.gamma)));
            }
            let s = mean_point_loss(source_out, PointLoss::for_kind(kind, Domain::Source, cfg.gamma))?;
            let t = mean_point_loss(target_out, PointLoss::for_kind(kind, Domain::Target, cfg.gamma))?;
            Ok(s + t)
        }
    }
}

/// Regions are summed within an image; each domain's total is divided by its
/// image count.
pub fn instance_context_loss(probs: &InstanceContextProbs, kind: IlossKind, gamma: f64) -> Result<f64> {
    if kind == IlossKind::Fl && !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if probs.images.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::DegenerateBatch("no regions in any image".into()));
    }
    let (ns, nt) = probs.counts();
    let mut src = 0.0;
    let mut tgt = 0.0;
    for (d, regions) in &probs.images {
        let loss = PointLoss::for_iloss(kind, *d, gamma);
        let s: f64 = regions.iter().map(|&p| loss.value(p)).sum();
        match d {
            Domain::Source => src += s,
            Domain::Target => tgt += s,
        }
    }
    let mut total = 0.0;
    if ns > 0 {
        total += src / ns as f64;
    }
    if nt > 0 {
        total += tgt / nt as f64;
    }
    Ok(total)
}

pub fn scl_total(level_losses: &[f64], iloss: f64, cfg: &LossConfig) -> Result<f64> {
    if level_losses.len() != cfg.k() {
        return Err(Error::Config(format!(
            "{} level losses for K = {}",
            level_losses.len(),
            cfg.k()
        )));
    }
    let levels: f64 = level_losses.iter().sum();
    Ok(if cfg.use_iloss { levels + iloss } else { levels })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLoss {
    pub total: f64,
    /// `L_cls + L_reg`, the part that also reaches the context network.
    pub without_rpn: f64,
}

pub fn detection_loss(rpn: f64, cls: f64, reg: f64) -> Result<DetectionLoss> {
    for (name, v) in [("rpn", rpn), ("cls", cls), ("reg", reg)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numeric(format!("detection loss component {name} = {v}")));
        }
    }
    Ok(DetectionLoss {
        total: rpn + cls + reg,
        without_rpn: cls + reg,
    })
}

/// `det + lambda * scl`. The max over the domain classifiers is realised by
/// the reversal nodes inside `scl`, not by a sign here.
pub fn overall_objective(det: f64, scl: f64, lambda: f64) -> f64 {
    det + lambda * scl
}
