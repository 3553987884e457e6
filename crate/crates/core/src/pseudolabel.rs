//! Teacher pseudo-labels with confidence gating, weak-to-strong
//! consistency losses, and weighted loss assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anatomask::{apply_hard_mask, View, ViewCategoryTable, SEG_CLASSES};
use crate::augment::CutBox;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{ForwardOptions, MultiTaskNet};
use crate::semanchor::{argmax, Verdict};
use crate::tensor::{Graph, Layout, Tensor, Var};

/// Multipliers of the named loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub sup_seg: f64,
    pub sup_cls: f64,
    /// Applied to each of `unsup_s1`, `unsup_s2` and `unsup_fp`.
    pub unsup_seg_s: f64,
    pub unsup_focal: f64,
    pub unsup_mixed: f64,
    pub pl_cls: f64,
    pub pl_cls_mixed: f64,
    pub pl_cls_focal_mixed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sup_seg: 1.0,
            sup_cls: 0.8,
            unsup_seg_s: 0.3,
            unsup_focal: 0.4,
            unsup_mixed: 0.2,
            pl_cls: 1.0,
            pl_cls_mixed: 0.3,
            pl_cls_focal_mixed: 0.4,
        }
    }
}

/// Component names accepted by [`total_loss`].
pub const COMPONENTS: [&str; 10] = [
    "sup_seg",
    "sup_cls",
    "unsup_s1",
    "unsup_s2",
    "unsup_fp",
    "unsup_focal",
    "unsup_mixed",
    "pl_cls",
    "pl_cls_mixed",
    "pl_cls_focal_mixed",
];

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for k in COMPONENTS {
            let w = self.weight(k).expect("known component");
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight for {k} must be finite and ≥ 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, component: &str) -> Option<f64> {
        Some(match component {
            "sup_seg" => self.sup_seg,
            "sup_cls" => self.sup_cls,
            "unsup_s1" | "unsup_s2" | "unsup_fp" => self.unsup_seg_s,
            "unsup_focal" => self.unsup_focal,
            "unsup_mixed" => self.unsup_mixed,
            "pl_cls" => self.pl_cls,
            "pl_cls_mixed" => self.pl_cls_mixed,
            "pl_cls_focal_mixed" => self.pl_cls_focal_mixed,
            _ => return None,
        })
    }
}

/// Named scalar loss nodes of one graph.
pub type Components = BTreeMap<&'static str, Var>;

/// `Σ wᵢ·Lᵢ` over the present components. Unknown names are a
/// configuration error. An empty map yields a constant 0.
pub fn total_loss(g: &mut Graph<f32>, components: &Components, weights: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&name, &v) in components {
        let w = weights
            .weight(name)
            .ok_or_else(|| Error::Config(format!("unknown loss component {name}")))?;
        let term = g.scale(v, w as f32);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.constant(&[1], vec![0.0]),
    }
}

/// Same sum over plain numbers.
pub fn total_loss_values(components: &BTreeMap<String, f64>, weights: &LossWeights) -> Result<f64> {
    components.iter().try_fold(0.0, |acc, (name, &v)| {
        let w = weights
            .weight(name)
            .ok_or_else(|| Error::Config(format!("unknown loss component {name}")))?;
        Ok(acc + w * v)
    })
}

/// Which view drives hard masking of the teacher's logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    /// The teacher's own view prediction.
    Predicted,
    Given(View),
    /// No masking.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChdPseudo {
    pub class: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct PseudoLabelBundle {
    /// `15×H×W` teacher probabilities after masking.
    pub pw: Vec<f32>,
    pub hard_mask: Mask,
    pub conf: Vec<bool>,
    pub view_pred: View,
    /// View whose category set was enforced, if any.
    pub mask_view: Option<View>,
    pub chd_logits: Vec<f32>,
    pub chd_pseudo: Option<ChdPseudo>,
}

impl PseudoLabelBundle {
    pub fn confident(&self) -> usize {
        self.conf.iter().filter(|&&c| c).count()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.hard_mask.to_targets()
    }

    pub fn ignore(&self) -> Vec<bool> {
        self.conf.iter().map(|&c| !c).collect()
    }
}

/// Softmax over the class axis of `K×N` logits (f64), argmax with the
/// lowest index winning ties, and the winning probability.
pub(crate) fn softmax_argmax(logits: &[f32], classes: usize) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
    let n = logits.len() / classes;
    let mut probs = vec![0.0f64; logits.len()];
    let mut labels = vec![0u8; n];
    let mut maxp = vec![0.0f64; n];
    for i in 0..n {
        let mut best = 0;
        for k in 1..classes {
            if logits[k * n + i] > logits[best * n + i] {
                best = k;
            }
        }
        let top = f64::from(logits[best * n + i]);
        let mut z = 0.0;
        for k in 0..classes {
            let e = (f64::from(logits[k * n + i]) - top).exp();
            probs[k * n + i] = e;
            z += e;
        }
        for k in 0..classes {
            probs[k * n + i] /= z;
        }
        labels[i] = best as u8;
        maxp[i] = probs[best * n + i];
    }
    (probs, labels, maxp)
}

/// Turn teacher logits into a bundle. `tau` above 1 acts as 1.
pub fn bundle_from_logits(
    seg_logits: &[f32],
    width: usize,
    height: usize,
    view_logits: &[f32],
    chd_logits: &[f32],
    tau: f64,
    view_source: ViewSource,
    table: &ViewCategoryTable,
) -> Result<PseudoLabelBundle> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("confidence threshold {tau} must be ≥ 0")));
    }
    let tau = tau.min(1.0);
    if seg_logits.len() != SEG_CLASSES * width * height {
        return Err(Error::Dimension(format!(
            "{} seg logits for a {width}×{height} image",
            seg_logits.len()
        )));
    }
    let view_pred = View::from_index(argmax(view_logits))?;
    let mask_view = match view_source {
        ViewSource::Predicted => Some(view_pred),
        ViewSource::Given(v) => Some(v),
        ViewSource::Off => None,
    };
    let mut logits = seg_logits.to_vec();
    if let Some(v) = mask_view {
        apply_hard_mask(&mut logits, v, table)?;
    }
    let (probs, labels, maxp) = softmax_argmax(&logits, SEG_CLASSES);
    Ok(PseudoLabelBundle {
        pw: probs.into_iter().map(|p| p as f32).collect(),
        hard_mask: Mask::new(width, height, labels)?,
        conf: maxp.iter().map(|&p| p >= tau).collect(),
        view_pred,
        mask_view,
        chd_logits: chd_logits.to_vec(),
        chd_pseudo: None,
    })
}

/// Teacher eval-mode forward on the weak view, then masking, argmax and
/// confidence gating.
pub fn generate_pseudo(
    teacher: &MultiTaskNet,
    weak_image: &Tensor,
    tau: f64,
    view_source: ViewSource,
    table: &ViewCategoryTable,
) -> Result<PseudoLabelBundle> {
    let d = weak_image.dims();
    if d.len() != 3 {
        return Err(Error::Dimension(format!("image dims {d:?}, want 1×H×W")));
    }
    let mut g = Graph::<f32>::new();
    let b = teacher.bind(&mut g);
    let x = g.leaf(weak_image);
    let mut rng = rng_stream!(0, "eval");
    let out = teacher.forward(&mut g, &b, x, ForwardOptions::default(), &mut rng)?;
    bundle_from_logits(
        g.value(out.seg),
        d[2],
        d[1],
        g.value(out.view),
        g.value(out.chd),
        tau,
        view_source,
        table,
    )
}

/// CHD pseudo-label from teacher logits; accepted unless a filter verdict
/// says otherwise.
pub fn pseudo_chd_label(chd_logits: &[f32], verdict: Option<Verdict>) -> ChdPseudo {
    ChdPseudo {
        class: argmax(chd_logits),
        accepted: verdict.is_none_or(Verdict::accepted),
    }
}

/// Pseudo-label targets of a CutMix image: `a` outside the box, `b`
/// inside, with the per-region ignore masks kept separate.
#[derive(Debug, Clone)]
pub struct MixedTargets {
    pub targets: Vec<usize>,
    /// Confident pixels kept from `a`.
    pub conf_a: Vec<bool>,
    /// Confident pixels pasted from `b`.
    pub conf_b: Vec<bool>,
    pub lambda: f64,
    pub chd_a: Option<ChdPseudo>,
    pub chd_b: Option<ChdPseudo>,
}

impl MixedTargets {
    pub fn compose(a: &PseudoLabelBundle, b: &PseudoLabelBundle, cut: &CutBox, lambda: f64) -> Result<Self> {
        a.hard_mask.same_dims(&b.hard_mask)?;
        let w = a.hard_mask.width();
        let ta = a.targets();
        let tb = b.targets();
        let targets = cut.compose(&ta, &tb, w);
        let n = targets.len();
        let inside: Vec<bool> = (0..n).map(|i| cut.contains(i % w, i / w)).collect();
        Ok(Self {
            targets,
            conf_a: (0..n).map(|i| !inside[i] && a.conf[i]).collect(),
            conf_b: (0..n).map(|i| inside[i] && b.conf[i]).collect(),
            lambda,
            chd_a: a.chd_pseudo,
            chd_b: b.chd_pseudo,
        })
    }
}

/// Student logits for one unlabeled sample.
#[derive(Debug, Clone, Copy)]
pub struct StudentSeg {
    pub s1: Var,
    pub s2: Var,
    pub fp: Var,
    /// CutMix image logits, when a mixed view is used.
    pub mixed: Option<Var>,
}

fn masked_ce(g: &mut Graph<f32>, logits: Var, targets: &[usize], keep: &[bool], gamma: f64) -> Result<Var> {
    let ignore: Vec<bool> = keep.iter().map(|&k| !k).collect();
    g.classification_loss(logits, Layout::Channels, targets, &ignore, gamma)
}

/// `unsup_s1`, `unsup_s2`, `unsup_fp`, `unsup_focal` and (with a mixed
/// view) `unsup_mixed`. Pseudo-labels are constants; no gradient reaches
/// the teacher.
pub fn unimatch_losses(
    g: &mut Graph<f32>,
    student: &StudentSeg,
    bundle: &PseudoLabelBundle,
    mixed: Option<&MixedTargets>,
    focal_gamma: f64,
) -> Result<Components> {
    let targets = bundle.targets();
    let mut out = Components::new();
    out.insert("unsup_s1", masked_ce(g, student.s1, &targets, &bundle.conf, 0.0)?);
    out.insert("unsup_s2", masked_ce(g, student.s2, &targets, &bundle.conf, 0.0)?);
    out.insert("unsup_fp", masked_ce(g, student.fp, &targets, &bundle.conf, 0.0)?);
    let sum = g.add(student.s1, student.s2)?;
    let fused = g.scale(sum, 0.5);
    out.insert("unsup_focal", masked_ce(g, fused, &targets, &bundle.conf, focal_gamma)?);
    if let (Some(logits), Some(m)) = (student.mixed, mixed) {
        let la = masked_ce(g, logits, &m.targets, &m.conf_a, 0.0)?;
        let lb = masked_ce(g, logits, &m.targets, &m.conf_b, 0.0)?;
        let la = g.scale(la, m.lambda as f32);
        let lb = g.scale(lb, (1.0 - m.lambda) as f32);
        out.insert("unsup_mixed", g.add(la, lb)?);
    }
    Ok(out)
}

fn class_ce(g: &mut Graph<f32>, logits: Var, class: usize, gamma: f64) -> Result<Var> {
    g.classification_loss(logits, Layout::Rows, &[class], &[false], gamma)
}

/// Student CHD logits for one unlabeled sample.
#[derive(Debug, Clone, Copy)]
pub struct StudentChd {
    pub s1: Var,
    pub s2: Var,
    pub mixed: Option<Var>,
}

/// `pl_cls` (mean over the two strong views), `pl_cls_mixed` and
/// `pl_cls_focal_mixed` (λ-weighted over the two parents). Rejected
/// pseudo-labels contribute nothing.
pub fn pseudo_cls_losses(
    g: &mut Graph<f32>,
    student: &StudentChd,
    pseudo: Option<ChdPseudo>,
    mixed: Option<&MixedTargets>,
    focal_gamma: f64,
) -> Result<Components> {
    let mut out = Components::new();
    if let Some(p) = pseudo.filter(|p| p.accepted) {
        let a = class_ce(g, student.s1, p.class, 0.0)?;
        let b = class_ce(g, student.s2, p.class, 0.0)?;
        let s = g.add(a, b)?;
        out.insert("pl_cls", g.scale(s, 0.5));
    }
    if let (Some(logits), Some(m)) = (student.mixed, mixed) {
        let parents = [(m.chd_a, m.lambda), (m.chd_b, 1.0 - m.lambda)];
        for (name, gamma) in [("pl_cls_mixed", 0.0), ("pl_cls_focal_mixed", focal_gamma)] {
            let mut acc: Option<Var> = None;
            for (p, w) in parents {
                let Some(p) = p.filter(|p| p.accepted) else {
                    continue;
                };
                let l = class_ce(g, logits, p.class, gamma)?;
                let l = g.scale(l, w as f32);
                acc = Some(match acc {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            if let Some(v) = acc {
                out.insert(name, v);
            }
        }
    }
    Ok(out)
}
