//! Box-prompted refinement of pseudo-label masks with IoU gating.
//!
//! The loop is: initial mask → per-component boxes → refiner → per-class
//! IoU check against the initial mask. The built-in [`MorphRefiner`] is a
//! deterministic image-driven stand-in for a promptable segmenter.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::anatomask::SEG_CLASSES;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Inclusive pixel bounds of one connected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box {
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Box {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// 4-connected components of the pixels selected by `on`, labelled
/// 1.. in raster order of their first pixel; 0 = not selected.
pub fn label_components(on: &[bool], w: usize, h: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !on[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize] += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if on[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, sizes)
}

/// One box per 4-connected component of each nonzero class with at least
/// `min_area` pixels, ordered by class, then `y0`, then `x0`.
pub fn extract_boxes(mask: &Mask, min_area: usize) -> Result<Vec<Box>> {
    if min_area == 0 {
        return Err(Error::Parameter("min_area must be ≥ 1".into()));
    }
    let (w, h) = (mask.width(), mask.height());
    let mut boxes = Vec::new();
    for class in mask.classes().into_iter().filter(|&c| c != 0) {
        let on: Vec<bool> = mask.data().iter().map(|&c| c == class).collect();
        let (labels, sizes) = label_components(&on, w, h);
        let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); sizes.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let b = &mut bounds[l as usize];
            let (x, y) = (i % w, i / w);
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        let mut found: Vec<Box> = (1..sizes.len())
            .filter(|&l| sizes[l] >= min_area)
            .map(|l| {
                let (x0, y0, x1, y1) = bounds[l];
                Box { class, x0, y0, x1, y1 }
            })
            .collect();
        found.sort_by_key(|b| (b.y0, b.x0));
        boxes.extend(found);
    }
    Ok(boxes)
}

/// A box-prompted mask refiner. Implementations must copy `init`
/// unchanged outside the union of `boxes`.
pub trait Refiner: Send + Sync {
    fn name(&self) -> &str;
    fn refine(&self, sample_id: &str, image: &Tensor, init: &Mask, boxes: &[Box]) -> Result<Mask>;
}

/// Otsu threshold of `values` (256-bin histogram over `[0,1]`). Returns
/// the bin edge maximising between-class variance.
pub fn otsu_threshold(values: &[f32]) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = ((f64::from(v).clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t + 1) as f64 / BINS as f64
}

/// Deterministic refiner: Otsu split inside each box, the largest
/// 4-connected foreground component that overlaps the prompted component,
/// and filling of small enclosed holes.
#[derive(Debug, Clone)]
pub struct MorphRefiner {
    /// Enclosed background regions smaller than this share of the
    /// component area are filled; larger ones (e.g. vessel lumens) stay.
    pub hole_fraction: f64,
}

impl Default for MorphRefiner {
    fn default() -> Self {
        Self { hole_fraction: 0.1 }
    }
}

impl MorphRefiner {
    fn refine_box(&self, image: &[f32], init: &Mask, b: &Box) -> Vec<(usize, usize)> {
        let (bw, bh) = (b.width(), b.height());
        let at = |x: usize, y: usize| (b.x0 + x, b.y0 + y);
        // pixels owned by other classes stay out of the histogram
        let mut usable = vec![false; bw * bh];
        let mut prompt = vec![false; bw * bh];
        let mut values = Vec::with_capacity(bw * bh);
        for y in 0..bh {
            for x in 0..bw {
                let (gx, gy) = at(x, y);
                let c = init.get(gx, gy);
                if c == 0 || c == b.class {
                    usable[y * bw + x] = true;
                    values.push(image[gy * init.width() + gx]);
                }
                prompt[y * bw + x] = c == b.class;
            }
        }
        if values.is_empty() {
            return Vec::new();
        }
        let t = otsu_threshold(&values);
        let bright = |x: usize, y: usize| {
            let (gx, gy) = at(x, y);
            f64::from(image[gy * init.width() + gx]) >= t
        };
        // foreground is whichever side holds most of the prompt
        let (mut up, mut n) = (0usize, 0usize);
        for y in 0..bh {
            for x in 0..bw {
                if prompt[y * bw + x] {
                    n += 1;
                    up += bright(x, y) as usize;
                }
            }
        }
        let want_bright = 2 * up >= n;
        let fg: Vec<bool> = (0..bw * bh)
            .map(|i| usable[i] && bright(i % bw, i / bw) == want_bright)
            .collect();
        let (labels, sizes) = label_components(&fg, bw, bh);
        let mut overlaps = vec![false; sizes.len()];
        for i in 0..bw * bh {
            if prompt[i] {
                overlaps[labels[i] as usize] = true;
            }
        }
        let keep = (1..sizes.len())
            .filter(|&l| overlaps[l])
            .max_by_key(|&l| (sizes[l], std::cmp::Reverse(l)));
        let Some(keep) = keep else {
            return Vec::new();
        };
        let mut region: Vec<bool> = labels.iter().map(|&l| l == keep as u32).collect();

        // holes: background components not touching the box border
        let outside: Vec<bool> = region.iter().map(|&r| !r).collect();
        let (holes, hole_sizes) = label_components(&outside, bw, bh);
        let mut border = vec![false; hole_sizes.len()];
        for y in 0..bh {
            for x in 0..bw {
                if x == 0 || y == 0 || x + 1 == bw || y + 1 == bh {
                    border[holes[y * bw + x] as usize] = true;
                }
            }
        }
        let limit = self.hole_fraction * sizes[keep] as f64;
        for i in 0..bw * bh {
            let l = holes[i] as usize;
            if l != 0 && !border[l] && (hole_sizes[l] as f64) < limit {
                region[i] = true;
            }
        }
        (0..bw * bh)
            .filter(|&i| region[i])
            .map(|i| at(i % bw, i / bw))
            .collect()
    }
}

impl Refiner for MorphRefiner {
    fn name(&self) -> &str {
        "morph"
    }

    fn refine(&self, _sample_id: &str, image: &Tensor, init: &Mask, boxes: &[Box]) -> Result<Mask> {
        check_image(image, init)?;
        let (w, h) = (init.width(), init.height());
        let mut boxed_classes = [false; SEG_CLASSES];
        for b in boxes {
            check_box(b, w, h)?;
            boxed_classes[b.class as usize] = true;
        }
        let mut out = init.clone();
        // clear prompted classes inside their boxes, and stray classes
        // without boxes inside any box
        for b in boxes {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    let c = out.get(x, y);
                    if c == b.class || !boxed_classes[c as usize] {
                        out.set(x, y, 0);
                    }
                }
            }
        }
        for b in boxes {
            for (x, y) in self.refine_box(image.data(), init, b) {
                if out.get(x, y) == 0 {
                    out.set(x, y, b.class);
                }
            }
        }
        Ok(out)
    }
}

fn check_image(image: &Tensor, init: &Mask) -> Result<()> {
    let d = image.dims();
    if d != [1, init.height(), init.width()] {
        return Err(Error::Dimension(format!(
            "image dims {d:?} vs mask {}×{}",
            init.width(),
            init.height()
        )));
    }
    Ok(())
}

fn check_box(b: &Box, w: usize, h: usize) -> Result<()> {
    if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= w || b.y1 >= h || b.class as usize >= SEG_CLASSES {
        return Err(Error::Parameter(format!("invalid box {b:?} for {w}×{h} mask")));
    }
    Ok(())
}

/// Test refiner that pastes ground truth inside the boxes.
#[cfg(any(test, feature = "test-oracles"))]
pub struct OracleRefiner {
    truth: std::collections::HashMap<String, Mask>,
}

#[cfg(any(test, feature = "test-oracles"))]
impl OracleRefiner {
    pub fn new(truth: impl IntoIterator<Item = (String, Mask)>) -> Self {
        Self {
            truth: truth.into_iter().collect(),
        }
    }
}

#[cfg(any(test, feature = "test-oracles"))]
impl Refiner for OracleRefiner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn refine(&self, sample_id: &str, image: &Tensor, init: &Mask, boxes: &[Box]) -> Result<Mask> {
        check_image(image, init)?;
        let truth = self
            .truth
            .get(sample_id)
            .ok_or_else(|| Error::Structural(format!("no ground truth for {sample_id}")))?;
        init.same_dims(truth)?;
        let mut out = init.clone();
        for b in boxes {
            check_box(b, init.width(), init.height())?;
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    out.set(x, y, truth.get(x, y));
                }
            }
        }
        Ok(out)
    }
}

/// `|a==c ∩ b==c| / |a==c ∪ b==c|`, 1 when both regions are empty.
pub fn iou(a: &Mask, b: &Mask, class: u8) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let (ip, iq) = (p == class, q == class);
        inter += (ip && iq) as usize;
        union += (ip || iq) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Adopt each class region independently.
    #[default]
    PerClass,
    /// Adopt the whole refined mask iff the mean IoU over present classes
    /// clears the threshold.
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDecision {
    pub class: u8,
    pub iou: f64,
    pub adopted: bool,
}

#[derive(Debug, Clone)]
pub struct GateResult {
    pub mask: Mask,
    pub decisions: Vec<ClassDecision>,
    /// Pixels claimed by more than one selected region; the lowest class
    /// wins each of them.
    pub conflicts: usize,
}

impl GateResult {
    pub fn adopted(&self, class: u8) -> bool {
        self.decisions.iter().any(|d| d.class == class && d.adopted)
    }
}

/// Select, per class, the refined or the initial region. Thresholds above
/// 1 behave as 1 (exact match only).
pub fn iou_gate(init: &Mask, refined: &Mask, theta: f64, mode: GateMode) -> Result<GateResult> {
    init.same_dims(refined)?;
    if !(theta >= 0.0) {
        return Err(Error::Parameter(format!("IoU threshold {theta} must be ≥ 0")));
    }
    let theta = theta.min(1.0);
    let mut classes: Vec<u8> = init.classes();
    classes.extend(refined.classes());
    classes.sort_unstable();
    classes.dedup();
    classes.retain(|&c| c != 0);
    let mut decisions = classes
        .iter()
        .map(|&c| {
            Ok(ClassDecision {
                class: c,
                iou: iou(init, refined, c)?,
                adopted: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match mode {
        GateMode::PerClass => decisions.iter_mut().for_each(|d| d.adopted = d.iou >= theta),
        GateMode::Whole => {
            let adopt = decisions.is_empty()
                || decisions.iter().map(|d| d.iou).sum::<f64>() / decisions.len() as f64 >= theta;
            decisions.iter_mut().for_each(|d| d.adopted = adopt);
        }
    }
    let mut mask = Mask::empty(init.width(), init.height());
    let mut conflicts = 0;
    for d in &decisions {
        let src = if d.adopted { refined } else { init };
        for (i, &c) in src.data().iter().enumerate() {
            if c != d.class {
                continue;
            }
            let cur = &mut mask.data_mut()[i];
            if *cur == 0 {
                *cur = d.class;
            } else {
                conflicts += 1;
            }
        }
    }
    Ok(GateResult {
        mask,
        decisions,
        conflicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub min_area: usize,
    pub theta_iou: f64,
    pub mode: GateMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            min_area: 4,
            theta_iou: 0.5,
            mode: GateMode::PerClass,
        }
    }
}

/// One row of the refinement audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub sample_id: String,
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub iou: f64,
    pub adopted: bool,
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub mask: Mask,
    pub boxes: Vec<Box>,
    pub gate: GateResult,
}

impl Refinement {
    pub fn audit(&self, sample_id: &str) -> Vec<AuditRow> {
        self.boxes
            .iter()
            .map(|b| {
                let d = self.gate.decisions.iter().find(|d| d.class == b.class);
                AuditRow {
                    sample_id: sample_id.to_string(),
                    class: b.class,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                    iou: d.map_or(1.0, |d| d.iou),
                    adopted: d.is_some_and(|d| d.adopted),
                }
            })
            .collect()
    }
}

/// Full loop: boxes from `init`, refine, gate.
pub fn refine_mask(
    refiner: &dyn Refiner,
    sample_id: &str,
    image: &Tensor,
    init: &Mask,
    config: &RefineConfig,
) -> Result<Refinement> {
    let boxes = extract_boxes(init, config.min_area)?;
    let refined = refiner.refine(sample_id, image, init, &boxes)?;
    let gate = iou_gate(init, &refined, config.theta_iou, config.mode)?;
    Ok(Refinement {
        mask: gate.mask.clone(),
        boxes,
        gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomask::View;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> Mask {
        Mask::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    #[test]
    fn rectangle_gives_its_bounds() {
        let m = mask_from(10, 8, |x, y| if (2..=5).contains(&x) && (3..=6).contains(&y) { 3 } else { 0 });
        let b = extract_boxes(&m, 1).unwrap();
        assert_eq!(b, vec![Box { class: 3, x0: 2, y0: 3, x1: 5, y1: 6 }]);
        assert!(extract_boxes(&Mask::empty(4, 4), 1).unwrap().is_empty());
        assert!(extract_boxes(&m, 0).is_err());
    }

    #[test]
    fn diagonal_squares_are_separate() {
        let m = mask_from(6, 6, |x, y| ((x < 2 && y < 2) || ((2..4).contains(&x) && (2..4).contains(&y))) as u8);
        let b = extract_boxes(&m, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].x0, b[0].y0, b[1].x0, b[1].y0), (0, 0, 2, 2));
    }

    #[test]
    fn min_area_and_order() {
        let m = mask_from(8, 8, |x, y| match (x, y) {
            (0, 0) => 2,
            (6..=7, 6..=7) => 1,
            (4..=5, 0..=1) => 2,
            _ => 0,
        });
        let b = extract_boxes(&m, 2).unwrap();
        let keys: Vec<_> = b.iter().map(|b| (b.class, b.y0, b.x0)).collect();
        assert_eq!(keys, vec![(1, 6, 6), (2, 0, 4)]);
    }

    #[test]
    fn iou_examples() {
        let a = mask_from(6, 6, |x, y| (x < 2 && y < 2) as u8);
        let b = mask_from(6, 6, |x, y| (x < 4 && y < 2) as u8);
        assert_eq!(iou(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        let c = mask_from(6, 6, |x, y| (x >= 4 && y >= 4) as u8);
        assert_eq!(iou(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(iou(&a, &c, 9).unwrap(), 1.0);
    }

    #[test]
    fn morph_refiner_is_idempotent_on_clean_phantoms() {
        let r = MorphRefiner::default();
        for seed in 0..40u64 {
            let view = View::ALL[(seed % 4) as usize];
            let s = generate_phantom(seed, view, (seed % 7) as usize, &PhantomConfig::clean(64)).unwrap();
            let boxes = extract_boxes(&s.mask, 4).unwrap();
            let out = r.refine(&s.id, &s.image, &s.mask, &boxes).unwrap();
            assert_eq!(out, s.mask, "seed {seed}");
        }
    }

    #[test]
    fn empty_box_list_is_identity() {
        let s = generate_phantom(1, View::Lvot, 0, &PhantomConfig::default()).unwrap();
        let out = MorphRefiner::default().refine(&s.id, &s.image, &s.mask, &[]).unwrap();
        assert_eq!(out, s.mask);
    }

    #[test]
    fn refinement_repairs_a_dilated_prompt() {
        let s = generate_phantom(3, View::FourChamber, 0, &PhantomConfig::clean(64)).unwrap();
        let c = s.mask.classes()[1];
        // grow class c by one pixel into the background
        let mut init = s.mask.clone();
        for y in 1..63 {
            for x in 1..63 {
                if s.mask.get(x, y) == 0 && [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|&(u, v)| s.mask.get(u, v) == c) {
                    init.set(x, y, c);
                }
            }
        }
        let r = refine_mask(&MorphRefiner::default(), &s.id, &s.image, &init, &RefineConfig::default()).unwrap();
        assert!(iou(&r.mask, &s.mask, c).unwrap() > iou(&init, &s.mask, c).unwrap());
        assert!(r.gate.adopted(c));
    }

    #[test]
    fn background_box_shrinks_region() {
        // uniform image: the prompt cannot grow, only keep what Otsu allows
        let image = Tensor::full(&[1, 8, 8], 0.2).unwrap();
        let init = mask_from(8, 8, |x, y| ((2..6).contains(&x) && (2..6).contains(&y)) as u8);
        let boxes = extract_boxes(&init, 1).unwrap();
        let out = MorphRefiner::default().refine("s", &image, &init, &boxes).unwrap();
        assert!(out.count(1) <= init.count(1));
        for y in 0..8 {
            for x in 0..8 {
                if !boxes[0].contains(x, y) {
                    assert_eq!(out.get(x, y), init.get(x, y));
                }
            }
        }
    }

    #[test]
    fn gate_rules() {
        let init = mask_from(6, 6, |x, y| (x < 2 && y < 2) as u8);
        let same = iou_gate(&init, &init, 0.5, GateMode::PerClass).unwrap();
        assert_eq!(same.mask, init);
        assert!(same.adopted(1));

        let far = mask_from(6, 6, |x, y| (x >= 4 && y >= 4) as u8);
        let g = iou_gate(&init, &far, 0.5, GateMode::PerClass).unwrap();
        assert_eq!(g.mask, init);
        assert!(!g.adopted(1));

        let wider = mask_from(6, 6, |x, y| (x < 4 && y < 2) as u8);
        let g = iou_gate(&init, &wider, 0.5, GateMode::PerClass).unwrap();
        assert!(g.adopted(1), "IoU exactly at threshold is adopted");
        assert_eq!(g.mask, wider);

        let g = iou_gate(&init, &wider, 0.0, GateMode::PerClass).unwrap();
        assert_eq!(g.mask, wider);
        let g = iou_gate(&init, &wider, 1.5, GateMode::PerClass).unwrap();
        assert_eq!(g.mask, init);
        assert!(iou_gate(&init, &wider, -0.1, GateMode::PerClass).is_err());
    }

    #[test]
    fn gate_conflicts_resolve_to_lowest_class() {
        let init = mask_from(4, 1, |x, _| [1, 1, 0, 2][x]);
        // class 2 grows onto pixel 1 and keeps IoU 0.5; class 1 kept as-is
        let refined = mask_from(4, 1, |x, _| [1, 2, 0, 2][x]);
        let g = iou_gate(&init, &refined, 0.5, GateMode::PerClass).unwrap();
        assert!(g.adopted(1) && g.adopted(2));
        assert_eq!(g.mask.data(), &[1, 2, 0, 2]);
        // class 1 grows (IoU 0.75, adopted) onto pixel 3; class 2 is kept
        // from init (IoU 0) and still claims pixel 3
        let init = mask_from(6, 1, |x, _| [1, 1, 1, 2, 2, 0][x]);
        let refined = mask_from(6, 1, |x, _| [1, 1, 1, 1, 0, 0][x]);
        let g = iou_gate(&init, &refined, 0.7, GateMode::PerClass).unwrap();
        assert!(g.adopted(1) && !g.adopted(2));
        assert_eq!(g.conflicts, 1);
        assert_eq!(g.mask.data(), &[1, 1, 1, 1, 2, 0]);
    }

    #[test]
    fn whole_mode_is_all_or_nothing() {
        let init = mask_from(4, 1, |x, _| [1, 1, 0, 2][x]);
        let refined = mask_from(4, 1, |x, _| [1, 0, 0, 0][x]);
        // IoUs 0.5 and 0: mean 0.25
        let g = iou_gate(&init, &refined, 0.3, GateMode::Whole).unwrap();
        assert_eq!(g.mask, init);
        let g = iou_gate(&init, &refined, 0.25, GateMode::Whole).unwrap();
        assert_eq!(g.mask, refined);
    }

    #[test]
    fn oracle_pastes_truth() {
        let s = generate_phantom(2, View::Rvot, 1, &PhantomConfig::default()).unwrap();
        let init = Mask::empty(64, 64);
        let b = Box { class: 1, x0: 0, y0: 0, x1: 63, y1: 63 };
        let o = OracleRefiner::new([(s.id.clone(), s.mask.clone())]);
        assert_eq!(o.refine(&s.id, &s.image, &init, &[b]).unwrap(), s.mask);
    }
}
