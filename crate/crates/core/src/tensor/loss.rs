use super::graph::Op;
use super::{Elem, Graph, Var};
use crate::error::{Error, Result};

/// Where the class axis sits in a logits tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `N×K`: one row of class scores per element.
    Rows,
    /// `K×H×W`: class-major planes; elements are the `H·W` pixels.
    Channels,
}

pub(crate) struct CrossEntropyCache {
    classes: usize,
    elements: usize,
    layout: Layout,
    targets: Vec<usize>,
    active: Vec<bool>,
    gamma: f64,
    count: usize,
    // softmax probabilities, indexed like the logits
    probs: Vec<f64>,
    // per-element -log p_t
    nll: Vec<f64>,
}

impl CrossEntropyCache {
    fn at(&self, i: usize, k: usize) -> usize {
        match self.layout {
            Layout::Rows => i * self.classes + k,
            Layout::Channels => k * self.elements + i,
        }
    }

    pub(crate) fn backward<E: Elem>(&self, upstream: E, out: &mut [E]) {
        if self.count == 0 {
            return;
        }
        let scale = upstream.widen() / self.count as f64;
        for i in 0..self.elements {
            if !self.active[i] {
                continue;
            }
            let t = self.targets[i];
            let pt = self.probs[self.at(i, t)];
            let factor = if self.gamma == 0.0 {
                1.0
            } else {
                let q = 1.0 - pt;
                if q <= 0.0 {
                    0.0
                } else {
                    q.powf(self.gamma) + self.gamma * pt * q.powf(self.gamma - 1.0) * self.nll[i]
                }
            };
            for k in 0..self.classes {
                let idx = self.at(i, k);
                let delta = if k == t { 1.0 } else { 0.0 };
                let gv = scale * factor * (self.probs[idx] - delta);
                out[idx] = out[idx] + E::lit(gv);
            }
        }
    }
}

impl<E: Elem> Graph<E> {
    /// Mean negative log-softmax over the unignored elements of `N×K`
    /// logits. Returns exactly 0 when every element is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        self.classification_loss(logits, Layout::Rows, targets, ignore, 0.0)
    }

    /// Focal loss `(1-p_t)^gamma · (-log p_t)`, averaged like
    /// [`Graph::softmax_cross_entropy`]. `gamma = 0` is plain cross-entropy.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, ignore: &[bool]) -> Result<Var> {
        self.classification_loss(logits, Layout::Rows, targets, ignore, gamma)
    }

    /// Cross-entropy / focal loss over any supported logits layout.
    pub fn classification_loss(
        &mut self,
        logits: Var,
        layout: Layout,
        targets: &[usize],
        ignore: &[bool],
        gamma: f64,
    ) -> Result<Var> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("focal gamma {gamma} must be finite and ≥ 0")));
        }
        let dims = self.dims(logits).to_vec();
        let (elements, classes) = match (layout, dims.len()) {
            (Layout::Rows, 2) => (dims[0], dims[1]),
            (Layout::Rows, 1) => (1, dims[0]),
            (Layout::Channels, 3) => (dims[1] * dims[2], dims[0]),
            _ => {
                return Err(Error::Dimension(format!(
                    "logits dims {dims:?} do not match layout {layout:?}"
                )))
            }
        };
        if targets.len() != elements || ignore.len() != elements {
            return Err(Error::Dimension(format!(
                "{elements} elements but {} targets / {} ignore flags",
                targets.len(),
                ignore.len()
            )));
        }
        let active: Vec<bool> = ignore.iter().map(|&i| !i).collect();
        for (i, (&t, &a)) in targets.iter().zip(&active).enumerate() {
            if a && t >= classes {
                return Err(Error::Index(format!(
                    "target {t} at element {i} outside [0,{classes})"
                )));
            }
        }
        let mut cache = CrossEntropyCache {
            classes,
            elements,
            layout,
            targets: targets.to_vec(),
            active,
            gamma,
            count: 0,
            probs: vec![0.0; elements * classes],
            nll: vec![0.0; elements],
        };
        let values = self.value(logits);
        let mut total = 0.0f64;
        for i in 0..elements {
            if !cache.active[i] {
                continue;
            }
            cache.count += 1;
            let mut max = f64::NEG_INFINITY;
            for k in 0..classes {
                max = max.max(values[cache.at(i, k)].widen());
            }
            let mut z = 0.0;
            for k in 0..classes {
                let idx = cache.at(i, k);
                let e = (values[idx].widen() - max).exp();
                cache.probs[idx] = e;
                z += e;
            }
            for k in 0..classes {
                let idx = cache.at(i, k);
                cache.probs[idx] /= z;
            }
            let t = targets[i];
            let nll = z.ln() - (values[cache.at(i, t)].widen() - max);
            cache.nll[i] = nll;
            let weight = if gamma == 0.0 {
                1.0
            } else {
                (1.0 - cache.probs[cache.at(i, t)]).max(0.0).powf(gamma)
            };
            total += weight * nll;
        }
        let loss = if cache.count == 0 {
            0.0
        } else {
            total / cache.count as f64
        };
        let needs = self.needs_grad(logits);
        Ok(self.push(
            vec![1],
            vec![E::lit(loss)],
            needs,
            Op::CrossEntropy { logits, cache },
        ))
    }
}
