//! Prototype filtering of CHD pseudo-labels against an external embedder,
//! and the frozen-embedding probe head.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CHD_CLASSES;
use crate::optim::{adamw_step, AdamW, Moments};
use crate::tensor::{Graph, Layout, Tensor};

/// Tolerance on the unit norm of embedder outputs.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Maps an image to a unit-norm vector of fixed dimension.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, id: &str, image: &Tensor) -> Result<Vec<f32>>;
    /// Fingerprint of the embedder's fixed parameters.
    fn fingerprint(&self) -> u32;
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numerical(format!("cannot normalise a vector of norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Area-average a `1×H×W` image down to `side×side`. `H` and `W` must be
/// multiples of `side`.
pub fn area_downsample(image: &Tensor, side: usize) -> Result<Vec<f64>> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 1 || d[1] % side != 0 || d[2] % side != 0 {
        return Err(Error::Dimension(format!(
            "image dims {d:?} must be 1×H×W with H, W multiples of {side}"
        )));
    }
    let (h, w) = (d[1], d[2]);
    let (fy, fx) = (h / side, w / side);
    let mut out = vec![0.0; side * side];
    for y in 0..h {
        for x in 0..w {
            out[(y / fy) * side + x / fx] += f64::from(image.data()[y * w + x]);
        }
    }
    let area = (fx * fy) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Fixed Gaussian random projection of a 16×16 area-downsampled image,
/// L2-normalised.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
    projection: Vec<f32>,
}

impl StubEmbedder {
    pub const SIDE: usize = 16;

    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = rng_stream!(seed, "stub-embedder");
        let n = dim * Self::SIDE * Self::SIDE;
        let scale = 1.0 / ((Self::SIDE * Self::SIDE) as f64).sqrt();
        let projection = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Ok(Self { dim, projection })
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _id: &str, image: &Tensor) -> Result<Vec<f32>> {
        let x = area_downsample(image, Self::SIDE)?;
        let k = x.len();
        let mut out: Vec<f64> = (0..self.dim)
            .map(|r| {
                self.projection[r * k..(r + 1) * k]
                    .iter()
                    .zip(&x)
                    .map(|(&p, &v)| f64::from(p) * v)
                    .sum()
            })
            .collect();
        normalize(&mut out)?;
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    fn fingerprint(&self) -> u32 {
        let bytes: Vec<u8> = self.projection.iter().flat_map(|v| v.to_le_bytes()).collect();
        crc32fast::hash(&bytes)
    }
}

/// Embeddings precomputed offline, looked up by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl CacheEmbedder {
    pub fn new(records: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = records.first().map(|r| r.1.len()).ok_or_else(|| Error::Config("empty embedding cache".into()))?;
        let mut table = HashMap::new();
        for (id, v) in records {
            if v.len() != dim {
                return Err(Error::Dimension(format!("{id}: embedding of {} values, cache dim {dim}", v.len())));
            }
            if table.insert(id.clone(), v).is_some() {
                return Err(Error::Structural(format!("duplicate cache id {id}")));
            }
        }
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_cache(path)?)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Embedder for CacheEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, id: &str, _image: &Tensor) -> Result<Vec<f32>> {
        self.table
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Structural(format!("no cached embedding for {id}")))
    }

    fn fingerprint(&self) -> u32 {
        let mut ids: Vec<&String> = self.table.keys().collect();
        ids.sort();
        let mut h = crc32fast::Hasher::new();
        for id in ids {
            h.update(id.as_bytes());
            for v in &self.table[id] {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Test embedder returning the one-hot direction of each sample's true
/// CHD class.
#[cfg(any(test, feature = "test-oracles"))]
pub struct OracleEmbedder {
    dim: usize,
    classes: HashMap<String, usize>,
}

#[cfg(any(test, feature = "test-oracles"))]
impl OracleEmbedder {
    pub fn new(dim: usize, classes: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        if dim < CHD_CLASSES {
            return Err(Error::Config(format!("oracle embedder needs dim ≥ {CHD_CLASSES}")));
        }
        Ok(Self {
            dim,
            classes: classes.into_iter().collect(),
        })
    }
}

#[cfg(any(test, feature = "test-oracles"))]
impl Embedder for OracleEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, id: &str, _image: &Tensor) -> Result<Vec<f32>> {
        let c = *self
            .classes
            .get(id)
            .ok_or_else(|| Error::Structural(format!("no ground truth for {id}")))?;
        let mut v = vec![0.0; self.dim];
        v[c] = 1.0;
        Ok(v)
    }

    fn fingerprint(&self) -> u32 {
        0
    }
}

/// Cache records: `u16` id length, UTF-8 id, `u32` D, then D `f32`, all
/// little-endian.
pub fn encode_cache(records: &[(String, Vec<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (id, v) in records {
        let len = u16::try_from(id.len()).map_err(|_| Error::Parameter(format!("id {id} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cache(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
    let mut pos = 0;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::parse(path, *pos, format!("truncated record: need {n} bytes")))?;
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let start = pos;
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let id_at = pos;
        let id = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| Error::parse(path, id_at, "id is not UTF-8"))?
            .to_string();
        let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let nbytes = d.checked_mul(4).ok_or_else(|| Error::parse(path, pos, "dimension overflow"))?;
        let raw = take(&mut pos, nbytes)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::parse(path, start, format!("embedding for {id} has norm {norm}")));
        }
        records.push((id, v));
    }
    Ok(records)
}

pub fn write_cache(path: &Path, records: &[(String, Vec<f32>)]) -> Result<()> {
    fs::write(path, encode_cache(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeState {
    Present,
    /// No members in the labeled set.
    Absent,
    /// Members cancel out (mean norm < 1e-8).
    Degenerate,
}

/// Unit-norm class-mean embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub dim: usize,
    pub prototypes: Vec<Option<Vec<f32>>>,
    pub counts: Vec<usize>,
    pub states: Vec<PrototypeState>,
}

impl PrototypeBank {
    pub fn present(&self) -> usize {
        self.prototypes.iter().filter(|p| p.is_some()).count()
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }
}

/// Class means of the member embeddings, renormalised.
pub fn build_prototypes(embeddings: &[Vec<f32>], labels: &[usize], n_classes: usize) -> Result<PrototypeBank> {
    if embeddings.is_empty() {
        return Err(Error::Config("no embeddings to build prototypes from".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    let dim = embeddings[0].len();
    let mut sums = vec![vec![0.0f64; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (e, &l) in embeddings.iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::Index(format!("label {l} outside [0,{n_classes})")));
        }
        if e.len() != dim {
            return Err(Error::Dimension(format!("embedding of {} values, expected {dim}", e.len())));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(e) {
            *s += f64::from(v);
        }
    }
    let mut prototypes = Vec::with_capacity(n_classes);
    let mut states = Vec::with_capacity(n_classes);
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n == 0 {
            prototypes.push(None);
            states.push(PrototypeState::Absent);
            continue;
        }
        sum.iter_mut().for_each(|v| *v /= n as f64);
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            prototypes.push(None);
            states.push(PrototypeState::Degenerate);
            continue;
        }
        prototypes.push(Some(sum.iter().map(|v| (v / norm) as f32).collect()));
        states.push(PrototypeState::Present);
    }
    Ok(PrototypeBank {
        dim,
        prototypes,
        counts,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    BelowThreshold,
    PrototypeMismatch,
    ClassAbsent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn accepted(self) -> bool {
        self == Verdict::Accept
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Reject(RejectReason::BelowThreshold) => "below-threshold",
            Verdict::Reject(RejectReason::PrototypeMismatch) => "prototype-mismatch",
            Verdict::Reject(RejectReason::ClassAbsent) => "class-absent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Threshold and agreement with the most similar prototype.
    #[default]
    Dual,
    ThresholdOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutcome {
    pub verdict: Verdict,
    /// Cosine to the pseudo-class prototype (NaN when it is absent).
    pub cosine: f64,
    /// Most similar present prototype, lowest index on ties.
    pub nearest: Option<usize>,
}

fn cosines(embedding: &[f32], bank: &PrototypeBank) -> Result<Vec<Option<f64>>> {
    if embedding.len() != bank.dim {
        return Err(Error::Dimension(format!("embedding of {} values, bank dim {}", embedding.len(), bank.dim)));
    }
    let norm = embedding.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Numerical("zero embedding".into()));
    }
    Ok(bank
        .prototypes
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                p.iter().zip(embedding).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>() / norm
            })
        })
        .collect())
}

/// Accept a CHD pseudo-label when its embedding is close enough to the
/// class prototype and (in dual mode) that prototype is the nearest one.
pub fn filter_pseudo(
    embedding: &[f32],
    pseudo_class: usize,
    bank: &PrototypeBank,
    theta_cos: f64,
    mode: FilterMode,
) -> Result<FilterOutcome> {
    if pseudo_class >= bank.n_classes() {
        return Err(Error::Index(format!("pseudo class {pseudo_class} outside [0,{})", bank.n_classes())));
    }
    let cos = cosines(embedding, bank)?;
    let mut nearest: Option<(usize, f64)> = None;
    for (k, c) in cos.iter().enumerate() {
        if let Some(c) = *c {
            if nearest.is_none_or(|(_, best)| c > best) {
                nearest = Some((k, c));
            }
        }
    }
    let nearest_class = nearest.map(|n| n.0);
    let Some(cosine) = cos[pseudo_class] else {
        return Ok(FilterOutcome {
            verdict: Verdict::Reject(RejectReason::ClassAbsent),
            cosine: f64::NAN,
            nearest: nearest_class,
        });
    };
    let verdict = if cosine < theta_cos {
        Verdict::Reject(RejectReason::BelowThreshold)
    } else if mode == FilterMode::Dual && nearest_class != Some(pseudo_class) {
        Verdict::Reject(RejectReason::PrototypeMismatch)
    } else {
        Verdict::Accept
    };
    Ok(FilterOutcome {
        verdict,
        cosine,
        nearest: nearest_class,
    })
}

/// Filter audit record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterAuditRow {
    pub step: u64,
    pub sample_id: String,
    pub pseudo_class: usize,
    pub cosine: f64,
    pub nearest: Option<usize>,
    pub verdict: &'static str,
    pub probe_class: Option<usize>,
}

/// Linear `D → 7` classifier over frozen embeddings.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProbeHead {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_stream!(seed, "probe");
        let std = (1.0 / dim as f64).sqrt();
        let w = (0..CHD_CLASSES * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        let mut weight = Tensor::new(&[CHD_CLASSES, dim], w)?;
        let mut bias = Tensor::zeros(&[CHD_CLASSES])?;
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Ok(Self { weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn logits(&self, embedding: &[f32]) -> Result<Vec<f32>> {
        let d = self.dim();
        if embedding.len() != d {
            return Err(Error::Dimension(format!("embedding of {} values, probe dim {d}", embedding.len())));
        }
        let w = self.weight.data();
        Ok((0..CHD_CLASSES)
            .map(|k| {
                let s: f64 = w[k * d..(k + 1) * d]
                    .iter()
                    .zip(embedding)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                (s + f64::from(self.bias.data()[k])) as f32
            })
            .collect())
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, embedding: &[f32]) -> Result<usize> {
        let l = self.logits(embedding)?;
        Ok(argmax(&l))
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Full-batch AdamW training of a probe on fixed embeddings. The
/// embeddings are only read.
pub fn train_probe_on(embeddings: &[Vec<f32>], labels: &[usize], config: &ProbeConfig) -> Result<ProbeHead> {
    if embeddings.is_empty() {
        return Err(Error::Config("probe needs at least one labeled embedding".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    let dim = embeddings[0].len();
    let n = embeddings.len();
    let flat: Vec<f32> = embeddings.iter().flatten().copied().collect();
    if flat.len() != n * dim {
        return Err(Error::Dimension("embeddings differ in dimension".into()));
    }
    let x = Tensor::new(&[n, dim], flat)?;
    let mut head = ProbeHead::new(dim, config.seed)?;
    let hp = AdamW::default();
    let mut mw = Moments::zeros(head.weight.numel());
    let mut mb = Moments::zeros(head.bias.numel());
    let ignore = vec![false; n];
    for step in 1..=config.epochs as u64 {
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(&x);
        let w = g.leaf(&head.weight);
        let b = g.leaf(&head.bias);
        let logits = g.linear(xv, w, b)?;
        let loss = g.classification_loss(logits, Layout::Rows, labels, &ignore, 0.0)?;
        let mut grads = g.backward(loss)?;
        let gw = grads.take(w).expect("weight is tracked");
        let gb = grads.take(b).expect("bias is tracked");
        adamw_step(&mut head.weight, &gw, &mut mw, step, config.lr, &hp)?;
        adamw_step(&mut head.bias, &gb, &mut mb, step, config.lr, &hp)?;
    }
    Ok(head)
}

/// Embed `samples` with `embedder`, then train a probe on them.
pub fn train_probe(
    embedder: &dyn Embedder,
    samples: &[&crate::phantom::Sample],
    config: &ProbeConfig,
) -> Result<(ProbeHead, Vec<Vec<f32>>)> {
    let embeddings = samples
        .iter()
        .map(|s| embedder.embed(&s.id, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.chd).collect();
    let head = train_probe_on(&embeddings, &labels, config)?;
    Ok((head, embeddings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomask::View;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn bank(protos: &[&[f32]]) -> PrototypeBank {
        let e: Vec<Vec<f32>> = protos.iter().map(|p| unit(p)).collect();
        let l: Vec<usize> = (0..e.len()).collect();
        build_prototypes(&e, &l, e.len()).unwrap()
    }

    #[test]
    fn stub_embeddings_are_unit_and_seeded() {
        let s = generate_phantom(1, View::FourChamber, 0, &PhantomConfig::default()).unwrap();
        let a = StubEmbedder::new(3, 64).unwrap();
        let e = a.embed(&s.id, &s.image).unwrap();
        assert_eq!(e.len(), 64);
        let n: f64 = e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= UNIT_NORM_TOL);
        let b = StubEmbedder::new(3, 64).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(e, b.embed(&s.id, &s.image).unwrap());
        assert_ne!(a.fingerprint(), StubEmbedder::new(4, 64).unwrap().fingerprint());
    }

    #[test]
    fn single_members_are_their_own_prototypes() {
        let e = vec![unit(&[1.0, 2.0]), unit(&[-3.0, 1.0])];
        let b = build_prototypes(&e, &[0, 1], 2).unwrap();
        assert_eq!(b.prototypes[0].as_ref().unwrap(), &e[0]);
        let twice = build_prototypes(&[e[0].clone(), e[0].clone()], &[0, 0], 1).unwrap();
        for (p, q) in twice.prototypes[0].as_ref().unwrap().iter().zip(&e[0]) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn antipodal_members_are_degenerate() {
        let e = vec![vec![0.6, 0.8], vec![-0.6, -0.8], vec![1.0, 0.0]];
        let b = build_prototypes(&e, &[0, 0, 1], 3).unwrap();
        assert_eq!(b.states, vec![PrototypeState::Degenerate, PrototypeState::Present, PrototypeState::Absent]);
        let v = filter_pseudo(&[1.0, 0.0], 0, &b, 0.0, FilterMode::Dual).unwrap();
        assert_eq!(v.verdict, Verdict::Reject(RejectReason::ClassAbsent));
        assert!(build_prototypes(&[], &[], 7).is_err());
    }

    #[test]
    fn filter_examples() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(filter_pseudo(&[1.0, 0.0], 0, &b, 1.0, FilterMode::Dual).unwrap().verdict.accepted());
        assert_eq!(
            filter_pseudo(&[0.0, 1.0], 0, &b, 0.7, FilterMode::Dual).unwrap().verdict,
            Verdict::Reject(RejectReason::BelowThreshold)
        );
        let o = filter_pseudo(&unit(&[0.8, 0.6]), 0, &b, 0.7, FilterMode::Dual).unwrap();
        assert!(o.verdict.accepted());
        assert!((o.cosine - 0.8).abs() < 1e-6);
        // scale invariance
        let o2 = filter_pseudo(&[8.0, 6.0], 0, &b, 0.7, FilterMode::Dual).unwrap();
        assert!((o.cosine - o2.cosine).abs() < 1e-6);
        assert!(filter_pseudo(&[1.0, 0.0], 2, &b, 0.7, FilterMode::Dual).is_err());
    }

    #[test]
    fn dual_mode_requires_nearest_prototype() {
        let b = bank(&[&[1.0, 0.0], &[0.8, 0.6]]);
        let e = unit(&[0.9, 0.45]);
        assert_eq!(
            filter_pseudo(&e, 0, &b, 0.5, FilterMode::Dual).unwrap().verdict,
            Verdict::Reject(RejectReason::PrototypeMismatch)
        );
        assert!(filter_pseudo(&e, 0, &b, 0.5, FilterMode::ThresholdOnly).unwrap().verdict.accepted());
    }

    #[test]
    fn cache_roundtrip_and_errors() {
        let recs = vec![("a".to_string(), unit(&[1.0, 1.0])), ("bb".to_string(), vec![0.0, 1.0])];
        let bytes = encode_cache(&recs).unwrap();
        let p = Path::new("c.bin");
        assert_eq!(decode_cache(p, &bytes).unwrap(), recs);
        assert!(matches!(decode_cache(p, &bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));
        let bad = encode_cache(&[("x".to_string(), vec![2.0, 0.0])]).unwrap();
        assert!(matches!(decode_cache(p, &bad), Err(Error::Parse { offset: 0, .. })));
        let c = CacheEmbedder::new(recs).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]).unwrap();
        assert_eq!(c.embed("bb", &img).unwrap(), vec![0.0, 1.0]);
        assert!(c.embed("zz", &img).is_err());
    }

    #[test]
    fn probe_separates_separable_embeddings() {
        let mut e = Vec::new();
        let mut l = Vec::new();
        for k in 0..CHD_CLASSES {
            for j in 0..4 {
                let mut v = vec![0.05 * j as f32; 8];
                v[k] = 1.0;
                e.push(unit(&v));
                l.push(k);
            }
        }
        let before = e.clone();
        let head = train_probe_on(&e, &l, &ProbeConfig { epochs: 300, lr: 0.05, seed: 1 }).unwrap();
        let correct = e.iter().zip(&l).filter(|(x, &y)| head.predict(x).unwrap() == y).count();
        assert_eq!(correct, e.len());
        assert_eq!(e, before);
    }

    #[test]
    fn zero_lr_probe_is_untouched() {
        let e = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let cfg = ProbeConfig { epochs: 5, lr: 0.0, seed: 9 };
        let head = train_probe_on(&e, &[0, 1], &cfg).unwrap();
        let init = ProbeHead::new(3, 9).unwrap();
        assert!(head.weight.bits_eq(&init.weight));
        assert!(head.bias.bits_eq(&init.bias));
    }

    #[test]
    fn probe_training_leaves_embedder_unchanged() {
        let emb = StubEmbedder::new(5, 16).unwrap();
        let before = emb.fingerprint();
        let s: Vec<_> = (0..6)
            .map(|i| generate_phantom(i, View::ALL[(i % 4) as usize], (i % 7) as usize, &PhantomConfig::default()).unwrap())
            .collect();
        let refs: Vec<_> = s.iter().collect();
        train_probe(&emb, &refs, &ProbeConfig { epochs: 10, ..ProbeConfig::default() }).unwrap();
        assert_eq!(emb.fingerprint(), before);
    }
}
