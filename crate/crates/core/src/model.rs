//! Toy multi-task network: a small convolutional encoder with a dense
//! segmentation head and two pooled classification heads (CHD and view).
//!
//! Parameters live in a name-ordered registry. Names are stable
//! (`enc.0.weight`, `seg_head.skip.bias`, `chd_head.weight`, ...) and all
//! freezing, resetting and checkpointing goes through them.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anatomask::SEG_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::{Elem, Gradients, Graph, Tensor, Var};

pub const CHD_CLASSES: usize = 7;
pub const VIEW_CLASSES: usize = 4;

pub const SEG_HEAD: &str = "seg_head";
pub const CHD_HEAD: &str = "chd_head";
pub const VIEW_HEAD: &str = "view_head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Output channels of each encoder block.
    pub widths: Vec<usize>,
    /// Stride of each encoder block; the first must be 1 (the
    /// segmentation skip path reads full-resolution features).
    pub strides: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            strides: vec![1, 2, 2, 1],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "encoder needs matching non-empty widths/strides, got {:?}/{:?}",
                self.widths, self.strides
            )));
        }
        if self.strides[0] != 1 || self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!(
                "encoder strides must be 1 or 2 with a stride-1 first block, got {:?}",
                self.strides
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("zero encoder width".into()));
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        // (name, dims, fan_in); fan_in 0 marks a bias
        let mut out = Vec::new();
        let mut c_in = 1;
        for (l, &w) in self.widths.iter().enumerate() {
            out.push((format!("enc.{l}.weight"), vec![w, c_in, 3, 3], c_in * 9));
            out.push((format!("enc.{l}.bias"), vec![w], 0));
            c_in = w;
        }
        let last = *self.widths.last().expect("validated");
        let first = self.widths[0];
        out.push((format!("{SEG_HEAD}.weight"), vec![SEG_CLASSES, last, 3, 3], last * 9));
        out.push((format!("{SEG_HEAD}.bias"), vec![SEG_CLASSES], 0));
        out.push((format!("{SEG_HEAD}.skip.weight"), vec![SEG_CLASSES, first, 1, 1], first));
        out.push((format!("{SEG_HEAD}.skip.bias"), vec![SEG_CLASSES], 0));
        out.push((format!("{CHD_HEAD}.weight"), vec![CHD_CLASSES, last], last));
        out.push((format!("{CHD_HEAD}.bias"), vec![CHD_CLASSES], 0));
        out.push((format!("{VIEW_HEAD}.weight"), vec![VIEW_CLASSES, last], last));
        out.push((format!("{VIEW_HEAD}.bias"), vec![VIEW_CLASSES], 0));
        out
    }
}

/// Does `name` fall under `prefix` (whole dotted components only)?
pub fn matches_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

/// He-normal weights (std `sqrt(2/fan_in)`), zero biases.
fn init_values<E: Elem, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<E> {
    if fan_in == 0 {
        return vec![E::zero(); len];
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| E::lit(normal.sample(rng))).collect()
}

/// Initial std of a parameter under the He scheme, `None` for biases.
pub fn init_std(fan_in: usize) -> Option<f64> {
    (fan_in > 0).then(|| (2.0 / fan_in as f64).sqrt())
}

/// The set of trainable parameter-name prefixes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamScope {
    pub trainable_prefixes: BTreeSet<String>,
}

impl ParamScope {
    pub fn new<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            trainable_prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn includes(&self, name: &str) -> bool {
        self.trainable_prefixes.iter().any(|p| matches_prefix(name, p))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub training: bool,
    /// Channel-dropout rate of the feature-perturbation decode; 0 disables it.
    pub fp_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `15×H×W`
    pub seg: Var,
    /// `7`
    pub chd: Var,
    /// `4`
    pub view: Var,
    /// Segmentation logits decoded from channel-dropped bottleneck features.
    pub seg_fp: Option<Var>,
}

/// Parameter leaves registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

#[derive(Debug, Clone)]
pub struct MultiTaskNet<E: Elem = f32> {
    config: NetConfig,
    names: Vec<String>,
    fan_in: Vec<usize>,
    tensors: Vec<Tensor<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Elem> MultiTaskNet<E> {
    /// A freshly initialised, fully trainable network. Each parameter draws
    /// from its own stream keyed by `(seed, name)`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut fan_in = Vec::new();
        let mut tensors = Vec::new();
        for (name, dims, fan) in config.shapes() {
            let len = dims.iter().product();
            let mut rng = rng_stream!(seed, "init", &name);
            let mut t = Tensor::new(&dims, init_values(len, fan, &mut rng))?;
            t.set_requires_grad(true);
            names.push(name);
            fan_in.push(fan);
            tensors.push(t);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            fan_in,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample()
    }

    /// Prefix of the last encoder block.
    pub fn last_block(&self) -> String {
        format!("enc.{}", self.config.widths.len() - 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn fan_in(&self, name: &str) -> Option<usize> {
        self.index.get(name).map(|&i| self.fan_in[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace a parameter's values (dims must match).
    pub fn load_param(&mut self, name: &str, values: &Tensor<E>) -> Result<()> {
        let t = self
            .param_mut(name)
            .ok_or_else(|| Error::Structural(format!("unknown parameter {name}")))?;
        if t.dims() != values.dims() {
            return Err(Error::Structural(format!(
                "parameter {name}: dims {:?} vs {:?}",
                t.dims(),
                values.dims()
            )));
        }
        t.assign(values.data())
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<E>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t)).collect(),
        }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn decode(&self, g: &mut Graph<E>, b: &Bound, bottleneck: Var, skip: Var) -> Result<Var> {
        let low = g.conv2d_strided(
            bottleneck,
            self.var(b, "seg_head.weight"),
            self.var(b, "seg_head.bias"),
            1,
        )?;
        let up = g.upsample_bilinear(low, self.downsample())?;
        let fine = g.conv2d_strided(
            skip,
            self.var(b, "seg_head.skip.weight"),
            self.var(b, "seg_head.skip.bias"),
            1,
        )?;
        g.add(up, fine)
    }

    /// Multi-task forward pass on a `1×H×W` image. The feature-perturbed
    /// segmentation output is produced only in training mode with a
    /// positive `fp_rate`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        image: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Outputs> {
        let d = g.dims(image).to_vec();
        let ds = self.downsample();
        if d.len() != 3 || d[0] != 1 || !d[1].is_multiple_of(ds) || !d[2].is_multiple_of(ds) {
            return Err(Error::Dimension(format!(
                "image dims {d:?} must be 1×H×W with H, W multiples of {ds}"
            )));
        }
        let mut x = image;
        let mut skip = None;
        for (l, &stride) in self.config.strides.iter().enumerate() {
            let w = self.var(bound, &format!("enc.{l}.weight"));
            let bias = self.var(bound, &format!("enc.{l}.bias"));
            x = g.conv2d_strided(x, w, bias, stride)?;
            x = g.relu(x);
            if l == 0 {
                skip = Some(x);
            }
        }
        let skip = skip.expect("at least one block");
        let seg = self.decode(g, bound, x, skip)?;
        let pooled = g.global_avg_pool(x)?;
        let chd = g.linear(
            pooled,
            self.var(bound, "chd_head.weight"),
            self.var(bound, "chd_head.bias"),
        )?;
        let view = g.linear(
            pooled,
            self.var(bound, "view_head.weight"),
            self.var(bound, "view_head.bias"),
        )?;
        let seg_fp = if opts.training && opts.fp_rate > 0.0 {
            let dropped = g.channel_dropout(x, opts.fp_rate, rng, true)?;
            Some(self.decode(g, bound, dropped, skip)?)
        } else {
            None
        };
        Ok(Outputs {
            seg,
            chd,
            view,
            seg_fp,
        })
    }

    /// Add `scale ×` the bound leaves' gradients into trainable parameters.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<E>, scale: E) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    /// Gradients of the bound leaves, one slot per parameter.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<E>) -> Vec<Option<Vec<E>>> {
        bound.vars.iter().map(|v| grads.take(*v)).collect()
    }

    pub fn accumulate_collected(&mut self, grads: &[Option<Vec<E>>], scale: E) -> Result<()> {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.param(name).is_some_and(Tensor::requires_grad)
    }

    /// Make exactly the parameters under `scope` trainable. Returns the names
    /// of parameters that were trainable and are now frozen, so callers can
    /// drop their optimizer state.
    pub fn set_trainable(&mut self, scope: &ParamScope) -> Result<Vec<String>> {
        for p in &scope.trainable_prefixes {
            if !self.names.iter().any(|n| matches_prefix(n, p)) {
                return Err(Error::Config(format!("prefix {p:?} matches no parameter")));
            }
        }
        let mut newly_frozen = Vec::new();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let on = scope.includes(name);
            if t.requires_grad() && !on {
                newly_frozen.push(name.clone());
            }
            t.set_requires_grad(on);
        }
        Ok(newly_frozen)
    }

    pub fn full_scope(&self) -> ParamScope {
        let mut prefixes: Vec<String> = (0..self.config.widths.len()).map(|l| format!("enc.{l}")).collect();
        prefixes.extend([SEG_HEAD, CHD_HEAD, VIEW_HEAD].map(String::from));
        ParamScope::new(prefixes)
    }

    /// Re-draw the CHD head from the init distribution. The weight is
    /// drawn from `rng`; biases return to zero. No other parameter changes.
    pub fn reset_classification_head<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let w = format!("{CHD_HEAD}.weight");
        let b = format!("{CHD_HEAD}.bias");
        let fan = self.fan_in(&w).expect("head exists");
        let len = self.param(&w).expect("head exists").numel();
        let values = init_values::<E, R>(len, fan, rng);
        self.param_mut(&w).expect("head exists").assign(&values)?;
        let bl = self.param(&b).expect("head exists").numel();
        self.param_mut(&b).expect("head exists").assign(&vec![E::zero(); bl])?;
        Ok(())
    }

    fn check_same_registry(&self, other: &Self) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.dims() != b.dims())
        {
            return Err(Error::Structural("parameter registries differ".into()));
        }
        Ok(())
    }

    /// `teacher ← decay·teacher + (1−decay)·student`, elementwise.
    pub fn ema_update(teacher: &mut Self, student: &Self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Parameter(format!("EMA decay {decay} outside [0,1]")));
        }
        teacher.check_same_registry(student)?;
        if decay == 1.0 {
            return Ok(());
        }
        let d = E::lit(decay);
        let rest = E::lit(1.0 - decay);
        for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
            let dst = t.data_mut();
            if decay == 0.0 {
                dst.copy_from_slice(s.data());
            } else {
                for (a, &b) in dst.iter_mut().zip(s.data()) {
                    *a = d * *a + rest * b;
                }
            }
        }
        Ok(())
    }

    /// Copy all parameter values from `other`, keeping this net's
    /// trainability flags.
    pub fn copy_weights_from(&mut self, other: &Self) -> Result<()> {
        self.check_same_registry(other)?;
        for (t, s) in self.tensors.iter_mut().zip(&other.tensors) {
            t.assign(s.data())?;
        }
        Ok(())
    }

    pub fn cast<F: Elem>(&self) -> MultiTaskNet<F> {
        MultiTaskNet {
            config: self.config.clone(),
            names: self.names.clone(),
            fan_in: self.fan_in.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.cast::<F>();
                    c.set_requires_grad(t.requires_grad());
                    c
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl MultiTaskNet<f32> {
    /// CRC32 over every parameter whose name falls under one of `prefixes`
    /// (all parameters when empty), in registry order.
    pub fn checksum(&self, prefixes: &[&str]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.params() {
            if prefixes.is_empty() || prefixes.iter().any(|p| matches_prefix(name, p)) {
                h.update(name.as_bytes());
                h.update(&t.checksum().to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Names of parameters that are not trainable.
    pub fn frozen_names(&self) -> Vec<String> {
        self.params()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn image(g: &mut Graph<f32>, h: usize, w: usize, seed: u64) -> Var {
        let mut rng = rng_stream!(seed, "img");
        let data = (0..h * w).map(|_| rng.gen::<f32>()).collect();
        g.constant(&[1, h, w], data).unwrap()
    }

    fn rng() -> StreamRng {
        rng_stream!(1, "fwd")
    }

    #[test]
    fn output_shapes() {
        let net = MultiTaskNet::<f32>::new(NetConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = image(&mut g, 16, 24, 0);
        for training in [false, true] {
            let o = net
                .forward(&mut g, &b, x, ForwardOptions { training, fp_rate: 0.0 }, &mut rng())
                .unwrap();
            assert_eq!(g.dims(o.seg), &[15, 16, 24]);
            assert_eq!(g.dims(o.chd), &[7]);
            assert_eq!(g.dims(o.view), &[4]);
            assert!(o.seg_fp.is_none());
        }
    }

    #[test]
    fn bad_spatial_dims_rejected() {
        let net = MultiTaskNet::<f32>::new(NetConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = image(&mut g, 18, 16, 0);
        let r = net.forward(&mut g, &b, x, ForwardOptions::default(), &mut rng());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn fp_output_only_when_training_with_positive_rate() {
        let net = MultiTaskNet::<f32>::new(NetConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = image(&mut g, 16, 16, 1);
        let plain = net
            .forward(&mut g, &b, x, ForwardOptions { training: true, fp_rate: 0.0 }, &mut rng())
            .unwrap();
        let eval = net
            .forward(&mut g, &b, x, ForwardOptions { training: false, fp_rate: 0.5 }, &mut rng())
            .unwrap();
        assert!(eval.seg_fp.is_none());
        assert_eq!(g.value(plain.seg), g.value(eval.seg));
        let fp = net
            .forward(&mut g, &b, x, ForwardOptions { training: true, fp_rate: 0.5 }, &mut rng())
            .unwrap();
        // main outputs are unaffected by the extra perturbed decode
        assert_eq!(g.value(plain.seg), g.value(fp.seg));
        let seg_fp = fp.seg_fp.unwrap();
        let differs = g
            .value(fp.seg)
            .iter()
            .zip(g.value(seg_fp))
            .filter(|(a, b)| a != b)
            .count();
        assert!(differs > 0);
    }

    #[test]
    fn prefix_matching_respects_components() {
        assert!(matches_prefix("enc.1.weight", "enc.1"));
        assert!(!matches_prefix("enc.10.weight", "enc.1"));
        assert!(matches_prefix("seg_head.skip.bias", "seg_head"));
        assert!(!matches_prefix("seg_headx", "seg_head"));
    }

    #[test]
    fn set_trainable_scopes() {
        let mut net = MultiTaskNet::<f32>::new(NetConfig::default(), 5).unwrap();
        let all = net.full_scope();
        assert!(net.set_trainable(&all).unwrap().is_empty());
        assert!(net.params().all(|(_, t)| t.requires_grad()));

        let last = net.last_block();
        let scope = ParamScope::new([CHD_HEAD, VIEW_HEAD, last.as_str()]);
        let frozen = net.set_trainable(&scope).unwrap();
        assert!(frozen.iter().any(|n| n.starts_with("seg_head")));
        for (name, t) in net.params() {
            let expect = name.starts_with("chd_head") || name.starts_with("view_head") || name.starts_with("enc.3");
            assert_eq!(t.requires_grad(), expect, "{name}");
        }
        assert!(matches!(
            net.set_trainable(&ParamScope::new(["decoder"])),
            Err(Error::Config(_))
        ));
        net.set_trainable(&ParamScope::none()).unwrap();
        assert!(net.params().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn reset_touches_only_chd_head() {
        let mut net = MultiTaskNet::<f32>::new(NetConfig::default(), 5).unwrap();
        let before_seg = net.checksum(&[SEG_HEAD]);
        let before_view = net.checksum(&[VIEW_HEAD, "enc"]);
        let before_head = net.checksum(&[CHD_HEAD]);
        let mut a = net.clone();
        net.reset_classification_head(&mut rng_stream!(9, "reset")).unwrap();
        a.reset_classification_head(&mut rng_stream!(9, "reset")).unwrap();
        assert_eq!(net.checksum(&[]), a.checksum(&[]));
        assert_eq!(net.checksum(&[SEG_HEAD]), before_seg);
        assert_eq!(net.checksum(&[VIEW_HEAD, "enc"]), before_view);
        assert_ne!(net.checksum(&[CHD_HEAD]), before_head);
    }

    #[test]
    fn reset_with_init_stream_restores_initial_head() {
        let net0 = MultiTaskNet::<f32>::new(NetConfig::default(), 21).unwrap();
        let mut net = net0.clone();
        let w = "chd_head.weight";
        net.param_mut(w).unwrap().assign(&[0.5; 7 * 64]).unwrap();
        net.reset_classification_head(&mut rng_stream!(21, "init", w)).unwrap();
        assert!(net.param(w).unwrap().bits_eq(net0.param(w).unwrap()));
    }

    #[test]
    fn reset_weights_follow_init_distribution() {
        // pool several resets to get well over 1e3 weights
        let mut net = MultiTaskNet::<f32>::new(NetConfig::default(), 2).unwrap();
        let std = init_std(net.fan_in("chd_head.weight").unwrap()).unwrap();
        let mut all = Vec::new();
        for s in 0..5u64 {
            net.reset_classification_head(&mut rng_stream!(s, "reset")).unwrap();
            all.extend(net.param("chd_head.weight").unwrap().data().iter().map(|&v| f64::from(v)));
        }
        assert!(all.len() >= 1000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.1 * std, "mean {mean}");
        assert!((sd / std - 1.0).abs() < 0.2, "sd {sd} vs {std}");
        assert!(net.param("chd_head.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn ema_edge_cases() {
        let student = MultiTaskNet::<f32>::new(NetConfig::default(), 1).unwrap();
        let teacher0 = MultiTaskNet::<f32>::new(NetConfig::default(), 2).unwrap();

        let mut t = teacher0.clone();
        MultiTaskNet::ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.checksum(&[]), teacher0.checksum(&[]));

        let mut t = teacher0.clone();
        MultiTaskNet::ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.checksum(&[]), student.checksum(&[]));

        assert!(MultiTaskNet::ema_update(&mut t, &student, 1.5).is_err());
        let other = MultiTaskNet::<f32>::new(
            NetConfig {
                widths: vec![8, 8],
                strides: vec![1, 2],
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            MultiTaskNet::ema_update(&mut t, &other, 0.5),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn ema_scalar_closed_form() {
        let mut teacher = MultiTaskNet::<f32>::new(NetConfig::default(), 1).unwrap();
        let mut student = teacher.clone();
        let name = "chd_head.bias";
        teacher.param_mut(name).unwrap().assign(&[1.0; 7]).unwrap();
        student.param_mut(name).unwrap().assign(&[0.0; 7]).unwrap();
        MultiTaskNet::ema_update(&mut teacher, &student, 0.9).unwrap();
        for &v in teacher.param(name).unwrap().data() {
            assert!((v - 0.9).abs() < 1e-7);
        }
    }
}
