//! Stage-1 probe and prototypes, phase-1 mean-teacher training with the
//! pseudo-label interventions, and phase-2 classification fine-tuning.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::anatomask::{View, ViewCategoryTable};
use crate::augment::{augment_pair, cutmix, weak_augment};
use crate::boundref::{refine_mask, AuditRow, MorphRefiner, Refiner};
use crate::checkpoint::Checkpoint;
use crate::config::{EmbedderChoice, RefinerChoice, TrainConfig};
use crate::dataset::{write_file, Dataset};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{csv_error, evaluate, EvalReport};
use crate::model::{ForwardOptions, MultiTaskNet, ParamScope, CHD_CLASSES, CHD_HEAD};
use crate::optim::{poly_lr, AdamW, OptimState};
use crate::phantom::Sample;
use crate::pseudolabel::{
    generate_pseudo, pseudo_chd_label, pseudo_cls_losses, total_loss, unimatch_losses,
    ChdPseudo, Components, MixedTargets, PseudoLabelBundle, StudentChd, StudentSeg, ViewSource,
};
use crate::semanchor::{
    build_prototypes, filter_pseudo, train_probe, CacheEmbedder, Embedder, FilterAuditRow, PrototypeBank,
    PrototypeState, ProbeHead, StubEmbedder,
};
use crate::tensor::{Graph, Layout, Tensor, Var};

/// Seed of the stub embedder's projection. The embedder stands in for a
/// fixed pretrained model, so it does not follow the run seed.
pub const EMBEDDER_SEED: u64 = 0;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const REFINE_AUDIT_FILE: &str = "refine_audit.csv";
pub const FILTER_AUDIT_FILE: &str = "filter_audit.csv";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const PHASE1_CKPT: &str = "phase1.ckpt";
pub const PHASE1_BEST_CKPT: &str = "phase1_best.ckpt";
pub const PHASE2_CKPT: &str = "phase2.ckpt";
pub const LEGALITY_FILE: &str = "legality.json";

/// Embedder named by the config. Test-only embedders are refused.
pub fn build_embedder(cfg: &TrainConfig) -> Result<Box<dyn Embedder>> {
    match cfg.embedder_choice()? {
        EmbedderChoice::Stub => Ok(Box::new(StubEmbedder::new(EMBEDDER_SEED, cfg.embed_dim)?)),
        EmbedderChoice::Cache(p) => Ok(Box::new(CacheEmbedder::load(&p)?)),
        EmbedderChoice::Oracle => Err(Error::Config("the oracle embedder is not available for training".into())),
    }
}

/// Refiner named by the config. Test-only refiners are refused.
pub fn build_refiner(cfg: &TrainConfig) -> Result<Box<dyn Refiner>> {
    match cfg.refiner_choice()? {
        RefinerChoice::Morph => Ok(Box::new(MorphRefiner::default())),
        RefinerChoice::Oracle => Err(Error::Config("the oracle refiner is not available for training".into())),
    }
}

/// Resolved configuration plus the pluggable components of one run.
pub struct Run {
    pub cfg: TrainConfig,
    pub dir: PathBuf,
    pub table: ViewCategoryTable,
    pub embedder: Box<dyn Embedder>,
    pub refiner: Box<dyn Refiner>,
}

impl Run {
    /// Validate `cfg`, build its components and echo it to `dir`.
    pub fn new(cfg: TrainConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        cfg.reject_oracles()?;
        let run = Self {
            table: cfg.table()?,
            embedder: build_embedder(&cfg)?,
            refiner: build_refiner(&cfg)?,
            dir: dir.to_path_buf(),
            cfg,
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), run.cfg.to_json().as_bytes())?;
        Ok(run)
    }

    /// A run with explicitly supplied components (tests may pass oracles).
    pub fn with_components(
        cfg: TrainConfig,
        dir: &Path,
        embedder: Box<dyn Embedder>,
        refiner: Box<dyn Refiner>,
    ) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
        Ok(Self {
            table: cfg.table()?,
            dir: dir.to_path_buf(),
            cfg,
            embedder,
            refiner,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Clone)]
pub struct Stage1 {
    pub probe: ProbeHead,
    pub bank: PrototypeBank,
}

impl Stage1 {
    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.push("probe.weight", self.probe.weight.clone());
        c.push("probe.bias", self.probe.bias.clone());
        let n = self.bank.n_classes();
        c.push("proto.counts", Tensor::new(&[n], self.bank.counts.iter().map(|&v| v as f32).collect())?);
        let states = self
            .bank
            .states
            .iter()
            .map(|s| match s {
                PrototypeState::Present => 0.0,
                PrototypeState::Absent => 1.0,
                PrototypeState::Degenerate => 2.0,
            })
            .collect();
        c.push("proto.states", Tensor::new(&[n], states)?);
        for (k, p) in self.bank.prototypes.iter().enumerate() {
            if let Some(p) = p {
                c.push(format!("proto.{k}"), Tensor::new(&[p.len()], p.clone())?);
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Checkpoint::read(path)?;
        let get = |n: &str| {
            c.get(n)
                .cloned()
                .ok_or_else(|| Error::Structural(format!("{}: missing {n}", path.display())))
        };
        let probe = ProbeHead {
            weight: get("probe.weight")?,
            bias: get("probe.bias")?,
        };
        let dim = probe.weight.dims()[1];
        let counts: Vec<usize> = get("proto.counts")?.data().iter().map(|&v| v as usize).collect();
        let states = get("proto.states")?
            .data()
            .iter()
            .map(|&v| match v as u8 {
                0 => Ok(PrototypeState::Present),
                1 => Ok(PrototypeState::Absent),
                2 => Ok(PrototypeState::Degenerate),
                s => Err(Error::Structural(format!("prototype state {s}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = (0..counts.len())
            .map(|k| c.get(&format!("proto.{k}")).map(|t| t.data().to_vec()))
            .collect();
        Ok(Self {
            probe,
            bank: PrototypeBank {
                dim,
                prototypes,
                counts,
                states,
            },
        })
    }
}

/// Embed the labeled split, train the probe and build prototypes.
pub fn run_stage1(run: &Run, data: &Dataset) -> Result<Stage1> {
    if data.labeled.is_empty() {
        return Err(Error::Config("stage 1 needs labeled samples".into()));
    }
    let samples: Vec<&Sample> = data.labeled.iter().collect();
    let (probe, embeddings) = train_probe(run.embedder.as_ref(), &samples, &run.cfg.probe())?;
    let labels: Vec<usize> = samples.iter().map(|s| s.chd).collect();
    let bank = build_prototypes(&embeddings, &labels, CHD_CLASSES)?;
    let out = Stage1 { probe, bank };
    out.checkpoint()?.write(&run.path(STAGE1_CKPT))?;
    Ok(out)
}

// ------------------------------------------------------------ evaluation

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: Mask,
    pub chd: usize,
    pub view: View,
    /// Pixels outside the predicted view's allowed set.
    pub illegal: usize,
}

/// Eval-mode prediction, optionally hard-masked by the predicted view.
pub fn predict(net: &MultiTaskNet, image: &Tensor, table: &ViewCategoryTable, mask: bool) -> Result<Prediction> {
    let source = if mask { ViewSource::Predicted } else { ViewSource::Off };
    let b = generate_pseudo(net, image, 0.0, source, table)?;
    Ok(Prediction {
        illegal: table.count_illegal(b.hard_mask.data(), b.view_pred),
        chd: pseudo_chd_label(&b.chd_logits, None).class,
        view: b.view_pred,
        mask: b.hard_mask,
    })
}

pub fn predict_all(
    net: &MultiTaskNet,
    samples: &[Sample],
    table: &ViewCategoryTable,
    mask: bool,
) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| predict(net, &s.image, table, mask)).collect()
}

/// Score predictions against the samples' ground truth.
pub fn score(preds: &[Prediction], samples: &[Sample], cfg: &TrainConfig) -> Result<EvalReport> {
    let pm: Vec<Mask> = preds.iter().map(|p| p.mask.clone()).collect();
    let gm: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let pc: Vec<usize> = preds.iter().map(|p| p.chd).collect();
    let gc: Vec<usize> = samples.iter().map(|s| s.chd).collect();
    evaluate(&pm, &gm, &pc, &gc, &cfg.metric())
}

// ------------------------------------------------------------ run records

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: u8,
    pub loss_total: f64,
    pub loss_sup_seg: f64,
    pub loss_sup_cls: f64,
    pub loss_unsup: f64,
    pub loss_pl_cls: f64,
    pub dice_mean: f64,
    pub nsd_mean: f64,
    pub macro_f1: f64,
    pub overall: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
}

/// One row of `steps.csv`: the learning rates actually applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub phase: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub loss_total: f64,
}

/// Hard-mask legality counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Legality {
    pub pseudo_batches: u64,
    pub pseudo_pixels: u64,
    pub pseudo_illegal: u64,
    pub eval_images: u64,
    pub eval_pixels: u64,
    pub eval_illegal: u64,
}

struct CsvLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| csv_error(&path, e))?;
        writer.write_record(header).map_err(|e| csv_error(&path, e))?;
        Ok(Self { writer, path })
    }

    /// Append to an existing log, or create it with `header`.
    fn append(path: PathBuf, header: &[&str]) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            path,
        })
    }

    fn row<S: Serialize>(&mut self, row: &S) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_error(&self.path, e))
    }

    fn record<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| csv_error(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

const METRICS_HEADER: [&str; 13] = [
    "epoch",
    "phase",
    "loss_total",
    "loss_sup_seg",
    "loss_sup_cls",
    "loss_unsup",
    "loss_pl_cls",
    "dice_mean",
    "nsd_mean",
    "macro_f1",
    "overall",
    "lr_backbone",
    "lr_heads",
];
const STEPS_HEADER: [&str; 6] = ["phase", "epoch", "step", "lr_backbone", "lr_heads", "loss_total"];
const REFINE_HEADER: [&str; 9] = ["step", "sample_id", "class", "x0", "y0", "x1", "y1", "iou", "adopted"];
const FILTER_HEADER: [&str; 7] = ["step", "sample_id", "pseudo_class", "cosine", "nearest", "verdict", "probe_class"];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

// ------------------------------------------------------------- batching

/// Weighted loss parts of one sample: sup_seg, sup_cls, unsup, pl_cls.
#[derive(Debug, Clone, Copy, Default)]
struct Parts([f64; 4]);

impl Parts {
    fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    fn add_scaled(&mut self, o: &Parts, s: f64) {
        for (a, b) in self.0.iter_mut().zip(o.0) {
            *a += s * b;
        }
    }
}

struct SampleGrad {
    grads: Vec<Option<Vec<f32>>>,
    parts: Parts,
}

fn weighted(g: &Graph<f32>, comps: &Components, run: &Run, prefix: &str) -> Result<f64> {
    let w = run.cfg.loss_weights();
    comps
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, &v)| Ok(w.weight(k).expect("known component") * f64::from(g.scalar(v)?)))
        .sum()
}

fn backprop(g: &Graph<f32>, net: &MultiTaskNet, bound: &crate::model::Bound, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
    let mut grads = g.backward(loss)?;
    Ok(net.collect_grads(bound, &mut grads))
}

/// Cycle through a split in per-pass shuffled order.
struct Cursor {
    seed: u64,
    tag: &'static str,
    len: usize,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(seed: u64, tag: &'static str, len: usize) -> Self {
        Self {
            seed,
            tag,
            len,
            pass: 0,
            order: Vec::new(),
            pos: len,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.len) {
            if self.pos == self.len {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut rng_stream!(self.seed, "order", self.tag, self.pass));
                self.pass += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn labeled_order(seed: u64, phase: u8, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_stream!(seed, "order", "labeled", u64::from(phase), epoch));
    order
}

/// Supervised losses on a weakly augmented labeled sample. The view head
/// is trained only when `with_view` is set.
fn labeled_grad(
    run: &Run,
    net: &MultiTaskNet,
    s: &Sample,
    phase: u8,
    step: u64,
    with_view: bool,
) -> Result<SampleGrad> {
    let mut rng = rng_stream!(run.cfg.seed, "aug", "labeled", u64::from(phase), step, &s.id);
    let (weak, _) = weak_augment(s, &mut rng);
    let mut g = Graph::<f32>::new();
    let bound = net.bind(&mut g);
    let x = g.leaf(&weak.image);
    let opts = ForwardOptions {
        training: true,
        fp_rate: 0.0,
    };
    let out = net.forward(&mut g, &bound, x, opts, &mut rng)?;
    let targets = weak.mask.to_targets();
    let none = vec![false; targets.len()];
    let seg = g.classification_loss(out.seg, Layout::Channels, &targets, &none, 0.0)?;
    let mut cls = g.classification_loss(out.chd, Layout::Rows, &[s.chd], &[false], 0.0)?;
    if with_view {
        let v = g.classification_loss(out.view, Layout::Rows, &[s.view.index()], &[false], 0.0)?;
        cls = g.add(cls, v)?;
    }
    let mut comps = Components::new();
    comps.insert("sup_seg", seg);
    comps.insert("sup_cls", cls);
    let loss = total_loss(&mut g, &comps, &run.cfg.loss_weights())?;
    let w = run.cfg.loss_weights();
    let parts = Parts([
        w.sup_seg * f64::from(g.scalar(seg)?),
        w.sup_cls * f64::from(g.scalar(cls)?),
        0.0,
        0.0,
    ]);
    Ok(SampleGrad {
        grads: backprop(&g, net, &bound, loss)?,
        parts,
    })
}

/// Teacher-side work on one unlabeled sample.
struct Teacher {
    weak: Sample,
    strong1: Sample,
    strong2: Sample,
    bundle: PseudoLabelBundle,
    refine_rows: Vec<AuditRow>,
    filter_row: Option<FilterAuditRow>,
    illegal: Option<usize>,
}

fn teacher_side(
    run: &Run,
    teacher: &MultiTaskNet,
    stage1: Option<&Stage1>,
    embeddings: &HashMap<String, Vec<f32>>,
    s: &Sample,
    step: u64,
) -> Result<Teacher> {
    let cfg = &run.cfg;
    let mut rng = rng_stream!(cfg.seed, "aug", "unlabeled", step, &s.id);
    let pair = augment_pair(s, &mut rng);
    let source = if cfg.mask_guidance { ViewSource::Predicted } else { ViewSource::Off };
    let mut bundle = generate_pseudo(teacher, &pair.weak.image, cfg.tau, source, &run.table)?;
    let mut refine_rows = Vec::new();
    if cfg.sam_refine {
        let r = refine_mask(run.refiner.as_ref(), &s.id, &pair.weak.image, &bundle.hard_mask, &cfg.refine())?;
        let w = r.mask.width();
        // adopted refinements are trusted inside their prompt boxes
        for b in r.boxes.iter().filter(|b| r.gate.adopted(b.class)) {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    let c = r.mask.get(x, y);
                    if c == 0 || c == b.class {
                        bundle.conf[y * w + x] = true;
                    }
                }
            }
        }
        refine_rows = r.audit(&s.id);
        bundle.hard_mask = r.mask;
    }
    let mut filter_row = None;
    bundle.chd_pseudo = Some(if cfg.dino_filter {
        let st = stage1.expect("stage 1 present when filtering");
        let emb = &embeddings[&s.id];
        let class = pseudo_chd_label(&bundle.chd_logits, None).class;
        let o = filter_pseudo(emb, class, &st.bank, cfg.theta_cos, cfg.filter_mode)?;
        filter_row = Some(FilterAuditRow {
            step,
            sample_id: s.id.clone(),
            pseudo_class: class,
            cosine: o.cosine,
            nearest: o.nearest,
            verdict: o.verdict.label(),
            probe_class: Some(st.probe.predict(emb)?),
        });
        pseudo_chd_label(&bundle.chd_logits, Some(o.verdict))
    } else {
        pseudo_chd_label(&bundle.chd_logits, None)
    });
    let illegal = bundle
        .mask_view
        .map(|v| run.table.count_illegal(bundle.hard_mask.data(), v));
    Ok(Teacher {
        weak: pair.weak,
        strong1: pair.strong1,
        strong2: pair.strong2,
        bundle,
        refine_rows,
        filter_row,
        illegal,
    })
}

/// Student-side consistency losses on one unlabeled sample, mixing with
/// its partner's first strong view.
fn unlabeled_grad(run: &Run, net: &MultiTaskNet, t: &Teacher, partner: &Teacher, step: u64) -> Result<SampleGrad> {
    let cfg = &run.cfg;
    let id = &t.weak.id;
    let mut rng = rng_stream!(cfg.seed, "mix", step, id);
    let mixed = cutmix(&t.strong1, &partner.strong1, &mut rng)?;
    let targets = MixedTargets::compose(&t.bundle, &partner.bundle, &mixed.cut, mixed.lambda)?;

    let mut g = Graph::<f32>::new();
    let bound = net.bind(&mut g);
    let train = ForwardOptions {
        training: true,
        fp_rate: 0.0,
    };
    let mut fp_rng = rng_stream!(cfg.seed, "fp", step, id);
    let xw = g.leaf(&t.weak.image);
    let weak = net.forward(
        &mut g,
        &bound,
        xw,
        ForwardOptions {
            training: true,
            fp_rate: cfg.fp_rate,
        },
        &mut fp_rng,
    )?;
    let fp = weak.seg_fp.unwrap_or(weak.seg);
    let x1 = g.leaf(&t.strong1.image);
    let o1 = net.forward(&mut g, &bound, x1, train, &mut fp_rng)?;
    let x2 = g.leaf(&t.strong2.image);
    let o2 = net.forward(&mut g, &bound, x2, train, &mut fp_rng)?;
    let xm = g.leaf(&mixed.sample.image);
    let om = net.forward(&mut g, &bound, xm, train, &mut fp_rng)?;

    let seg = StudentSeg {
        s1: o1.seg,
        s2: o2.seg,
        fp,
        mixed: Some(om.seg),
    };
    let mut comps = unimatch_losses(&mut g, &seg, &t.bundle, Some(&targets), cfg.focal_gamma)?;
    let chd = StudentChd {
        s1: o1.chd,
        s2: o2.chd,
        mixed: Some(om.chd),
    };
    comps.extend(pseudo_cls_losses(&mut g, &chd, t.bundle.chd_pseudo, Some(&targets), cfg.focal_gamma)?);
    let loss = total_loss(&mut g, &comps, &cfg.loss_weights())?;
    let parts = Parts([0.0, 0.0, weighted(&g, &comps, run, "unsup")?, weighted(&g, &comps, run, "pl_")?]);
    Ok(SampleGrad {
        grads: backprop(&g, net, &bound, loss)?,
        parts,
    })
}

/// Sum per-sample gradients into `net` (in order) with the given scale
/// and return the scaled loss parts.
fn accumulate(net: &mut MultiTaskNet, grads: &[SampleGrad], scale: f64, parts: &mut Parts) -> Result<()> {
    for sg in grads {
        net.accumulate_collected(&sg.grads, scale as f32)?;
        parts.add_scaled(&sg.parts, scale);
    }
    Ok(())
}

fn check_finite(run: &Run, phase: u8, step: u64, ids: &[&str], parts: &Parts) -> Result<()> {
    if parts.0.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let dump = serde_json::json!({
        "phase": phase,
        "step": step,
        "batch": ids,
        "parts": {
            "sup_seg": parts.0[0].to_string(),
            "sup_cls": parts.0[1].to_string(),
            "unsup": parts.0[2].to_string(),
            "pl_cls": parts.0[3].to_string(),
        },
    });
    let path = run.path("nan_dump.json");
    write_file(&path, dump.to_string().as_bytes())?;
    Err(Error::Numerical(format!(
        "non-finite loss at phase {phase} step {step}; batch {}; dump in {}",
        ids.join(","),
        path.display()
    )))
}

fn optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    }
}

fn numerical_with_ids(e: Error, ids: &[&str]) -> Error {
    match e {
        Error::NonFinite(m) => Error::Numerical(format!("{m}; batch {}", ids.join(","))),
        other => other,
    }
}

// ---------------------------------------------------------------- phase 1

#[derive(Debug, Clone)]
pub struct Phase1Outcome {
    pub student: MultiTaskNet,
    pub teacher: MultiTaskNet,
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub legality: Legality,
    /// Teacher at the end of phase 1 on the test split.
    pub test: EvalReport,
}

fn eval_row(
    epoch: usize,
    phase: u8,
    parts: &Parts,
    steps: usize,
    report: &EvalReport,
    lrs: (f64, f64),
) -> EpochRow {
    let m = |v: f64| v / steps.max(1) as f64;
    EpochRow {
        epoch,
        phase,
        loss_total: m(parts.total()),
        loss_sup_seg: m(parts.0[0]),
        loss_sup_cls: m(parts.0[1]),
        loss_unsup: m(parts.0[2]),
        loss_pl_cls: m(parts.0[3]),
        dice_mean: report.dice_mean,
        nsd_mean: report.nsd_mean,
        macro_f1: report.macro_f1,
        overall: report.overall,
        lr_backbone: lrs.0,
        lr_heads: lrs.1,
    }
}

fn check_splits(data: &Dataset) -> Result<()> {
    if data.labeled.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Config(format!(
            "training needs labeled, val and test samples (have {}, {}, {})",
            data.labeled.len(),
            data.val.len(),
            data.test.len()
        )));
    }
    Ok(())
}

fn audit_eval(legality: &mut Legality, preds: &[Prediction]) {
    for p in preds {
        legality.eval_images += 1;
        legality.eval_pixels += p.mask.len() as u64;
        legality.eval_illegal += p.illegal as u64;
    }
}

/// Mean-teacher training on labeled and unlabeled data. With filtering
/// on, `stage1` (or the run directory's stage-1 checkpoint) supplies the
/// prototypes.
pub fn run_phase1(run: &Run, data: &Dataset, stage1: Option<&Stage1>) -> Result<Phase1Outcome> {
    let cfg = &run.cfg;
    check_splits(data)?;
    let loaded;
    let stage1 = match (cfg.dino_filter, stage1) {
        (false, _) => None,
        (true, Some(s)) => Some(s),
        (true, None) => {
            loaded = Stage1::load(&run.path(STAGE1_CKPT))?;
            Some(&loaded)
        }
    };
    let embeddings: HashMap<String, Vec<f32>> = if stage1.is_some() {
        data.unlabeled
            .par_iter()
            .map(|s| Ok((s.id.clone(), run.embedder.embed(&s.id, &s.image)?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };

    let mut student = MultiTaskNet::new(cfg.net(), cfg.seed)?;
    let mut teacher = student.clone();
    let mut opt = OptimState::new();
    let hp = optimizer(cfg);
    let b = cfg.batch_size;
    let steps_per_epoch = data.labeled.len().div_ceil(b);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut unl = Cursor::new(cfg.seed, "unlabeled", data.unlabeled.len());

    let mut metrics = CsvLog::create(run.path(METRICS_FILE), &METRICS_HEADER)?;
    let mut steps_log = CsvLog::create(run.path(STEPS_FILE), &STEPS_HEADER)?;
    let mut refine_log = CsvLog::create(run.path(REFINE_AUDIT_FILE), &REFINE_HEADER)?;
    let mut filter_log = CsvLog::create(run.path(FILTER_AUDIT_FILE), &FILTER_HEADER)?;
    let mut legality = Legality::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    for epoch in 0..cfg.epochs {
        let order = labeled_order(cfg.seed, 1, epoch, data.labeled.len());
        let mut epoch_parts = Parts::default();
        let mut lrs = (0.0, 0.0);
        for (s_in_epoch, chunk) in order.chunks(b).enumerate() {
            let step = (epoch * steps_per_epoch + s_in_epoch) as u64;
            let lab: Vec<&Sample> = chunk.iter().map(|&i| &data.labeled[i]).collect();
            let unl_batch: Vec<&Sample> = unl.take(b).into_iter().map(|i| &data.unlabeled[i]).collect();
            let ids: Vec<&str> = lab.iter().chain(&unl_batch).map(|s| s.id.as_str()).collect();

            let lab_grads = lab
                .par_iter()
                .map(|s| labeled_grad(run, &student, s, 1, step, true))
                .collect::<Result<Vec<_>>>()?;
            let teachers = unl_batch
                .par_iter()
                .map(|s| teacher_side(run, &teacher, stage1, &embeddings, s, step))
                .collect::<Result<Vec<_>>>()?;
            let n = teachers.len();
            let unl_grads = (0..n)
                .into_par_iter()
                .map(|i| unlabeled_grad(run, &student, &teachers[i], &teachers[(i + 1) % n], step))
                .collect::<Result<Vec<_>>>()?;

            for t in &teachers {
                if let Some(c) = t.illegal {
                    legality.pseudo_pixels += t.bundle.hard_mask.len() as u64;
                    legality.pseudo_illegal += c as u64;
                }
                for r in &t.refine_rows {
                    refine_log.record([
                        step.to_string(),
                        r.sample_id.clone(),
                        r.class.to_string(),
                        r.x0.to_string(),
                        r.y0.to_string(),
                        r.x1.to_string(),
                        r.y1.to_string(),
                        r.iou.to_string(),
                        r.adopted.to_string(),
                    ])?;
                }
                if let Some(f) = &t.filter_row {
                    filter_log.record([
                        f.step.to_string(),
                        f.sample_id.clone(),
                        f.pseudo_class.to_string(),
                        f.cosine.to_string(),
                        cell(f.nearest),
                        f.verdict.to_string(),
                        cell(f.probe_class),
                    ])?;
                }
            }
            if n > 0 {
                legality.pseudo_batches += 1;
            }

            student.zero_grad();
            let mut parts = Parts::default();
            accumulate(&mut student, &lab_grads, 1.0 / lab_grads.len() as f64, &mut parts)?;
            if n > 0 {
                accumulate(&mut student, &unl_grads, 1.0 / n as f64, &mut parts)?;
            }
            check_finite(run, 1, step, &ids, &parts)?;
            let lr_b = poly_lr(cfg.lr_backbone, step, total, cfg.poly_power)?;
            let lr_h = poly_lr(cfg.lr_heads, step, total, cfg.poly_power)?;
            opt.step_net(&mut student, &hp, |name| if name.starts_with("enc.") { lr_b } else { lr_h })
                .map_err(|e| numerical_with_ids(e, &ids))?;
            MultiTaskNet::ema_update(&mut teacher, &student, cfg.ema_decay)?;
            steps_log.row(&StepRow {
                phase: 1,
                epoch,
                step,
                lr_backbone: lr_b,
                lr_heads: lr_h,
                loss_total: parts.total(),
            })?;
            epoch_parts.add_scaled(&parts, 1.0);
            lrs = (lr_b, lr_h);
        }

        let preds = predict_all(&teacher, &data.val, &run.table, cfg.eval_mask)?;
        if cfg.eval_mask {
            audit_eval(&mut legality, &preds);
        }
        let report = score(&preds, &data.val, cfg)?;
        let row = eval_row(epoch, 1, &epoch_parts, steps_per_epoch, &report, lrs);
        metrics.row(&row)?;
        metrics.flush()?;
        if best.is_none_or(|(o, _)| report.overall > o) {
            best = Some((report.overall, epoch));
            let mut c = Checkpoint::new();
            c.push_net("teacher/", &teacher);
            c.write(&run.path(PHASE1_BEST_CKPT))?;
        }
        history.push(row);
    }
    for log in [&mut steps_log, &mut refine_log, &mut filter_log] {
        log.flush()?;
    }

    let mut c = Checkpoint::new();
    c.push_net("student/", &student);
    c.push_net("teacher/", &teacher);
    c.write(&run.path(PHASE1_CKPT))?;

    let preds = predict_all(&teacher, &data.test, &run.table, cfg.eval_mask)?;
    if cfg.eval_mask {
        audit_eval(&mut legality, &preds);
    }
    let test = score(&preds, &data.test, cfg)?;
    test.write_json(&run.path("phase1_test.json"))?;
    test.write_csv(&run.path("phase1_test.csv"))?;
    write_file(
        &run.path(LEGALITY_FILE),
        serde_json::to_string_pretty(&legality).expect("serializes").as_bytes(),
    )?;
    Ok(Phase1Outcome {
        student,
        teacher,
        history,
        best_epoch: best.map_or(0, |b| b.1),
        legality,
        test,
    })
}

// ---------------------------------------------------------------- phase 2

#[derive(Debug, Clone)]
pub struct Phase2Outcome {
    pub model: MultiTaskNet,
    pub history: Vec<EpochRow>,
    /// Checksums of the parameters frozen in phase 2, taken right after
    /// loading the phase-1 teacher and again at the end.
    pub frozen_before: BTreeMap<String, u32>,
    pub frozen_after: BTreeMap<String, u32>,
    /// CHD head of the phase-1 teacher, right after the reset, of a fresh
    /// network with the run seed, and at the end.
    pub head_phase1: u32,
    pub head_after_reset: u32,
    pub head_seeded_init: u32,
    pub head_final: u32,
    pub test: EvalReport,
}

fn param_checksums(net: &MultiTaskNet, names: &[String]) -> BTreeMap<String, u32> {
    names.iter().map(|n| (n.clone(), net.checksum(&[n.as_str()]))).collect()
}

/// Classification fine-tuning from the phase-1 teacher: everything but the
/// last encoder block and the CHD head is frozen, the head is re-drawn,
/// refinement and pseudo-label masking are off.
pub fn run_phase2(run: &Run, data: &Dataset) -> Result<Phase2Outcome> {
    let cfg = &run.cfg;
    check_splits(data)?;
    let ckpt = Checkpoint::read(&run.path(PHASE1_CKPT))?;
    let mut model = MultiTaskNet::new(cfg.net(), cfg.seed)?;
    let head_seeded_init = model.checksum(&[CHD_HEAD]);
    ckpt.load_net("teacher/", &mut model)?;
    let phase1_teacher = model.clone();
    let head_phase1 = model.checksum(&[CHD_HEAD]);

    let last = model.last_block();
    model.set_trainable(&ParamScope::new([last.clone(), CHD_HEAD.to_string()]))?;
    let frozen = model.frozen_names();
    let frozen_before = param_checksums(&model, &frozen);
    model.reset_classification_head(&mut rng_stream!(cfg.seed, "init", "chd_head.weight"))?;
    let head_after_reset = model.checksum(&[CHD_HEAD]);

    let stage1 = if cfg.phase2_dino_filter {
        Some(Stage1::load(&run.path(STAGE1_CKPT))?)
    } else {
        None
    };
    let embeddings: HashMap<String, Vec<f32>> = if stage1.is_some() {
        data.unlabeled
            .par_iter()
            .map(|s| Ok((s.id.clone(), run.embedder.embed(&s.id, &s.image)?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };

    let mut opt = OptimState::new();
    let hp = optimizer(cfg);
    let b = cfg.batch_size;
    let steps_per_epoch = data.labeled.len().div_ceil(b);
    let total = (steps_per_epoch * cfg.phase2_epochs).max(1) as u64;
    let mut unl = Cursor::new(cfg.seed, "unlabeled-phase2", data.unlabeled.len());
    let mut metrics = CsvLog::append(run.path(METRICS_FILE), &METRICS_HEADER)?;
    let mut steps_log = CsvLog::append(run.path(STEPS_FILE), &STEPS_HEADER)?;
    let mut history = Vec::new();

    for epoch in 0..cfg.phase2_epochs {
        let order = labeled_order(cfg.seed, 2, epoch, data.labeled.len());
        let mut epoch_parts = Parts::default();
        let mut lrs = (0.0, 0.0);
        for (s_in_epoch, chunk) in order.chunks(b).enumerate() {
            let step = (epoch * steps_per_epoch + s_in_epoch) as u64;
            let lab: Vec<&Sample> = chunk.iter().map(|&i| &data.labeled[i]).collect();
            let mut ids: Vec<&str> = lab.iter().map(|s| s.id.as_str()).collect();
            let lab_grads = lab
                .par_iter()
                .map(|s| labeled_grad(run, &model, s, 2, step, false))
                .collect::<Result<Vec<_>>>()?;
            let unl_grads = match &stage1 {
                None => Vec::new(),
                Some(st) => {
                    let batch: Vec<&Sample> = unl.take(b).into_iter().map(|i| &data.unlabeled[i]).collect();
                    ids.extend(batch.iter().map(|s| s.id.as_str()));
                    batch
                        .par_iter()
                        .map(|s| filtered_cls_grad(run, &model, &phase1_teacher, st, &embeddings[&s.id], s, step))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            model.zero_grad();
            let mut parts = Parts::default();
            accumulate(&mut model, &lab_grads, 1.0 / lab_grads.len() as f64, &mut parts)?;
            if !unl_grads.is_empty() {
                accumulate(&mut model, &unl_grads, 1.0 / unl_grads.len() as f64, &mut parts)?;
            }
            check_finite(run, 2, step, &ids, &parts)?;
            let lr_l = poly_lr(cfg.phase2_lr_last_layer, step, total, cfg.poly_power)?;
            let lr_h = poly_lr(cfg.phase2_lr_cls_head, step, total, cfg.poly_power)?;
            let last = last.clone();
            opt.step_net(&mut model, &hp, |name| {
                if crate::model::matches_prefix(name, &last) {
                    lr_l
                } else {
                    lr_h
                }
            })
            .map_err(|e| numerical_with_ids(e, &ids))?;
            steps_log.row(&StepRow {
                phase: 2,
                epoch,
                step,
                lr_backbone: lr_l,
                lr_heads: lr_h,
                loss_total: parts.total(),
            })?;
            epoch_parts.add_scaled(&parts, 1.0);
            lrs = (lr_l, lr_h);
        }
        let preds = predict_all(&model, &data.val, &run.table, cfg.eval_mask)?;
        let report = score(&preds, &data.val, cfg)?;
        let row = eval_row(epoch, 2, &epoch_parts, steps_per_epoch, &report, lrs);
        metrics.row(&row)?;
        metrics.flush()?;
        history.push(row);
    }
    steps_log.flush()?;

    let frozen_after = param_checksums(&model, &frozen);
    if frozen_after != frozen_before {
        return Err(Error::Contract("a frozen parameter changed during phase 2".into()));
    }
    let mut c = Checkpoint::new();
    c.push_net("model/", &model);
    c.write(&run.path(PHASE2_CKPT))?;
    let preds = predict_all(&model, &data.test, &run.table, cfg.eval_mask)?;
    let test = score(&preds, &data.test, cfg)?;
    test.write_json(&run.path("phase2_test.json"))?;
    test.write_csv(&run.path("phase2_test.csv"))?;
    Ok(Phase2Outcome {
        head_final: model.checksum(&[CHD_HEAD]),
        model,
        history,
        frozen_before,
        frozen_after,
        head_phase1,
        head_after_reset,
        head_seeded_init,
        test,
    })
}

/// Filtered CHD pseudo-label loss on an unlabeled sample (phase 2 with
/// filtering on). Pseudo-labels come from the fixed phase-1 teacher.
fn filtered_cls_grad(
    run: &Run,
    net: &MultiTaskNet,
    teacher: &MultiTaskNet,
    stage1: &Stage1,
    embedding: &[f32],
    s: &Sample,
    step: u64,
) -> Result<SampleGrad> {
    let cfg = &run.cfg;
    let mut rng = rng_stream!(cfg.seed, "aug", "unlabeled-phase2", step, &s.id);
    let pair = augment_pair(s, &mut rng);
    let b = generate_pseudo(teacher, &pair.weak.image, 1.0, ViewSource::Off, &run.table)?;
    let class = pseudo_chd_label(&b.chd_logits, None).class;
    let o = filter_pseudo(embedding, class, &stage1.bank, cfg.theta_cos, cfg.filter_mode)?;
    let pseudo: ChdPseudo = pseudo_chd_label(&b.chd_logits, Some(o.verdict));

    let mut g = Graph::<f32>::new();
    let bound = net.bind(&mut g);
    let opts = ForwardOptions {
        training: true,
        fp_rate: 0.0,
    };
    let x1 = g.leaf(&pair.strong1.image);
    let o1 = net.forward(&mut g, &bound, x1, opts, &mut rng)?;
    let x2 = g.leaf(&pair.strong2.image);
    let o2 = net.forward(&mut g, &bound, x2, opts, &mut rng)?;
    let chd = StudentChd {
        s1: o1.chd,
        s2: o2.chd,
        mixed: None,
    };
    let comps = pseudo_cls_losses(&mut g, &chd, Some(pseudo), None, cfg.focal_gamma)?;
    if comps.is_empty() {
        return Ok(SampleGrad {
            grads: vec![None; net.names().len()],
            parts: Parts::default(),
        });
    }
    let loss = total_loss(&mut g, &comps, &cfg.loss_weights())?;
    let parts = Parts([0.0, 0.0, 0.0, weighted(&g, &comps, run, "pl_")?]);
    Ok(SampleGrad {
        grads: backprop(&g, net, &bound, loss)?,
        parts,
    })
}

// ------------------------------------------------------------ orchestration

/// Results of whichever stages ran.
#[derive(Debug, Clone, Default)]
pub struct StagesOutcome {
    pub stage1: Option<Stage1>,
    pub phase1: Option<Phase1Outcome>,
    pub phase2: Option<Phase2Outcome>,
}

/// Run a subset of stages in order: 1 = probe and prototypes, 2 = phase 1,
/// 3 = phase 2. Later stages read earlier artifacts from the run directory
/// when the earlier stage is not part of this call.
pub fn run_stages(run: &Run, data: &Dataset, stages: &[u8]) -> Result<StagesOutcome> {
    let mut sorted = stages.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() || sorted.iter().any(|s| !(1..=3).contains(s)) {
        return Err(Error::Config(format!("stages must be drawn from 1,2,3, got {stages:?}")));
    }
    let mut out = StagesOutcome::default();
    for s in sorted {
        match s {
            1 => out.stage1 = Some(run_stage1(run, data)?),
            2 => out.phase1 = Some(run_phase1(run, data, out.stage1.as_ref())?),
            _ => out.phase2 = Some(run_phase2(run, data)?),
        }
    }
    Ok(out)
}

/// Load a network from a checkpoint, trying the `model/`, `teacher/` and
/// bare-name layouts in that order.
pub fn load_model(path: &Path, cfg: &TrainConfig) -> Result<MultiTaskNet> {
    let c = Checkpoint::read(path)?;
    let mut net = MultiTaskNet::new(cfg.net(), cfg.seed)?;
    for prefix in ["model/", "teacher/", ""] {
        if c.load_net(prefix, &mut net).is_ok() {
            return Ok(net);
        }
    }
    Err(Error::Structural(format!("{}: no complete network found", path.display())))
}
