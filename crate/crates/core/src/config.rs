//! Flat run configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anatomask::ViewCategoryTable;
use crate::boundref::{GateMode, RefineConfig};
use crate::error::{Error, Result};
use crate::metrics::{Averaging, MetricConfig};
use crate::model::NetConfig;
use crate::pseudolabel::LossWeights;
use crate::semanchor::{FilterMode, ProbeConfig};

/// Every knob of a training run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Dataset root written by `gen-data`.
    pub data: String,
    /// Output root; the run directory is `out_root/run_name`.
    pub out_root: String,
    pub run_name: String,

    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub epochs: usize,
    pub poly_power: f64,
    pub ema_decay: f64,

    pub tau: f64,
    pub theta_cos: f64,
    pub theta_iou: f64,
    pub filter_mode: FilterMode,
    pub gate_mode: GateMode,
    pub min_area: usize,
    pub focal_gamma: f64,
    pub fp_rate: f64,
    pub nsd_tolerance: f64,
    pub averaging: Averaging,

    pub w_sup_seg: f64,
    pub w_sup_cls: f64,
    pub w_unsup_seg_s: f64,
    pub w_unsup_focal: f64,
    pub w_unsup_mixed: f64,
    pub w_pl_cls: f64,
    pub w_pl_cls_mixed: f64,
    pub w_pl_cls_focal_mixed: f64,

    pub phase2_lr_last_layer: f64,
    pub phase2_lr_cls_head: f64,
    pub phase2_epochs: usize,
    pub phase2_dino_filter: bool,

    pub sam_refine: bool,
    pub dino_filter: bool,
    pub mask_guidance: bool,
    /// Hard-mask evaluation predictions with the predicted view.
    pub eval_mask: bool,
    /// `"stub"` or `"cache:<path>"`.
    pub embedder: String,
    pub embed_dim: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// `"morph"`.
    pub refiner: String,
    pub net_widths: Vec<usize>,
    pub net_strides: Vec<usize>,
    /// Override of the view/category table, `4CH=0,1,..;LVOT=..;RVOT=..;3VT=..`.
    pub mask_table: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let net = NetConfig::default();
        Self {
            seed: 0,
            data: "data".into(),
            out_root: "runs".into(),
            run_name: "run".into(),
            batch_size: 8,
            weight_decay: 0.01,
            lr_backbone: 1e-4,
            lr_heads: 1e-3,
            epochs: 30,
            poly_power: 0.9,
            ema_decay: 0.99,
            tau: 0.95,
            theta_cos: 0.7,
            theta_iou: 0.5,
            filter_mode: FilterMode::default(),
            gate_mode: GateMode::default(),
            min_area: 4,
            focal_gamma: 2.0,
            fp_rate: 0.5,
            nsd_tolerance: crate::metrics::DEFAULT_TOLERANCE,
            averaging: Averaging::default(),
            w_sup_seg: w.sup_seg,
            w_sup_cls: w.sup_cls,
            w_unsup_seg_s: w.unsup_seg_s,
            w_unsup_focal: w.unsup_focal,
            w_unsup_mixed: w.unsup_mixed,
            w_pl_cls: w.pl_cls,
            w_pl_cls_mixed: w.pl_cls_mixed,
            w_pl_cls_focal_mixed: w.pl_cls_focal_mixed,
            phase2_lr_last_layer: 1e-5,
            phase2_lr_cls_head: 1e-3,
            phase2_epochs: 5,
            phase2_dino_filter: false,
            sam_refine: true,
            dino_filter: true,
            mask_guidance: true,
            eval_mask: true,
            embedder: "stub".into(),
            embed_dim: 64,
            probe_epochs: 200,
            probe_lr: 1e-2,
            refiner: "morph".into(),
            net_widths: net.widths,
            net_strides: net.strides,
            mask_table: None,
        }
    }
}

/// Embedder selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderChoice {
    Stub,
    Cache(PathBuf),
    Oracle,
}

/// Refiner selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinerChoice {
    Morph,
    Oracle,
}

impl TrainConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Apply `key=value` overrides. Values are read as JSON, falling back to
    /// a plain string, so `tau=0.9`, `sam_refine=false` and `embedder=stub`
    /// all work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(key.to_string(), value);
        }
        let c: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("phase2_lr_last_layer", self.phase2_lr_last_layer),
            ("phase2_lr_cls_head", self.phase2_lr_cls_head),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if self.phase2_lr_last_layer >= self.phase2_lr_cls_head {
            return bad(format!(
                "phase2_lr_last_layer {} must be below phase2_lr_cls_head {}",
                self.phase2_lr_last_layer, self.phase2_lr_cls_head
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.fp_rate) {
            return bad(format!("fp_rate {} outside [0, 1)", self.fp_rate));
        }
        if !(self.tau >= 0.0) || !(self.theta_iou >= 0.0) {
            return bad("tau and theta_iou must be ≥ 0".into());
        }
        if !self.theta_cos.is_finite() {
            return bad("theta_cos must be finite".into());
        }
        if !(self.nsd_tolerance >= 0.0) {
            return bad("nsd_tolerance must be ≥ 0".into());
        }
        if self.min_area == 0 {
            return bad("min_area must be ≥ 1".into());
        }
        if !(self.poly_power >= 0.0) || !(self.weight_decay >= 0.0) || !(self.focal_gamma >= 0.0) {
            return bad("poly_power, weight_decay and focal_gamma must be ≥ 0".into());
        }
        self.loss_weights().validate()?;
        self.net().validate()?;
        self.table()?;
        self.embedder_choice()?;
        self.refiner_choice()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            sup_seg: self.w_sup_seg,
            sup_cls: self.w_sup_cls,
            unsup_seg_s: self.w_unsup_seg_s,
            unsup_focal: self.w_unsup_focal,
            unsup_mixed: self.w_unsup_mixed,
            pl_cls: self.w_pl_cls,
            pl_cls_mixed: self.w_pl_cls_mixed,
            pl_cls_focal_mixed: self.w_pl_cls_focal_mixed,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            widths: self.net_widths.clone(),
            strides: self.net_strides.clone(),
        }
    }

    pub fn table(&self) -> Result<ViewCategoryTable> {
        match &self.mask_table {
            None => Ok(ViewCategoryTable::default()),
            Some(s) => ViewCategoryTable::parse(s),
        }
    }

    pub fn metric(&self) -> MetricConfig {
        MetricConfig {
            tolerance: self.nsd_tolerance,
            averaging: self.averaging,
        }
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            min_area: self.min_area,
            theta_iou: self.theta_iou,
            mode: self.gate_mode,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed: self.seed,
        }
    }

    pub fn embedder_choice(&self) -> Result<EmbedderChoice> {
        match self.embedder.as_str() {
            "stub" => Ok(EmbedderChoice::Stub),
            "oracle" => Ok(EmbedderChoice::Oracle),
            s => match s.strip_prefix("cache:") {
                Some(p) if !p.is_empty() => Ok(EmbedderChoice::Cache(PathBuf::from(p))),
                _ => Err(Error::Config(format!("unknown embedder {s:?}"))),
            },
        }
    }

    pub fn refiner_choice(&self) -> Result<RefinerChoice> {
        match self.refiner.as_str() {
            "morph" => Ok(RefinerChoice::Morph),
            "oracle" => Ok(RefinerChoice::Oracle),
            s => Err(Error::Config(format!("unknown refiner {s:?}"))),
        }
    }

    /// Test-only components are never allowed in a training run.
    pub fn reject_oracles(&self) -> Result<()> {
        if self.embedder_choice()? == EmbedderChoice::Oracle || self.refiner_choice()? == RefinerChoice::Oracle {
            return Err(Error::Config("oracle embedder/refiner are test utilities and cannot be used for training".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.out_root).join(&self.run_name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
