//! `cardiac-ssl` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cardiac_ssl::boundref::{refine_mask, GateMode, MorphRefiner, RefineConfig};
use cardiac_ssl::config::TrainConfig;
use cardiac_ssl::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetSpec, Split, SplitCounts};
use cardiac_ssl::metrics::{evaluate, Averaging, MetricConfig};
use cardiac_ssl::phantom::{PhantomConfig, Sample};
use cardiac_ssl::semanchor::{filter_pseudo, FilterMode};
use cardiac_ssl::tensor::gradcheck;
use cardiac_ssl::trainer::{self, build_embedder, load_model, predict_all, score, Run, Stage1};
use cardiac_ssl::{Error, Result};
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "cardiac-ssl", version, about = "Semi-supervised cardiac phantom segmentation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        labeled: usize,
        #[arg(long, default_value_t = 400)]
        unlabeled: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
    },
    /// Run training stages (1 = probe and prototypes, 2 = phase 1, 3 = phase 2).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        stages: Vec<u8>,
        /// Config override `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the report (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the predictions as a dataset directory.
        #[arg(long)]
        pred_out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Refine every mask of a predictions directory.
    Refine {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        theta_iou: f64,
        #[arg(long, default_value_t = 4)]
        min_area: usize,
        #[arg(long, default_value = "per_class")]
        gate: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Filter CHD pseudo-labels (`id,pseudo_class` CSV) against stage-1 prototypes.
    Filter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        theta_cos: f64,
        #[arg(long, default_value = "dual")]
        mode: String,
        #[arg(long, default_value = "stub")]
        embedder: String,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
    },
    /// Score a predictions directory against ground truth.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = cardiac_ssl::metrics::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value = "per_image_then_class")]
        averaging: String,
    },
    /// Finite-difference gradient check of every primitive and the full model.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        per_input: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() || matches!(e, Error::Structural(_)) {
                EXIT_DATA
            } else if e.is_numerical() || matches!(e, Error::Contract(_)) {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            })
        }
    }
}

fn set_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    base.with_overrides(sets)
}

/// Run directory, with `SSL_RUN_DIR` replacing the configured output root.
fn run_dir(cfg: &TrainConfig) -> PathBuf {
    match std::env::var_os("SSL_RUN_DIR") {
        Some(root) => PathBuf::from(root).join(&cfg.run_name),
        None => cfg.run_dir(),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; use train, val or test"))),
    }
}

fn parse_averaging(s: &str) -> Result<Averaging> {
    match s {
        "per_image_then_class" => Ok(Averaging::PerImageThenClass),
        "pooled" => Ok(Averaging::Pooled),
        _ => Err(Error::Config(format!("unknown averaging {s:?}"))),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData {
            out,
            seed,
            size,
            labeled,
            unlabeled,
            val,
            test,
        } => {
            let counts = SplitCounts {
                labeled,
                unlabeled,
                val,
                test,
            };
            let spec = DatasetSpec {
                counts,
                seed,
                phantom: PhantomConfig {
                    size,
                    ..PhantomConfig::default()
                },
            };
            let mut data = generate_dataset(&spec)?;
            mkdir(&out)?;
            write_dataset(&mut data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            stages,
            sets,
            jobs,
        } => {
            set_jobs(jobs)?;
            let cfg = load_config(config.as_deref(), &sets)?;
            cfg.validate()?;
            cfg.reject_oracles()?;
            let data = read_dataset(Path::new(&cfg.data))?;
            let dir = run_dir(&cfg);
            let run = Run::new(cfg, &dir)?;
            let out = trainer::run_stages(&run, &data, &stages)?;
            if let Some(s) = &out.stage1 {
                println!("stage 1: {} prototypes", s.bank.present());
            }
            if let Some(p) = &out.phase1 {
                println!(
                    "phase 1 test: dice {:.2} nsd {:.2} macro-F1 {:.2} overall {:.2}",
                    p.test.dice_mean, p.test.nsd_mean, p.test.macro_f1, p.test.overall
                );
            }
            if let Some(p) = &out.phase2 {
                println!(
                    "phase 2 test: dice {:.2} nsd {:.2} macro-F1 {:.2} overall {:.2}",
                    p.test.dice_mean, p.test.nsd_mean, p.test.macro_f1, p.test.overall
                );
            }
            println!("run directory: {}", dir.display());
        }
        Command::Eval {
            config,
            sets,
            ckpt,
            split,
            out,
            pred_out,
            jobs,
        } => {
            set_jobs(jobs)?;
            let cfg = load_config(config.as_deref(), &sets)?;
            let split = parse_split(&split)?;
            let data = read_dataset(Path::new(&cfg.data))?;
            let net = load_model(&ckpt, &cfg)?;
            let samples: Vec<Sample> = data.split(split).into_iter().cloned().collect();
            let preds = predict_all(&net, &samples, &cfg.table()?, cfg.eval_mask)?;
            let report = score(&preds, &samples, &cfg)?;
            let out = out.unwrap_or_else(|| run_dir(&cfg));
            mkdir(&out)?;
            let stem = format!("eval_{}", split.name());
            report.write_json(&out.join(format!("{stem}.json")))?;
            report.write_csv(&out.join(format!("{stem}.csv")))?;
            report.summary(&mut std::io::stdout()).map_err(|e| Error::io("stdout", e))?;
            if let Some(dir) = pred_out {
                let predicted = samples
                    .iter()
                    .zip(&preds)
                    .map(|(s, p)| {
                        (
                            split,
                            Sample {
                                mask: p.mask.clone(),
                                chd: p.chd,
                                view: p.view,
                                ..s.clone()
                            },
                        )
                    })
                    .collect();
                let mut ds = Dataset::from_split_samples(data.manifest.seed, data.manifest.size, predicted);
                mkdir(&dir)?;
                write_dataset(&mut ds, &dir)?;
            }
        }
        Command::Refine {
            pred,
            out,
            theta_iou,
            min_area,
            gate,
            jobs,
        } => {
            set_jobs(jobs)?;
            let mode = match gate.as_str() {
                "per_class" => GateMode::PerClass,
                "whole" => GateMode::Whole,
                _ => return Err(Error::Config(format!("unknown gate mode {gate:?}"))),
            };
            let cfg = RefineConfig {
                min_area,
                theta_iou,
                mode,
            };
            let data = read_dataset(&pred)?;
            let refiner = MorphRefiner::default();
            let mut refined = Vec::new();
            let mut audit = Vec::new();
            for (split, s) in data.samples() {
                let r = refine_mask(&refiner, &s.id, &s.image, &s.mask, &cfg)?;
                audit.extend(r.audit(&s.id));
                refined.push((
                    split,
                    Sample {
                        mask: r.mask,
                        ..s.clone()
                    },
                ));
            }
            let mut ds = Dataset::from_split_samples(data.manifest.seed, data.manifest.size, refined);
            mkdir(&out)?;
            write_dataset(&mut ds, &out)?;
            let path = out.join(trainer::REFINE_AUDIT_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
            for row in &audit {
                w.serialize(row).map_err(|e| Error::io(&path, e.into()))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let adopted = audit.iter().filter(|r| r.adopted).count();
            println!("refined {} masks; {adopted}/{} boxes adopted", ds.len(), audit.len());
        }
        Command::Filter {
            data,
            labels,
            stage1,
            out,
            theta_cos,
            mode,
            embedder,
            embed_dim,
        } => {
            let mode = match mode.as_str() {
                "dual" => FilterMode::Dual,
                "threshold_only" => FilterMode::ThresholdOnly,
                _ => return Err(Error::Config(format!("unknown filter mode {mode:?}"))),
            };
            let cfg = TrainConfig {
                embedder,
                embed_dim,
                ..TrainConfig::default()
            };
            cfg.reject_oracles()?;
            let emb = build_embedder(&cfg)?;
            let st = Stage1::load(&stage1)?;
            let ds = read_dataset(&data)?;
            let by_id: std::collections::HashMap<&str, &Sample> =
                ds.samples().into_iter().map(|(_, s)| (s.id.as_str(), s)).collect();
            if !labels.exists() {
                return Err(Error::MissingArtifact(labels));
            }
            let mut rd = csv::Reader::from_path(&labels).map_err(|e| Error::io(&labels, e.into()))?;
            let mut w = csv::Writer::from_path(&out).map_err(|e| Error::io(&out, e.into()))?;
            w.write_record(["id", "pseudo_class", "cosine", "nearest", "verdict", "probe_class"])
                .map_err(|e| Error::io(&out, e.into()))?;
            let (mut n, mut accepted) = (0usize, 0usize);
            for (line, rec) in rd.records().enumerate() {
                let rec = rec.map_err(|e| Error::parse(&labels, line, e.to_string()))?;
                let id = rec.get(0).unwrap_or_default();
                let class: usize = rec
                    .get(1)
                    .and_then(|c| c.trim().parse().ok())
                    .filter(|&c| c < cardiac_ssl::model::CHD_CLASSES)
                    .ok_or_else(|| Error::parse(&labels, line + 1, "pseudo_class must be an integer in [0,7)"))?;
                let s = by_id
                    .get(id)
                    .ok_or_else(|| Error::parse(&labels, line + 1, format!("unknown sample id {id}")))?;
                let e = emb.embed(&s.id, &s.image)?;
                let o = filter_pseudo(&e, class, &st.bank, theta_cos, mode)?;
                n += 1;
                accepted += usize::from(o.verdict.accepted());
                w.write_record([
                    id.to_string(),
                    class.to_string(),
                    o.cosine.to_string(),
                    o.nearest.map_or_else(String::new, |c| c.to_string()),
                    o.verdict.label().to_string(),
                    st.probe.predict(&e)?.to_string(),
                ])
                .map_err(|e| Error::io(&out, e.into()))?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
            println!("{accepted}/{n} pseudo-labels accepted");
        }
        Command::Score {
            pred,
            gt,
            out,
            tolerance,
            averaging,
        } => {
            let cfg = MetricConfig {
                tolerance,
                averaging: parse_averaging(&averaging)?,
            };
            let p = read_dataset(&pred)?;
            let g = read_dataset(&gt)?;
            let truth: std::collections::HashMap<&str, &Sample> =
                g.samples().into_iter().map(|(_, s)| (s.id.as_str(), s)).collect();
            let (mut pm, mut gm, mut pc, mut gc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (_, s) in p.samples() {
                let t = truth
                    .get(s.id.as_str())
                    .ok_or_else(|| Error::Structural(format!("prediction {} has no ground truth", s.id)))?;
                pm.push(s.mask.clone());
                gm.push(t.mask.clone());
                pc.push(s.chd);
                gc.push(t.chd);
            }
            let report = evaluate(&pm, &gm, &pc, &gc, &cfg)?;
            let mut stdout = std::io::stdout();
            report.summary(&mut stdout).map_err(|e| Error::io("stdout", e))?;
            stdout.flush().map_err(|e| Error::io("stdout", e))?;
            if let Some(out) = out {
                mkdir(&out)?;
                report.write_json(&out.join("score.json"))?;
                report.write_csv(&out.join("score.csv"))?;
            }
        }
        Command::CheckGrad { seed, per_input } => {
            let reports = gradcheck::run_suite(seed, per_input)?;
            let mut all_ok = true;
            let mut worst: f64 = 0.0;
            for r in &reports {
                println!(
                    "{:<24} coords {:>4}  pass {:>6.2}%  max rel err {:.3e}  max abs diff {:.3e}{}",
                    r.name,
                    r.coords,
                    100.0 * r.pass_fraction(),
                    r.max_rel_err,
                    r.max_abs_err,
                    if r.ok() { "" } else { "  FAIL" }
                );
                all_ok &= r.ok();
                worst = worst.max(r.max_rel_err);
            }
            println!("max relative error {worst:.3e}");
            if !all_ok {
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
