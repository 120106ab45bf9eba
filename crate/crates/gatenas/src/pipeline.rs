//! Experiment directories.
//!
//! ```text
//! <out-dir>/
//!   config.snapshot           canonical configuration
//!   checkpoints/<stage>-<epoch>.ckpt
//!   metrics.csv               one row per epoch
//!   architecture.json         after the final stage
//!   architecture.weights
//!   summary.txt
//! ```
//!
//! A checkpoint is written after every epoch. Resuming picks the latest one
//! and refuses to continue under a different configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gatenas_core::compile::{compile, describe};
use gatenas_core::data::Dataset;
use gatenas_core::network::SearchableNetwork;
use gatenas_core::resource::{resource_report, LatencyModel, ResourceReport};
use gatenas_core::train::{accuracy, EpochSummary, FinalReport, MetricsRow, StageTag, TrainSettings, Trainer};

use crate::checkpoint::{Array, Checkpoint};
use crate::config::Config;
use crate::{archfile, dataset, fsutil, profile, Error, Result};

pub const METRICS_HEADER: &str = "stage,epoch,step,task_loss,reg,total,resource,accuracy";

/// Paths inside an experiment directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dir: PathBuf,
}

impl Experiment {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Experiment { dir: dir.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.snapshot")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, stage: StageTag, epoch: usize) -> PathBuf {
        self.checkpoints_dir().join(format!("{stage}-{epoch}.ckpt"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn architecture_path(&self) -> PathBuf {
        self.dir.join("architecture.json")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }

    /// The checkpoint written last, by stage order and epoch.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints_dir();
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<((StageTag, usize), PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix(".ckpt") else { continue };
            let Some((stage, epoch)) = stem.rsplit_once('-') else { continue };
            let (Ok(stage), Ok(epoch)) = (stage.parse::<StageTag>(), epoch.parse::<usize>()) else { continue };
            if best.as_ref().is_none_or(|(k, _)| (stage, epoch) > *k) {
                best = Some(((stage, epoch), path));
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    fn has_run(&self) -> Result<bool> {
        Ok(self.latest_checkpoint()?.is_some() || self.metrics_path().exists())
    }
}

/// Everything derived from a configuration before training starts.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub latency: Option<LatencyModel>,
    pub net: SearchableNetwork,
    pub settings: TrainSettings,
    pub dense: ResourceReport,
}

/// Loads data and the latency profile and builds the supernet.
pub fn prepare(config: &Config) -> Result<Prepared> {
    let (train, test) = dataset::load(&config.data)?;
    let latency = match &config.search.latency_profile {
        Some(path) => {
            let model = profile::load(path)?.fit()?;
            for key in &model.clamped {
                log::warn!("latency profile {}: negative slope clamped to 0 for {key}", path.display());
            }
            Some(model)
        }
        None => None,
    };
    let spec = config.network_spec(train.image_shape(), train.num_classes());
    let net = SearchableNetwork::build(&spec, config.seed)?;
    let dense = resource_report(&describe(&net)?, latency.as_ref())?;
    let kind = config.search.kind;
    let dense_resource = dense
        .get(kind)
        .ok_or_else(|| Error::Usage(format!("the {kind} resource needs a latency profile")))?;
    let settings = config.train_settings(dense_resource)?;
    Ok(Prepared { train, test, latency, net, settings, dense })
}

/// Controls how far [`run`] goes.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Continue from the latest checkpoint in the directory.
    pub resume: bool,
    /// Stop once this stage is complete; `None` runs to the end.
    pub until: Option<StageTag>,
    /// Called after every epoch, once its checkpoint is on disk; returning
    /// `true` stops the run with [`Error::Interrupted`].
    pub interrupt: Option<&'a mut dyn FnMut(&EpochSummary) -> bool>,
}

#[derive(Debug)]
pub struct Outcome {
    pub stage: StageTag,
    pub metrics: Vec<MetricsRow>,
    /// Present once every stage has completed.
    pub result: Option<FinalReport>,
}

pub fn run(config: &Config, out_dir: &Path, mut opts: RunOptions) -> Result<Outcome> {
    let exp = Experiment::new(out_dir);
    let snapshot_text = config.snapshot();
    let p = prepare(config)?;
    let resume_from = if opts.resume { exp.latest_checkpoint()? } else { None };
    if !opts.resume && exp.has_run()? {
        return Err(Error::Usage(format!("{} already holds a run; pass --resume to continue it", out_dir.display())));
    }
    let mut trainer = match &resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.bytes("config")? != snapshot_text.as_bytes() {
                return Err(Error::Usage(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            let snap = ckpt.to_snapshot()?;
            log::info!("resuming from {}", path.display());
            Trainer::restore(p.net, p.settings, p.latency, &snap)?
        }
        None => Trainer::new(p.net, p.settings, p.latency, config.seed)?,
    };
    fsutil::create_dir_all(&exp.checkpoints_dir())?;
    fsutil::write_atomic(&exp.config_path(), snapshot_text.as_bytes())?;

    loop {
        let stage = trainer.progress().stage;
        if opts.until.is_some_and(|u| stage > u) {
            break;
        }
        let Some(summary) = trainer.step_epoch(&p.train, &p.test)? else { break };
        let mut ckpt = Checkpoint::from_snapshot(&trainer.snapshot());
        ckpt.push("config", Array::U8(snapshot_text.as_bytes().to_vec()));
        ckpt.save(&exp.checkpoint_path(summary.row.stage, summary.row.epoch))?;
        fsutil::write_atomic(&exp.metrics_path(), metrics_csv(trainer.metrics()).as_bytes())?;
        if let Some(hook) = opts.interrupt.as_mut() {
            if hook(&summary) {
                return Err(Error::Interrupted { stage: summary.row.stage.to_string(), epoch: summary.row.epoch });
            }
        }
    }

    let stage = trainer.progress().stage;
    let result = if stage == StageTag::Done {
        let report = trainer.finish(&p.train, &p.test)?;
        archfile::save(&exp.architecture_path(), &report.compiled, report.report)?;
        fsutil::write_atomic(&exp.summary_path(), summary_text(config, &report).as_bytes())?;
        Some(report)
    } else {
        None
    };
    Ok(Outcome { stage, metrics: trainer.metrics().to_vec(), result })
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.stage, r.epoch, r.step, r.task_loss, r.reg, r.total, r.resource, r.accuracy
        );
    }
    out
}

fn latency_text(v: Option<f64>) -> String {
    v.map_or_else(|| String::from("n/a"), |x| x.to_string())
}

pub fn summary_text(config: &Config, r: &FinalReport) -> String {
    let kind = config.search.kind;
    let mut out = String::new();
    let _ = writeln!(out, "test_accuracy: {}", r.test_accuracy);
    let _ = writeln!(out, "supernet_accuracy: {}", r.supernet_accuracy);
    let _ = writeln!(out, "parameters: {}", r.report.parameters);
    let _ = writeln!(out, "flops: {}", r.report.flops);
    let _ = writeln!(out, "predicted_latency_ms: {}", latency_text(r.report.predicted_latency_ms));
    let _ = writeln!(out, "dense_parameters: {}", r.dense.parameters);
    let _ = writeln!(out, "dense_flops: {}", r.dense.flops);
    let _ = writeln!(out, "dense_predicted_latency_ms: {}", latency_text(r.dense.predicted_latency_ms));
    let _ = writeln!(out, "resource_kind: {kind}");
    let _ = writeln!(out, "lambda: {}", config.search.lambda);
    let target = match config.search.target {
        crate::config::Target::Absolute(v) => v,
        crate::config::Target::Fraction(f) => f * r.dense.get(kind).unwrap_or(f64::NAN),
    };
    let _ = writeln!(out, "target: {target}");
    let _ = writeln!(out, "target_reached: {}", r.target_reached);
    let _ = writeln!(out, "search_epochs: {}", r.search_epochs);
    out
}

/// Reads `key: value` lines of a summary file.
pub fn summary_value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")).map(str::to_string))
}

/// Compiles the latest checkpoint of `out_dir`, or the dense supernet when
/// `dense` is set, into `out_dir/architecture.json`.
pub fn compile_experiment(config: &Config, out_dir: &Path, dense: bool) -> Result<ResourceReport> {
    let exp = Experiment::new(out_dir);
    let p = prepare(config)?;
    let net = if dense {
        p.net
    } else {
        let path = exp
            .latest_checkpoint()?
            .ok_or_else(|| Error::Usage(format!("no checkpoint in {}; pass --dense for the dense network", out_dir.display())))?;
        let snap = Checkpoint::load(&path)?.to_snapshot()?;
        Trainer::restore(p.net, p.settings, p.latency.clone(), &snap)?.into_net()
    };
    let compiled = compile(&net)?;
    let report = resource_report(compiled.descriptor(), p.latency.as_ref())?;
    fsutil::create_dir_all(out_dir)?;
    archfile::save(&exp.architecture_path(), &compiled, report)?;
    Ok(report)
}

/// Test accuracy of a compiled architecture on the configured data.
pub fn evaluate(config: &Config, architecture: &Path) -> Result<f64> {
    let compiled = archfile::load_compiled(architecture)?;
    let (_, test) = dataset::load(&config.data)?;
    Ok(accuracy(&test, |x| compiled.forward(x))?)
}
