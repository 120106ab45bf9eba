//! The pretrain / search / fine-tune state machine.
//!
//! A [`Trainer`] advances one epoch per [`Trainer::step_epoch`] call and can
//! be captured into a [`Snapshot`] between epochs; restoring a snapshot
//! continues the exact trajectory of the uninterrupted run.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::compile::{compile, describe, ArchitectureDescriptor, CompiledArchitecture};
use crate::data::Dataset;
use crate::error::config_err;
use crate::graph::Graph;
use crate::kernels::BnMode;
use crate::network::{ForwardOptions, GateMode, SearchableNetwork};
use crate::optim::{gate_sgd_step, step_decay, Optimizer, OptimizerKind};
use crate::resource::{self, LatencyModel, RegularizerState, ResourceKind, ResourceReport};
use crate::rng::{self, Rng, RngState};
use crate::{Error, Result, Tensor};

/// Batch size used for every evaluation pass.
pub const EVAL_BATCH: usize = 256;

static SEARCH_EPOCHS: AtomicU64 = AtomicU64::new(0);

/// Number of search epochs executed in this process, across all trainers.
pub fn search_epochs_executed() -> u64 {
    SEARCH_EPOCHS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub pretrain: StageSettings,
    /// `epochs` is the cap on search epochs.
    pub search: StageSettings,
    pub finetune: StageSettings,
    pub gate_lr: f32,
    pub regularizer: RegularizerState,
    /// End the search as soon as the discrete resource reaches the target.
    pub stop_at_target: bool,
    pub recalibration_batches: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2 (got {})", self.batch_size));
        }
        for s in [&self.pretrain, &self.search, &self.finetune] {
            s.optimizer.validate()?;
        }
        if !(self.gate_lr > 0.0) {
            return Err(config_err!("gate learning rate must be positive (got {})", self.gate_lr));
        }
        RegularizerState::new(self.regularizer.kind, self.regularizer.lambda, self.regularizer.target)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    Pretrain,
    Search,
    Finetune,
    Done,
}

impl StageTag {
    pub fn keyword(&self) -> &'static str {
        match self {
            StageTag::Pretrain => "pretrain",
            StageTag::Search => "search",
            StageTag::Finetune => "finetune",
            StageTag::Done => "done",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(StageTag::Pretrain),
            "search" => Ok(StageTag::Search),
            "finetune" => Ok(StageTag::Finetune),
            "done" => Ok(StageTag::Done),
            _ => Err(Error::State(format!("unknown stage '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub stage: StageTag,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// Optimizer steps over the whole run.
    pub step: u64,
    pub search_epochs: usize,
    pub target_reached: bool,
    /// Lowest discrete resource seen at a search check.
    pub best_resource: f64,
}

/// One line of the metrics log, written after every epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: StageTag,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub step: u64,
    pub task_loss: f64,
    pub reg: f64,
    pub total: f64,
    /// Discrete resource of the current gate decisions.
    pub resource: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub row: MetricsRow,
    /// Active output channels per searchable layer.
    pub active_channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FinalReport {
    pub compiled: CompiledArchitecture,
    pub report: ResourceReport,
    pub dense: ResourceReport,
    /// Accuracy of the compiled network on the test split.
    pub test_accuracy: f64,
    /// Accuracy of the masked supernet on the test split, after recalibration.
    pub supernet_accuracy: f64,
    pub target_reached: bool,
    pub search_epochs: usize,
}

/// Everything needed to continue a run between two epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub progress: Progress,
    pub params: Vec<(String, Vec<f32>)>,
    pub gates: Vec<(String, Vec<f32>)>,
    pub best_gates: Option<Vec<(String, Vec<f32>)>>,
    pub gates_frozen: bool,
    pub optimizer_steps: u64,
    pub optimizer: Vec<(String, Vec<f32>)>,
    pub rng: RngState,
    pub metrics: Vec<MetricsRow>,
}

pub struct Trainer {
    net: SearchableNetwork,
    settings: TrainSettings,
    latency: Option<LatencyModel>,
    optimizer: Optimizer,
    rng: Rng,
    progress: Progress,
    metrics: Vec<MetricsRow>,
    best_gates: Option<Vec<(String, Vec<f32>)>>,
    dense: ResourceReport,
}

/// Fraction of correct argmax predictions.
pub fn accuracy(data: &Dataset, mut predict: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.batch(&idx)?;
        let logits = predict(&x)?;
        let (_, k) = logits.dims2()?;
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += (best == label as usize) as usize;
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

impl Trainer {
    /// Starts a run on a freshly built network (all gates open); `seed`
    /// drives data shuffling.
    pub fn new(net: SearchableNetwork, settings: TrainSettings, latency: Option<LatencyModel>, seed: u64) -> Result<Self> {
        settings.validate()?;
        if settings.regularizer.kind == ResourceKind::Latency {
            let model = latency
                .as_ref()
                .ok_or_else(|| Error::Coverage(String::from("latency kind needs a latency profile")))?;
            for key in resource::required_conditions(&net) {
                model.get(&key)?;
            }
        }
        let dense = resource::resource_report(&describe(&net)?, latency.as_ref())?;
        let mut rng = rng::seeded(seed);
        rng.set_stream(1);
        let mut t = Trainer {
            optimizer: Optimizer::new(settings.pretrain.optimizer)?,
            net,
            settings,
            latency,
            rng,
            progress: Progress {
                stage: StageTag::Pretrain,
                epoch: 0,
                step: 0,
                search_epochs: 0,
                target_reached: false,
                best_resource: f64::INFINITY,
            },
            metrics: Vec::new(),
            best_gates: None,
            dense,
        };
        t.skip_finished_stages()?;
        Ok(t)
    }

    /// Continues a run from `snapshot`. `net` must be built from the same
    /// specification as the network that produced it.
    pub fn restore(
        net: SearchableNetwork,
        settings: TrainSettings,
        latency: Option<LatencyModel>,
        snapshot: &Snapshot,
    ) -> Result<Self> {
        let mut t = Trainer::new(net, settings, latency, 0)?;
        t.net.import_params(&snapshot.params)?;
        t.net.import_gates(&snapshot.gates)?;
        if snapshot.gates_frozen {
            t.net.freeze_gates();
        } else {
            t.net.unfreeze_gates();
        }
        t.progress = snapshot.progress;
        t.optimizer = Optimizer::new(t.stage_settings(t.progress.stage).optimizer)?;
        t.optimizer.import_state(snapshot.optimizer_steps, &snapshot.optimizer)?;
        t.rng = snapshot.rng.restore();
        t.metrics = snapshot.metrics.clone();
        t.best_gates = snapshot.best_gates.clone();
        Ok(t)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            progress: self.progress,
            params: self.net.export_params(),
            gates: self.net.export_gates(),
            best_gates: self.best_gates.clone(),
            gates_frozen: self.net.gates_frozen(),
            optimizer_steps: self.optimizer.steps(),
            optimizer: self.optimizer.export_state(),
            rng: RngState::capture(&self.rng),
            metrics: self.metrics.clone(),
        }
    }

    pub fn net(&self) -> &SearchableNetwork {
        &self.net
    }

    pub fn into_net(self) -> SearchableNetwork {
        self.net
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Resources of the network with every gate open.
    pub fn dense_resources(&self) -> ResourceReport {
        self.dense
    }

    pub fn latency_model(&self) -> Option<&LatencyModel> {
        self.latency.as_ref()
    }

    /// Discrete resources of the current gate decisions.
    pub fn current_resources(&self) -> Result<ResourceReport> {
        resource::resource_report(&describe(&self.net)?, self.latency.as_ref())
    }

    fn stage_settings(&self, stage: StageTag) -> StageSettings {
        match stage {
            StageTag::Pretrain => self.settings.pretrain,
            StageTag::Search | StageTag::Done => self.settings.search,
            StageTag::Finetune => self.settings.finetune,
        }
    }

    fn enter(&mut self, stage: StageTag) -> Result<()> {
        self.progress.stage = stage;
        self.progress.epoch = 0;
        match stage {
            StageTag::Search => self.net.unfreeze_gates(),
            StageTag::Finetune | StageTag::Done => self.net.freeze_gates(),
            StageTag::Pretrain => {}
        }
        self.optimizer = Optimizer::new(self.stage_settings(stage).optimizer)?;
        Ok(())
    }

    /// Leaves the search stage, falling back to the lowest-resource gates
    /// seen when the target was not reached.
    fn end_search(&mut self) -> Result<()> {
        if self.settings.stop_at_target && !self.progress.target_reached {
            if let Some(best) = &self.best_gates {
                log::warn!("search did not reach the target, keeping the lowest-resource architecture seen");
                let best = best.clone();
                self.net.import_gates(&best)?;
            }
        }
        self.enter(StageTag::Finetune)
    }

    fn skip_finished_stages(&mut self) -> Result<()> {
        loop {
            let p = self.progress;
            match p.stage {
                StageTag::Pretrain if p.epoch >= self.settings.pretrain.epochs => self.enter(StageTag::Search)?,
                StageTag::Search
                    if p.epoch >= self.settings.search.epochs
                        || (self.settings.stop_at_target && p.target_reached) =>
                {
                    self.end_search()?
                }
                StageTag::Finetune if p.epoch >= self.settings.finetune.epochs => self.enter(StageTag::Done)?,
                _ => return Ok(()),
            }
        }
    }

    /// Runs one epoch of the current stage. Returns `None` once all stages
    /// are complete.
    pub fn step_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<Option<EpochSummary>> {
        let stage = self.progress.stage;
        let (task, reg, total) = match stage {
            StageTag::Done => return Ok(None),
            StageTag::Pretrain => self.train_epoch(train, GateMode::Open, false)?,
            StageTag::Search => self.search_epoch(train)?,
            StageTag::Finetune => self.train_epoch(train, GateMode::Decisions, false)?,
        };
        self.progress.epoch += 1;
        let kind = self.settings.regularizer.kind;
        let report = self.current_resources()?;
        let resource = report.get(kind).unwrap_or(f64::NAN);
        if stage == StageTag::Search {
            self.progress.search_epochs += 1;
            if resource < self.progress.best_resource {
                self.progress.best_resource = resource;
                self.best_gates = Some(self.net.export_gates());
            }
            if resource <= self.settings.regularizer.target {
                self.progress.target_reached = true;
            }
        }
        let net = &self.net;
        let acc = accuracy(test, |x| net.predict(x))?;
        let row = MetricsRow {
            stage,
            epoch: self.progress.epoch,
            step: self.progress.step,
            task_loss: task,
            reg,
            total,
            resource,
            accuracy: acc,
        };
        self.metrics.push(row);
        let active_channels = self.net.active_channels();
        log::info!(
            "{stage} epoch {}: task {task:.4} reg {reg:.4e} {kind} {resource} acc {acc:.4} channels {active_channels:?}",
            self.progress.epoch
        );
        self.skip_finished_stages()?;
        Ok(Some(EpochSummary { row, active_channels }))
    }

    /// Runs epochs until the current stage changes or the run is complete.
    pub fn run_stage(&mut self, train: &Dataset, test: &Dataset) -> Result<Vec<EpochSummary>> {
        let stage = self.progress.stage;
        let mut out = Vec::new();
        while self.progress.stage == stage {
            match self.step_epoch(train, test)? {
                Some(s) => out.push(s),
                None => break,
            }
        }
        Ok(out)
    }

    /// Search epoch: joint descent on weights and gates. Every searchable
    /// configuration, including one operation per layer, goes through here.
    fn search_epoch(&mut self, train: &Dataset) -> Result<(f64, f64, f64)> {
        SEARCH_EPOCHS.fetch_add(1, Ordering::SeqCst);
        self.train_epoch(train, GateMode::Learn, true)
    }

    fn train_epoch(&mut self, train: &Dataset, gates: GateMode, regularize: bool) -> Result<(f64, f64, f64)> {
        let stage = self.progress.stage;
        let settings = self.stage_settings(stage);
        let lr = step_decay(settings.optimizer.lr(), self.progress.epoch, settings.epochs);
        let gate_lr = step_decay(self.settings.gate_lr, self.progress.epoch, settings.epochs);
        let reg_state = self.settings.regularizer;
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut self.rng, &mut order);

        let (mut task_sum, mut reg_sum, mut total_sum, mut batches) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for idx in order.chunks(self.settings.batch_size).filter(|c| c.len() >= 2) {
            let (x, y) = train.batch(idx)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            self.net.zero_grads();
            let logits = self.net.forward(&mut g, xv, ForwardOptions::train(gates))?;
            let loss = g.cross_entropy(logits, &y)?;
            let task = g.value(loss).data()[0] as f64;
            if !task.is_finite() {
                return Err(Error::Divergence { stage: String::from(stage.keyword()), epoch: self.progress.epoch + 1 });
            }
            let grads = g.backward(loss)?;
            self.net.apply_gradients(&grads);
            let reg = if regularize { resource::regularizer(&mut self.net, &reg_state, self.latency.as_ref())? } else { 0.0 };
            self.optimizer.step(&mut self.net.params, lr);
            if regularize && !self.net.gates_frozen() {
                gate_sgd_step(&mut self.net.gates, gate_lr);
            }
            self.progress.step += 1;
            task_sum += task;
            reg_sum += reg;
            total_sum += task + reg_state.lambda * reg;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        Ok((task_sum / n, reg_sum / n, total_sum / n))
    }

    /// Re-estimates batch-norm running statistics as the plain average over
    /// the first `batches` training batches, with current gate decisions.
    pub fn recalibrate(&mut self, train: &Dataset, batches: usize) -> Result<()> {
        let bs = self.settings.batch_size;
        for t in 0..batches {
            let start = t * bs;
            if start + 2 > train.len() {
                break;
            }
            let idx: Vec<usize> = (start..(start + bs).min(train.len())).collect();
            let (x, _) = train.batch(&idx)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let opts = ForwardOptions { bn: BnMode::Train, gates: GateMode::Decisions, bn_momentum: 1.0 / (t + 1) as f32 };
            self.net.forward(&mut g, xv, opts)?;
        }
        Ok(())
    }

    /// Recalibrates, compiles and evaluates the searched network.
    pub fn finish(&mut self, train: &Dataset, test: &Dataset) -> Result<FinalReport> {
        if self.progress.stage != StageTag::Done {
            return Err(Error::State(format!("cannot finish during the {} stage", self.progress.stage)));
        }
        self.recalibrate(train, self.settings.recalibration_batches)?;
        let compiled = compile(&self.net)?;
        let report = resource::resource_report(compiled.descriptor(), self.latency.as_ref())?;
        let test_accuracy = accuracy(test, |x| compiled.forward(x))?;
        let net = &self.net;
        let supernet_accuracy = accuracy(test, |x| net.predict(x))?;
        Ok(FinalReport {
            compiled,
            report,
            dense: self.dense,
            test_accuracy,
            supernet_accuracy,
            target_reached: self.progress.target_reached,
            search_epochs: self.progress.search_epochs,
        })
    }

    /// Pruned architecture implied by the current decisions.
    pub fn describe(&self) -> Result<ArchitectureDescriptor> {
        describe(&self.net)
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings { optimizer: OptimizerKind::sgd(0.01), epochs: 0 }
    }
}

