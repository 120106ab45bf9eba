//! Experiment configuration.
//!
//! A TOML document with the sections `[network]`, `[data]`, `[train]`,
//! `[pretrain]`, `[search]` and `[finetune]` plus a top-level `seed`. Every
//! key is optional; unknown keys are rejected. Errors carry the dotted key
//! path and the line number. [`Config::snapshot`] writes a canonical form
//! with all defaults filled in, which parses back to the same value.
//!
//! ```toml
//! seed = 1
//!
//! [network]
//! backbone = "plain-cnn"
//! kernels = [1, 3]
//! activations = ["relu", "prelu"]
//!
//! [data]
//! source = "mnist-idx"
//! train_images = "mnist/train-images-idx3-ubyte"
//! train_labels = "mnist/train-labels-idx1-ubyte"
//! test_images = "mnist/t10k-images-idx3-ubyte"
//! test_labels = "mnist/t10k-labels-idx1-ubyte"
//!
//! [search]
//! kind = "flops"
//! target_fraction = 0.5
//! ```

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gatenas_core::network::{
    Activation, Backbone, BackboneItem, ConvType, GateGradient, NetworkSpec, Norm, ALLOWED_KERNELS,
};
use gatenas_core::optim::OptimizerKind;
use gatenas_core::resource::{RegularizerState, ResourceKind};
use gatenas_core::train::{StageSettings, TrainSettings};
use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::{fsutil, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    /// Replaces the backbone's layer layout: channel counts and `"pool"`.
    pub layout: Option<Vec<BackboneItem>>,
    pub conv_types: Vec<ConvType>,
    pub kernels: Vec<usize>,
    pub activations: Vec<Activation>,
    pub norm: Norm,
    pub skips: Vec<(usize, usize)>,
    pub reducers: bool,
    pub gate_gradient: GateGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    SyntheticBlobs { classes: usize, channels: usize, size: usize, noise: f32, seed: u64 },
    MnistIdx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Leading samples of the training split to use.
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gate_lr: f32,
    pub recalibration_batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Absolute(f64),
    /// Fraction of the dense network's resource.
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub stage: StageSettings,
    pub kind: ResourceKind,
    pub lambda: f64,
    pub target: Target,
    pub stop_at_target: bool,
    pub latency_profile: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub pretrain: StageSettings,
    pub search: SearchConfig,
    pub finetune: StageSettings,
}

impl Default for Config {
    fn default() -> Self {
        let stage = |epochs| StageSettings { optimizer: OptimizerKind::sgd(0.01), epochs };
        Config {
            seed: 0,
            network: NetworkConfig {
                backbone: Backbone::PlainCnn,
                layout: None,
                conv_types: vec![ConvType::Normal],
                kernels: vec![3],
                activations: vec![Activation::Relu],
                norm: Norm::Batch,
                skips: Vec::new(),
                reducers: true,
                gate_gradient: GateGradient::BinaryMask,
            },
            data: DataConfig {
                source: DataSource::SyntheticBlobs { classes: 10, channels: 1, size: 28, noise: 0.15, seed: 0 },
                train_samples: 5000,
                test_samples: 1000,
            },
            train: TrainConfig { batch_size: 128, gate_lr: 100.0, recalibration_batches: 10 },
            pretrain: stage(5),
            search: SearchConfig {
                stage: stage(40),
                kind: ResourceKind::Flops,
                lambda: ResourceKind::Flops.default_lambda(),
                target: Target::Fraction(0.5),
                stop_at_target: true,
                latency_profile: None,
            },
            finetune: stage(5),
        }
    }
}

impl Config {
    /// Reads a configuration file; relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Config> {
        let text = fsutil::read_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Config::parse(&text, &path.display().to_string(), base)
    }

    /// Parses configuration text. `file` labels error messages.
    pub fn parse(text: &str, file: &str, base: &Path) -> Result<Config> {
        let doc = Doc { file, text, base };
        let root = DeTable::parse(text).map_err(|e| {
            let line = e.span().map(|s| doc.line(s.start)).unwrap_or(1);
            Error::Config { file: file.into(), line, key: String::new(), message: e.message().trim().into() }
        })?;
        let span = root.span();
        let root = Section::new(&doc, String::new(), root.get_ref(), span);
        let mut c = Config::default();
        c.seed = root.int("seed")?.unwrap_or(c.seed);
        if let Some(s) = root.table("network")? {
            c.network = parse_network(&s, c.network)?;
            s.finish()?;
        }
        if let Some(s) = root.table("data")? {
            c.data = parse_data(&s, c.data)?;
            s.finish()?;
        }
        if let Some(s) = root.table("train")? {
            c.train.batch_size = s.int("batch_size")?.unwrap_or(c.train.batch_size);
            if c.train.batch_size < 2 {
                return Err(s.invalid("batch_size", "batch size must be at least 2"));
            }
            c.train.gate_lr = s.positive_f32("gate_lr")?.unwrap_or(c.train.gate_lr);
            c.train.recalibration_batches = s.int("recalibration_batches")?.unwrap_or(c.train.recalibration_batches);
            s.finish()?;
        }
        if let Some(s) = root.table("pretrain")? {
            c.pretrain = parse_stage(&s, c.pretrain)?;
            s.finish()?;
        }
        if let Some(s) = root.table("search")? {
            c.search = parse_search(&s, c.search)?;
            s.finish()?;
        }
        if let Some(s) = root.table("finetune")? {
            c.finetune = parse_stage(&s, c.finetune)?;
            s.finish()?;
        }
        root.finish()?;
        Ok(c)
    }

    /// Canonical text with every setting spelled out.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "seed = {}", self.seed);
        let n = &self.network;
        let _ = writeln!(w, "\n[network]");
        let _ = writeln!(w, "backbone = {}", quote(n.backbone.keyword()));
        if let Some(layout) = &n.layout {
            let items: Vec<String> = layout
                .iter()
                .map(|i| match i {
                    BackboneItem::Conv(c) => c.to_string(),
                    BackboneItem::MaxPool => quote("pool"),
                })
                .collect();
            let _ = writeln!(w, "layout = [{}]", items.join(", "));
        }
        let _ = writeln!(w, "conv_types = {}", keywords(n.conv_types.iter().map(|c| c.keyword())));
        let _ = writeln!(w, "kernels = [{}]", join(n.kernels.iter()));
        let _ = writeln!(w, "activations = {}", keywords(n.activations.iter().map(|a| a.keyword())));
        let _ = writeln!(w, "norm = {}", quote(n.norm.keyword()));
        let skips: Vec<String> = n.skips.iter().map(|(a, b)| format!("[{a}, {b}]")).collect();
        let _ = writeln!(w, "skips = [{}]", skips.join(", "));
        let _ = writeln!(w, "reducers = {}", n.reducers);
        let _ = writeln!(w, "gate_gradient = {}", quote(n.gate_gradient.keyword()));

        let _ = writeln!(w, "\n[data]");
        match &self.data.source {
            DataSource::SyntheticBlobs { classes, channels, size, noise, seed } => {
                let _ = writeln!(w, "source = \"synthetic-blobs\"");
                let _ = writeln!(w, "classes = {classes}\nchannels = {channels}\nsize = {size}");
                let _ = writeln!(w, "noise = {noise:?}\nseed = {seed}");
            }
            DataSource::MnistIdx { train_images, train_labels, test_images, test_labels } => {
                let _ = writeln!(w, "source = \"mnist-idx\"");
                for (k, p) in [
                    ("train_images", train_images),
                    ("train_labels", train_labels),
                    ("test_images", test_images),
                    ("test_labels", test_labels),
                ] {
                    let _ = writeln!(w, "{k} = {}", quote(&p.to_string_lossy()));
                }
            }
        }
        let _ = writeln!(w, "train_samples = {}\ntest_samples = {}", self.data.train_samples, self.data.test_samples);

        let t = &self.train;
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "batch_size = {}\ngate_lr = {:?}", t.batch_size, t.gate_lr);
        let _ = writeln!(w, "recalibration_batches = {}", t.recalibration_batches);

        write_stage(w, "pretrain", &self.pretrain);
        let s = &self.search;
        write_stage(w, "search", &s.stage);
        let _ = writeln!(w, "kind = {}\nlambda = {:?}", quote(s.kind.keyword()), s.lambda);
        match s.target {
            Target::Absolute(v) => writeln!(w, "target = {v:?}"),
            Target::Fraction(f) => writeln!(w, "target_fraction = {f:?}"),
        }
        .ok();
        let _ = writeln!(w, "stop_at_target = {}", s.stop_at_target);
        if let Some(p) = &s.latency_profile {
            let _ = writeln!(w, "latency_profile = {}", quote(&p.to_string_lossy()));
        }
        write_stage(w, "finetune", &self.finetune);
        out
    }

    /// Network specification for inputs of shape `input` with `classes` labels.
    pub fn network_spec(&self, input: [usize; 3], classes: usize) -> NetworkSpec {
        let n = &self.network;
        NetworkSpec {
            backbone: n.backbone,
            input,
            num_classes: classes,
            conv_types: n.conv_types.clone(),
            kernels: n.kernels.clone(),
            activations: n.activations.clone(),
            norm: n.norm,
            skips: n.skips.clone(),
            reducers: n.reducers,
            gate_gradient: n.gate_gradient,
            custom_layout: n.layout.clone(),
        }
    }

    /// Trainer settings once the dense resource is known.
    pub fn train_settings(&self, dense_resource: f64) -> Result<TrainSettings> {
        let target = match self.search.target {
            Target::Absolute(v) => v,
            Target::Fraction(f) => f * dense_resource,
        };
        let settings = TrainSettings {
            batch_size: self.train.batch_size,
            pretrain: self.pretrain,
            search: self.search.stage,
            finetune: self.finetune,
            gate_lr: self.train.gate_lr,
            regularizer: RegularizerState::new(self.search.kind, self.search.lambda, target)?,
            stop_at_target: self.search.stop_at_target,
            recalibration_batches: self.train.recalibration_batches,
        };
        settings.validate()?;
        Ok(settings)
    }
}

fn write_stage(w: &mut String, name: &str, s: &StageSettings) {
    let _ = writeln!(w, "\n[{name}]");
    match s.optimizer {
        OptimizerKind::SgdNesterov { lr, momentum, weight_decay } => {
            let _ = writeln!(w, "optimizer = \"sgd\"\nlr = {lr:?}\nmomentum = {momentum:?}\nweight_decay = {weight_decay:?}");
        }
        OptimizerKind::Adam { lr, beta1, beta2, eps } => {
            let _ = writeln!(w, "optimizer = \"adam\"\nlr = {lr:?}\nbeta1 = {beta1:?}\nbeta2 = {beta2:?}\neps = {eps:?}");
        }
    }
    let _ = writeln!(w, "epochs = {}", s.epochs);
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn keywords<'a>(items: impl Iterator<Item = &'a str>) -> String {
    let v: Vec<String> = items.map(quote).collect();
    format!("[{}]", v.join(", "))
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_network(s: &Section, mut n: NetworkConfig) -> Result<NetworkConfig> {
    if let Some(b) = s.keyword::<Backbone>("backbone")? {
        n.backbone = b;
    }
    if let Some(items) = s.array("layout")? {
        let mut layout = Vec::new();
        for (i, v) in items.iter().enumerate() {
            let key = format!("layout[{i}]");
            match v.get_ref() {
                DeValue::String(p) if p == "pool" => layout.push(BackboneItem::MaxPool),
                DeValue::Integer(_) => {
                    let c = s.int_value(&key, v)? as usize;
                    if c == 0 {
                        return Err(s.invalid_at(&key, v.span(), "a layer needs at least one channel"));
                    }
                    layout.push(BackboneItem::Conv(c));
                }
                _ => return Err(s.invalid_at(&key, v.span(), "expected a channel count or \"pool\"")),
            }
        }
        if !layout.iter().any(|i| matches!(i, BackboneItem::Conv(_))) {
            return Err(s.invalid("layout", "the layout needs at least one convolution layer"));
        }
        n.layout = Some(layout);
    }
    if let Some(v) = s.keyword_list::<ConvType>("conv_types")? {
        n.conv_types = v;
    }
    if let Some(items) = s.array("kernels")? {
        let mut kernels = Vec::new();
        for (i, v) in items.iter().enumerate() {
            let key = format!("kernels[{i}]");
            let k = s.int_value(&key, v)? as usize;
            if !ALLOWED_KERNELS.contains(&k) {
                return Err(s.invalid_at(&key, v.span(), &format!("kernel must be one of 1,3,5,7,9,11 (got {k})")));
            }
            if kernels.contains(&k) {
                return Err(s.invalid_at(&key, v.span(), &format!("duplicate kernel {k}")));
            }
            kernels.push(k);
        }
        if kernels.is_empty() {
            return Err(s.invalid("kernels", "kernel list must not be empty"));
        }
        n.kernels = kernels;
    }
    if let Some(v) = s.keyword_list::<Activation>("activations")? {
        n.activations = v;
    }
    if let Some(v) = s.keyword::<Norm>("norm")? {
        n.norm = v;
    }
    if let Some(items) = s.array("skips")? {
        let mut skips = Vec::new();
        for (i, v) in items.iter().enumerate() {
            let key = format!("skips[{i}]");
            let pair = match v.get_ref() {
                DeValue::Array(a) if a.len() == 2 => a,
                _ => return Err(s.invalid_at(&key, v.span(), "expected a pair [from, to]")),
            };
            let from = s.int_value(&format!("{key}[0]"), &pair[0])? as usize;
            let to = s.int_value(&format!("{key}[1]"), &pair[1])? as usize;
            if from >= to {
                return Err(s.invalid_at(&key, v.span(), "a skip must go forward (from < to)"));
            }
            skips.push((from, to));
        }
        n.skips = skips;
    }
    n.reducers = s.bool("reducers")?.unwrap_or(n.reducers);
    if let Some(v) = s.keyword::<GateGradient>("gate_gradient")? {
        n.gate_gradient = v;
    }
    Ok(n)
}

fn parse_data(s: &Section, mut d: DataConfig) -> Result<DataConfig> {
    let source = match s.string("source")? {
        Some((src, span)) => match src.as_str() {
            "synthetic-blobs" | "mnist-idx" => src,
            other => {
                return Err(s.invalid_at(
                    "source",
                    span,
                    &format!("unknown data source `{other}` (expected synthetic-blobs or mnist-idx)"),
                ))
            }
        },
        None => String::from("synthetic-blobs"),
    };
    d.source = if source == "mnist-idx" {
        let path = |key: &str| -> Result<PathBuf> {
            match s.string(key)? {
                Some((p, _)) => Ok(s.doc.base.join(p)),
                None => Err(s.invalid(key, "required for the mnist-idx source")),
            }
        };
        DataSource::MnistIdx {
            train_images: path("train_images")?,
            train_labels: path("train_labels")?,
            test_images: path("test_images")?,
            test_labels: path("test_labels")?,
        }
    } else {
        let (c0, ch0, s0, n0, seed0) = match d.source {
            DataSource::SyntheticBlobs { classes, channels, size, noise, seed } => (classes, channels, size, noise, seed),
            DataSource::MnistIdx { .. } => (10, 1, 28, 0.15, 0),
        };
        let classes = s.int("classes")?.unwrap_or(c0);
        if classes < 2 {
            return Err(s.invalid("classes", "need at least 2 classes"));
        }
        let channels = s.int("channels")?.unwrap_or(ch0);
        if channels == 0 {
            return Err(s.invalid("channels", "images need at least one channel"));
        }
        let size = s.int("size")?.unwrap_or(s0);
        if size < 4 {
            return Err(s.invalid("size", "images must be at least 4x4"));
        }
        let noise = s.float("noise")?.map(|v| v as f32).unwrap_or(n0);
        if !(noise >= 0.0) {
            return Err(s.invalid("noise", "noise must be non-negative"));
        }
        DataSource::SyntheticBlobs { classes, channels, size, noise, seed: s.int("seed")?.unwrap_or(seed0) }
    };
    d.train_samples = s.int("train_samples")?.unwrap_or(d.train_samples);
    d.test_samples = s.int("test_samples")?.unwrap_or(d.test_samples);
    if d.train_samples < 2 {
        return Err(s.invalid("train_samples", "need at least 2 training samples"));
    }
    if d.test_samples < 1 {
        return Err(s.invalid("test_samples", "need at least 1 test sample"));
    }
    Ok(d)
}

fn parse_stage(s: &Section, mut st: StageSettings) -> Result<StageSettings> {
    let adam = match s.string("optimizer")? {
        Some((o, span)) => match o.as_str() {
            "sgd" => false,
            "adam" => true,
            other => {
                return Err(s.invalid_at("optimizer", span, &format!("unknown optimizer `{other}` (expected sgd or adam)")))
            }
        },
        None => matches!(st.optimizer, OptimizerKind::Adam { .. }),
    };
    let lr = s.positive_f32("lr")?.unwrap_or(st.optimizer.lr());
    st.optimizer = if adam {
        let (b1, b2, e) = match st.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps, .. } => (beta1, beta2, eps),
            _ => (0.9, 0.999, 1e-8),
        };
        let beta1 = s.unit_f32("beta1")?.unwrap_or(b1);
        let beta2 = s.unit_f32("beta2")?.unwrap_or(b2);
        let eps = s.positive_f32("eps")?.unwrap_or(e);
        OptimizerKind::Adam { lr, beta1, beta2, eps }
    } else {
        let (m, wd) = match st.optimizer {
            OptimizerKind::SgdNesterov { momentum, weight_decay, .. } => (momentum, weight_decay),
            _ => (0.9, 1e-4),
        };
        let momentum = s.unit_f32("momentum")?.unwrap_or(m);
        let weight_decay = s.float("weight_decay")?.map(|v| v as f32).unwrap_or(wd);
        if weight_decay < 0.0 {
            return Err(s.invalid("weight_decay", "weight decay must be non-negative"));
        }
        OptimizerKind::SgdNesterov { lr, momentum, weight_decay }
    };
    st.epochs = s.int("epochs")?.unwrap_or(st.epochs);
    Ok(st)
}

fn parse_search(s: &Section, mut c: SearchConfig) -> Result<SearchConfig> {
    c.stage = parse_stage(s, c.stage)?;
    if let Some(kind) = s.keyword::<ResourceKind>("kind")? {
        c.kind = kind;
        c.lambda = kind.default_lambda();
    }
    if let Some(l) = s.float("lambda")? {
        if !(l >= 0.0) {
            return Err(s.invalid("lambda", "lambda must be non-negative"));
        }
        c.lambda = l;
    }
    match (s.float("target")?, s.float("target_fraction")?) {
        (Some(_), Some(_)) => return Err(s.invalid("target_fraction", "give either target or target_fraction")),
        (Some(v), None) => {
            if !(v > 0.0) {
                return Err(s.invalid("target", "target must be positive"));
            }
            c.target = Target::Absolute(v);
        }
        (None, Some(f)) => {
            if !(f > 0.0) {
                return Err(s.invalid("target_fraction", "target fraction must be positive"));
            }
            c.target = Target::Fraction(f);
        }
        (None, None) => {}
    }
    c.stop_at_target = s.bool("stop_at_target")?.unwrap_or(c.stop_at_target);
    if let Some((p, _)) = s.string("latency_profile")? {
        c.latency_profile = Some(s.doc.base.join(p));
    }
    if c.kind == ResourceKind::Latency && c.latency_profile.is_none() {
        return Err(s.invalid("latency_profile", "the latency kind needs a latency profile"));
    }
    Ok(c)
}

struct Doc<'a> {
    file: &'a str,
    text: &'a str,
    base: &'a Path,
}

impl Doc<'_> {
    fn line(&self, offset: usize) -> usize {
        let end = offset.min(self.text.len());
        self.text.as_bytes()[..end].iter().filter(|&&b| b == b'\n').count() + 1
    }
}

/// One table of the document; tracks which keys were read.
struct Section<'a, 'i> {
    doc: &'a Doc<'a>,
    path: String,
    table: &'a DeTable<'i>,
    span: Range<usize>,
    used: RefCell<BTreeSet<String>>,
}

impl<'a, 'i> Section<'a, 'i> {
    fn new(doc: &'a Doc<'a>, path: String, table: &'a DeTable<'i>, span: Range<usize>) -> Self {
        Section { doc, path, table, span, used: RefCell::new(BTreeSet::new()) }
    }

    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn invalid_at(&self, key: &str, span: Range<usize>, message: &str) -> Error {
        Error::Config {
            file: self.doc.file.into(),
            line: self.doc.line(span.start),
            key: self.key_path(key),
            message: message.into(),
        }
    }

    /// Error at the key's value, or at the table when the key is absent.
    fn invalid(&self, key: &str, message: &str) -> Error {
        let base = key.split('[').next().unwrap_or(key);
        let span = self.table.get(base).map(|v| v.span()).unwrap_or_else(|| self.span.clone());
        self.invalid_at(key, span, message)
    }

    fn get(&self, key: &str) -> Option<&'a Spanned<DeValue<'i>>> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.get(key)
    }

    fn table(&self, key: &str) -> Result<Option<Section<'a, 'i>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => match v.get_ref() {
                DeValue::Table(t) => Ok(Some(Section::new(self.doc, self.key_path(key), t, v.span()))),
                other => Err(self.invalid_at(key, v.span(), &format!("expected a table, found {}", other.type_str()))),
            },
        }
    }

    fn array(&self, key: &str) -> Result<Option<&'a [Spanned<DeValue<'i>>]>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => match v.get_ref() {
                DeValue::Array(a) => Ok(Some(a)),
                other => Err(self.invalid_at(key, v.span(), &format!("expected an array, found {}", other.type_str()))),
            },
        }
    }

    fn int_value(&self, key: &str, v: &Spanned<DeValue>) -> Result<u64> {
        match v.get_ref() {
            // Read wider than TOML's i64 so that every u64 seed round-trips.
            DeValue::Integer(i) => match i128::from_str_radix(i.as_str(), i.radix()) {
                Ok(n) if n < 0 => Err(self.invalid_at(key, v.span(), "must be non-negative")),
                Ok(n) if n <= u64::MAX as i128 => Ok(n as u64),
                _ => Err(self.invalid_at(key, v.span(), "integer out of range")),
            },
            other => Err(self.invalid_at(key, v.span(), &format!("expected an integer, found {}", other.type_str()))),
        }
    }

    fn int<T: TryFrom<u64>>(&self, key: &str) -> Result<Option<T>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let n = self.int_value(key, v)?;
        T::try_from(n).map(Some).map_err(|_| self.invalid_at(key, v.span(), "integer out of range"))
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let parsed = match v.get_ref() {
            DeValue::Float(f) => f.as_str().parse::<f64>().ok(),
            DeValue::Integer(i) => i64::from_str_radix(i.as_str(), i.radix()).ok().map(|n| n as f64),
            other => return Err(self.invalid_at(key, v.span(), &format!("expected a number, found {}", other.type_str()))),
        };
        match parsed {
            Some(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(self.invalid_at(key, v.span(), "expected a finite number")),
        }
    }

    fn positive_f32(&self, key: &str) -> Result<Option<f32>> {
        match self.float(key)? {
            Some(x) if x > 0.0 => Ok(Some(x as f32)),
            Some(_) => Err(self.invalid(key, "must be positive")),
            None => Ok(None),
        }
    }

    fn unit_f32(&self, key: &str) -> Result<Option<f32>> {
        match self.float(key)? {
            Some(x) if (0.0..1.0).contains(&x) => Ok(Some(x as f32)),
            Some(_) => Err(self.invalid(key, "must be in [0, 1)")),
            None => Ok(None),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        match v.get_ref() {
            DeValue::Boolean(b) => Ok(Some(*b)),
            other => Err(self.invalid_at(key, v.span(), &format!("expected a boolean, found {}", other.type_str()))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<(String, Range<usize>)>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        match v.get_ref() {
            DeValue::String(s) => Ok(Some((s.to_string(), v.span()))),
            other => Err(self.invalid_at(key, v.span(), &format!("expected a string, found {}", other.type_str()))),
        }
    }

    fn keyword<T: FromStr<Err = gatenas_core::Error>>(&self, key: &str) -> Result<Option<T>> {
        match self.string(key)? {
            None => Ok(None),
            Some((s, span)) => s.parse().map(Some).map_err(|e| self.invalid_at(key, span, &core_message(e))),
        }
    }

    fn keyword_list<T: FromStr<Err = gatenas_core::Error> + PartialEq>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(items) = self.array(key)? else { return Ok(None) };
        let mut out = Vec::new();
        for (i, v) in items.iter().enumerate() {
            let k = format!("{key}[{i}]");
            let DeValue::String(s) = v.get_ref() else {
                return Err(self.invalid_at(&k, v.span(), "expected a string"));
            };
            let item: T = s.parse().map_err(|e| self.invalid_at(&k, v.span(), &core_message(e)))?;
            if out.contains(&item) {
                return Err(self.invalid_at(&k, v.span(), &format!("duplicate entry `{s}`")));
            }
            out.push(item);
        }
        if out.is_empty() {
            return Err(self.invalid(key, &format!("{key} must not be empty")));
        }
        Ok(Some(out))
    }

    /// Rejects keys that were never read.
    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown = self
            .table
            .iter()
            .filter(|(k, _)| !used.contains(k.get_ref().as_ref()))
            .min_by_key(|(k, _)| k.span().start);
        match unknown {
            Some((k, _)) => Err(self.invalid_at(k.get_ref(), k.span(), "unknown key")),
            None => Ok(()),
        }
    }
}

fn core_message(e: gatenas_core::Error) -> String {
    match e {
        gatenas_core::Error::Config(m) => m,
        other => other.to_string(),
    }
}
