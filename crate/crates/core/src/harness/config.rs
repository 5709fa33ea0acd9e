//! Flat `key=value` run configuration with `section.` prefixes.
//!
//! Lines starting with `#` and blank lines are ignored. Keys absent from a
//! file keep the value of the preset the file is applied to; unknown keys
//! are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};
use crate::losses::{TripletReduction, DEFAULT_MARGIN};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Directory in the on-disk dataset layout.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub desk_scale: bool,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub margin: Real,
    pub triplet: TripletReduction,
    /// Zero padding of the random crop; 0 disables cropping.
    pub augment_pad: usize,
    pub augment_flip: bool,
    /// Validate every this many epochs (and after the last); 0 only at the end.
    pub eval_every: usize,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub data: DataSource,
}

impl TrainConfig {
    /// Full schedule: 120 epochs, B = 32, milestones 70 and 110.
    pub fn full() -> Self {
        let synthetic = SyntheticConfig::desk();
        let mut model = ModelConfig::desk(synthetic.n_classes);
        model.bottleneck = 512;
        TrainConfig {
            seed: 0,
            desk_scale: false,
            epochs: 120,
            lr_backbone: 0.003,
            lr_new: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_milestones: vec![70, 110],
            lr_decay: 0.1,
            margin: DEFAULT_MARGIN,
            triplet: TripletReduction::BatchHard,
            augment_pad: 1,
            augment_flip: true,
            eval_every: 10,
            sampler: SamplerConfig::default(),
            model,
            data: DataSource::Synthetic(synthetic),
        }
    }

    /// Scaled-down schedule for the 64-class synthetic set.
    pub fn desk() -> Self {
        let synthetic = SyntheticConfig::desk();
        TrainConfig {
            desk_scale: true,
            epochs: 60,
            lr_backbone: 0.03,
            lr_new: 0.1,
            lr_milestones: vec![35, 50],
            eval_every: 10,
            sampler: SamplerConfig {
                batch_classes: 16,
                init_epoch: 10,
                late_phase_epoch: 35,
                refresh_interval: 3,
                ..SamplerConfig::default()
            },
            model: ModelConfig::desk(synthetic.n_classes),
            data: DataSource::Synthetic(synthetic),
            ..TrainConfig::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    /// Seed of the run; also seeds the sampler.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_new", self.lr_new), ("lr_decay", self.lr_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.validate_structure()
    }

    /// Everything [`TrainConfig::validate`] checks except the rates.
    pub fn validate_structure(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("lr_milestones must increase strictly: {:?}", self.lr_milestones)));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::Config(format!("lr_milestones must be below epochs {}", self.epochs)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        self.sampler.validate()?;
        self.model.validate()
    }

    /// Learning rate of one group at `epoch` after milestone decay.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        base * self.lr_decay.powi(passed as i32)
    }

    /// Reads a config file on top of `base`.
    pub fn load(path: &Path, base: TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::apply_text(base, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses text on top of the full preset.
    pub fn parse_text(text: &str) -> Result<Self> {
        Self::apply_text(TrainConfig::full(), text)
    }

    /// Applies `key=value` lines to `base`. A `preset=` line may only come
    /// first and replaces `base`.
    pub fn apply_text(base: TrainConfig, text: &str) -> Result<Self> {
        let cfg = Self::apply_lines(base, text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`TrainConfig::apply_text`] without the final validation.
    pub fn apply_lines(base: TrainConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut first = true;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| at("expected key=value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if !first {
                    return Err(at("preset must come first".into()));
                }
                cfg = TrainConfig::preset(v).map_err(|e| at(e.to_string()))?;
            } else {
                cfg.set(k, v).map_err(|e| at(e.to_string()))?;
            }
            first = false;
        }
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn synthetic<'a>(d: &'a mut DataSource, key: &str) -> Result<&'a mut SyntheticConfig> {
            match d {
                DataSource::Synthetic(s) => Ok(s),
                DataSource::Dir(_) => Err(Error::Config(format!("{key} applies only to synthetic data"))),
            }
        }
        match key {
            "seed" => self.set_seed(num(key, value)?),
            "desk_scale" => self.desk_scale = flag(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.lr_backbone" => self.lr_backbone = num(key, value)?,
            "train.lr_new" => self.lr_new = num(key, value)?,
            "train.momentum" => self.momentum = num(key, value)?,
            "train.weight_decay" => self.weight_decay = num(key, value)?,
            "train.lr_milestones" => self.lr_milestones = list(key, value)?,
            "train.lr_decay" => self.lr_decay = num(key, value)?,
            "train.margin" => self.margin = num(key, value)?,
            "train.triplet" => {
                self.triplet = match value {
                    "batch_hard" => TripletReduction::BatchHard,
                    "hardest_only" => TripletReduction::HardestOnly,
                    _ => return Err(Error::Config(format!("{key}: expected batch_hard or hardest_only"))),
                }
            }
            "train.augment_pad" => self.augment_pad = num(key, value)?,
            "train.augment_flip" => self.augment_flip = flag(key, value)?,
            "train.eval_every" => self.eval_every = num(key, value)?,
            "sampler.batch_classes" => self.sampler.batch_classes = num(key, value)?,
            "sampler.init_epoch" => self.sampler.init_epoch = num(key, value)?,
            "sampler.late_phase_epoch" => self.sampler.late_phase_epoch = num(key, value)?,
            "sampler.refresh_interval" => self.sampler.refresh_interval = num(key, value)?,
            "sampler.early_ratio" => self.sampler.early_ratio = triple(key, value)?,
            "sampler.late_ratio" => self.sampler.late_ratio = triple(key, value)?,
            "model.input" => {
                let v: Vec<usize> = list(key, value)?;
                self.model.input = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three extents C,H,W")))?;
            }
            "model.widths" => self.model.widths = list(key, value)?,
            "model.bottleneck" => self.model.bottleneck = num(key, value)?,
            "model.n_classes" => self.model.n_classes = num(key, value)?,
            "model.caci_reduction" => self.model.caci_reduction = num(key, value)?,
            "model.caci_weight_sharing" => self.model.caci_weight_sharing = flag(key, value)?,
            "model.spatial_kernel" => self.model.spatial_kernel = num(key, value)?,
            "data.source" => {
                self.data = match value {
                    "synthetic" => match &self.data {
                        DataSource::Synthetic(_) => return Ok(()),
                        DataSource::Dir(_) => DataSource::Synthetic(SyntheticConfig::desk()),
                    },
                    path => DataSource::Dir(PathBuf::from(path)),
                }
            }
            "data.n_classes" => synthetic(&mut self.data, key)?.n_classes = num(key, value)?,
            "data.grid_spacing" => synthetic(&mut self.data, key)?.grid_spacing_deg = num(key, value)?,
            "data.channels" => synthetic(&mut self.data, key)?.channels = num(key, value)?,
            "data.height" => synthetic(&mut self.data, key)?.height = num(key, value)?,
            "data.width" => synthetic(&mut self.data, key)?.width = num(key, value)?,
            "data.view_noise" => synthetic(&mut self.data, key)?.view_noise = num(key, value)?,
            "data.drones_per_class" => synthetic(&mut self.data, key)?.drones_per_class = num(key, value)?,
            "data.seed" => synthetic(&mut self.data, key)?.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; [`TrainConfig::parse_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let triple = |r: [f64; 3]| format!("{},{},{}", r[0], r[1], r[2]);
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("desk_scale", self.desk_scale.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.lr_backbone", self.lr_backbone.to_string());
        kv("train.lr_new", self.lr_new.to_string());
        kv("train.momentum", self.momentum.to_string());
        kv("train.weight_decay", self.weight_decay.to_string());
        kv("train.lr_milestones", join(&self.lr_milestones));
        kv("train.lr_decay", self.lr_decay.to_string());
        kv("train.margin", self.margin.to_string());
        let triplet = match self.triplet {
            TripletReduction::BatchHard => "batch_hard",
            TripletReduction::HardestOnly => "hardest_only",
        };
        kv("train.triplet", triplet.into());
        kv("train.augment_pad", self.augment_pad.to_string());
        kv("train.augment_flip", self.augment_flip.to_string());
        kv("train.eval_every", self.eval_every.to_string());
        kv("sampler.batch_classes", self.sampler.batch_classes.to_string());
        kv("sampler.init_epoch", self.sampler.init_epoch.to_string());
        kv("sampler.late_phase_epoch", self.sampler.late_phase_epoch.to_string());
        kv("sampler.refresh_interval", self.sampler.refresh_interval.to_string());
        kv("sampler.early_ratio", triple(self.sampler.early_ratio));
        kv("sampler.late_ratio", triple(self.sampler.late_ratio));
        s.push_str(&self.model_text());
        match &self.data {
            DataSource::Dir(p) => writeln!(s, "data.source={}", p.display()).expect("string write"),
            DataSource::Synthetic(d) => {
                for (k, v) in [
                    ("data.source", "synthetic".to_string()),
                    ("data.n_classes", d.n_classes.to_string()),
                    ("data.grid_spacing", d.grid_spacing_deg.to_string()),
                    ("data.channels", d.channels.to_string()),
                    ("data.height", d.height.to_string()),
                    ("data.width", d.width.to_string()),
                    ("data.view_noise", d.view_noise.to_string()),
                    ("data.drones_per_class", d.drones_per_class.to_string()),
                    ("data.seed", d.seed.to_string()),
                ] {
                    writeln!(s, "{k}={v}").expect("string write");
                }
            }
        }
        s
    }

    /// The `model.` lines only; checkpoints compare these.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "model.input={}\nmodel.widths={}\nmodel.bottleneck={}\nmodel.n_classes={}\nmodel.caci_reduction={}\nmodel.caci_weight_sharing={}\nmodel.spatial_kernel={}\n",
            join(&m.input),
            join(&m.widths),
            m.bottleneck,
            m.n_classes,
            m.caci_reduction,
            m.caci_weight_sharing,
            m.spatial_kernel
        )
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = list(key, value)?;
    v.try_into().map_err(|_| Error::Config(format!("{key}: expected three ratios")))
}
