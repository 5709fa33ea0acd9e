//! The training loop, validation and checkpointed resumption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{apply_augment, generate_synthetic, load_dataset, AugmentDraw, ClassId, DatasetSplit, View};
use crate::error::{Error, Result};
use crate::eval::{append_metrics, evaluate_model, MetricsReport};
use crate::losses::{cross_entropy, hard_mining_triplet, mutual_kl, total_loss, LossReport};
use crate::model::{Model, ParamGroup};
use crate::sampler::{build_epoch_plan, refresh_similarity, BatchPlan, ClassMeta, EmbeddingTable};
use crate::tensor::{Graph, Tensor, Var};

use super::checkpoint::{save_checkpoint, Checkpoint, RunState};
use super::config::{DataSource, TrainConfig};
use super::optim::Sgd;
use crate::dataset::rng_for;

pub const TRAIN_LOG_HEADER: &str = "epoch,step,l_rpt,l_mtc,l_kl,total";

pub fn load_data(cfg: &TrainConfig) -> Result<DatasetSplit> {
    match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(s),
        DataSource::Dir(p) => load_dataset(p),
    }
}

/// Outcome of [`Trainer::train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub report: MetricsReport,
    pub best_sdm: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: Sgd,
    pub epoch: usize,
    pub step: usize,
    pub best_sdm: Option<f64>,
    pub best_epoch: Option<usize>,
    pub table: Option<EmbeddingTable>,
    data: &'d DatasetSplit,
    meta: ClassMeta,
    labels: BTreeMap<ClassId, usize>,
    drones: BTreeMap<ClassId, Vec<usize>>,
    satellites: BTreeMap<ClassId, Vec<usize>>,
    out: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    /// Fresh run; the model is initialised from `cfg.seed`. With `out` set,
    /// logs, metrics and checkpoints are written there.
    pub fn new(cfg: TrainConfig, data: &'d DatasetSplit, out: Option<&Path>) -> Result<Self> {
        let model = Model::init(cfg.model.clone(), cfg.seed)?;
        let opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
        Self::assemble(cfg, model, opt, data, out)
    }

    /// Continues a checkpointed run under its own configuration.
    pub fn resume(ck: Checkpoint, data: &'d DatasetSplit, out: Option<&Path>) -> Result<Self> {
        let Checkpoint { config, model, state } = ck;
        let opt = Sgd { momentum: config.momentum, weight_decay: config.weight_decay, velocities: state.velocities };
        let mut t = Self::assemble(config, model, opt, data, out)?;
        t.epoch = state.epoch;
        t.step = state.step;
        t.best_sdm = state.best_sdm;
        t.best_epoch = state.best_epoch;
        t.table = state.table;
        Ok(t)
    }

    fn assemble(cfg: TrainConfig, model: Model, opt: Sgd, data: &'d DatasetSplit, out: Option<&Path>) -> Result<Self> {
        cfg.validate_structure()?;
        let meta = ClassMeta::from_dataset(data);
        if meta.len() != cfg.model.n_classes {
            return Err(Error::Config(format!(
                "model.n_classes is {} but the training split has {} classes",
                cfg.model.n_classes,
                meta.len()
            )));
        }
        if data.image_shape() != Some(cfg.model.input) {
            return Err(Error::Config(format!(
                "model.input {:?} does not match payload shape {:?}",
                cfg.model.input,
                data.image_shape()
            )));
        }
        let labels = meta.classes.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();
        let (mut drones, mut satellites) = (BTreeMap::<_, Vec<_>>::new(), BTreeMap::<_, Vec<_>>::new());
        for (i, s) in data.train.iter().enumerate() {
            let map = if s.meta.view == View::Drone { &mut drones } else { &mut satellites };
            map.entry(s.meta.class_id).or_default().push(i);
        }
        for (c, _) in &meta.classes {
            if !drones.contains_key(c) || !satellites.contains_key(c) {
                return Err(Error::Data(format!("training class {c} needs both a drone and a satellite view")));
            }
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Trainer {
            cfg,
            model,
            opt,
            epoch: 0,
            step: 0,
            best_sdm: None,
            best_epoch: None,
            table: None,
            data,
            meta,
            labels,
            drones,
            satellites,
            out: out.map(Path::to_path_buf),
        })
    }

    pub fn run_state(&self) -> RunState {
        RunState {
            epoch: self.epoch,
            step: self.step,
            velocities: self.opt.velocities.clone(),
            best_sdm: self.best_sdm,
            best_epoch: self.best_epoch,
            table: self.table.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), model: self.model.clone(), state: self.run_state() }
    }

    /// Plans of the next epoch, refreshing the similarity table on schedule.
    pub fn plan_epoch(&mut self) -> Result<Vec<BatchPlan>> {
        if self.cfg.sampler.is_refresh_epoch(self.epoch) {
            self.table = Some(refresh_similarity(&self.model, self.data, self.epoch)?);
        }
        build_epoch_plan(self.epoch, &self.meta, self.table.as_ref(), &self.cfg.sampler)
    }

    /// Runs one epoch and returns its per-step losses.
    pub fn run_epoch(&mut self) -> Result<Vec<LossReport>> {
        let plans = self.plan_epoch()?;
        let (lr_b, lr_n) = (self.cfg.lr_at(self.cfg.lr_backbone, self.epoch), self.cfg.lr_at(self.cfg.lr_new, self.epoch));
        let mut reports = Vec::with_capacity(plans.len());
        for plan in &plans {
            let report = self.train_step(plan, lr_b, lr_n)?;
            reports.push(report);
        }
        self.append_log(&reports)?;
        self.epoch += 1;
        Ok(reports)
    }

    fn batch_images(&self, plan: &BatchPlan) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let mut rng = rng_for(&[self.cfg.seed, self.epoch as u64, self.step as u64, 0xba7c]);
        let (mut d, mut s, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, pool: &[usize]| {
            use rand::Rng;
            pool[rng.gen_range(0..pool.len())]
        };
        for class in plan.classes() {
            let di = pick(&mut rng, &self.drones[&class]);
            let si = pick(&mut rng, &self.satellites[&class]);
            for (idx, dst) in [(di, &mut d), (si, &mut s)] {
                let mut draw = AugmentDraw::sample(self.cfg.augment_pad, &mut rng);
                draw.flip &= self.cfg.augment_flip;
                let img = &self.data.train[idx].image;
                dst.push(if draw == AugmentDraw::IDENTITY { img.clone() } else { apply_augment(img, draw)? });
            }
            labels.push(self.labels[&class]);
        }
        Ok((Tensor::stack(&d)?, Tensor::stack(&s)?, labels))
    }

    fn train_step(&mut self, plan: &BatchPlan, lr_b: f64, lr_n: f64) -> Result<LossReport> {
        let (drones, sats, labels) = self.batch_images(plan)?;
        let graph = Graph::new();
        let bound = self.model.params.bind(&graph, true);
        let out_d = self.model.forward(graph.constant(drones), &bound)?;
        let out_s = self.model.forward(graph.constant(sats), &bound)?;

        let all_logits: Vec<Var<'_>> = out_d.logits.iter().chain(&out_s.logits).copied().collect();
        let rpt = cross_entropy(&all_logits, &labels)?;
        let pooled = Var::concat(&[out_d.pooled, out_s.pooled], 0)?.l2_normalize()?;
        let pair_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let mtc = hard_mining_triplet(pooled, &pair_labels, self.cfg.margin, self.cfg.triplet)?;
        let kl = mutual_kl(&out_d.logits, &out_s.logits)?;
        let loss = total_loss(rpt, mtc, kl)?;
        let r = loss.report;
        if ![r.l_rpt, r.l_mtc, r.l_kl, r.total].iter().all(|v| v.is_finite()) {
            return Err(self.abort_non_finite(&r));
        }
        let grads = graph.backward(loss.total)?;
        let grads: Vec<Tensor> = bound.vars().iter().map(|v| grads.wrt_or_zero(*v)).collect();
        self.opt.step(&mut self.model.params, &grads, |g| if g == ParamGroup::Backbone { lr_b } else { lr_n })?;
        self.step += 1;
        Ok(r)
    }

    /// Writes a state dump next to the outputs and builds the error.
    fn abort_non_finite(&self, r: &LossReport) -> Error {
        let mut dump = String::new();
        writeln!(dump, "non-finite loss at epoch {} step {}", self.epoch, self.step).ok();
        writeln!(dump, "l_rpt={} l_mtc={} l_kl={} total={}", r.l_rpt, r.l_mtc, r.l_kl, r.total).ok();
        for p in self.model.params.iter() {
            let max = p.value.data().iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
            writeln!(dump, "{} max_abs={max} finite={}", p.name, p.value.is_finite()).ok();
        }
        let mut msg = format!("non-finite loss at epoch {} step {}: {r:?}", self.epoch, self.step);
        if let Some(dir) = &self.out {
            let path = dir.join("nan_dump.txt");
            if std::fs::write(&path, &dump).is_ok() {
                msg.push_str(&format!("; state dumped to {}", path.display()));
            }
        }
        Error::Numeric(msg)
    }

    fn append_log(&self, reports: &[LossReport]) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let path = dir.join("train_log.csv");
        let fresh = !path.exists();
        let mut text = String::new();
        if fresh {
            text.push_str(TRAIN_LOG_HEADER);
            text.push('\n');
        }
        let first = self.step - reports.len();
        for (i, r) in reports.iter().enumerate() {
            writeln!(text, "{},{},{},{},{},{}", self.epoch, first + i, r.l_rpt, r.l_mtc, r.l_kl, r.total).ok();
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Query-vs-gallery metrics of the current model.
    pub fn validate(&self) -> Result<MetricsReport> {
        evaluate_model(&self.model, &self.data.query, &self.data.gallery)
    }

    fn due_validation(&self) -> bool {
        let e = self.cfg.eval_every;
        self.epoch == self.cfg.epochs || (e > 0 && self.epoch % e == 0)
    }

    /// Trains up to `cfg.epochs` (or `stop_at`, if earlier), validating on
    /// schedule and keeping the best checkpoint by SDM@1.
    pub fn train_until(&mut self, stop_at: Option<usize>) -> Result<TrainSummary> {
        let end = stop_at.unwrap_or(self.cfg.epochs).min(self.cfg.epochs);
        let mut last = None;
        while self.epoch < end {
            self.run_epoch()?;
            if self.due_validation() {
                let report = self.validate()?;
                let score = report.sdm_1.unwrap_or(report.recall_1);
                if self.best_sdm.is_none_or(|b| score > b) {
                    self.best_sdm = Some(score);
                    self.best_epoch = Some(self.epoch);
                    if let Some(dir) = &self.out {
                        save_checkpoint(&dir.join("best"), &self.checkpoint())?;
                    }
                }
                if let Some(dir) = &self.out {
                    let split = if self.epoch == self.cfg.epochs { "test" } else { "val" };
                    append_metrics(&dir.join("metrics.csv"), split, "none", 0, &report)?;
                }
                last = Some(report);
            }
        }
        if let Some(dir) = &self.out {
            let name = if self.epoch == self.cfg.epochs { "final" } else { "last" };
            save_checkpoint(&dir.join(name), &self.checkpoint())?;
        }
        let report = match last {
            Some(r) => r,
            None => self.validate()?,
        };
        Ok(TrainSummary { report, best_sdm: self.best_sdm, best_epoch: self.best_epoch, steps: self.step })
    }

    pub fn train(&mut self) -> Result<TrainSummary> {
        self.train_until(None)
    }
}

/// Evaluates a checkpoint against `cfg`'s data, appending to
/// `out/metrics.csv` when `out` is given.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &DatasetSplit, out: Option<&Path>) -> Result<MetricsReport> {
    let report = evaluate_model(&ck.model, &data.query, &data.gallery)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        append_metrics(&dir.join("metrics.csv"), "test", "none", 0, &report)?;
    }
    Ok(report)
}
