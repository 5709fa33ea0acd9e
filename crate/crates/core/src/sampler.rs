//! Batch composition: geographic-neighbour (GDS), feature-similarity (FSS)
//! and random (RS) negatives around one anchor class, with a warm-up,
//! early and late phase and a periodically refreshed similarity table.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{rng_for, ClassId, DatasetSplit, GeoPoint, View};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Classes per batch, anchor included.
    pub batch_classes: usize,
    pub init_epoch: usize,
    pub late_phase_epoch: usize,
    pub refresh_interval: usize,
    /// (GDS, FSS, RS) fractions of the negative slots.
    pub early_ratio: [f64; 3],
    pub late_ratio: [f64; 3],
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_classes: 32,
            init_epoch: 20,
            late_phase_epoch: 70,
            refresh_interval: 6,
            early_ratio: [0.5, 0.25, 0.25],
            late_ratio: [0.25, 0.5, 0.25],
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_classes < 2 {
            return Err(Error::Config(format!("batch_classes must be at least 2, got {}", self.batch_classes)));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be positive".into()));
        }
        for (name, r) in [("early_ratio", self.early_ratio), ("late_ratio", self.late_ratio)] {
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} must be non-negative and sum to 1, got {r:?}")));
            }
        }
        Ok(())
    }

    /// Whether the similarity table is recomputed at the start of `epoch`.
    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        epoch >= self.init_epoch && (epoch - self.init_epoch) % self.refresh_interval == 0
    }

    /// Most recent refresh epoch at or before `epoch`.
    pub fn last_refresh(&self, epoch: usize) -> Option<usize> {
        (epoch >= self.init_epoch)
            .then(|| epoch - (epoch - self.init_epoch) % self.refresh_interval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Anchor,
    Gds,
    Fss,
    Rs,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Anchor => "anchor",
            Tag::Gds => "GDS",
            Tag::Fss => "FSS",
            Tag::Rs => "RS",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Negative-slot counts per source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quota {
    pub gds: usize,
    pub fss: usize,
    pub rs: usize,
}

impl Quota {
    pub fn total(&self) -> usize {
        self.gds + self.fss + self.rs
    }
}

/// (GDS, FSS, RS) fractions active at `epoch`.
pub fn phase_ratios(epoch: usize, cfg: &SamplerConfig) -> (f64, f64, f64) {
    let r = if epoch < cfg.init_epoch {
        [0.0, 0.0, 1.0]
    } else if epoch < cfg.late_phase_epoch {
        cfg.early_ratio
    } else {
        cfg.late_ratio
    };
    (r[0], r[1], r[2])
}

/// Splits `slots` by ratio: GDS and FSS round half up, RS takes the rest.
pub fn quota_for(slots: usize, ratios: (f64, f64, f64)) -> Quota {
    let round = |r: f64| ((slots as f64 * r) + 0.5 + 1e-9).floor() as usize;
    let gds = round(ratios.0).min(slots);
    let fss = round(ratios.1).min(slots - gds);
    Quota { gds, fss, rs: slots - gds - fss }
}

/// Quota active at `epoch`; with `gps` false the GDS share moves to FSS.
pub fn epoch_quota(epoch: usize, cfg: &SamplerConfig, gps: bool) -> Quota {
    let q = quota_for(cfg.batch_classes - 1, phase_ratios(epoch, cfg));
    if gps {
        q
    } else {
        Quota { gds: 0, fss: q.gds + q.fss, rs: q.rs }
    }
}

/// Per-class coordinates, one entry per training class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeta {
    pub classes: Vec<(ClassId, Option<GeoPoint>)>,
}

impl ClassMeta {
    pub fn from_dataset(data: &DatasetSplit) -> Self {
        ClassMeta { classes: data.train_positions() }
    }

    pub fn has_gps(&self) -> bool {
        self.classes.iter().all(|(_, p)| p.is_some())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn position(&self, class: ClassId) -> Result<GeoPoint> {
        self.classes
            .iter()
            .find(|(c, _)| *c == class)
            .ok_or_else(|| Error::Data(format!("unknown class {class}")))?
            .1
            .ok_or_else(|| Error::Data(format!("class {class} has no coordinates")))
    }
}

/// Every other class ranked by ascending (value, class id).
fn rank_by<F: Fn(ClassId) -> Result<Real>>(
    anchor: ClassId,
    ids: impl Iterator<Item = ClassId>,
    key: F,
    ascending: bool,
) -> Result<Vec<ClassId>> {
    let mut scored = Vec::new();
    for c in ids.filter(|c| *c != anchor) {
        let v = key(c)?;
        scored.push((if ascending { v } else { -v }, c));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

fn geo_ranking(anchor: ClassId, meta: &ClassMeta) -> Result<Vec<ClassId>> {
    let a = meta.position(anchor)?;
    rank_by(anchor, meta.classes.iter().map(|(c, _)| *c), |c| Ok(a.distance(&meta.position(c)?) as Real), true)
}

/// The `k` classes closest to `anchor` in (lat, lon), ties by class id.
pub fn nearest_geo(anchor: ClassId, meta: &ClassMeta, k: usize) -> Result<Vec<ClassId>> {
    if k >= meta.len() {
        return Err(Error::Range(format!("k = {k} must be below the class count {}", meta.len())));
    }
    let mut r = geo_ranking(anchor, meta)?;
    r.truncate(k);
    Ok(r)
}

/// Unit-norm per-class embeddings with the epoch they were computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub class_ids: Vec<ClassId>,
    pub rows: Vec<Vec<Real>>,
    pub stamp: usize,
}

impl EmbeddingTable {
    pub fn new(class_ids: Vec<ClassId>, rows: Vec<Vec<Real>>, stamp: usize) -> Result<Self> {
        if class_ids.is_empty() || class_ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} class ids for {} rows", class_ids.len(), rows.len())));
        }
        let dim = rows[0].len();
        for (c, r) in class_ids.iter().zip(&rows) {
            let norm: Real = r.iter().map(|v| v * v).sum::<Real>().sqrt();
            if r.len() != dim || !((norm - 1.0).abs() < 1e-4) {
                return Err(Error::Numeric(format!("row of class {c} is not unit-norm (norm {norm})")));
            }
        }
        Ok(EmbeddingTable { class_ids, rows, stamp })
    }

    pub fn check_fresh(&self, epoch: usize, interval: usize) -> Result<()> {
        if self.stamp > epoch || epoch - self.stamp >= interval {
            return Err(Error::Stale { stamp: self.stamp, epoch, interval });
        }
        Ok(())
    }

    fn row(&self, class: ClassId) -> Result<&[Real]> {
        self.class_ids
            .iter()
            .position(|c| *c == class)
            .map(|i| self.rows[i].as_slice())
            .ok_or_else(|| Error::Data(format!("class {class} missing from embedding table")))
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn feat_ranking(anchor: ClassId, table: &EmbeddingTable) -> Result<Vec<ClassId>> {
    let a = table.row(anchor)?;
    rank_by(anchor, table.class_ids.iter().copied(), |c| Ok(dot(a, table.row(c)?)), false)
}

/// The `k` classes most cosine-similar to `anchor`, ties by class id.
/// `epoch` and `interval` guard against a stale table.
pub fn nearest_feat(
    anchor: ClassId,
    table: &EmbeddingTable,
    k: usize,
    epoch: usize,
    interval: usize,
) -> Result<Vec<ClassId>> {
    table.check_fresh(epoch, interval)?;
    if k >= table.class_ids.len() {
        return Err(Error::Range(format!("k = {k} must be below the class count {}", table.class_ids.len())));
    }
    let mut r = feat_ranking(anchor, table)?;
    r.truncate(k);
    Ok(r)
}

/// Satellite-view embedding of every training class under `model`.
pub fn refresh_similarity(model: &Model, data: &DatasetSplit, epoch: usize) -> Result<EmbeddingTable> {
    let mut ids = Vec::new();
    let mut images = Vec::new();
    for (class, _) in data.train_positions() {
        let sat = data
            .train
            .iter()
            .find(|s| s.meta.class_id == class && s.meta.view == View::Satellite)
            .ok_or_else(|| Error::Data(format!("class {class} has no satellite view")))?;
        ids.push(class);
        images.push(&sat.image);
    }
    let rows = model.embed_many(&images)?;
    EmbeddingTable::new(ids, rows, epoch)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub entries: Vec<(ClassId, Tag)>,
}

impl BatchPlan {
    pub fn anchor(&self) -> ClassId {
        self.entries[0].0
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.entries.iter().filter(|(_, t)| *t == tag).count()
    }
}

/// One plan per training class: anchors in a seeded order, each batch
/// filled with GDS, then FSS, then RS negatives.
pub fn build_epoch_plan(
    epoch: usize,
    meta: &ClassMeta,
    table: Option<&EmbeddingTable>,
    cfg: &SamplerConfig,
) -> Result<Vec<BatchPlan>> {
    cfg.validate()?;
    let n = meta.len();
    if cfg.batch_classes > n {
        return Err(Error::Config(format!("batch_classes {} exceeds the {n} training classes", cfg.batch_classes)));
    }
    let quota = epoch_quota(epoch, cfg, meta.has_gps());
    if quota.fss > 0 {
        let table = table.ok_or_else(|| Error::Contract(format!("epoch {epoch} needs a similarity table")))?;
        table.check_fresh(epoch, cfg.refresh_interval)?;
    }
    let ids: Vec<ClassId> = meta.classes.iter().map(|(c, _)| *c).collect();
    let mut anchors = ids.clone();
    anchors.shuffle(&mut rng_for(&[cfg.seed, epoch as u64, 0xa11c]));
    let mut plans = Vec::with_capacity(n);
    for (b, &anchor) in anchors.iter().enumerate() {
        let mut used = HashSet::from([anchor]);
        let mut entries = vec![(anchor, Tag::Anchor)];
        let mut take = |ranking: Vec<ClassId>, k: usize, tag: Tag, entries: &mut Vec<(ClassId, Tag)>| {
            for c in ranking.into_iter().filter(|c| !used.contains(c)).take(k).collect::<Vec<_>>() {
                used.insert(c);
                entries.push((c, tag));
            }
        };
        if quota.gds > 0 {
            take(geo_ranking(anchor, meta)?, quota.gds, Tag::Gds, &mut entries);
        }
        if quota.fss > 0 {
            take(feat_ranking(anchor, table.expect("checked above"))?, quota.fss, Tag::Fss, &mut entries);
        }
        let mut rng = rng_for(&[cfg.seed, epoch as u64, b as u64, 0x5eed]);
        let mut rest: Vec<ClassId> = ids.iter().copied().filter(|c| !used.contains(c)).collect();
        for _ in 0..quota.rs {
            let i = rng.gen_range(0..rest.len());
            entries.push((rest.swap_remove(i), Tag::Rs));
        }
        plans.push(BatchPlan { entries });
    }
    Ok(plans)
}
