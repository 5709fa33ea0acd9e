//! Checkpoint directories: `manifest.txt` plus one `CTEN` file per tensor.
//!
//! ```text
//! manifest.txt        format line, [config], [state] and [params] sections
//! params/<i>.cten     parameter i in store order
//! velocity/<i>.cten   its momentum buffer
//! table.cten          similarity table rows, when present
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamStore};
use crate::sampler::EmbeddingTable;
use crate::tensor::{read_cten, write_cten, Tensor};

use super::config::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "ceusp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimiser steps taken.
    pub step: usize,
    pub velocities: Vec<Tensor>,
    pub best_sdm: Option<f64>,
    pub best_epoch: Option<usize>,
    pub table: Option<EmbeddingTable>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub state: RunState,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    create_dir(&dir.join("params"))?;
    create_dir(&dir.join("velocity"))?;
    let st = &ck.state;
    let mut m = String::new();
    let w = &mut m;
    writeln!(w, "format={CHECKPOINT_FORMAT}").ok();
    writeln!(w, "version={CHECKPOINT_VERSION}").ok();
    writeln!(w, "[config]").ok();
    w.push_str(&ck.config.to_text());
    writeln!(w, "[state]").ok();
    writeln!(w, "epoch={}", st.epoch).ok();
    writeln!(w, "step={}", st.step).ok();
    // bit patterns keep the value exact
    let best = st.best_sdm.map(|v| format!("{:016x}", v.to_bits())).unwrap_or_default();
    writeln!(w, "best_sdm_bits={best}").ok();
    writeln!(w, "best_epoch={}", st.best_epoch.map(|e| e.to_string()).unwrap_or_default()).ok();
    match &st.table {
        Some(t) => {
            writeln!(w, "table_stamp={}", t.stamp).ok();
            let ids: Vec<String> = t.class_ids.iter().map(usize::to_string).collect();
            writeln!(w, "table_classes={}", ids.join(",")).ok();
            let dim = t.rows[0].len();
            let flat = Tensor::new(vec![t.rows.len(), dim], t.rows.concat())?;
            write_cten(dir.join("table.cten"), &flat)?;
        }
        None => {
            writeln!(w, "table_stamp=").ok();
        }
    }
    writeln!(w, "[params]").ok();
    if st.velocities.len() != ck.model.params.len() {
        return Err(Error::Contract("one velocity buffer per parameter required".into()));
    }
    for (i, (p, v)) in ck.model.params.iter().zip(&st.velocities).enumerate() {
        writeln!(w, "{} {} {} params/{i:04}.cten", p.name, p.group.as_str(), shape_text(p.value.shape())).ok();
        write_cten(dir.join(format!("params/{i:04}.cten")), &p.value)?;
        write_cten(dir.join(format!("velocity/{i:04}.cten")), v)?;
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

fn bad(dir: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", dir.join("manifest.txt").display()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(&format!("format={CHECKPOINT_FORMAT}")) {
        return Err(bad(dir, "not a checkpoint manifest"));
    }
    let version = lines.next().and_then(|l| l.strip_prefix("version=")).ok_or_else(|| bad(dir, "missing version"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let mut section = "";
    let (mut config_text, mut state, mut params) = (String::new(), Vec::new(), Vec::new());
    for line in lines {
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "[config]" => {
                config_text.push_str(line);
                config_text.push('\n');
            }
            "[state]" => state.push(line),
            "[params]" => params.push(line),
            _ => return Err(bad(dir, format!("line outside a section: {line}"))),
        }
    }
    // rates are not validated: zero-rate runs are legal to checkpoint
    let config = TrainConfig::apply_lines(TrainConfig::full(), &config_text)?;
    config.validate_structure()?;
    let field = |k: &str| -> Result<&str> {
        state
            .iter()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| bad(dir, format!("missing {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|_| bad(dir, format!("bad {k}"))) };
    let opt_usize = |k: &str| -> Result<Option<usize>> {
        let v = field(k)?;
        if v.is_empty() {
            Ok(None)
        } else {
            v.parse().map(Some).map_err(|_| bad(dir, format!("bad {k}")))
        }
    };
    let best_sdm = match field("best_sdm_bits")? {
        "" => None,
        v => Some(f64::from_bits(u64::from_str_radix(v, 16).map_err(|_| bad(dir, "bad best_sdm_bits"))?)),
    };
    let table = match opt_usize("table_stamp")? {
        None => None,
        Some(stamp) => {
            let ids = field("table_classes")?
                .split(',')
                .map(|c| c.parse().map_err(|_| bad(dir, "bad table_classes")))
                .collect::<Result<Vec<usize>>>()?;
            let flat = read_cten(dir.join("table.cten"))?;
            let dim = *flat.shape().last().ok_or_else(|| bad(dir, "empty table"))?;
            let rows = flat.data().chunks(dim).map(<[_]>::to_vec).collect();
            Some(EmbeddingTable::new(ids, rows, stamp)?)
        }
    };

    let mut store = ParamStore::new();
    let mut velocities = Vec::new();
    for line in params {
        let f: Vec<&str> = line.split(' ').collect();
        let [name, group, shape, rel] = f[..] else {
            return Err(bad(dir, format!("bad parameter line {line:?}")));
        };
        if store.get(name).is_some() {
            return Err(bad(dir, format!("duplicate parameter {name}")));
        }
        let value = read_cten(dir.join(rel))?;
        if shape_text(value.shape()) != shape {
            return Err(bad(dir, format!("{name}: stored shape {:?} disagrees with {shape}", value.shape())));
        }
        let vel_rel = rel.replacen("params/", "velocity/", 1);
        velocities.push(read_cten(dir.join(vel_rel))?);
        store.insert(name, ParamGroup::parse(group)?, value);
    }
    let reference = Model::init(config.model.clone(), 0)?;
    let same_layout = reference.params.len() == store.len()
        && reference
            .params
            .iter()
            .zip(store.iter())
            .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape());
    if !same_layout {
        return Err(Error::Version("checkpoint parameters do not match its model configuration".into()));
    }
    let state = RunState {
        epoch: parse_usize("epoch")?,
        step: parse_usize("step")?,
        velocities,
        best_sdm,
        best_epoch: opt_usize("best_epoch")?,
        table,
    };
    Ok(Checkpoint { model: Model { config: config.model.clone(), params: store }, config, state })
}

/// Loads a checkpoint for use under `cfg`; a different architecture is a
/// version error.
pub fn load_checkpoint_for(dir: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(dir)?;
    if ck.config.model_text() != cfg.model_text() {
        return Err(Error::Version(format!(
            "checkpoint {} was trained with a different model configuration",
            dir.display()
        )));
    }
    Ok(ck)
}
