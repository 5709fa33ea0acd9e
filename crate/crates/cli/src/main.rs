//! `ceusp` command-line interface.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ceusp_core::dataset::{save_dataset, ShiftMode, Split};
use ceusp_core::eval::{append_metrics, export_attention, robustness_sweep, scaled_shifts};
use ceusp_core::harness::{
    evaluate_checkpoint, gradient_suite, load_checkpoint, load_checkpoint_for, load_data, worst_case, DataSource,
    TrainConfig, Trainer, GRAD_STEP, GRAD_TOLERANCE,
};
use ceusp_core::model::Model;
use ceusp_core::sampler::{build_epoch_plan, epoch_quota, refresh_similarity, ClassMeta};
use ceusp_core::tensor::write_cten;
use ceusp_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ceusp", version, about = "Cross-view drone/satellite geo-localization toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset the config file is applied to: full or desk.
    #[arg(long, global = true, default_value = "full")]
    preset: String,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset in the on-disk layout.
    GenData,
    /// Train a model; writes train_log.csv, metrics.csv and checkpoints.
    Train {
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Central-difference gradient check of every primitive, the attention blocks and the loss.
    Gradcheck {
        #[arg(long, default_value_t = GRAD_STEP)]
        step: f64,
    },
    /// Print the batch plans of the given epochs as CSV.
    SampleAudit {
        /// Comma-separated epochs.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        epoch: Vec<usize>,
    },
    /// Evaluate with position-shifted query images.
    ShiftSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shifts in pixels; defaults to the nominal grid rescaled to the image width.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "black,flip")]
        modes: Vec<String>,
    },
    /// Write attention magnitude maps of query images as CTEN files.
    ExportAttn {
        /// Checkpoint; an untrained model is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of query images.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    ExitCode::from(dispatch(std::env::args_os()))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
fn dispatch<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config(common: &Common) -> Result<TrainConfig> {
    let base = TrainConfig::preset(&common.preset)?;
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p, base)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::GenData => {
            let cfg = config(c)?;
            let DataSource::Synthetic(_) = &cfg.data else {
                return Err(Error::Config("gen-data needs data.source=synthetic".into()));
            };
            let data = load_data(&cfg)?;
            let out = out_dir(c)?;
            save_dataset(&data, out)?;
            println!(
                "wrote {} train, {} query, {} gallery samples to {}",
                data.train.len(),
                data.query.len(),
                data.gallery.len(),
                out.display()
            );
        }
        Command::Train { resume, stop_at } => {
            let out = out_dir(c)?;
            let (cfg, data, mut trainer);
            match resume {
                Some(dir) => {
                    let ck = load_checkpoint(&dir)?;
                    cfg = ck.config.clone();
                    data = load_data(&cfg)?;
                    trainer = Trainer::resume(ck, &data, Some(out))?;
                }
                None => {
                    cfg = config(c)?;
                    data = load_data(&cfg)?;
                    trainer = Trainer::new(cfg.clone(), &data, Some(out))?;
                }
            }
            let s = trainer.train_until(stop_at)?;
            let r = &s.report;
            println!(
                "epochs={} steps={} recall@1={:.4} ap={:.4} sdm@1={} best_epoch={}",
                trainer.epoch,
                s.steps,
                r.recall_1,
                r.ap,
                r.sdm_1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                s.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
            );
        }
        Command::Eval { checkpoint } => {
            let cfg = config(c)?;
            let ck = load_checkpoint_for(&checkpoint, &cfg)?;
            let data = load_data(&cfg)?;
            let r = evaluate_checkpoint(&ck, &data, c.out.as_deref())?;
            println!(
                "recall@1={:.6} recall@5={:.6} recall@10={:.6} ap={:.6} sdm@1={} n_queries={}",
                r.recall_1,
                r.recall_5,
                r.recall_10,
                r.ap,
                r.sdm_1.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                r.n_queries
            );
        }
        Command::Gradcheck { step } => {
            let seed = c.seed.unwrap_or(0);
            let cases = gradient_suite(seed, step)?;
            for case in &cases {
                println!("{:<20} {:.3e}", case.name, case.max_rel_err);
            }
            let worst = worst_case(&cases).expect("non-empty suite");
            println!("max_rel_err={:.3e}", worst.max_rel_err);
            if !worst.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed on {}: {:.3e} >= {GRAD_TOLERANCE:e}",
                    worst.name, worst.max_rel_err
                )));
            }
        }
        Command::SampleAudit { epoch } => sample_audit(&config(c)?, &epoch, c.out.as_deref())?,
        Command::ShiftSweep { checkpoint, ks, modes } => {
            let cfg = config(c)?;
            let ck = load_checkpoint_for(&checkpoint, &cfg)?;
            let data = load_data(&cfg)?;
            let width = cfg.model.input[2];
            let ks = ks.unwrap_or_else(|| {
                let mut v = scaled_shifts(width);
                v.dedup();
                v
            });
            let modes = modes.iter().map(|m| ShiftMode::parse(m)).collect::<Result<Vec<_>>>()?;
            let rows = robustness_sweep(&ck.model, &data.query, &data.gallery, &ks, &modes)?;
            println!("mode,pad_k,ap,ap_delta,sdm@1");
            for r in &rows {
                let sdm = r.report.sdm_1.map(|v| format!("{v:.6}")).unwrap_or_default();
                println!("{},{},{:.6},{:+.6},{sdm}", r.mode.as_str(), r.k, r.report.ap, r.ap_delta);
                if let Some(out) = &c.out {
                    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                    append_metrics(&out.join("metrics.csv"), "test", r.mode.as_str(), r.k, &r.report)?;
                }
            }
        }
        Command::ExportAttn { checkpoint, count } => {
            let cfg = config(c)?;
            let model = match checkpoint {
                Some(p) => load_checkpoint_for(&p, &cfg)?.model,
                None => Model::init(cfg.model.clone(), cfg.seed)?,
            };
            let data = load_data(&cfg)?;
            let out = out_dir(c)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for s in data.split(Split::Query).iter().take(count) {
                let map = export_attention(&s.image, &model)?;
                let name = s.meta.payload.replace('/', "_").replace(".cten", "");
                let path = out.join(format!("attn_{name}.cten"));
                write_cten(&path, &map)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn sample_audit(cfg: &TrainConfig, epochs: &[usize], out: Option<&Path>) -> Result<()> {
    let data = load_data(cfg)?;
    let meta = ClassMeta::from_dataset(&data);
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut text = String::from("epoch,batch,slot,class_id,tag\n");
    let mut summary = Vec::new();
    for &epoch in epochs {
        let table = match cfg.sampler.last_refresh(epoch) {
            Some(stamp) => Some(refresh_similarity(&model, &data, stamp)?),
            None => None,
        };
        let plans = build_epoch_plan(epoch, &meta, table.as_ref(), &cfg.sampler)?;
        for (b, plan) in plans.iter().enumerate() {
            for (slot, (class, tag)) in plan.entries.iter().enumerate() {
                text.push_str(&format!("{epoch},{b},{slot},{class},{tag}\n"));
            }
        }
        let q = epoch_quota(epoch, &cfg.sampler, meta.has_gps());
        summary.push(format!(
            "epoch {epoch}: {} batches, GDS/FSS/RS per batch {}/{}/{}, refresh={}",
            plans.len(),
            q.gds,
            q.fss,
            q.rs,
            cfg.sampler.is_refresh_epoch(epoch)
        ));
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("sample_audit.csv");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            for s in summary {
                println!("{s}");
            }
            println!("wrote {}", path.display());
        }
        None => {
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            for s in summary {
                eprintln!("{s}");
            }
        }
    }
    Ok(())
}
