//! The `train` subcommand: resolve the run, stream epochs, write artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use admix::trainer::{TrainLogRow, Trainer};

use crate::config::{manifest_text, run_id, ResolvedRun};
use crate::CliError;

pub const LOG_HEADER: &str = "epoch,step,amce,mce,ace,amce_teacher,cosine,classifier_total,generator_total,xi,classifier_lr,generator_lr,wall_clock_s";

fn log_line(row: &TrainLogRow) -> String {
    let r = &row.report;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.epoch,
        row.step,
        r.amce,
        r.mce,
        r.ace,
        r.amce_teacher,
        r.cosine,
        r.classifier_total,
        r.generator_total,
        row.xi,
        row.classifier_lr,
        row.generator_lr,
        row.wall_clock_s
    )
}

/// Resolves the run directory: explicit flag, then $ADMIX_OUT_ROOT, then
/// ./runs, each suffixed with the run id when a root is used.
pub fn resolve_out_dir(explicit: Option<PathBuf>, id: &str) -> PathBuf {
    match explicit {
        Some(dir) => dir,
        None => match std::env::var_os("ADMIX_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(id),
            None => PathBuf::from("runs").join(id),
        },
    }
}

pub fn sha256_of_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run(resolved: &ResolvedRun, out: Option<PathBuf>) -> Result<(), CliError> {
    let id = run_id(&resolved.config);
    let out_dir = resolve_out_dir(out, &id);
    std::fs::create_dir_all(&out_dir)?;

    let manifest = manifest_text(&resolved.config, &id, &out_dir.display().to_string());
    std::fs::write(out_dir.join("manifest.toml"), manifest)?;

    let (train_split, test_split) = resolved.dataset.load()?;
    let cfg = resolved.config.train.clone();
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(cfg, resolved.descriptor.clone(), train_split.len())?;

    let log_path = out_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;

    let every = resolved.config.train.checkpoint_every;
    for epoch in 0..epochs {
        let rows = trainer.train_epoch(&train_split, epoch)?;
        for row in &rows {
            writeln!(log, "{}", log_line(row))?;
        }
        log.flush()?;
        if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < epochs {
            let path = out_dir.join(format!("checkpoint_epoch{:04}.ckpt", epoch + 1));
            trainer.state.save(&path)?;
        }
    }

    let final_path = out_dir.join("checkpoint_final.ckpt");
    trainer.state.save(&final_path)?;
    let digest = sha256_of_file(&final_path)?;

    let train_acc = {
        let preds = admix::metrics::predict_set(&trainer.state.classifier, &train_split)?;
        admix::metrics::top_k_accuracy(&preds, 1)?
    };
    let test_acc = {
        let preds = admix::metrics::predict_set(&trainer.state.classifier, &test_split)?;
        admix::metrics::top_k_accuracy(&preds, 1)?
    };

    println!("run {id} finished after {epochs} epochs");
    println!("train top-1 {train_acc:.4}, test top-1 {test_acc:.4}");
    println!("checkpoint {} sha256 {digest}", final_path.display());
    Ok(())
}
