//! The `eval` subcommand: metrics of a checkpoint on the test split.

use std::path::{Path, PathBuf};

use admix::metrics::{ece, fgsm_accuracy, occlusion_eval, predict_set, top_k_accuracy, EceConfig};
use admix::trainer::ModelState;

use crate::config::ResolvedRun;
use crate::CliError;

const DEFAULT_EPS: f64 = 8.0 / 255.0;

fn eps_label(eps: f64) -> String {
    if eps == DEFAULT_EPS {
        "8/255".to_string()
    } else {
        format!("{eps}")
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    resolved: &ResolvedRun,
    checkpoint: &Path,
    metrics_list: &str,
    fgsm_eps: Option<f64>,
    ece_bins: usize,
    occlusion_patch: usize,
    occlusion_ratios: &str,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let state = ModelState::load(checkpoint)?;
    let descriptor = &state.classifier.descriptor;
    if *descriptor != resolved.descriptor {
        return Err(CliError::Config(format!(
            "checkpoint architecture {:?} does not match the configured one {:?}",
            descriptor, resolved.descriptor
        )));
    }
    let (_, test_split) = resolved.dataset.load()?;
    let eps = fgsm_eps.unwrap_or(DEFAULT_EPS);
    let ratios: Vec<f64> = occlusion_ratios
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("occlusion ratio {s:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Config("occlusion ratios must lie in [0, 1]".into()));
    }

    let preds = predict_set(&state.classifier, &test_split)?;
    let mut columns: Vec<(String, f64)> = Vec::new();
    for metric in metrics_list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match metric {
            "top1" => columns.push(("top1".into(), top_k_accuracy(&preds, 1)?)),
            "top5" => {
                let k = 5.min(descriptor.classes);
                columns.push((format!("top{k}"), top_k_accuracy(&preds, k)?));
            }
            "ece" => columns.push((
                format!("ece@{ece_bins}bins"),
                ece(&preds, &EceConfig { bins: ece_bins })?,
            )),
            "fgsm" => columns.push((
                format!("fgsm_acc@{}", eps_label(eps)),
                fgsm_accuracy(&state.classifier, &test_split, eps)?,
            )),
            "occlusion" => {
                let patch = (occlusion_patch, occlusion_patch);
                for (ratio, acc) in
                    occlusion_eval(&state.classifier, &test_split, patch, &ratios, 0)?
                {
                    columns.push((format!("occlusion_acc@{ratio}"), acc));
                }
            }
            other => return Err(CliError::Config(format!("unknown metric {other:?}"))),
        }
    }

    let out_path = match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            dir.join("eval.csv")
        }
        None => checkpoint.with_extension("eval.csv"),
    };
    let header: Vec<&str> = columns.iter().map(|(n, _)| n.as_str()).collect();
    let values: Vec<String> = columns.iter().map(|(_, v)| v.to_string()).collect();
    std::fs::write(&out_path, format!("{}\n{}\n", header.join(","), values.join(",")))?;

    println!("evaluated {} test samples from step-{} checkpoint", test_split.len(), state.step);
    for (name, value) in &columns {
        println!("  {name}: {value:.4}");
    }
    println!("wrote {}", out_path.display());
    Ok(())
}
