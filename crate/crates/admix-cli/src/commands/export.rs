//! The `export-mixed` subcommand: PNG galleries of sources, policy mask
//! heatmaps, and mixed images, plus a line-oriented manifest of the draws.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use admix::data::sample_mix_ratios;
use admix::diffmath::Tape;
use admix::mixblock::{generate, mix_labels, PolicyMasks};
use admix::tensor::Tensor;
use admix::trainer::ModelState;

use crate::config::ResolvedRun;
use crate::CliError;

/// Clamps to [0, 1] and quantizes with round-half-up.
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[C, H, W]` tensor as an 8-bit PNG; single channel becomes
/// grayscale, three channels RGB.
pub fn write_image_png(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let save = |r: Result<(), image::ImageError>| {
        r.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    };
    match c {
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([to_byte(t.data()[y * w + x])]));
                }
            }
            save(img.save(path))
        }
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            let plane = h * w;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            to_byte(t.data()[i]),
                            to_byte(t.data()[plane + i]),
                            to_byte(t.data()[2 * plane + i]),
                        ]),
                    );
                }
            }
            save(img.save(path))
        }
        other => Err(CliError::Config(format!("cannot export {other}-channel image as PNG"))),
    }
}

/// Writes an `[H, W]` mask as a grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<(), CliError> {
    let s = mask.shape();
    let (h, w) = (s[0], s[1]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_byte(mask.data()[y * w + x])]));
        }
    }
    img.save(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_of(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

pub fn run(
    resolved: &ResolvedRun,
    checkpoint: &Path,
    out: &Path,
    count: usize,
    lambda_mode: &str,
) -> Result<(), CliError> {
    let state = ModelState::load(checkpoint)?;
    if state.classifier.descriptor != resolved.descriptor {
        return Err(CliError::Config(
            "checkpoint architecture does not match the configured one".into(),
        ));
    }
    let (_, test_split) = resolved.dataset.load()?;
    let n = resolved.config.train.images_per_set;
    if count == 0 || count * n > test_split.len() {
        return Err(CliError::Config(format!(
            "{count} sets of {n} images exceed the {}-image test split",
            test_split.len()
        )));
    }
    let fixed_lambda: Option<Vec<f64>> = match lambda_mode {
        "random" => None,
        other => match other.strip_prefix("fixed:") {
            Some(csv) => {
                let parsed: Result<Vec<f64>, _> = csv.split(',').map(|s| s.trim().parse()).collect();
                Some(parsed.map_err(|e| CliError::Config(format!("lambda list: {e}")))?)
            }
            None => {
                return Err(CliError::Config(format!(
                    "lambda mode {other:?} is neither \"random\" nor \"fixed:...\""
                )))
            }
        },
    };
    if let Some(fixed) = &fixed_lambda {
        if fixed.len() != n {
            return Err(CliError::Config(format!(
                "lambda list has {} entries for {}-image sets",
                fixed.len(),
                n
            )));
        }
    }

    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha20Rng::seed_from_u64(resolved.config.train.seed);
    let l = state.feature_stage();
    let mut manifest = String::new();

    for set_idx in 0..count {
        let members: Vec<&admix::data::LabeledImage> =
            (0..n).map(|i| &test_split[set_idx * n + i]).collect();
        let ratios = match &fixed_lambda {
            Some(fixed) => fixed.clone(),
            None => sample_mix_ratios(n, resolved.config.train.mix_concentration, &mut rng)?,
        };

        let mut tape = Tape::new();
        let enc = state.encoder.mount(&mut tape, false);
        let theta = state.generator.mount(&mut tape, false);
        let img_vars: Vec<_> = members.iter().map(|m| tape.leaf(m.pixels.clone())).collect();
        let generated = generate(&mut tape, &enc, l, &img_vars, &ratios, &theta)?;
        let masks = PolicyMasks::new(tape.value(generated.masks).clone())?;
        let mixed = tape.value(generated.x_mix).clone();

        let mut sources = Vec::new();
        let mut mask_files = Vec::new();
        for (i, member) in members.iter().enumerate() {
            let src_name = format!("set{set_idx}_src{i}.png");
            write_image_png(&out.join(&src_name), &member.pixels)?;
            sources.push(src_name);
            let mask_name = format!("set{set_idx}_mask{i}.png");
            write_mask_png(&out.join(&mask_name), &masks.tensor().index0(i))?;
            mask_files.push(mask_name);
        }
        let mix_name = format!("set{set_idx}_mix.png");
        write_image_png(&out.join(&mix_name), &mixed)?;

        let one_hots: Vec<Tensor> = members
            .iter()
            .map(|m| {
                let mut t = Tensor::zeros(&[resolved.dataset.num_classes]);
                t.data_mut()[m.label] = 1.0;
                t
            })
            .collect();
        let y_mix = mix_labels(&one_hots, &ratios)?;
        let labels: Vec<String> = members.iter().map(|m| m.label.to_string()).collect();

        let _ = writeln!(manifest, "set{set_idx}.lambda = {}", csv_of(&ratios));
        let _ = writeln!(manifest, "set{set_idx}.labels = {}", labels.join(","));
        let _ = writeln!(manifest, "set{set_idx}.y_mix = {}", csv_of(y_mix.data()));
        let _ = writeln!(manifest, "set{set_idx}.sources = {}", sources.join(","));
        let _ = writeln!(manifest, "set{set_idx}.masks = {}", mask_files.join(","));
        let _ = writeln!(manifest, "set{set_idx}.mix = {mix_name}");
    }
    std::fs::write(out.join("export_manifest.txt"), manifest)?;
    println!("exported {count} mix sets to {}", out.display());
    Ok(())
}
