//! Reader for the CIFAR binary record format: an optional coarse-label
//! byte, one label byte, then 3072 pixel bytes (three 32x32 planes).

use std::path::Path;

use super::{DataError, LabeledImage};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

pub fn load_cifar_binary(
    path: &Path,
    num_classes: usize,
    coarse_label_byte: bool,
) -> Result<Vec<LabeledImage>, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let label_offset = usize::from(coarse_label_byte);
    let record = label_offset + 1 + PIXELS;
    if bytes.len() % record != 0 {
        return Err(DataError::Format {
            path: path.into(),
            offset: bytes.len() - bytes.len() % record,
            detail: format!(
                "truncated record: {} bytes is not a multiple of the {}-byte record size",
                bytes.len(),
                record
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / record);
    for (i, chunk) in bytes.chunks_exact(record).enumerate() {
        let label = chunk[label_offset] as usize;
        if label >= num_classes {
            return Err(DataError::Format {
                path: path.into(),
                offset: i * record + label_offset,
                detail: format!("label {} out of range for {} classes", label, num_classes),
            });
        }
        let data: Vec<f64> = chunk[label_offset + 1..].iter().map(|&b| b as f64 / 255.0).collect();
        let pixels = Tensor::from_vec(data, &[3, 32, 32]).expect("record size");
        out.push(LabeledImage { pixels, label });
    }
    Ok(out)
}
