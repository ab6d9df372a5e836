//! Flat binary checkpoints: little-endian, versioned, no padding.
//!
//! Layout: magic, version, step counter, architecture descriptor, then a
//! list of named sections each holding named shape-tagged f64 tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ArchDescriptor;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADMIXCKP";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Format(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(
    path: &Path,
    descriptor: &ArchDescriptor,
    step: u64,
    sections: &[Section],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    for v in [
        descriptor.in_channels,
        descriptor.height,
        descriptor.width,
        descriptor.classes,
        descriptor.blocks_per_stage,
        descriptor.feature_stage,
        descriptor.widths.len(),
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &width in &descriptor.widths {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for section in sections {
        write_str(&mut w, &section.name)?;
        w.write_all(&(section.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &section.tensors {
            write_str(&mut w, name)?;
            w.write_all(&[tensor.shape().len() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ArchDescriptor, u64, Vec<Section>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes)?;
    let step = u64::from_le_bytes(step_bytes);

    let in_channels = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let classes = read_u32(&mut r)? as usize;
    let blocks_per_stage = read_u32(&mut r)? as usize;
    let feature_stage = read_u32(&mut r)? as usize;
    let n_stages = read_u32(&mut r)? as usize;
    let mut widths = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        widths.push(read_u32(&mut r)? as usize);
    }
    let descriptor = ArchDescriptor {
        in_channels,
        height,
        width,
        widths,
        blocks_per_stage,
        classes,
        feature_stage,
    };

    let n_sections = read_u32(&mut r)? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = read_str(&mut r)?;
        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let tname = read_str(&mut r)?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = Tensor::from_vec(data, &shape)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((tname, tensor));
        }
        sections.push(Section { name, tensors });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after sections".into()));
    }
    Ok((descriptor, step, sections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let descriptor = ModelConfig::default().validate(1, 8, 8, 3).unwrap();
        let sections = vec![
            Section {
                name: "alpha".into(),
                tensors: vec![
                    ("w".into(), Tensor::from_vec(vec![1.5, -0.25, 3.0e-17, -0.0], &[2, 2]).unwrap()),
                    ("b".into(), Tensor::scalar(42.0)),
                ],
            },
            Section { name: "beta".into(), tensors: vec![] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &descriptor, 77, &sections).unwrap();
        let (d2, step, s2) = read_checkpoint(&path).unwrap();
        assert_eq!(d2, descriptor);
        assert_eq!(step, 77);
        assert_eq!(s2.len(), 2);
        assert_eq!(s2[0].name, "alpha");
        assert!(s2[0].tensors[0].1.bits_eq(&sections[0].tensors[0].1));
        assert_eq!(s2[0].tensors[1].0, "b");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::Format(_))));
    }
}
