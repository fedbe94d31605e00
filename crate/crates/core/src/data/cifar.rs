use std::path::Path;

use super::{split_records, DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by three 1024-byte row-major planes (R, G, B).
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 1024;

pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

const BATCH_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// Parses one binary batch file.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(Error::format(
            "CIFAR-10",
            format!(
                "truncated record at byte offset {}: {} of {} bytes present",
                whole * CIFAR_RECORD_BYTES,
                bytes.len() % CIFAR_RECORD_BYTES,
                CIFAR_RECORD_BYTES
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[0] as usize;
            if label >= CIFAR_CLASSES.len() {
                return Err(Error::format(
                    "CIFAR-10",
                    format!("label {label} >= 10 at byte offset {}", i * CIFAR_RECORD_BYTES),
                ));
            }
            let pixels = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(ImageRecord {
                pixels: Tensor::new([3, 32, 32], pixels)?,
                label,
            })
        })
        .collect()
}

/// Inverse of [`parse_cifar_batch`] for a single record.
pub fn encode_cifar_record(record: &ImageRecord) -> Result<Vec<u8>> {
    if record.pixels.shape() != [3, 32, 32] || record.label >= CIFAR_CLASSES.len() {
        return Err(Error::invalid(format!(
            "not a CIFAR-10 record: shape {:?}, label {}",
            record.pixels.shape(),
            record.label
        )));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
    out.push(record.label as u8);
    out.extend(
        record
            .pixels
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Reads all six batch files and re-splits their union 60/20/20.
pub fn load_cifar10(directory: impl AsRef<Path>, seed: u64) -> Result<DatasetSplit> {
    let dir = directory.as_ref();
    let mut records = Vec::with_capacity(60_000);
    for name in BATCH_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        let parsed = parse_cifar_batch(&bytes)
            .map_err(|e| Error::format("CIFAR-10", format!("{}: {e}", path.display())))?;
        records.extend(parsed);
    }
    let names = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    Ok(split_records(records, names, seed))
}
