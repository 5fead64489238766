//! CIFAR-100 in its binary distribution format: `train.bin` / `test.bin`,
//! each record one coarse label byte, one fine label byte and 3072 pixel
//! bytes stored channel-major (1024 red, 1024 green, 1024 blue).

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::Dataset;
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 2 + 3 * PLANE;
const MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
const STD: [f32; 3] = [0.2673, 0.2564, 0.2762];

pub fn load_file(path: &Path) -> Result<Dataset> {
    let ingest = |message: String| Error::Ingestion {
        path: path.display().to_string(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| ingest(e.to_string()))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(ingest(format!(
            "{} bytes is not a whole number of {RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut images = Array4::<f32>::zeros((n, SIDE, SIDE, 3));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(RECORD).enumerate() {
        let fine = record[1] as usize;
        if fine >= 100 {
            return Err(ingest(format!("record {i} has fine label {fine}")));
        }
        labels.push(fine);
        let pixels = &record[2..];
        for c in 0..3 {
            for p in 0..PLANE {
                let v = pixels[c * PLANE + p] as f32 / 255.0;
                images[[i, p / SIDE, p % SIDE, c]] = (v - MEAN[c]) / STD[c];
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: 100,
    })
}

pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_file(&dir.join("train.bin"))?,
        load_file(&dir.join("test.bin"))?,
    ))
}
