//! VAPD dataset files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "VAPD"
//! version  u32      1
//! count    u32
//! count x { label u8, sample_seed u64, 256 x f32 pixels (row-major) }
//! ```
//!
//! Pixels are stored as f32, so loaded samples carry the f32-rounded values
//! rather than the f64 render. Training always reads the file, so every
//! stage sees the same quantized pixels.

use anyhow::{bail, ensure, Context, Result};
use std::path::Path;
use vapi_core::synth::{make_dataset, ClassLabel, DatasetSpec, ImageSample, IMAGE_SIDE};
use vapi_core::Image;

pub const MAGIC: &[u8; 4] = b"VAPD";
pub const VERSION: u32 = 1;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
const RECORD: usize = 1 + 8 + 4 * PIXELS;

pub fn encode(samples: &[ImageSample]) -> Result<Vec<u8>> {
    let count = u32::try_from(samples.len()).context("too many samples for a VAPD file")?;
    let mut out = Vec::with_capacity(12 + samples.len() * RECORD);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        ensure!(s.image.side() == IMAGE_SIDE, "sample image is {}x{}, expected {IMAGE_SIDE}", s.image.side(), s.image.side());
        out.push(s.label.id() as u8);
        out.extend_from_slice(&s.sample_seed.to_le_bytes());
        for &p in s.image.pixels() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    ensure!(bytes.len() >= 12 && &bytes[..4] == MAGIC, "not a VAPD file");
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    ensure!(version == VERSION, "unsupported VAPD version {version}");
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    ensure!(body.len() == count * RECORD, "VAPD body is {} bytes, expected {}", body.len(), count * RECORD);
    body.chunks_exact(RECORD)
        .map(|r| {
            let label = ClassLabel::from_id(r[0] as usize).with_context(|| format!("bad class id {}", r[0]))?;
            let sample_seed = u64::from_le_bytes(r[1..9].try_into().unwrap());
            let pixels = r[9..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let image = Image::new(IMAGE_SIDE, pixels)?;
            Ok(ImageSample { image, label, sample_seed })
        })
        .collect()
}

pub fn write(path: &Path, samples: &[ImageSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, encode(samples)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<ImageSample>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    decode(&bytes).with_context(|| format!("in {}", path.display()))
}

/// The training and held-out splits. Held-out samples use a distinct base
/// seed so the two never share a render.
pub fn splits(num_per_class: usize, heldout_per_class: usize, base_seed: u64) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if num_per_class == 0 {
        bail!("num_samples_per_class must be positive");
    }
    let train = make_dataset(DatasetSpec { num_samples_per_class: num_per_class, base_seed });
    let heldout = make_dataset(DatasetSpec { num_samples_per_class: heldout_per_class, base_seed: heldout_seed(base_seed) });
    Ok((train, heldout))
}

pub fn heldout_seed(base_seed: u64) -> u64 {
    vapi_core::num::mix64(base_seed, 0x4845_4c44)
}
