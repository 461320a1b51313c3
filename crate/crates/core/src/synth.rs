//! Procedural class-conditional 16x16 grayscale images.
//!
//! Each class is a pattern family. A sample seed picks the intensity scale
//! (uniform in `[0.5, 1.0]`), a phase for the periodic families and a
//! translation jitter of at most one pixel for the others.

use crate::image::Image;
use crate::num::math;
use crate::num::mix64;
use crate::num::SeededRng;
use alloc::vec::Vec;

pub const IMAGE_SIDE: usize = 16;
pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    HStripes,
    VStripes,
    Checker,
    Diagonal,
    Disc,
    Gradient,
    Constant,
    Blobs,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::HStripes,
        ClassLabel::VStripes,
        ClassLabel::Checker,
        ClassLabel::Diagonal,
        ClassLabel::Disc,
        ClassLabel::Gradient,
        ClassLabel::Constant,
        ClassLabel::Blobs,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::HStripes => "h-stripes",
            ClassLabel::VStripes => "v-stripes",
            ClassLabel::Checker => "checker",
            ClassLabel::Diagonal => "diagonal",
            ClassLabel::Disc => "disc",
            ClassLabel::Gradient => "gradient",
            ClassLabel::Constant => "constant",
            ClassLabel::Blobs => "blobs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub label: ClassLabel,
    pub sample_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub num_samples_per_class: usize,
    pub base_seed: u64,
}

/// Period of the striped and checkered families, in pixels.
pub const PERIOD: usize = 4;

/// Renders one sample of `label`; a pure function of `(label, sample_seed)`.
pub fn render_class_image(label: ClassLabel, sample_seed: u64) -> ImageSample {
    let mut rng = SeededRng::new(sample_seed, label.id() as u64);
    let scale = 0.5 + 0.5 * rng.uniform();
    // Periodic families shift by half a period, which maps patch-aligned
    // patterns onto their inverses.
    let phase = 2 * rng.below(2);
    let dx = rng.below(3) as f64 - 1.0;
    let dy = rng.below(3) as f64 - 1.0;
    let flip = rng.below(2) == 1;
    let pair = rng.below(6);
    let n = IMAGE_SIDE;
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v = match label {
                ClassLabel::HStripes => on((y + phase) % PERIOD < PERIOD / 2),
                ClassLabel::VStripes => on((x + phase) % PERIOD < PERIOD / 2),
                ClassLabel::Checker => on(((x + phase) / 2 + y / 2).is_multiple_of(2)),
                ClassLabel::Diagonal => on((x + y + phase) % PERIOD < PERIOD / 2),
                ClassLabel::Disc => {
                    let cx = 7.5 + dx;
                    let cy = 7.5 + dy;
                    let (fx, fy) = (x as f64 - cx, y as f64 - cy);
                    // Radius about 5 with a 3 px linear edge ramp.
                    ((6.5 - math::sqrt(fx * fx + fy * fy)) / 3.0).clamp(0.0, 1.0)
                }
                ClassLabel::Gradient => {
                    let t = ((x as f64 + dx) / (n - 1) as f64).clamp(0.0, 1.0);
                    if flip {
                        1.0 - t
                    } else {
                        t
                    }
                }
                ClassLabel::Constant => 1.0,
                ClassLabel::Blobs => {
                    const CENTERS: [(f64, f64); 4] = [(4.0, 4.0), (11.0, 4.0), (4.0, 11.0), (11.0, 11.0)];
                    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
                    let (a, b) = PAIRS[pair];
                    let mut acc = 0.0;
                    for &(cx, cy) in [CENTERS[a], CENTERS[b]].iter() {
                        let fx = x as f64 - (cx + dx);
                        let fy = y as f64 - (cy + dy);
                        acc += math::exp(-(fx * fx + fy * fy) / 8.0);
                    }
                    acc.min(1.0)
                }
            };
            px.push((scale * v).clamp(0.0, 1.0));
        }
    }
    let image = Image::new(n, px).expect("square image");
    ImageSample { image, label, sample_seed }
}

fn on(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Seed of sample `index` of class `class_id` under `base_seed`.
pub fn sample_seed(base_seed: u64, class_id: usize, index: usize) -> u64 {
    mix64(mix64(base_seed, class_id as u64), index as u64)
}

/// `8 * num_samples_per_class` samples, class-major then index-minor.
pub fn make_dataset(spec: DatasetSpec) -> Vec<ImageSample> {
    let mut out = Vec::with_capacity(NUM_CLASSES * spec.num_samples_per_class);
    for label in ClassLabel::ALL {
        for i in 0..spec.num_samples_per_class {
            out.push(render_class_image(label, sample_seed(spec.base_seed, label.id(), i)));
        }
    }
    out
}
