#![allow(dead_code)]

use std::path::{Path, PathBuf};

use texture_reformer::imaging::encode_png;
use texture_reformer::FeatureMap32;
use texture_reformer_cli::PngInputs;

pub const WEIGHT_SEED: u64 = 11;

/// Three small PNGs: a striped style image, a left/right semantic split,
/// and a disc-shaped target layout.
pub struct Fixture {
    pub style: Vec<u8>,
    pub style_sem: Vec<u8>,
    pub target_sem: Vec<u8>,
}

impl Fixture {
    pub fn new(size: usize) -> Self {
        let style = FeatureMap32::from_fn(3, size, size, |c, y, x| (((x + 2 * y + c) % 5) as f32 - 2.0) * 0.6);
        let style_sem = FeatureMap32::from_fn(3, size, size, |c, _, x| if (x < size / 2) == (c == 0) { 1.5 } else { -1.5 });
        let r = size as f32 / 3.0;
        let target_sem = FeatureMap32::from_fn(3, size, size, |c, y, x| {
            let (dy, dx) = (y as f32 - size as f32 / 2.0, x as f32 - size as f32 / 2.0);
            if (dy * dy + dx * dx < r * r) == (c == 0) {
                1.5
            } else {
                -1.5
            }
        });
        Self {
            style: encode_png(&style).unwrap(),
            style_sem: encode_png(&style_sem).unwrap(),
            target_sem: encode_png(&target_sem).unwrap(),
        }
    }

    pub fn inputs(&self) -> PngInputs<'_> {
        PngInputs {
            source_style: &self.style,
            source_sem: &self.style_sem,
            target_sem: &self.target_sem,
        }
    }

    /// Writes the three PNGs into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> [PathBuf; 3] {
        let paths = [dir.join("style.png"), dir.join("style_sem.png"), dir.join("target_sem.png")];
        for (p, bytes) in paths.iter().zip([&self.style, &self.style_sem, &self.target_sem]) {
            std::fs::write(p, bytes).unwrap();
        }
        paths
    }
}
