//! Color and intensity palettes shared across the dataset and model code.

use crate::{Error, Result, NUM_CLASSES};
use serde::{Deserialize, Serialize};

/// RGB color assigned to each of the 8 classes when a label map is rendered
/// as a color image.
///
/// The default palette places the classes on corners of the RGB cube
/// (class `k` maps to the binary digits of `k` as `(r, g, b)`), so every
/// channel of a rendered label map is exactly 0 or 1 and the minimum
/// distance between two palette entries is 1 in every affected channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub colors: [[f64; 3]; NUM_CLASSES],
}

impl Default for ClassPalette {
    fn default() -> Self {
        let mut colors = [[0.0; 3]; NUM_CLASSES];
        for (k, c) in colors.iter_mut().enumerate() {
            *c = [
                ((k >> 2) & 1) as f64,
                ((k >> 1) & 1) as f64,
                (k & 1) as f64,
            ];
        }
        ClassPalette { colors }
    }
}

impl ClassPalette {
    /// Fails when two classes share a color, which would make decoding
    /// ambiguous.
    pub fn validate(&self) -> Result<()> {
        for i in 0..NUM_CLASSES {
            for j in (i + 1)..NUM_CLASSES {
                if self.colors[i] == self.colors[j] {
                    return Err(Error::InvalidConfig(format!(
                        "palette colors {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Half of the minimum Euclidean distance between any two palette
    /// colors; noise below this bound cannot flip a decoded class.
    pub fn half_min_gap(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..NUM_CLASSES {
            for j in (i + 1)..NUM_CLASSES {
                let d: f64 = self.colors[i]
                    .iter()
                    .zip(self.colors[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min / 2.0
    }
}

/// Mean gray level used to render each class in the phantom scans.
/// Bright/dark alternation loosely follows the appearance of retinal
/// layers; values are pairwise distinct so intensity identifies class in
/// the noise-free case.
pub const DEFAULT_INTENSITY_PALETTE: [f64; NUM_CLASSES] =
    [0.05, 0.85, 0.65, 0.35, 0.55, 0.20, 0.45, 0.12];
