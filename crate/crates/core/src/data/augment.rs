use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{bail, Result};

/// One element of the dihedral group of the square: `quarter_turns`
/// clockwise rotations followed by an optional left-right mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        mirror: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral {
            quarter_turns: (i % 4) as u8,
            mirror: i >= 4,
        })
    }

    pub fn index(self) -> usize {
        self.quarter_turns as usize % 4 + if self.mirror { 4 } else { 0 }
    }

    pub fn from_index(i: usize) -> Self {
        Self::all()[i % 8]
    }

    /// Source coordinate for output pixel `(y, x)` of an `n × n` image.
    pub fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let x = if self.mirror { n - 1 - x } else { x };
        // Undo clockwise quarter turns one at a time: out[y][x] = in[n-1-x][y].
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.quarter_turns % 4 {
            (sy, sx) = (n - 1 - sx, sy);
        }
        (sy, sx)
    }

    pub fn apply(self, image: &ImageSample) -> Result<ImageSample> {
        if !image.is_square() {
            bail!(
                InvalidArgument,
                "dihedral transforms need a square image, got {}x{}",
                image.height,
                image.width
            );
        }
        let n = image.height;
        let mut pixels = vec![0u8; image.pixels.len()];
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                let (d, s) = ((y * n + x) * 3, (sy * n + sx) * 3);
                pixels[d..d + 3].copy_from_slice(&image.pixels[s..s + 3]);
            }
        }
        Ok(ImageSample {
            pixels,
            ..image.clone()
        })
    }
}

/// Applies a dihedral element drawn uniformly from a generator seeded with
/// `seed`. The label is carried over unchanged.
pub fn augment(image: &ImageSample, seed: u64) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dihedral::from_index(rng.random_range(0..8)).apply(image)
}
