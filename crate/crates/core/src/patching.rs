//! Overlapping patch grids. Grid positions are `(row, col)` = `(y, x)`,
//! row-major; patch `(i, j)` has its top-left pixel at `(i·s, j·s)`.

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{bail, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub stride: usize,
}

impl PatchGeometry {
    /// 24-pixel patches overlapping by 12, the PCam setting (7×7 on 96²).
    pub fn full_scale() -> Self {
        Self {
            patch_size: 24,
            stride: 12,
        }
    }

    /// 8-pixel patches at stride 4 (7×7 on 32² images).
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            stride: 4,
        }
    }

    pub fn grid_side(&self, image_size: usize) -> Result<usize> {
        grid_shape(image_size, self.patch_size, self.stride)
    }
}

pub fn grid_shape(image_size: usize, patch_size: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        bail!(Geometry, "stride must be at least 1");
    }
    if patch_size == 0 || patch_size > image_size {
        bail!(Geometry, "patch size {patch_size} does not fit in a {image_size}-pixel image");
    }
    let span = image_size - patch_size;
    if !span.is_multiple_of(stride) {
        bail!(
            Geometry,
            "({image_size} - {patch_size}) = {span} is not divisible by stride {stride}"
        );
    }
    Ok(span / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// `side × side × patch × patch × 3` bytes.
    pixels: Vec<u8>,
    pub side: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub source_size: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    fn patch_bytes(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Raw `patch × patch × 3` bytes of patch `(i, j)`.
    pub fn patch(&self, i: usize, j: usize) -> &[u8] {
        let k = (i * self.side + j) * self.patch_bytes();
        &self.pixels[k..k + self.patch_bytes()]
    }

    pub fn patch_mut(&mut self, i: usize, j: usize) -> &mut [u8] {
        let n = self.patch_bytes();
        let k = (i * self.side + j) * n;
        &mut self.pixels[k..k + n]
    }

    /// Pixel `(y, x)` of patch `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize, y: usize, x: usize) -> [u8; 3] {
        let p = self.patch(i, j);
        let k = (y * self.patch_size + x) * 3;
        [p[k], p[k + 1], p[k + 2]]
    }

    /// All patches as channel-first floats, `(side², 3, p, p)` flattened,
    /// with the same scaling as [`ImageSample::to_chw`].
    pub fn to_chw<T: Real>(&self) -> Vec<T> {
        let hw = self.patch_size * self.patch_size;
        let mut out = vec![T::zero(); self.len() * 3 * hw];
        for (n, patch) in self.pixels.chunks_exact(self.patch_bytes()).enumerate() {
            for (p, px) in patch.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[(n * 3 + c) * hw + p] = T::lit((px[c] as f64 - 127.5) / 64.0);
                }
            }
        }
        out
    }

    /// Rebuilds the source image by averaging every patch covering a pixel.
    pub fn reassemble(&self) -> Vec<u8> {
        let n = self.source_size;
        let mut sum = vec![0u32; n * n * 3];
        let mut count = vec![0u32; n * n];
        for i in 0..self.side {
            for j in 0..self.side {
                for y in 0..self.patch_size {
                    for x in 0..self.patch_size {
                        let (gy, gx) = (i * self.stride + y, j * self.stride + x);
                        let px = self.pixel(i, j, y, x);
                        for c in 0..3 {
                            sum[(gy * n + gx) * 3 + c] += px[c] as u32;
                        }
                        count[gy * n + gx] += 1;
                    }
                }
            }
        }
        sum.iter()
            .enumerate()
            .map(|(k, s)| (s / count[k / 3].max(1)) as u8)
            .collect()
    }
}

pub fn extract_patches(image: &ImageSample, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if !image.is_square() {
        bail!(Geometry, "image `{}` is {}x{}, not square", image.id, image.height, image.width);
    }
    let n = image.height;
    let side = grid_shape(n, patch_size, stride)?;
    let row = patch_size * 3;
    let mut pixels = Vec::with_capacity(side * side * patch_size * row);
    for i in 0..side {
        for j in 0..side {
            for y in 0..patch_size {
                let start = ((i * stride + y) * n + j * stride) * 3;
                pixels.extend_from_slice(&image.pixels[start..start + row]);
            }
        }
    }
    Ok(PatchGrid {
        pixels,
        side,
        patch_size,
        stride,
        source_size: n,
    })
}
