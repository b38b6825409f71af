use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel raster with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Splits into a `rows×cols` grid of equal patches, returned in row-major
    /// grid order, each patch flattened row-major.
    pub fn patch_grid(&self, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
        if rows == 0 || cols == 0 || self.height % rows != 0 || self.width % cols != 0 {
            return Err(Error::Input(format!(
                "{}x{} image does not split into a {rows}x{cols} patch grid",
                self.height, self.width
            )));
        }
        let (ph, pw) = (self.height / rows, self.width / cols);
        let mut patches = Vec::with_capacity(rows * cols);
        for gy in 0..rows {
            for gx in 0..cols {
                let mut patch = Vec::with_capacity(ph * pw);
                for y in 0..ph {
                    let start = (gy * ph + y) * self.width + gx * pw;
                    patch.extend_from_slice(&self.pixels[start..start + pw]);
                }
                patches.push(patch);
            }
        }
        Ok(patches)
    }

    /// Non-overlapping `patch×patch` tiles as a `(h·w) × patch²` matrix.
    pub fn patch_matrix(&self, patch: usize) -> Result<(Tensor, usize, usize)> {
        if patch == 0 {
            return Err(Error::Input("patch size must be positive".into()));
        }
        let (rows, cols) = (self.height / patch, self.width / patch);
        let patches = self.patch_grid(rows, cols)?;
        let data = patches.into_iter().flatten().collect();
        Ok((Tensor::new(vec![rows * cols, patch * patch], data)?, rows, cols))
    }
}
