//! Dense multi-band raster stored row-major as `(y, x, band)`.

use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Raster {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn from_vec(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * bands {
            return Err(FlimError::DimMismatch(format!(
                "{} values for a {height}x{width}x{bands} raster",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * bands);
        for y in 0..height {
            for x in 0..width {
                for b in 0..bands {
                    data.push(f(y, x, b));
                }
            }
        }
        Raster {
            height,
            width,
            bands,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bands(&self) -> usize {
        self.bands
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, b: usize) -> usize {
        (y * self.width + x) * self.bands + b
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, b: usize) -> f32 {
        self.data[self.offset(y, x, b)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, b: usize, v: f32) {
        let o = self.offset(y, x, b);
        self.data[o] = v;
    }

    /// All bands of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = self.offset(y, x, 0);
        &self.data[o..o + self.bands]
    }

    /// Value at signed coordinates, zero outside the raster.
    #[inline]
    pub fn get_padded(&self, y: isize, x: isize, b: usize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.get(y as usize, x as usize, b)
        }
    }

    /// Values of one band as a `height * width` plane.
    pub fn band_plane(&self, b: usize) -> Vec<f32> {
        self.data.iter().skip(b).step_by(self.bands).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
