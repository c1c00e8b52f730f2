//! Images and their partition into fixed-size patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel tensor stored channel-major, then row-major: index `c·H·W + y·W + x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    /// Validates extents and clamps every pixel into `[0, 1]`.
    pub fn new(channels: usize, width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image extents must be positive, got {channels}×{width}×{height}"
            )));
        }
        if pixels.len() != channels * width * height {
            return Err(Error::shape(
                "image",
                &[channels, width, height],
                &[pixels.len()],
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(Self {
            channels,
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            pixels: vec![0.0; channels * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }
}

/// Number of patches after zero-padding to whole tiles.
pub fn patch_count(width: usize, height: usize, patch_w: usize, patch_h: usize) -> usize {
    width.div_ceil(patch_w) * height.div_ceil(patch_h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_w: usize,
    pub patch_h: usize,
    pub cols: usize,
    pub rows: usize,
    pub channels: usize,
    /// `n` flattened patches, each laid out as `[c][dy][dx]`.
    pub patches: Vec<f32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_w * self.patch_h
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.patches.iter().map(|&p| T::of(p as f64)).collect();
        Tensor::matrix(self.len(), self.patch_len(), data).expect("grid is non-empty")
    }

    /// Inverse of [`patchify`]: stitches the tiles back and drops padding.
    pub fn reassemble(&self, width: usize, height: usize) -> Result<ImageTensor> {
        if width.div_ceil(self.patch_w) != self.cols || height.div_ceil(self.patch_h) != self.rows {
            return Err(Error::invalid(format!(
                "{width}×{height} does not tile into {}×{} patches",
                self.cols, self.rows
            )));
        }
        let mut img = ImageTensor::zeros(self.channels, width, height);
        self.for_each_pixel(|i, off, x, y, c| {
            if x < width && y < height {
                img.pixels[(c * height + y) * width + x] = self.patches[i * self.patch_len() + off];
            }
        });
        Ok(img)
    }

    fn for_each_pixel(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for gy in 0..self.rows {
            for gx in 0..self.cols {
                let i = gy * self.cols + gx;
                let mut off = 0;
                for c in 0..self.channels {
                    for dy in 0..self.patch_h {
                        for dx in 0..self.patch_w {
                            f(i, off, gx * self.patch_w + dx, gy * self.patch_h + dy, c);
                            off += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Splits an image into `ceil(W/w)·ceil(H/h)` row-major patches, zero-padding
/// partial tiles on the right and bottom.
pub fn patchify(img: &ImageTensor, patch_w: usize, patch_h: usize) -> Result<PatchGrid> {
    if patch_w == 0 || patch_h == 0 {
        return Err(Error::invalid(format!(
            "patch dimensions must be positive, got {patch_w}×{patch_h}"
        )));
    }
    let mut grid = PatchGrid {
        patch_w,
        patch_h,
        cols: img.width.div_ceil(patch_w),
        rows: img.height.div_ceil(patch_h),
        channels: img.channels,
        patches: Vec::new(),
    };
    let mut patches = vec![0.0; grid.len() * grid.patch_len()];
    let l = grid.patch_len();
    grid.for_each_pixel(|i, off, x, y, c| {
        if x < img.width && y < img.height {
            patches[i * l + off] = img.get(c, x, y);
        }
    });
    grid.patches = patches;
    Ok(grid)
}
