//! Pixel grids and block fields, the two value containers everything else
//! operates on.
//!
//! `ImageGrid` stores channels as planes: `values[c*h*w + i*w + j]`.
//! `BlockField` stores blocks contiguously: block `i` is
//! `values[i*b .. (i+1)*b]`.

use crate::error::{RefitError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid { height, width, channels, values: vec![0.0; height * width * channels] }
    }

    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(RefitError::ShapeMismatch {
                context: "ImageGrid::from_values",
                expected: format!("{} values", height * width * channels),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RefitError::InvalidParams("image values must be finite".into()));
        }
        Ok(ImageGrid { height, width, channels, values })
    }

    /// Internal constructor without the finiteness scan; solver loops detect
    /// divergence themselves and report the iteration index.
    pub(crate) fn from_values_unchecked(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width * channels);
        ImageGrid { height, width, channels, values }
    }

    /// Pixels per channel.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Embed a gray image as channel 0 of a `channels`-plane grid (used to
    /// seed the composite variable of second-order models).
    pub fn embed_as_channel0(&self, channels: usize) -> ImageGrid {
        let mut out = ImageGrid::zeros(self.height, self.width, channels);
        out.channel_mut(0).copy_from_slice(self.channel(0));
        out
    }

    /// Extract one channel as a grayscale grid.
    pub fn extract_channel(&self, c: usize) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            values: self.channel(c).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockField {
    /// Number of blocks m.
    pub blocks: usize,
    /// Block size b.
    pub block_size: usize,
    pub values: Vec<f64>,
}

impl BlockField {
    pub fn zeros(blocks: usize, block_size: usize) -> Self {
        BlockField { blocks, block_size, values: vec![0.0; blocks * block_size] }
    }

    pub fn from_values(blocks: usize, block_size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != blocks * block_size {
            return Err(RefitError::ShapeMismatch {
                context: "BlockField::from_values",
                expected: format!("{} values", blocks * block_size),
                got: format!("{}", values.len()),
            });
        }
        Ok(BlockField { blocks, block_size, values })
    }

    pub fn block(&self, i: usize) -> &[f64] {
        let b = self.block_size;
        &self.values[i * b..(i + 1) * b]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let b = self.block_size;
        &mut self.values[i * b..(i + 1) * b]
    }

    pub fn block_norm(&self, i: usize) -> f64 {
        self.block(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of block l2 norms, i.e. the l12 norm.
    pub fn l12_norm(&self) -> f64 {
        (0..self.blocks).map(|i| self.block_norm(i)).sum()
    }

    pub fn same_shape(&self, other: &BlockField) -> bool {
        self.blocks == other.blocks && self.block_size == other.block_size
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &BlockField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_slice(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_values_checks_length() {
        assert!(ImageGrid::from_values(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::from_values(2, 2, 1, vec![0.0; 4]).is_ok());
        assert!(BlockField::from_values(3, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_values_rejects_non_finite() {
        assert!(ImageGrid::from_values(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn channel_planes_are_disjoint() {
        let mut x = ImageGrid::zeros(2, 2, 3);
        x.channel_mut(1).fill(5.0);
        assert!(x.channel(0).iter().all(|&v| v == 0.0));
        assert!(x.channel(1).iter().all(|&v| v == 5.0));
        assert!(x.channel(2).iter().all(|&v| v == 0.0));
        let g = x.extract_channel(1);
        assert_eq!(g.channels, 1);
        assert!(g.values.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn l12_norm_sums_block_norms() {
        let z = BlockField::from_values(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(z.l12_norm(), 6.0);
        assert_eq!(z.block_norm(0), 5.0);
    }
}
