//! Single-channel 2-D rasters: images, density maps and their resamplings.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `height x width` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T = f64> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Grid {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Copy of the `size_h x size_w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if top + size_h > self.height || left + size_w > self.width {
            return Err(Error::arg(format!(
                "crop {size_h}x{size_w} at ({top}, {left}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w);
        for y in top..top + size_h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + size_w]);
        }
        Ok(Grid {
            height: size_h,
            width: size_w,
            data,
        })
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Zero-pad on the bottom and right up to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        let mut out = Grid::zeros(height, width);
        for y in 0..self.height {
            out.data[y * width..y * width + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    pub fn to_tensor<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
        .expect("grid dimensions match tensor shape")
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Stack equally sized grids into an `(n, 1, h, w)` tensor.
pub fn stack<T: Scalar, U: Scalar>(grids: &[Grid<U>]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::arg("cannot stack an empty list of grids"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.height != h || g.width != w {
            return Err(Error::shape(format!(
                "grid {}x{} does not match {h}x{w}",
                g.height, g.width
            )));
        }
        data.extend(g.data.iter().map(|v| T::of(v.as_f64())));
    }
    Tensor::new([grids.len(), 1, h, w], data)
}
