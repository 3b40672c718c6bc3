//! Neural network primitives as plain (non-recording) functions.
//!
//! The differentiable versions live on [`crate::autodiff::Tape`] and reuse the
//! kernels defined here.

mod conv;
mod pool;
mod resize;

pub use conv::{conv2d, ConvSpec};
pub(crate) use conv::{conv2d_backward, ConvGrads};
pub(crate) use pool::sum_pool_backward;
pub use pool::{max_pool, sum_pool, sum_pool_grid};
pub use resize::{area_to_linear, bilinear_resize, resized_dim, MIN_RESIZED_SIDE};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Concatenate along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("cannot concat {s} with {first}")));
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::new(out_shape, data)
}

/// Channels `[start, start + len)` of every batch item.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(format!(
            "channel slice [{start}, {}) out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for b in 0..s.n {
        data.extend_from_slice(&x.item(b)[start * plane..(start + len) * plane]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("mixing coefficient {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b`.
pub fn convex_mix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "convex mix of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let (wa, wb) = (T::of(alpha), T::of(1.0 - alpha));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| wa * *x + wb * *y)
        .collect();
    Tensor::new(a.shape(), data)
}

/// `max(x, 0)` elementwise; NaN passes through so divergence stays visible.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(
        x.shape(),
        x.data().iter().map(|v| if *v < T::zero() { T::zero() } else { *v }).collect(),
    )
    .expect("same shape")
}
