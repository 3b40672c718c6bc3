//! Grouped, dilated 2-D convolution at stride 1 with "same" zero padding.
//!
//! Lowered to im2col + GEMM per (batch item, group). Summation order is fixed
//! so results are bit-reproducible for a given input.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{Shape, Tensor};

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side, must be odd.
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn dilation(mut self, rate: usize) -> Self {
        self.dilation = rate;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("convolution with zero channels"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel size {} must be odd for same padding",
                self.kernel
            )));
        }
        if self.dilation == 0 || self.groups == 0 {
            return Err(Error::shape("dilation and groups must be at least 1"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::shape(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Zero padding on each side keeping the spatial size.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Side of the region of input pixels one output pixel depends on.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
        )
    }

    /// Learnable scalars including the bias.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.out_channels
    }

    fn col_rows(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }

    pub(crate) fn check_operands<T: Scalar>(
        &self,
        x: Shape,
        weights: Shape,
        bias: Option<usize>,
    ) -> Result<()> {
        self.validate()?;
        if x.c != self.in_channels {
            return Err(Error::shape(format!(
                "input {x} has {} channels, convolution expects {}",
                x.c, self.in_channels
            )));
        }
        if weights != self.weight_shape() {
            return Err(Error::shape(format!(
                "weights {weights} do not match expected {}",
                self.weight_shape()
            )));
        }
        if let Some(len) = bias {
            if len != self.out_channels {
                return Err(Error::shape(format!(
                    "bias of length {len} for {} output channels",
                    self.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Unfold one group of one batch item into a `(cin_g*k*k) x (h*w)` matrix.
fn im2col<T: Scalar>(spec: &ConvSpec, src: &[T], h: usize, w: usize, cols: &mut [T]) {
    let k = spec.kernel;
    let r = spec.dilation as isize;
    let pad = spec.padding() as isize;
    let plane = h * w;
    for ci in 0..spec.in_per_group() {
        let chan = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize * r - pad;
            for kx in 0..k {
                let dx = kx as isize * r - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &chan[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].iter_mut().for_each(|v| *v = T::zero());
                    out[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into image space.
fn col2im_add<T: Scalar>(spec: &ConvSpec, cols: &[T], h: usize, w: usize, dst: &mut [T]) {
    let k = spec.kernel;
    let r = spec.dilation as isize;
    let pad = spec.padding() as isize;
    let plane = h * w;
    for ci in 0..spec.in_per_group() {
        let chan = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize * r - pad;
            for kx in 0..k {
                let dx = kx as isize * r - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let drow = &mut chan[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Forward convolution. `bias` may be omitted.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    spec.check_operands::<T>(xs, weights.shape(), bias.map(<[T]>::len))?;
    let (h, w) = (xs.h, xs.w);
    let plane = h * w;
    let out_shape = xs.with_channels(spec.out_channels);
    let mut out = vec![T::zero(); out_shape.numel()];
    let (cin_g, cout_g, rows) = (spec.in_per_group(), spec.out_per_group(), spec.col_rows());
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for b in 0..xs.n {
        let xb = x.item(b);
        let ob = &mut out[b * spec.out_channels * plane..(b + 1) * spec.out_channels * plane];
        for g in 0..spec.groups {
            let src = &xb[g * cin_g * plane..(g + 1) * cin_g * plane];
            let wg = &weights.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
            let og = &mut ob[g * cout_g * plane..(g + 1) * cout_g * plane];
            let colm: &[T] = if spec.is_pointwise() {
                src
            } else {
                im2col(spec, src, h, w, &mut cols);
                &cols
            };
            gemm(cout_g, rows, plane, MatRef::plain(wg), MatRef::plain(colm), og, false);
        }
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                ob[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += *bv);
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
///
/// Each requested buffer is accumulated into (not overwritten), so callers
/// pass zeroed or partially accumulated slices.
pub(crate) struct ConvGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dw: Option<&'a mut [T]>,
    pub db: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    dout: &[T],
    spec: &ConvSpec,
    mut grads: ConvGrads<'_, T>,
) {
    let xs = x.shape();
    let (h, w) = (xs.h, xs.w);
    let plane = h * w;
    let (cin_g, cout_g, rows) = (spec.in_per_group(), spec.out_per_group(), spec.col_rows());
    let pointwise = spec.is_pointwise();
    let mut cols = if pointwise || grads.dw.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let mut dcols = if pointwise || grads.dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let item_in = spec.in_channels * plane;
    let item_out = spec.out_channels * plane;
    for b in 0..xs.n {
        let xb = x.item(b);
        let db_out = &dout[b * item_out..(b + 1) * item_out];
        if let Some(db) = grads.db.as_deref_mut() {
            for (co, g) in db.iter_mut().enumerate() {
                *g += db_out[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        for g in 0..spec.groups {
            let src = &xb[g * cin_g * plane..(g + 1) * cin_g * plane];
            let wg = &weights.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
            let dog = &db_out[g * cout_g * plane..(g + 1) * cout_g * plane];
            if let Some(dw) = grads.dw.as_deref_mut() {
                let colm: &[T] = if pointwise {
                    src
                } else {
                    im2col(spec, src, h, w, &mut cols);
                    &cols
                };
                let dwg = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
                gemm(cout_g, plane, rows, MatRef::plain(dog), MatRef::t(colm), dwg, true);
            }
            if let Some(dx) = grads.dx.as_deref_mut() {
                let dxg = &mut dx[b * item_in + g * cin_g * plane..b * item_in + (g + 1) * cin_g * plane];
                if pointwise {
                    gemm(rows, cout_g, plane, MatRef::t(wg), MatRef::plain(dog), dxg, true);
                } else {
                    gemm(rows, cout_g, plane, MatRef::t(wg), MatRef::plain(dog), &mut dcols, false);
                    col2im_add(spec, &dcols, h, w, dxg);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct 7-loop convolution used as the reference.
    fn direct(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], spec: &ConvSpec) -> Tensor<f64> {
        let s = x.shape();
        let (k, r, pad) = (spec.kernel, spec.dilation as isize, spec.padding() as isize);
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let mut out = Tensor::zeros(s.with_channels(spec.out_channels));
        for b in 0..s.n {
            for co in 0..spec.out_channels {
                let g = co / cout_g;
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let mut acc = bias[co];
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize * r - pad;
                                    let sx = xx as isize + kx as isize * r - pad;
                                    if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                        continue;
                                    }
                                    acc += wt.at(co, ci, ky, kx)
                                        * x.at(b, g * cin_g + ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        let i = out.index(b, co, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        for (k, r, g) in [(3, 1, 1), (3, 2, 2), (3, 3, 4), (1, 1, 2), (5, 1, 1)] {
            let spec = ConvSpec::new(4, 8, k).dilation(r).groups(g);
            let x = pseudo([2, 4, 7, 9], 1);
            let wt = pseudo(spec.weight_shape(), 2);
            let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
            let got = conv2d(&x, &wt, Some(&bias), &spec).unwrap();
            let want = direct(&x, &wt, &bias, &spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} r={r} g={g}");
        }
    }

    #[test]
    fn rejects_group_mismatch() {
        let spec = ConvSpec::new(6, 4, 3).groups(4);
        assert!(spec.validate().is_err());
        let spec = ConvSpec::new(4, 4, 3);
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let wt = Tensor::zeros(spec.weight_shape());
        assert!(matches!(conv2d(&x, &wt, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn receptive_field_formula() {
        for r in 1..=5 {
            assert_eq!(ConvSpec::new(1, 1, 3).dilation(r).receptive_field(), 2 * r + 1);
        }
    }
}
