use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Smallest side accepted after resizing.
pub const MIN_RESIZED_SIDE: usize = 8;

/// Output side for a linear `scale`, rounded to nearest.
pub fn resized_dim(dim: usize, scale: f64) -> usize {
    (dim as f64 * scale).round() as usize
}

/// Bilinear downsampling by a linear factor `scale` in `(0, 1]`.
///
/// Pixel centres are aligned (half-pixel convention) and samples are clamped
/// at the border, so `scale == 1` reproduces the input exactly.
pub fn bilinear_resize<T: Scalar>(image: &Grid<T>, scale: f64) -> Result<Grid<T>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::arg(format!("resize scale {scale} outside (0, 1]")));
    }
    let (ih, iw) = (image.height(), image.width());
    let (oh, ow) = (resized_dim(ih, scale), resized_dim(iw, scale));
    if oh < MIN_RESIZED_SIDE || ow < MIN_RESIZED_SIDE {
        return Err(Error::arg(format!(
            "resizing {ih}x{iw} by {scale} gives {oh}x{ow}, below the {MIN_RESIZED_SIDE}px minimum"
        )));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(oh, ih);
    let xs = taps(ow, iw);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        let fy = T::of(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::of(fx);
            let top = image.get(y0, x0) * (T::one() - fx) + image.get(y0, x1) * fx;
            let bot = image.get(y1, x0) * (T::one() - fx) + image.get(y1, x1) * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    Grid::new(oh, ow, out)
}

/// Linear per-side scale corresponding to an area ratio.
pub fn area_to_linear(area_ratio: f64) -> f64 {
    area_ratio.sqrt()
}
