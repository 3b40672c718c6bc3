use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn pooled_shape(s: Shape, factor: usize) -> Result<Shape> {
    if factor == 0 {
        return Err(Error::arg("pooling factor must be at least 1"));
    }
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::shape(format!(
            "spatial size {}x{} not divisible by pooling factor {factor}",
            s.h, s.w
        )));
    }
    Ok(Shape::new(s.n, s.c, s.h / factor, s.w / factor))
}

/// Sum (not mean) over non-overlapping `factor x factor` blocks; total mass is conserved.
pub fn sum_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let os = pooled_shape(s, factor)?;
    let mut out = vec![T::zero(); os.numel()];
    for (plane, dst) in x.data().chunks(s.plane()).zip(out.chunks_mut(os.plane())) {
        for y in 0..s.h {
            let orow = &mut dst[(y / factor) * os.w..(y / factor + 1) * os.w];
            for (xx, v) in plane[y * s.w..(y + 1) * s.w].iter().enumerate() {
                orow[xx / factor] += *v;
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn sum_pool_backward<T: Scalar>(in_shape: Shape, factor: usize, dout: &[T], dx: &mut [T]) {
    let ow = in_shape.w / factor;
    let oplane = (in_shape.h / factor) * ow;
    for (dplane, src) in dx.chunks_mut(in_shape.plane()).zip(dout.chunks(oplane)) {
        for y in 0..in_shape.h {
            let orow = &src[(y / factor) * ow..(y / factor + 1) * ow];
            for (xx, d) in dplane[y * in_shape.w..(y + 1) * in_shape.w].iter_mut().enumerate() {
                *d += orow[xx / factor];
            }
        }
    }
}

/// Mass-preserving block sum of a single raster.
pub fn sum_pool_grid<T: Scalar>(g: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    let t = sum_pool(&g.to_tensor::<T>(), factor)?;
    let s = t.shape();
    Grid::new(s.h, s.w, t.into_data())
}

/// `factor x factor` max pooling; also returns the flat argmax index per output cell.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let os = pooled_shape(s, factor)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let data = x.data();
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + oy * factor * s.w + ox * factor;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = base + (oy * factor + dy) * s.w + ox * factor + dx;
                        // strict comparison keeps the first maximum on ties
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(os, out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_pool_of_ones() {
        let x = Tensor::<f64>::full([1, 1, 4, 4], 1.0);
        let y = sum_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|v| *v == 4.0));
        assert_eq!(y.sum(), 16.0);
    }

    #[test]
    fn sum_pool_factor_one_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 7], |i| i as f64 * 0.37 - 3.0);
        assert_eq!(sum_pool(&x, 1).unwrap(), x);
    }

    #[test]
    fn sum_pool_rejects_indivisible() {
        let x = Tensor::<f64>::zeros([1, 1, 6, 6]);
        assert!(sum_pool(&x, 4).is_err());
        assert!(sum_pool(&x, 0).is_err());
    }

    #[test]
    fn sum_pool_random_map_conserves_mass() {
        // Reference total by straightforward summation of all 64 cells.
        let x = Tensor::<f64>::from_fn([1, 1, 8, 8], |i| ((i * 7919) % 113) as f64 / 17.0);
        let mut direct = 0.0;
        for v in x.data() {
            direct += v;
        }
        let y = sum_pool(&x, 4).unwrap();
        assert!((y.sum() - direct).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_block_max() {
        let x = Tensor::<f64>::new([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, -1.0]).unwrap();
        let (y, arg) = max_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }
}
