//! Point annotations to density maps.
//!
//! Each head point contributes a Gaussian evaluated at pixel centres inside a
//! `(2⌈3σ⌉ + 1)^2` window around the pixel that contains it. The window is
//! clipped to the image and renormalised to unit mass, so a map always sums to
//! its point count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops::sum_pool_grid;

/// Fixed-kernel width used when an adaptive kernel has too few neighbours.
pub const DEFAULT_FALLBACK_SIGMA: f64 = 15.0;
/// Bounds applied to geometry-adaptive kernel widths, in pixels.
pub const ADAPTIVE_SIGMA_MIN: f64 = 0.5;
pub const ADAPTIVE_SIGMA_MAX: f64 = 50.0;

/// Head positions for one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn new(width: usize, height: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        let ann = Annotation {
            width,
            height,
            points,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, [x, y]) in self.points.iter().enumerate() {
            let inside = *x >= 0.0 && *y >= 0.0 && *x < self.width as f64 && *y < self.height as f64;
            if !inside {
                return Err(Error::arg(format!(
                    "point {i} at ({x}, {y}) outside {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Coordinates multiplied by `(sx, sy)` for an image resized to `width x height`.
    pub fn rescaled(&self, width: usize, height: usize) -> Annotation {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Annotation {
            width,
            height,
            points: self
                .points
                .iter()
                .map(|[x, y]| [(x * sx).min(width as f64 - 1e-9), (y * sy).min(height as f64 - 1e-9)])
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ann: Annotation = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("annotation serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Non-negative persons-per-pixel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: Grid<f64>,
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            grid: Grid::zeros(height, width),
        }
    }

    pub fn count(&self) -> f64 {
        self.grid.sum()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    /// Align to a network's output stride by block summation.
    pub fn sum_pool(&self, factor: usize) -> Result<DensityMap> {
        Ok(DensityMap {
            grid: sum_pool_grid(&self.grid, factor)?,
        })
    }

    /// `DMAP` + u32 height + u32 width (little-endian) + row-major f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.grid.data().len());
        out.extend_from_slice(DMAP_MAGIC);
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for v in self.grid.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DMAP_MAGIC {
            return Err(Error::format("density map", "missing DMAP header"));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * h * w {
            return Err(Error::format(
                "density map",
                format!("{} payload bytes for a {h}x{w} map", body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(DensityMap {
            grid: Grid::new(h, w, data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_dims(ann: &Annotation) -> Result<()> {
    if ann.width == 0 || ann.height == 0 {
        return Err(Error::arg("annotation has an empty image size"));
    }
    ann.validate()
}

// Normalised 1-D Gaussian taps over the clipped window around pixel `centre`.
fn taps(pos: f64, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as isize;
    let centre = pos.floor() as isize;
    let lo = (centre - radius).max(0) as usize;
    let hi = ((centre + radius) as usize).min(len - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut w: Vec<f64> = (lo..=hi)
        .map(|i| {
            let d = i as f64 + 0.5 - pos;
            (-d * d * inv).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (lo, w)
}

fn splat(grid: &mut Grid<f64>, [x, y]: [f64; 2], sigma: f64) {
    // the 2-D kernel is separable, so normalising each axis normalises the product
    let (x0, wx) = taps(x, sigma, grid.width());
    let (y0, wy) = taps(y, sigma, grid.height());
    let width = grid.width();
    let data = grid.data_mut();
    for (dy, gy) in wy.iter().enumerate() {
        let row = &mut data[(y0 + dy) * width + x0..(y0 + dy) * width + x0 + wx.len()];
        for (v, gx) in row.iter_mut().zip(&wx) {
            *v += gy * gx;
        }
    }
}

/// Fixed-width Gaussian kernels.
pub fn density_fixed(ann: &Annotation, sigma: f64) -> Result<DensityMap> {
    check_dims(ann)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("sigma {sigma} must be positive")));
    }
    let mut grid = Grid::zeros(ann.height, ann.width);
    for p in &ann.points {
        splat(&mut grid, *p, sigma);
    }
    Ok(DensityMap { grid })
}

/// Mean Euclidean distance from each point to its `k` nearest other points.
pub fn knn_mean_distance(points: &[[f64; 2]], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if points.len() <= k {
        return Err(Error::arg(format!(
            "{} points are too few for {k} nearest neighbours",
            points.len()
        )));
    }
    let mut dists = Vec::with_capacity(points.len() - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, [xi, yi])| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, [xj, yj])| (xi - xj).hypot(yi - yj)),
            );
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mut nearest = dists[..k].to_vec();
            nearest.sort_by(f64::total_cmp);
            nearest.iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// Unclamped per-point kernel widths `beta * mean kNN distance`.
pub fn adaptive_sigmas(points: &[[f64; 2]], beta: f64, k: usize) -> Result<Vec<f64>> {
    Ok(knn_mean_distance(points, k)?.into_iter().map(|d| beta * d).collect())
}

/// Geometry-adaptive kernels with the default fallback width.
pub fn density_adaptive(ann: &Annotation, beta: f64, k: usize) -> Result<DensityMap> {
    density_adaptive_with_fallback(ann, beta, k, DEFAULT_FALLBACK_SIGMA)
}

/// Geometry-adaptive kernels; images with `k` or fewer points use fixed
/// kernels of width `fallback_sigma`.
pub fn density_adaptive_with_fallback(
    ann: &Annotation,
    beta: f64,
    k: usize,
    fallback_sigma: f64,
) -> Result<DensityMap> {
    check_dims(ann)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta {beta} must be positive")));
    }
    if ann.points.len() <= k {
        return density_fixed(ann, fallback_sigma);
    }
    let sigmas = adaptive_sigmas(&ann.points, beta, k)?;
    let mut grid = Grid::zeros(ann.height, ann.width);
    for (p, s) in ann.points.iter().zip(sigmas) {
        splat(&mut grid, *p, s.clamp(ADAPTIVE_SIGMA_MIN, ADAPTIVE_SIGMA_MAX));
    }
    Ok(DensityMap { grid })
}

/// Ground-truth generator selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GtMode {
    Fixed { sigma: f64 },
    Adaptive { beta: f64, k: usize, fallback_sigma: f64 },
}

impl Default for GtMode {
    fn default() -> Self {
        GtMode::Adaptive {
            beta: 0.3,
            k: 3,
            fallback_sigma: DEFAULT_FALLBACK_SIGMA,
        }
    }
}

impl GtMode {
    pub fn generate(&self, ann: &Annotation) -> Result<DensityMap> {
        match *self {
            GtMode::Fixed { sigma } => density_fixed(ann, sigma),
            GtMode::Adaptive {
                beta,
                k,
                fallback_sigma,
            } => density_adaptive_with_fallback(ann, beta, k, fallback_sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_centred_point_has_unit_mass() {
        let ann = Annotation::new(64, 64, vec![[32.0, 32.0]]).unwrap();
        let m = density_fixed(&ann, 2.0).unwrap();
        assert!((m.count() - 1.0).abs() < 1e-12);
        // peak at the containing pixel
        let peak = m.grid.get(32, 32);
        assert!(m.grid.data().iter().all(|v| *v <= peak));
    }

    #[test]
    fn no_points_gives_zero_map() {
        let ann = Annotation::new(10, 7, vec![]).unwrap();
        let m = density_fixed(&ann, 3.0).unwrap();
        assert_eq!((m.height(), m.width()), (7, 10));
        assert!(m.grid.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn corner_point_mass_is_renormalised() {
        let ann = Annotation::new(20, 20, vec![[0.1, 19.9]]).unwrap();
        let m = density_fixed(&ann, 15.0).unwrap();
        assert!((m.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(Annotation::new(10, 10, vec![[10.0, 1.0]]).is_err());
        let empty = Annotation {
            width: 0,
            height: 5,
            points: vec![],
        };
        assert!(density_fixed(&empty, 1.0).is_err());
        let ann = Annotation::new(10, 10, vec![]).unwrap();
        assert!(density_fixed(&ann, 0.0).is_err());
    }

    #[test]
    fn knn_unit_square() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let d = knn_mean_distance(&pts, 3).unwrap();
        let want = (2.0 + 2f64.sqrt()) / 3.0;
        for v in d {
            assert!((v - want).abs() < 1e-12);
            assert!((v - 1.1381).abs() < 1e-4);
        }
    }

    #[test]
    fn knn_pairs_and_lines() {
        let d = knn_mean_distance(&[[0.0, 0.0], [3.0, 4.0]], 1).unwrap();
        assert_eq!(d, vec![5.0, 5.0]);
        let d = knn_mean_distance(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 2).unwrap();
        assert_eq!(d, vec![1.5, 1.0, 1.5]);
        assert!(knn_mean_distance(&[[0.0, 0.0], [1.0, 0.0]], 2).is_err());
    }

    #[test]
    fn adaptive_square_sigma() {
        let pts = vec![[10.0, 10.0], [50.0, 10.0], [10.0, 50.0], [50.0, 50.0]];
        let s = adaptive_sigmas(&pts, 0.3, 3).unwrap();
        let want = 0.3 * (40.0 + 40.0 + 40.0 * 2f64.sqrt()) / 3.0;
        assert!((want - 13.657).abs() < 1e-3);
        for v in s {
            assert!((v - want).abs() < 1e-9);
        }
        let ann = Annotation::new(64, 64, pts).unwrap();
        assert!((density_adaptive(&ann, 0.3, 3).unwrap().count() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_falls_back_for_single_point() {
        let ann = Annotation::new(64, 64, vec![[5.0, 60.0]]).unwrap();
        let a = density_adaptive(&ann, 0.3, 3).unwrap();
        let f = density_fixed(&ann, DEFAULT_FALLBACK_SIGMA).unwrap();
        assert_eq!(a, f);
        assert!((a.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dmap_bytes_round_trip_and_reject_garbage() {
        let ann = Annotation::new(9, 5, vec![[4.0, 2.0]]).unwrap();
        let m = density_fixed(&ann, 1.0).unwrap();
        let back = DensityMap::from_bytes(&m.to_bytes()).unwrap();
        for (a, b) in m.grid.data().iter().zip(back.grid.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(DensityMap::from_bytes(b"DMAX\0\0\0\0\0\0\0\0").is_err());
        let mut short = m.to_bytes();
        short.pop();
        assert!(DensityMap::from_bytes(&short).is_err());
    }
}
