//! Procedural crowd scenes and random patch batches for training.
//!
//! Heads are bright discs on a noisy dark background. Disc radius grows
//! linearly from the top row to the bottom row, imitating the scale change a
//! camera looking down a crowd produces.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::{stack, Grid};
use crate::groundtruth::{Annotation, DensityMap};
use crate::rng::{indexed_stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.15;
const HEAD_INTENSITY: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityProfile {
    Uniform,
    /// More people near the top (far from the camera).
    TopHeavy,
    /// A few Gaussian clusters.
    Clustered,
}

impl std::str::FromStr for DensityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DensityProfile::Uniform),
            "top-heavy" => Ok(DensityProfile::TopHeavy),
            "clustered" => Ok(DensityProfile::Clustered),
            _ => Err(Error::arg(format!(
                "unknown density profile `{s}` (uniform, top-heavy, clustered)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of people per image.
    pub count_range: (usize, usize),
    /// Head radius in pixels at the top and bottom rows.
    pub radius: (f64, f64),
    pub profile: DensityProfile,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 96,
            height: 96,
            count_range: (5, 60),
            radius: (1.5, 3.5),
            profile: DensityProfile::Uniform,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("scene must have a positive size"));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::arg(format!(
                "count range {:?} has min above max",
                self.count_range
            )));
        }
        let (top, bottom) = self.radius;
        let limit = self.width.min(self.height) as f64 / 2.0;
        if !(top >= 0.0 && bottom >= 0.0) || top > limit || bottom > limit {
            return Err(Error::arg(format!(
                "head radii {:?} do not fit a {}x{} image",
                self.radius, self.width, self.height
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::arg("noise level must be non-negative"));
        }
        Ok(())
    }

    /// Disc radius at row `y`.
    pub fn radius_at(&self, y: f64) -> f64 {
        let t = if self.height > 1 {
            (y / (self.height - 1) as f64).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.radius.0 + (self.radius.1 - self.radius.0) * t
    }
}

fn sample_points<R: Rng + ?Sized>(p: &SceneParams, count: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let (w, h) = (p.width as f64, p.height as f64);
    let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x < w && y < h;
    match p.profile {
        DensityProfile::Uniform => (0..count)
            .map(|_| [rng.random::<f64>() * w, rng.random::<f64>() * h])
            .collect(),
        DensityProfile::TopHeavy => (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                [rng.random::<f64>() * w, u * u * h]
            })
            .collect(),
        DensityProfile::Clustered => {
            let clusters = rng.random_range(1..=3);
            let centres: Vec<(f64, f64)> = (0..clusters)
                .map(|_| (rng.random::<f64>() * w, rng.random::<f64>() * h))
                .collect();
            let spread = Normal::new(0.0, w.min(h) / 8.0).expect("positive spread");
            let mut pts = Vec::with_capacity(count);
            while pts.len() < count {
                let (cx, cy) = centres[rng.random_range(0..clusters)];
                let (x, y) = (cx + spread.sample(rng), cy + spread.sample(rng));
                if inside(x, y) {
                    pts.push([x, y]);
                }
            }
            pts
        }
    }
}

/// Render one scene and its exact head annotation. Pixel values are
/// quantised to 8 bits so the image survives a PGM round trip unchanged.
pub fn synth_scene<R: Rng + ?Sized>(params: &SceneParams, rng: &mut R) -> Result<(Grid<f64>, Annotation)> {
    params.validate()?;
    let count = rng.random_range(params.count_range.0..=params.count_range.1);
    let points = sample_points(params, count, rng);
    let (w, h) = (params.width, params.height);
    let mut img = Grid::filled(h, w, BACKGROUND);
    for [px, py] in &points {
        let r = params.radius_at(*py);
        let y0 = (py - r).floor().max(0.0) as usize;
        let y1 = ((py + r).ceil() as usize).min(h - 1);
        let x0 = (px - r).floor().max(0.0) as usize;
        let x1 = ((px + r).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                if dx * dx + dy * dy <= r * r {
                    img.set(y, x, img.get(y, x) + HEAD_INTENSITY);
                }
            }
        }
    }
    if params.noise > 0.0 {
        let noise = Normal::new(0.0, params.noise).map_err(|e| Error::arg(e.to_string()))?;
        for v in img.data_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok((img, Annotation::new(w, h, points)?))
}

/// Fractions of a generated corpus assigned to each split (the rest is test).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
        }
    }
}

/// Generate `count` scenes, each from its own stream of `params.seed`, split
/// by index order.
pub fn synth_corpus(id: &str, params: &SceneParams, count: usize, fractions: SplitFractions) -> Result<Corpus> {
    let n_train = (count as f64 * fractions.train).round() as usize;
    let n_val = (count as f64 * fractions.val).round() as usize;
    let samples = (0..count)
        .map(|i| {
            let mut rng = indexed_stream(params.seed, Stream::Scene, i as u64);
            let (image, ann) = synth_scene(params, &mut rng)?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(Sample {
                id: format!("{id}_{i:04}"),
                image,
                annotation: Some(ann),
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        id: id.to_string(),
        samples,
        warnings: Vec::new(),
    })
}

/// A training image with its full-resolution density map.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub image: Grid<f64>,
    pub density: DensityMap,
}

/// `N` square crops with matching density patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T> {
    /// `(N, 1, p, p)`
    pub images: Tensor<T>,
    pub gts: Vec<DensityMap>,
    pub sources: Vec<usize>,
    /// `(top, left)` of every crop.
    pub offsets: Vec<(usize, usize)>,
    pub flipped: Vec<bool>,
}

/// Sample `n` patches of side `patch` with replacement. Images smaller than
/// the patch are never picked. When `flip` is on each patch is mirrored with
/// probability 0.5, together with its density patch.
pub fn sample_patch_batch<T: Scalar, R: Rng + ?Sized>(
    corpus: &[TrainImage],
    n: usize,
    patch: usize,
    rng: &mut R,
    flip: bool,
) -> Result<PatchBatch<T>> {
    if n == 0 || patch == 0 {
        return Err(Error::arg("batch size and patch size must be positive"));
    }
    let eligible: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, t)| t.image.height() >= patch && t.image.width() >= patch)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::arg(format!("no training image is at least {patch}x{patch}")));
    }
    let mut crops = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut flipped = Vec::with_capacity(n);
    for _ in 0..n {
        let src = eligible[rng.random_range(0..eligible.len())];
        let t = &corpus[src];
        let top = rng.random_range(0..=t.image.height() - patch);
        let left = rng.random_range(0..=t.image.width() - patch);
        let mirror = flip && rng.random_bool(0.5);
        let mut img = t.image.crop(top, left, patch, patch)?;
        let mut gt = t.density.grid.crop(top, left, patch, patch)?;
        if mirror {
            img = img.flip_horizontal();
            gt = gt.flip_horizontal();
        }
        crops.push(img);
        gts.push(DensityMap { grid: gt });
        sources.push(src);
        offsets.push((top, left));
        flipped.push(mirror);
    }
    Ok(PatchBatch {
        images: stack(&crops)?,
        gts,
        sources,
        offsets,
        flipped,
    })
}
