//! Counting metrics, whole-image inference and the resolution sweep.
//!
//! `mse` follows the crowd-counting convention of reporting the *root* mean
//! squared count error; the column keeps the conventional name.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::network::Model;
use crate::ops::{area_to_linear, bilinear_resize};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Area ratios of the default resolution sweep, 100% down to 16%.
pub const DEFAULT_AREA_RATIOS: [f64; 7] = [1.00, 0.81, 0.64, 0.49, 0.36, 0.25, 0.16];

/// Anything that maps a `(1, 1, h, w)` image to a density map at `1/stride` resolution.
pub trait DensityEstimator<T: Scalar> {
    fn stride(&self) -> usize;
    fn density(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> DensityEstimator<T> for Model<T> {
    fn stride(&self) -> usize {
        Model::stride(self)
    }

    fn density(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict(image)
    }
}

/// Predicted count: integral of the evaluation-phase density map of the
/// image zero-padded (bottom/right) to a multiple of the stride.
pub fn predict_count<T: Scalar, E: DensityEstimator<T> + ?Sized>(model: &E, image: &Grid<f64>) -> Result<f64> {
    let s = model.stride();
    let round_up = |v: usize| v.div_ceil(s) * s;
    let (h, w) = (round_up(image.height()), round_up(image.width()));
    let input = if (h, w) == (image.height(), image.width()) {
        image.to_tensor::<T>()
    } else {
        image.pad_to(h, w).to_tensor::<T>()
    };
    let density = model.density(&input)?;
    Ok(density.data().iter().map(|v| v.as_f64()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub true_count: f64,
    pub pred_count: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    pub area_ratio: Option<f64>,
    pub corpus_id: Option<String>,
    pub checkpoint_id: Option<String>,
    pub warnings: Vec<String>,
}

/// `(MAE, RMSE)` of predicted vs. true counts.
pub fn count_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::arg(format!(
            "metrics need equal non-empty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

impl EvalReport {
    fn from_records(mut records: Vec<EvalRecord>, warnings: Vec<String>) -> Result<Self> {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let pred: Vec<f64> = records.iter().map(|r| r.pred_count).collect();
        let truth: Vec<f64> = records.iter().map(|r| r.true_count).collect();
        let (mae, mse) = count_metrics(&pred, &truth)?;
        Ok(EvalReport {
            records,
            mae,
            mse,
            warnings,
            ..EvalReport::default()
        })
    }

    /// `image_id,true_count,pred_count` rows followed by `# MAE=` / `# MSE=` footer lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,true_count,pred_count\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.image_id, r.true_count, r.pred_count);
        }
        let _ = writeln!(s, "# MAE={}", self.mae);
        let _ = writeln!(s, "# MSE={}", self.mse);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluate whole images. Ground truth is the annotated point count; samples
/// without an annotation are skipped with a warning.
pub fn evaluate<T: Scalar, E: DensityEstimator<T> + ?Sized>(model: &E, samples: &[&Sample]) -> Result<EvalReport> {
    evaluate_resized(model, samples, 1.0)
}

fn evaluate_resized<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    model: &E,
    samples: &[&Sample],
    linear_scale: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut warnings = Vec::new();
    for s in samples {
        let Some(ann) = &s.annotation else {
            warnings.push(format!("{}: no annotation, skipped", s.id));
            continue;
        };
        let pred = if linear_scale == 1.0 {
            predict_count(model, &s.image)?
        } else {
            predict_count(model, &bilinear_resize(&s.image, linear_scale)?)?
        };
        records.push(EvalRecord {
            image_id: s.id.clone(),
            true_count: ann.count() as f64,
            pred_count: pred,
        });
    }
    if records.is_empty() {
        return Err(Error::arg("no annotated image in the evaluation split"));
    }
    EvalReport::from_records(records, warnings)
}

/// Outcome of [`scale_sweep`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    /// One report per evaluated ratio, in descending ratio order.
    pub reports: Vec<EvalReport>,
    /// Ratios that could not be evaluated, with the reason.
    pub skipped: Vec<(f64, String)>,
}

impl SweepResult {
    /// `area_ratio,mae,mse` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("area_ratio,mae,mse\n");
        for r in &self.reports {
            let _ = writeln!(s, "{},{},{}", r.area_ratio.unwrap_or(1.0), r.mae, r.mse);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Re-evaluate after bilinear downsampling by `sqrt(ratio)` per side.
pub fn scale_sweep<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    model: &E,
    samples: &[&Sample],
    area_ratios: &[f64],
) -> Result<SweepResult> {
    if let Some(r) = area_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::arg(format!("area ratio {r} outside (0, 1]")));
    }
    let mut ratios = area_ratios.to_vec();
    ratios.sort_by(|a, b| b.total_cmp(a));
    ratios.dedup();
    let mut out = SweepResult::default();
    for ratio in ratios {
        match evaluate_resized(model, samples, area_to_linear(ratio)) {
            Ok(mut report) => {
                report.area_ratio = Some(ratio);
                out.reports.push(report);
            }
            Err(e @ Error::Argument(_)) => out.skipped.push((ratio, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Order-sensitive digest of every parameter value.
pub fn param_fingerprint<T: Scalar>(model: &Model<T>) -> u64 {
    // FNV-1a over the f64 bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in model.named_params() {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        for v in t.data() {
            h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Evaluate a model on another corpus without touching its parameters.
pub fn cross_eval<T: Scalar>(model: &Model<T>, samples: &[&Sample], corpus_id: &str) -> Result<EvalReport> {
    let before = param_fingerprint(model);
    let mut report = evaluate(model, samples)?;
    assert_eq!(before, param_fingerprint(model), "cross evaluation modified the model");
    report.corpus_id = Some(corpus_id.to_string());
    Ok(report)
}
