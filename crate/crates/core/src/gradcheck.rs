//! Central finite-difference verification of tape gradients.
//!
//! Piecewise-linear ops (ReLU, max-pool) are not differentiable everywhere.
//! When a probe straddles a kink, the central difference averages two slopes
//! and disagrees with the analytic one-sided slope. With kink detection on,
//! such coordinates are recognised by comparing the forward and backward
//! one-sided differences: at a kink they differ by at least the central-
//! difference discrepancy, while a wrong gradient of a smooth function leaves
//! them in agreement. Skipped coordinates are counted, never hidden.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;
use crate::sit::{draw_alphas, sit_forward, Phase, SitBlock, SitConfig};
use crate::tensor::Tensor;
use crate::training::{loss_on_tape, LossMode};

/// Settings for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Probe at most this many coordinates per input (sampled without
    /// replacement); `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose probe straddles a non-differentiable point.
    pub skip_kinks: bool,
}

/// Per-input outcome of [`GradCheck::run_detailed`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputReport {
    pub max_rel_err: f64,
    pub probed: usize,
    pub kinks_skipped: usize,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        GradCheck {
            eps,
            max_coords: None,
            seed: 0,
            skip_kinks: false,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn skip_kinks(mut self, on: bool) -> Self {
        self.skip_kinks = on;
        self
    }

    /// Compare analytic and numeric gradients of `f` with respect to every
    /// tensor in `inputs`. Returns the worst relative error per input, where
    /// relative error is `|analytic - numeric| / max(1, |numeric|)`.
    pub fn run<T, F>(&self, f: F, inputs: &[Tensor<T>]) -> Result<Vec<f64>>
    where
        T: Scalar,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        Ok(self.run_detailed(f, inputs)?.into_iter().map(|r| r.max_rel_err).collect())
    }

    pub fn run_detailed<T, F>(&self, f: F, inputs: &[Tensor<T>]) -> Result<Vec<InputReport>>
    where
        T: Scalar,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::arg("finite-difference step must be positive"));
        }
        let scalar_out = |tape: &Tape<T>, out: Var| -> Result<f64> {
            let v = tape.value(out);
            if !v.shape().is_scalar() {
                return Err(Error::arg(format!(
                    "function under test returned {} instead of a scalar",
                    v.shape()
                )));
            }
            Ok(v.data()[0].as_f64())
        };
        let eval = |vals: &[Tensor<T>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            scalar_out(&tape, out)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let base = scalar_out(&tape, out)?;
        tape.backward(out)?;
        let analytic: Vec<Tensor<T>> = vars.iter().map(|v| tape.grad(*v)).collect::<Result<_>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut reports = Vec::with_capacity(inputs.len());
        let mut probe = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < input.len() => {
                    let mut c = sample(&mut rng, input.len(), m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..input.len()).collect(),
            };
            let mut report = InputReport::default();
            for i in coords {
                let orig = input.data()[i];
                probe[which].data_mut()[i] = orig + T::of(self.eps);
                let up = eval(&probe)?;
                probe[which].data_mut()[i] = orig - T::of(self.eps);
                let down = eval(&probe)?;
                probe[which].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                let a = analytic[which].data()[i].as_f64();
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                if self.skip_kinks && err > 1e-6 && straddles_kink(up, base, down, self.eps, a) {
                    report.kinks_skipped += 1;
                    continue;
                }
                report.probed += 1;
                report.max_rel_err = report.max_rel_err.max(err);
            }
            reports.push(report);
        }
        Ok(reports)
    }
}

/// True when the one-sided slopes around `base` differ by at least the gap
/// between `analytic` and the central difference, which happens when the
/// slope changes inside the probe interval.
fn straddles_kink(up: f64, base: f64, down: f64, eps: f64, analytic: f64) -> bool {
    let forward = (up - base) / eps;
    let backward = (base - down) / eps;
    let central = (up - down) / (2.0 * eps);
    (forward - backward).abs() >= (analytic - central).abs()
}

/// Worst relative error of the gradient of scalar-valued `f` at `input`,
/// probing every coordinate with step `eps`.
pub fn grad_check<T, F>(f: F, input: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let errs = GradCheck::new(eps).run(|tape, vars| f(tape, vars[0]), std::slice::from_ref(input))?;
    Ok(errs[0])
}

/// One line of [`battery`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatteryEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub probed: usize,
    pub kinks_skipped: usize,
}

impl BatteryEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.probed > 0
    }
}

/// Step used by the battery.
pub const BATTERY_EPS: f64 = 1e-5;
/// Tolerance for single ops and SiT blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum with fixed random weights, so every output coordinate
/// receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Finite-difference checks of every differentiable op, the SiT block and
/// the [`NetworkConfig::toy`] network end to end, all in `f64` with step [`BATTERY_EPS`].
pub fn battery(seed: u64) -> Result<Vec<BatteryEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, tolerance: f64, reports: Vec<InputReport>| {
        out.push(BatteryEntry {
            name: name.to_string(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
            tolerance,
            probed: reports.iter().map(|r| r.probed).sum(),
            kinks_skipped: reports.iter().map(|r| r.kinks_skipped).sum(),
        });
    };
    let check = GradCheck::new(BATTERY_EPS).seed(seed).skip_kinks(true);

    let shape = [2, 3, 4, 4];
    let (a, b, w) = (uniform(shape, &mut rng), uniform(shape, &mut rng), uniform(shape, &mut rng));
    let pair = [a.clone(), b.clone()];
    let one = [a.clone()];
    type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 3] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    for (name, op) in binaries {
        push(name, OP_TOLERANCE, check.run_detailed(|t, v| { let y = op(t, v[0], v[1])?; weighted_sum(t, y, &w) }, &pair)?);
    }
    push("scale", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y, &w) }, &one)?);
    push("sum", OP_TOLERANCE, check.run_detailed(|t, v| t.sum(v[0]), &one)?);
    push("relu", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.relu(v[0])?; weighted_sum(t, y, &w) }, &one)?);
    push("squared_error", OP_TOLERANCE, check.run_detailed(|t, v| t.squared_error(v[0], v[1]), &pair)?);
    let alpha = rng.random::<f64>();
    push("convex_mix", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.convex_mix(v[0], v[1], alpha)?; weighted_sum(t, y, &w) }, &pair)?);

    let c = uniform([2, 2, 4, 4], &mut rng);
    let wc = uniform([2, 5, 4, 4], &mut rng);
    push("concat", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.concat(&[v[0], v[1]])?; weighted_sum(t, y, &wc) }, &[a.clone(), c])?);
    let ws = uniform([2, 2, 4, 4], &mut rng);
    push("slice_channels", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.slice_channels(v[0], 1, 2)?; weighted_sum(t, y, &ws) }, &one)?);
    let wp = uniform([2, 3, 2, 2], &mut rng);
    push("max_pool", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.max_pool(v[0], 2)?; weighted_sum(t, y, &wp) }, &one)?);
    push("sum_pool", OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.sum_pool(v[0], 2)?; weighted_sum(t, y, &wp) }, &one)?);

    for (name, spec, shape) in [
        ("conv2d 3x3", ConvSpec::new(3, 4, 3), [2, 3, 6, 5]),
        ("conv2d grouped dilated", ConvSpec::new(4, 6, 3).dilation(2).groups(2), [2, 4, 7, 6]),
        ("conv2d 1x1", ConvSpec::new(4, 3, 1), [1, 4, 5, 5]),
    ] {
        let inputs = [
            uniform(shape, &mut rng),
            uniform(spec.weight_shape().dims(), &mut rng),
            uniform([1, spec.out_channels, 1, 1], &mut rng),
        ];
        let wo = uniform([shape[0], spec.out_channels, shape[2], shape[3]], &mut rng);
        push(name, OP_TOLERANCE, check.run_detailed(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?; weighted_sum(t, y, &wo) }, &inputs)?);
    }
    let spec = ConvSpec::new(8, 8, 3).dilation(3);
    let wt = uniform(spec.weight_shape().dims(), &mut rng);
    let x = uniform([1, 8, 12, 12], &mut rng);
    push(
        "conv2d rate 3 + relu",
        OP_TOLERANCE,
        check.run_detailed(|t, v| { let wv = t.constant(wt.clone()); let y = t.conv2d(v[0], wv, None, spec)?; let r = t.relu(y)?; t.sum(r) }, &[x])?,
    );

    let y = uniform([4, 1, 3, 3], &mut rng);
    let gt = uniform([4, 1, 3, 3], &mut rng);
    for (name, mode) in [("loss integrated", LossMode::Integrated), ("loss averaged", LossMode::Averaged)] {
        push(name, OP_TOLERANCE, check.run_detailed(|t, v| { let g = t.constant(gt.clone()); loss_on_tape(t, v[0], g, mode) }, std::slice::from_ref(&y))?);
    }

    for (name, groups, in_ch) in [("sit block G=4", 4, 5), ("sit block G=6", 6, 6), ("sit block G=1", 1, 4)] {
        let cfg = SitConfig { groups, group_width: 3, out_channels: 6, ..SitConfig::default() };
        let mut block: SitBlock<f64> = SitBlock::init(&cfg, in_ch, 0.3, &mut rng)?;
        let mut inputs = vec![uniform([2, in_ch, 6, 6], &mut rng)];
        block.visit_mut("b", &mut |_, t| {
            if t.shape().h == 1 && t.shape().w == 1 && t.shape().n == 1 {
                // biases: move away from the all-dead ReLU corner
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
            }
        });
        block.visit("b", &mut |_, t| inputs.push(t.clone()));
        let draw = draw_alphas(&mut rng, &cfg, Phase::Train);
        let wo = uniform([2, 6, 6, 6], &mut rng);
        push(name, OP_TOLERANCE, check.run_detailed(|t, v| { let b = block.bind_vars(&v[1..])?; let y = sit_forward(t, v[0], &b, &draw)?; weighted_sum(t, y, &wo) }, &inputs)?);
    }

    let net = NetworkConfig {
        init_std: 0.2,
        seed,
        ..NetworkConfig::toy()
    };
    let mut model: Model<f64> = Model::from_config(&net)?;
    for (name, t) in model.named_params_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
        }
    }
    let draws = model.draw_mixers(&mut rng, Phase::Train);
    let mut inputs = vec![uniform([1, 1, 16, 16], &mut rng)];
    inputs.extend(model.named_params().into_iter().map(|(_, t)| t.clone()));
    let gt = Tensor::from_fn([1, 1, 4, 4], |_| rng.random_range(0.0..0.2));
    push(
        "toy network end-to-end",
        NETWORK_TOLERANCE,
        check.clone().max_coords(24).run_detailed(
            |t, v| {
                let b = model.bind_vars(&v[1..])?;
                let y = b.forward(t, v[0], &draws)?;
                let g = t.constant(gt.clone());
                loss_on_tape(t, y, g, LossMode::Integrated)
            },
            &inputs,
        )?,
    );
    Ok(out)
}
