//! Scale-invariant transformation block.
//!
//! Pipeline: entry 1x1 convolution to `G * group_width` channels, split into
//! `G` groups `F_0..F_{G-1}`, group `F_i` (i >= 1) convolved at dilation `i`
//! followed by ReLU (`F_0` passes through untouched), recursive stochastic
//! mixing of the pyramid outputs, concatenation, exit 1x1 convolution, residual
//! addition and a final ReLU.
//!
//! The mixer recursion is
//!
//! ```text
//! d̂_0 = d_0, d̂_1 = d_1
//! d̂_i = α_{i-1} d̂_{i-1} + (1 - α_{i-1}) d_i      for i = 2..G-1
//! ```
//!
//! with `α_j ~ U(0, 1)` redrawn every training iteration and `α_j = 0.5` at
//! evaluation time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{bind_from_slice, BoundConv, Conv};
use crate::ops::{self, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel width a `G = 1` block (no intralayer pyramid) uses, in units of
/// `group_width`. Matches the total width of the default six-group block.
pub const NO_INTRA_WIDTH_GROUPS: usize = 6;

/// Training or inference behaviour of stochastic components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// How the pyramid outputs are blended.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MixerMode {
    /// Fresh uniform coefficients while training, 0.5 at evaluation.
    Stochastic,
    /// The same coefficient in every position and phase.
    Fixed(f64),
    /// No mixing: `d̂ = d`.
    Disabled,
}

impl fmt::Display for MixerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixerMode::Stochastic => f.write_str("stochastic"),
            MixerMode::Fixed(v) => write!(f, "fixed:{v}"),
            MixerMode::Disabled => f.write_str("off"),
        }
    }
}

impl FromStr for MixerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(MixerMode::Stochastic),
            "off" | "disabled" => Ok(MixerMode::Disabled),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "mixer mode `{s}` is not one of stochastic, fixed:<v>, off"
                        ))
                    })?;
                ops::check_alpha(v)?;
                Ok(MixerMode::Fixed(v))
            }
        }
    }
}

impl TryFrom<String> for MixerMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MixerMode> for String {
    fn from(m: MixerMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SitConfig {
    /// Number of channel groups `G`.
    pub groups: usize,
    pub group_width: usize,
    pub out_channels: usize,
    pub mixer: MixerMode,
    pub residual: bool,
}

impl Default for SitConfig {
    fn default() -> Self {
        SitConfig {
            groups: 6,
            group_width: 64,
            out_channels: 256,
            mixer: MixerMode::Stochastic,
            residual: true,
        }
    }
}

impl SitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::config("SiT needs at least one group"));
        }
        if self.group_width == 0 || self.out_channels == 0 {
            return Err(Error::config("SiT widths must be positive"));
        }
        if let MixerMode::Fixed(v) = self.mixer {
            ops::check_alpha(v).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }

    /// `G = 1` degenerates to a single ungrouped 3x3 path.
    pub fn is_no_intra(&self) -> bool {
        self.groups == 1
    }

    /// Channels produced by the entry projection.
    pub fn inner_width(&self) -> usize {
        if self.is_no_intra() {
            NO_INTRA_WIDTH_GROUPS * self.group_width
        } else {
            self.groups * self.group_width
        }
    }

    /// Number of mixing coefficients per draw, `max(G - 2, 0)`.
    pub fn mixer_len(&self) -> usize {
        self.groups.saturating_sub(2)
    }
}

/// Mixing coefficients `α_1..α_{G-2}` for one block in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerDraw {
    pub alphas: Vec<f64>,
}

impl MixerDraw {
    pub fn constant(len: usize, alpha: f64) -> Self {
        MixerDraw {
            alphas: vec![alpha; len],
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// Coefficients for one block. Training with a stochastic mixer draws fresh
/// uniforms from `rng`; every other combination is constant and leaves `rng`
/// untouched.
pub fn draw_alphas<R: Rng + ?Sized>(rng: &mut R, cfg: &SitConfig, phase: Phase) -> MixerDraw {
    let len = cfg.mixer_len();
    match (cfg.mixer, phase) {
        (MixerMode::Stochastic, Phase::Train) => MixerDraw {
            alphas: (0..len).map(|_| rng.random::<f64>()).collect(),
        },
        _ => eval_alphas(cfg),
    }
}

/// The constant coefficients used outside training.
pub fn eval_alphas(cfg: &SitConfig) -> MixerDraw {
    match cfg.mixer {
        MixerMode::Fixed(v) => MixerDraw::constant(cfg.mixer_len(), v),
        _ => MixerDraw::constant(cfg.mixer_len(), 0.5),
    }
}

fn check_draw(groups: usize, draw: &MixerDraw) -> Result<()> {
    let want = groups.saturating_sub(2);
    if draw.len() != want {
        return Err(Error::arg(format!(
            "{} mixing coefficients for {groups} groups (expected {want})",
            draw.len()
        )));
    }
    draw.alphas.iter().try_for_each(|a| ops::check_alpha(*a))
}

/// Apply the mixer recursion to concrete tensors.
pub fn mixer<T: Scalar>(d: &[Tensor<T>], draw: &MixerDraw) -> Result<Vec<Tensor<T>>> {
    check_draw(d.len(), draw)?;
    let mut out: Vec<Tensor<T>> = d.iter().take(2).cloned().collect();
    for i in 2..d.len() {
        let mixed = ops::convex_mix(&out[i - 1], &d[i], draw.alphas[i - 2])?;
        out.push(mixed);
    }
    Ok(out)
}

/// The mixer recursion recorded on a tape.
pub fn mixer_on_tape<T: Scalar>(tape: &mut Tape<T>, d: &[Var], draw: &MixerDraw) -> Result<Vec<Var>> {
    check_draw(d.len(), draw)?;
    let mut out: Vec<Var> = d.iter().take(2).copied().collect();
    for i in 2..d.len() {
        let mixed = tape.convex_mix(out[i - 1], d[i], draw.alphas[i - 2])?;
        out.push(mixed);
    }
    Ok(out)
}

/// Closed-form expansion `d̂_i = Σ_j c[i][j] d_j` of the mixer recursion.
///
/// Row `i >= 2` is `α_{i-1} * row_{i-1} + (1 - α_{i-1}) * e_i`, so for `G = 6`
/// the last row is `(0, α1α2α3α4, (1-α1)α2α3α4, (1-α2)α3α4, (1-α3)α4, 1-α4)`.
pub fn mixer_expansion_coeffs(draw: &MixerDraw, groups: usize) -> Result<Vec<Vec<f64>>> {
    check_draw(groups, draw)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(groups);
    for i in 0..groups {
        let mut row = vec![0.0; groups];
        if i < 2 {
            row[i] = 1.0;
        } else {
            let a = draw.alphas[i - 2];
            for (r, p) in row.iter_mut().zip(&rows[i - 1]) {
                *r = a * p;
            }
            row[i] = 1.0 - a;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Learnable parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct SitBlock<T> {
    pub config: SitConfig,
    pub in_channels: usize,
    pub entry: Conv<T>,
    /// Dilated convolutions for groups `1..G` (or the single 3x3 path when `G = 1`).
    pub pyramid: Vec<Conv<T>>,
    pub exit: Conv<T>,
    /// 1x1 projection of the block input; present when the residual is on and
    /// the input width differs from `out_channels`.
    pub residual: Option<Conv<T>>,
}

impl<T: Scalar> SitBlock<T> {
    /// Layer geometry for a block reading `in_channels` channels.
    pub fn specs(cfg: &SitConfig, in_channels: usize) -> Result<(ConvSpec, Vec<ConvSpec>, ConvSpec, Option<ConvSpec>)> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::config("SiT input must have at least one channel"));
        }
        let inner = cfg.inner_width();
        let entry = ConvSpec::new(in_channels, inner, 1);
        let pyramid = if cfg.is_no_intra() {
            vec![ConvSpec::new(inner, inner, 3)]
        } else {
            (1..cfg.groups)
                .map(|rate| ConvSpec::new(cfg.group_width, cfg.group_width, 3).dilation(rate))
                .collect()
        };
        let exit = ConvSpec::new(inner, cfg.out_channels, 1);
        let residual = (cfg.residual && in_channels != cfg.out_channels)
            .then(|| ConvSpec::new(in_channels, cfg.out_channels, 1));
        Ok((entry, pyramid, exit, residual))
    }

    pub fn init<R: Rng + ?Sized>(cfg: &SitConfig, in_channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let (entry, pyramid, exit, residual) = Self::specs(cfg, in_channels)?;
        Ok(SitBlock {
            config: *cfg,
            in_channels,
            entry: Conv::init(entry, std, rng)?,
            pyramid: pyramid
                .into_iter()
                .map(|s| Conv::init(s, std, rng))
                .collect::<Result<_>>()?,
            exit: Conv::init(exit, std, rng)?,
            residual: residual.map(|s| Conv::init(s, std, rng)).transpose()?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.entry.param_count()
            + self.pyramid.iter().map(Conv::param_count).sum::<usize>()
            + self.exit.param_count()
            + self.residual.as_ref().map_or(0, Conv::param_count)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundSit {
        self.bind_with(&mut |t| tape.param(t.clone()))
    }

    /// Bind with caller-chosen variables, visited in parameter order.
    pub fn bind_with(&self, var: &mut dyn FnMut(&Tensor<T>) -> Var) -> BoundSit {
        BoundSit {
            config: self.config,
            entry: self.entry.bind_with(var),
            pyramid: self.pyramid.iter().map(|c| c.bind_with(var)).collect(),
            exit: self.exit.bind_with(var),
            residual: self.residual.as_ref().map(|c| c.bind_with(var)),
        }
    }

    /// Reuse already-registered variables, e.g. those handed out by a gradient checker.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundSit> {
        bind_from_slice(vars, |f| self.bind_with(f))
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.entry.visit(&format!("{prefix}.entry"), f);
        for (j, c) in self.pyramid.iter().enumerate() {
            c.visit(&format!("{prefix}.pyramid.{j}"), f);
        }
        self.exit.visit(&format!("{prefix}.exit"), f);
        if let Some(r) = &self.residual {
            r.visit(&format!("{prefix}.residual"), f);
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.entry.visit_mut(&format!("{prefix}.entry"), f);
        for (j, c) in self.pyramid.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.pyramid.{j}"), f);
        }
        self.exit.visit_mut(&format!("{prefix}.exit"), f);
        if let Some(r) = &mut self.residual {
            r.visit_mut(&format!("{prefix}.residual"), f);
        }
    }
}

/// A [`SitBlock`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundSit {
    pub config: SitConfig,
    pub entry: BoundConv,
    pub pyramid: Vec<BoundConv>,
    pub exit: BoundConv,
    pub residual: Option<BoundConv>,
}

impl BoundSit {
    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        self.entry.vars(out);
        for c in &self.pyramid {
            c.vars(out);
        }
        self.exit.vars(out);
        if let Some(r) = &self.residual {
            r.vars(out);
        }
    }

    /// Pyramid outputs `d_0..d_{G-1}` before mixing.
    pub fn pyramid_outputs<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let projected = self.entry.forward(tape, x)?;
        if cfg.is_no_intra() {
            let y = self.pyramid[0].forward(tape, projected)?;
            return Ok(vec![tape.relu(y)?]);
        }
        let mut d = Vec::with_capacity(cfg.groups);
        d.push(tape.slice_channels(projected, 0, cfg.group_width)?);
        for (i, conv) in self.pyramid.iter().enumerate() {
            let group = tape.slice_channels(projected, (i + 1) * cfg.group_width, cfg.group_width)?;
            let y = conv.forward(tape, group)?;
            d.push(tape.relu(y)?);
        }
        Ok(d)
    }
}

/// Forward pass of one block with a fixed set of mixing coefficients.
pub fn sit_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, block: &BoundSit, draw: &MixerDraw) -> Result<Var> {
    let cfg = &block.config;
    cfg.validate()?;
    let d = block.pyramid_outputs(tape, x)?;
    let mixed = match cfg.mixer {
        MixerMode::Disabled => d,
        _ if cfg.is_no_intra() => d,
        _ => mixer_on_tape(tape, &d, draw)?,
    };
    let fused = tape.concat(&mixed)?;
    let y = block.exit.forward(tape, fused)?;
    let y = if cfg.residual {
        let skip = match &block.residual {
            Some(proj) => proj.forward(tape, x)?,
            None => x,
        };
        tape.add(y, skip)?
    } else {
        y
    };
    tape.relu(y)
}
